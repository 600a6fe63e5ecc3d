//! Collapsing a hop sequence into one embedding per node.
//!
//! The learned aggregator weights hop `k` of channel `c` by
//! `W[k][c] = 2/(K+1) · Σ_j γ[j][c]·T_k(x_j)`, where `x_j` are the Chebyshev
//! nodes of `T_{K+1}`. Only `γ` is stored; `W` is rebuilt on every pass.
//! The sum/mean/max reductions are parameter-free baselines.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var, VjpRule};
use crate::error::{Error, Result};
use crate::spectral::{cheb_nodes, cheb_polynomial_scalar};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorMode {
    /// Chebyshev interpolation with per-channel `γ`.
    ChebInterp,
    /// Chebyshev interpolation with one `γ` column shared by all channels.
    ChebInterpShared,
    Sum,
    Mean,
    Max,
}

impl AggregatorMode {
    pub const ALL: [AggregatorMode; 5] = [
        AggregatorMode::ChebInterp,
        AggregatorMode::ChebInterpShared,
        AggregatorMode::Sum,
        AggregatorMode::Mean,
        AggregatorMode::Max,
    ];

    pub fn is_learned(self) -> bool {
        matches!(self, Self::ChebInterp | Self::ChebInterpShared)
    }

    /// Columns of `γ` for `d` channels; zero for the baselines.
    pub fn gamma_columns(self, d: usize) -> usize {
        match self {
            Self::ChebInterp => d,
            Self::ChebInterpShared => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for AggregatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ChebInterp => "chebinterp",
            Self::ChebInterpShared => "chebinterp_shared",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

impl FromStr for AggregatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "chebinterp" => Self::ChebInterp,
            "chebinterp_shared" => Self::ChebInterpShared,
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            "max" => Self::Max,
            other => return Err(Error::InvalidArgument(format!("unknown aggregator mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    /// `(K+1)×d`, row `j` holding `γ_j`.
    pub gamma: Tensor,
}

/// Ones-initialized `γ`. Deterministic; the seed is accepted for a uniform
/// init signature but unused.
pub fn init_gamma(k: usize, d: usize, _seed: u64) -> Result<AggregatorParams> {
    if d == 0 {
        return Err(Error::InvalidArgument("aggregator needs at least one channel".into()));
    }
    Ok(AggregatorParams {
        gamma: Tensor::ones(&[k + 1, d]),
    })
}

/// The `(K+1)×(K+1)` matrix `M[k][j] = 2/(K+1)·T_k(x_j)` mapping `γ` to `W`.
/// With `halve_c0` the `k = 0` row is halved (classical interpolation).
pub fn cheb_interp_matrix(k: usize, halve_c0: bool) -> Tensor {
    let nodes = cheb_nodes(k);
    let h = k + 1;
    let scale = 2.0 / h as f64;
    let mut data = Vec::with_capacity(h * h);
    for row in 0..h {
        let s = if halve_c0 && row == 0 { 0.5 * scale } else { scale };
        data.extend(nodes.iter().map(|&x| s * cheb_polynomial_scalar(row, x)));
    }
    Tensor::new(&[h, h], data).expect("square")
}

/// `W = M·γ`.
pub fn cheb_interp_weights(gamma: &Tensor, halve_c0: bool) -> Result<Tensor> {
    let (h, _) = gamma.dims2("cheb_interp_weights")?;
    tensor::matmul(&cheb_interp_matrix(h - 1, halve_c0), gamma)
}

/// Records `W = M·γ` on the tape.
pub fn cheb_interp_weights_on_tape(tape: &mut Tape, gamma: Var, halve_c0: bool) -> Result<Var> {
    let (h, _) = tape.value(gamma).dims2("cheb_interp_weights")?;
    let m = tape.leaf(cheb_interp_matrix(h - 1, halve_c0));
    tape.matmul(m, gamma)
}

fn check_weights(x_g: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, bool)> {
    let (n, h, d) = x_g.dims3("aggregate")?;
    let (wh, wd) = w.dims2("aggregate")?;
    if wh != h || (wd != d && wd != 1) {
        return Err(Error::shape(
            "aggregate",
            format!("weights {:?} against hop sequence {:?}", w.shape(), x_g.shape()),
        ));
    }
    Ok((n, h, d, wd == 1 && d != 1))
}

/// `out[i][c] = Σ_k W[k][c]·X_G[i][k][c]`. A single-column `W` is shared
/// across channels.
pub fn aggregate(x_g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, h, d, shared) = check_weights(x_g, w)?;
    let wd = w.shape()[1];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let orow = &mut out[i * d..(i + 1) * d];
        for k in 0..h {
            let xr = &x_g.data()[(i * h + k) * d..(i * h + k + 1) * d];
            for c in 0..d {
                let wv = w.data()[k * wd + if shared { 0 } else { c }];
                orow[c] += wv * xr[c];
            }
        }
    }
    Tensor::new(&[n, d], out)
}

struct AggregateVjp;

impl VjpRule for AggregateVjp {
    fn name(&self) -> &'static str {
        "aggregate"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x_g, w) = (inputs[0], inputs[1]);
        let (n, h, d, shared) = check_weights(x_g, w)?;
        let wd = w.shape()[1];
        let mut dx = vec![0.0; n * h * d];
        let mut dw = vec![0.0; h * wd];
        for i in 0..n {
            let gr = &g.data()[i * d..(i + 1) * d];
            for k in 0..h {
                let base = (i * h + k) * d;
                for c in 0..d {
                    let wi = k * wd + if shared { 0 } else { c };
                    dx[base + c] = gr[c] * w.data()[wi];
                    dw[wi] += gr[c] * x_g.data()[base + c];
                }
            }
        }
        Ok(vec![Some(Tensor::new(&[n, h, d], dx)?), Some(Tensor::new(&[h, wd], dw)?)])
    }
}

pub fn aggregate_on_tape(tape: &mut Tape, x_g: Var, w: Var) -> Result<Var> {
    let out = aggregate(tape.value(x_g), tape.value(w))?;
    Ok(tape.custom(vec![x_g, w], out, Box::new(AggregateVjp)))
}

/// Index of the first maximal hop per `(node, channel)`.
fn argmax_hops(x_g: &Tensor) -> Vec<usize> {
    let [n, h, d] = [x_g.shape()[0], x_g.shape()[1], x_g.shape()[2]];
    let mut idx = vec![0usize; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut best = 0;
            for k in 1..h {
                if x_g.get3(i, k, c) > x_g.get3(i, best, c) {
                    best = k;
                }
            }
            idx[i * d + c] = best;
        }
    }
    idx
}

/// Parameter-free reduction over the hop axis.
pub fn baseline_aggregate(x_g: &Tensor, mode: AggregatorMode) -> Result<Tensor> {
    let (n, h, d) = x_g.dims3("baseline_aggregate")?;
    let out = match mode {
        AggregatorMode::Sum | AggregatorMode::Mean => {
            let scale = if mode == AggregatorMode::Mean { 1.0 / h as f64 } else { 1.0 };
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for k in 0..h {
                    for c in 0..d {
                        out[i * d + c] += x_g.get3(i, k, c);
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            out
        }
        AggregatorMode::Max => argmax_hops(x_g)
            .iter()
            .enumerate()
            .map(|(ic, &k)| x_g.get3(ic / d, k, ic % d))
            .collect(),
        other => {
            return Err(Error::InvalidArgument(format!("`{other}` is not a baseline aggregator")));
        }
    };
    Tensor::new(&[n, d], out)
}

struct BaselineVjp(AggregatorMode);

impl VjpRule for BaselineVjp {
    fn name(&self) -> &'static str {
        "baseline_aggregate"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x_g = inputs[0];
        let (n, h, d) = x_g.dims3("baseline_aggregate")?;
        let mut dx = vec![0.0; n * h * d];
        match self.0 {
            AggregatorMode::Max => {
                for (ic, k) in argmax_hops(x_g).into_iter().enumerate() {
                    let (i, c) = (ic / d, ic % d);
                    dx[(i * h + k) * d + c] = g.data()[ic];
                }
            }
            mode => {
                let scale = if mode == AggregatorMode::Mean { 1.0 / h as f64 } else { 1.0 };
                for i in 0..n {
                    for k in 0..h {
                        for c in 0..d {
                            dx[(i * h + k) * d + c] = scale * g.data()[i * d + c];
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(&[n, h, d], dx)?)])
    }
}

pub fn baseline_aggregate_on_tape(tape: &mut Tape, x_g: Var, mode: AggregatorMode) -> Result<Var> {
    let out = baseline_aggregate(tape.value(x_g), mode)?;
    Ok(tape.custom(vec![x_g], out, Box::new(BaselineVjp(mode))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn column_gamma(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn interp_weight_examples() {
        assert_eq!(cheb_interp_weights(&Tensor::zeros(&[3, 2]), false).unwrap(), Tensor::zeros(&[3, 2]));

        let nodes = cheb_nodes(2);
        let w = cheb_interp_weights(&column_gamma(&nodes), false).unwrap();
        for (got, want) in w.data().iter().zip([0.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-12, "{w:?}");
        }
        let w = cheb_interp_weights(&Tensor::ones(&[3, 1]), false).unwrap();
        for (got, want) in w.data().iter().zip([2.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12, "{w:?}");
        }
        let w = cheb_interp_weights(&Tensor::ones(&[3, 1]), true).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discrete_orthogonality() {
        for k in 0..=12 {
            let xs = cheb_nodes(k);
            for a in 0..=k {
                for b in 0..=k {
                    if a != b {
                        let s: f64 = xs
                            .iter()
                            .map(|&x| cheb_polynomial_scalar(a, x) * cheb_polynomial_scalar(b, x))
                            .sum();
                        assert!(s.abs() < 1e-9, "K={k} a={a} b={b}: {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let x = Tensor::new(&[2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let summed = aggregate(&x, &Tensor::ones(&[3, 2])).unwrap();
        assert_eq!(summed, baseline_aggregate(&x, AggregatorMode::Sum).unwrap());
        assert_eq!(summed.data(), &[6.0, 9.0, 24.0, 27.0]);

        let nodes = cheb_nodes(2);
        let w = cheb_interp_weights(&Tensor::from_rows(&[[nodes[0]; 2], [nodes[1]; 2], [nodes[2]; 2]]).unwrap(), false)
            .unwrap();
        let picked = aggregate(&x, &w).unwrap();
        assert!(picked.max_abs_diff(&Tensor::from_rows(&[[2.0, 3.0], [8.0, 9.0]]).unwrap()) < 1e-12);

        let w1 = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25], [1.0, 3.0]]).unwrap();
        let w2 = Tensor::from_rows(&[[1.5, 0.0], [-2.0, 1.0], [0.1, 0.2]]).unwrap();
        let lhs = aggregate(&x, &w1.add(&w2).unwrap()).unwrap();
        let rhs = aggregate(&x, &w1).unwrap().add(&aggregate(&x, &w2).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);

        assert!(aggregate(&x, &Tensor::ones(&[2, 2])).is_err());
    }

    #[test]
    fn shared_column_broadcasts() {
        let x = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = aggregate(&x, &column_gamma(&[1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[9.0, 12.0, 15.0]);
    }

    #[test]
    fn baseline_examples() {
        let a = Tensor::new(&[1, 2, 2], vec![1.5, -2.0, 1.5, -2.0]).unwrap();
        assert_eq!(baseline_aggregate(&a, AggregatorMode::Mean).unwrap().data(), &[1.5, -2.0]);
        let m = Tensor::new(&[1, 3, 1], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(baseline_aggregate(&m, AggregatorMode::Max).unwrap().data(), &[3.0]);
        assert!(baseline_aggregate(&m, AggregatorMode::ChebInterp).is_err());
        assert!("median".parse::<AggregatorMode>().is_err());
    }

    #[test]
    fn max_routes_gradient_to_first_tie() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3, 1], vec![2.0, 2.0, 1.0]).unwrap());
        let y = baseline_aggregate_on_tape(&mut tape, x, AggregatorMode::Max).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn init_gamma_contract() {
        let p = init_gamma(2, 1, 0).unwrap();
        assert_eq!(p.gamma, Tensor::ones(&[3, 1]));
        assert_eq!(p, init_gamma(2, 1, 0).unwrap());
        let w = cheb_interp_weights(&p.gamma, false).unwrap();
        assert!(w.max_abs_diff(&column_gamma(&[2.0, 0.0, 0.0])) < 1e-12);
    }

    #[test]
    fn gamma_gradients_match_finite_differences() {
        let x = Tensor::new(&[3, 4, 2], (0..24).map(|v| ((v * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let gamma = Tensor::new(&[4, 2], vec![0.3, -1.0, 0.7, 0.2, -0.4, 1.1, 0.9, -0.6]).unwrap();
        for mode in [AggregatorMode::Sum, AggregatorMode::Mean, AggregatorMode::Max] {
            let report = grad_check(
                |t, p| {
                    let y = baseline_aggregate_on_tape(t, p[0], mode)?;
                    let sq = t.mul(y, y)?;
                    Ok(t.sum(sq))
                },
                std::slice::from_ref(&x),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{mode}: {report:?}");
        }
        let report = grad_check(
            |t, p| {
                let w = cheb_interp_weights_on_tape(t, p[1], false)?;
                let y = aggregate_on_tape(t, p[0], w)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[x, gamma],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
