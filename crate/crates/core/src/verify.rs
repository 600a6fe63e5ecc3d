//! Self-check suites run on seeded random instances.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::aggregator::{self, AggregatorMode};
use crate::autodiff::{Tape, Var, VjpRule};
use crate::data::{gen_sbm, SbmParams};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::graph::{estimate_lambda_max, scale_laplacian, sym_norm_laplacian, CsrGraph};
use crate::model::{forward_with_vars, model_forward, prepare_operator, ModelConfig, ModelParams};
use crate::rng::{stream_rng, Rng, Stream};
use crate::spectral::{cheb_hop_extract, cheb_nodes, cheb_polynomial_scalar, exact_spectral_filter, filter_from_hops, HopOperator};
use crate::tensor::{Tensor, LAYER_NORM_EPS};
use crate::training::cross_entropy_on_tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    /// Chebyshev hops against a dense eigendecomposition.
    Spectral,
    /// Kernel and full-model gradients against central differences.
    Gradient,
    /// Chebyshev interpolation round trip.
    Orthogonality,
    /// Laplacian spectra and polynomial norms.
    Laplacian,
    /// Node relabelling commutes with the model.
    Equivariance,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Spectral,
        Suite::Gradient,
        Suite::Orthogonality,
        Suite::Laplacian,
        Suite::Equivariance,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Spectral => "spectral",
            Suite::Gradient => "gradient",
            Suite::Orthogonality => "orthogonality",
            Suite::Laplacian => "laplacian",
            Suite::Equivariance => "equivariance",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub cases: usize,
    /// Worst error observed, in the units `tolerance` is stated in.
    pub worst_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Runs the named suite against a deliberately broken computation; the
    /// suite is expected to fail.
    pub inject_fault: Option<Suite>,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let fault = opts.inject_fault == Some(suite);
    let start = Instant::now();
    let outcome = match suite {
        Suite::Spectral => spectral(opts.seed, fault),
        Suite::Gradient => gradient(opts.seed, fault),
        Suite::Orthogonality => orthogonality(fault),
        Suite::Laplacian => laplacian(opts.seed, fault),
        Suite::Equivariance => equivariance(opts.seed, fault),
    };
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(o) => SuiteReport {
            suite,
            passed: o.worst <= o.tol,
            cases: o.cases,
            worst_error: o.worst,
            tolerance: o.tol,
            seconds,
            detail: o.detail,
        },
        Err(e) => SuiteReport {
            suite,
            passed: false,
            cases: 0,
            worst_error: f64::INFINITY,
            tolerance: 0.0,
            seconds,
            detail: e.to_string(),
        },
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    Suite::ALL.iter().map(|&s| run_suite(s, opts)).collect()
}

struct Outcome {
    cases: usize,
    worst: f64,
    tol: f64,
    detail: String,
}

#[derive(Default)]
struct Worst {
    value: f64,
    label: String,
}

impl Worst {
    fn see(&mut self, value: f64, label: impl FnOnce() -> String) {
        let value = if value.is_nan() { f64::INFINITY } else { value };
        if value > self.value || self.label.is_empty() {
            self.value = value;
            self.label = label();
        }
    }
}

/// Erdős–Rényi graph with weights in `[0.5, 2)`.
pub fn random_graph(rng: &mut Rng, n: usize, p: f64) -> Result<CsrGraph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v, rng.random_range(0.5..2.0)));
            }
        }
    }
    CsrGraph::build(n, &edges, true, false)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches length")
}

fn spectral(seed: u64, fault: bool) -> Result<Outcome> {
    let mut rng = stream_rng(seed, Stream::Verify);
    let mut worst = Worst::default();
    let cases = 10;
    for case in 0..cases {
        let n = rng.random_range(2..=20);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(0..=8);
        let density = rng.random_range(0.1..0.6);
        let g = random_graph(&mut rng, n, density)?;
        let x = random_tensor(&mut rng, &[n, d]);
        let mut theta: Vec<f64> = (0..=k).map(|_| rng.sample(StandardNormal)).collect();
        let lap = sym_norm_laplacian(&g);
        let lambda = estimate_lambda_max(&lap, 1e-9, 5000)?;
        let exact = exact_spectral_filter(&lap.to_dense(), &x, &theta, lambda)?;
        if fault {
            theta[k] *= 1.0 + 1e-4;
        }
        let hops = cheb_hop_extract(&scale_laplacian(&lap, lambda)?, &x, k)?;
        let got = filter_from_hops(&hops, &theta)?;
        worst.see(got.max_abs_diff(&exact), || format!("case {case}: n={n}, d={d}, K={k}"));
    }
    Ok(Outcome {
        cases,
        worst: worst.value,
        tol: 1e-8,
        detail: worst.label,
    })
}

/// Passes the value through and scales the incoming gradient by 1.01.
struct SkewedGradient;

impl VjpRule for SkewedGradient {
    fn name(&self) -> &'static str {
        "skewed_gradient"
    }

    fn vjp(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.scale(1.01))])
    }
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any kernel into a scalar.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let m = tape.mul(out, c)?;
    Ok(tape.sum(m))
}

type Kernel = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn kernel_cases(rng: &mut Rng, fault: bool) -> Result<Vec<(String, Kernel, Vec<Tensor>)>> {
    let mut cases: Vec<(String, Kernel, Vec<Tensor>)> = Vec::new();
    let (n, h, d, e) = (5, 4, 3, 2);

    let r = random_tensor(rng, &[n, e]);
    cases.push((
        "matmul".into(),
        Box::new(move |t, p| {
            let o = t.matmul(p[0], p[1])?;
            project(t, o, &r)
        }),
        vec![random_tensor(rng, &[n, d]), random_tensor(rng, &[d, e])],
    ));

    let r = random_tensor(rng, &[n, h, e]);
    cases.push((
        "linear".into(),
        Box::new(move |t, p| {
            let o = t.linear(p[0], p[1], Some(p[2]))?;
            project(t, o, &r)
        }),
        vec![random_tensor(rng, &[n, h, d]), random_tensor(rng, &[e, d]), random_tensor(rng, &[e])],
    ));

    let r = random_tensor(rng, &[n, e, d]);
    cases.push((
        "left_mix".into(),
        Box::new(move |t, p| {
            let o = t.left_mix(p[0], p[1], Some(p[2]))?;
            project(t, o, &r)
        }),
        vec![random_tensor(rng, &[e, h]), random_tensor(rng, &[n, h, d]), random_tensor(rng, &[e])],
    ));

    let r = random_tensor(rng, &[n, h, d]);
    cases.push((
        "layer_norm".into(),
        Box::new(move |t, p| {
            let o = t.layer_norm(p[0], p[1], p[2], LAYER_NORM_EPS)?;
            project(t, o, &r)
        }),
        vec![random_tensor(rng, &[n, h, d]), random_tensor(rng, &[d]), random_tensor(rng, &[d])],
    ));

    let r = random_tensor(rng, &[n, d]);
    cases.push((
        "gelu".into(),
        Box::new(move |t, p| {
            let o = t.gelu(p[0]);
            project(t, o, &r)
        }),
        vec![random_tensor(rng, &[n, d])],
    ));

    let g = random_graph(rng, n, 0.5)?;
    let lap = sym_norm_laplacian(&g);
    let cheb = Arc::new(HopOperator::chebyshev(scale_laplacian(&lap, estimate_lambda_max(&lap, 1e-9, 5000)?)?)?);
    let h2t = Arc::new(HopOperator::hop2token(&g));
    for (name, op) in [("cheb_hops", cheb), ("hop2token", h2t)] {
        let r = random_tensor(rng, &[n, 4, d]);
        cases.push((
            name.into(),
            Box::new(move |t, p| {
                let o = op.extract_on_tape(t, p[0], 3)?;
                project(t, o, &r)
            }),
            vec![random_tensor(rng, &[n, d])],
        ));
    }

    let r = random_tensor(rng, &[n, d]);
    cases.push((
        "cheb_interp_aggregate".into(),
        Box::new(move |t, p| {
            let w = aggregator::cheb_interp_weights_on_tape(t, p[1], false)?;
            let o = aggregator::aggregate_on_tape(t, p[0], w)?;
            project(t, o, &r)
        }),
        vec![random_tensor(rng, &[n, h, d]), random_tensor(rng, &[h, d])],
    ));

    for mode in [AggregatorMode::Sum, AggregatorMode::Mean, AggregatorMode::Max] {
        let r = random_tensor(rng, &[n, d]);
        cases.push((
            format!("{mode}_aggregate"),
            Box::new(move |t, p| {
                let o = aggregator::baseline_aggregate_on_tape(t, p[0], mode)?;
                project(t, o, &r)
            }),
            vec![random_tensor(rng, &[n, h, d])],
        ));
    }

    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..e)).collect();
    cases.push((
        "cross_entropy".into(),
        Box::new(move |t, p| {
            let z = if fault {
                let v = t.value(p[0]).clone();
                t.custom(vec![p[0]], v, Box::new(SkewedGradient))
            } else {
                p[0]
            };
            cross_entropy_on_tape(t, z, &labels, &[0, 2, 3])
        }),
        vec![random_tensor(rng, &[n, e])],
    ));
    Ok(cases)
}

/// Configuration of the full-model gradient check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        k: 3,
        hidden: 4,
        layers: 1,
        token_hidden: 4,
        channel_hidden: 4,
        classes: 3,
        ..ModelConfig::default()
    }
}

/// Worst relative error of the full-model cross-entropy gradient for one
/// seed, with the name of the worst tensor.
pub fn model_gradcheck(seed: u64, fault: bool) -> Result<(f64, String)> {
    let cfg = gradcheck_model_config();
    let mut rng = stream_rng(seed, Stream::Verify);
    let n = 6;
    let g = random_graph(&mut rng, n, 0.5)?;
    let x = random_tensor(&mut rng, &[n, cfg.input_dim]);
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    let mut params = ModelParams::init(&cfg, seed)?;
    // Perturb away from the initial ones/zeros so every path carries signal.
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let op = prepare_operator(&g, &cfg)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let tensors: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mask: Vec<usize> = (0..n).collect();
    let report = grad_check(
        |t, p| {
            let mut logits = forward_with_vars(t, &op, &x, p, &cfg)?;
            if fault {
                let v = t.value(logits).clone();
                logits = t.custom(vec![logits], v, Box::new(SkewedGradient));
            }
            cross_entropy_on_tape(t, logits, &labels, &mask)
        },
        &tensors,
        1e-5,
        1e-4,
    )?;
    let name = report.worst.map(|w| names[w.0].clone()).unwrap_or_default();
    Ok((report.max_rel_error, name))
}

fn gradient(seed: u64, fault: bool) -> Result<Outcome> {
    let mut rng = stream_rng(seed, Stream::Verify);
    let mut worst = Worst::default();
    let mut cases = 0;
    for _ in 0..3 {
        for (name, f, params) in kernel_cases(&mut rng, fault)? {
            let report = grad_check(f, &params, 1e-5, 1e-4)?;
            worst.see(report.max_rel_error, || name.clone());
            cases += 1;
        }
    }
    for s in 0..5 {
        let (err, name) = model_gradcheck(seed.wrapping_add(s), fault)?;
        worst.see(err, || format!("model seed {}: {name}", seed.wrapping_add(s)));
        cases += 1;
    }
    Ok(Outcome {
        cases,
        worst: worst.value,
        tol: 1e-4,
        detail: worst.label,
    })
}

fn orthogonality(fault: bool) -> Result<Outcome> {
    let mut worst = Worst::default();
    let mut cases = 0;
    for k in 1..=8 {
        let mut nodes = cheb_nodes(k);
        if fault {
            nodes[0] += 1e-6;
        }
        for m in 0..=k {
            let gamma = Tensor::new(&[k + 1, 1], nodes.iter().map(|&x| cheb_polynomial_scalar(m, x)).collect())?;
            let w = aggregator::cheb_interp_weights(&gamma, false)?;
            let expect: Vec<f64> = (0..=k)
                .map(|i| match (m, i == m) {
                    (0, true) => 2.0,
                    (_, true) => 1.0,
                    _ => 0.0,
                })
                .collect();
            let err = w.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst.see(err, || format!("K={k}, m={m}"));
            cases += 1;
        }
    }
    Ok(Outcome {
        cases,
        worst: worst.value,
        tol: 1e-10,
        detail: worst.label,
    })
}

fn eigenvalues(t: &Tensor) -> Vec<f64> {
    let n = t.shape()[0];
    let m = DMatrix::from_row_slice(n, n, t.data());
    SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
}

/// Largest violation of: normalized spectrum in `[0, 2]`, scaled spectrum
/// in `±(1 + 1e-6)`, and `‖T_k(L̂)‖₂ ≤ 1` for `k ≤ 8`.
fn laplacian(seed: u64, fault: bool) -> Result<Outcome> {
    let mut rng = stream_rng(seed, Stream::Verify);
    let mut worst = Worst::default();
    let cases = 20;
    let slack = 1e-9;
    for case in 0..cases {
        let n = rng.random_range(2..=24);
        let density = rng.random_range(0.05..0.7);
        let g = random_graph(&mut rng, n, density)?;
        let lap = sym_norm_laplacian(&g);
        let ev = eigenvalues(&lap.to_dense());
        let v = ev.iter().map(|&l| (-l).max(l - 2.0)).fold(0.0, f64::max);
        worst.see((v - slack).max(0.0), || format!("case {case}: normalized spectrum"));

        let mut lambda = estimate_lambda_max(&lap, 1e-9, 5000)?;
        if fault {
            lambda *= 0.9;
        }
        let lhat = scale_laplacian(&lap, lambda)?.to_dense();
        let bound = 1.0 + 1e-6;
        let v = eigenvalues(&lhat).iter().map(|l| l.abs() - bound).fold(0.0, f64::max);
        worst.see((v - slack).max(0.0), || format!("case {case}: scaled spectrum"));

        let mut prev = Tensor::identity(n);
        let mut cur = lhat.clone();
        for k in 0..=8 {
            let tk = if k == 0 { prev.clone() } else { cur.clone() };
            let norm = eigenvalues(&tk).iter().map(|l| l.abs()).fold(0.0, f64::max);
            worst.see((norm - 1.0 - slack).max(0.0), || format!("case {case}: ‖T_{k}‖"));
            if k >= 1 {
                let next = crate::tensor::matmul(&lhat, &cur)?.scale(2.0).sub(&prev)?;
                prev = std::mem::replace(&mut cur, next);
            }
        }
    }
    Ok(Outcome {
        cases,
        worst: worst.value,
        tol: 0.0,
        detail: worst.label,
    })
}

/// Max deviation between `logits(P·data)` and `P·logits(data)` on a
/// 50-node block-model graph.
pub fn equivariance_error(seed: u64, fault: bool) -> Result<f64> {
    let ds = gen_sbm(&SbmParams {
        nodes: 50,
        blocks: 2,
        p_in: 0.2,
        p_out: 0.02,
        feat_dim: 6,
        feat_sep: 1.0,
        seed,
    })?;
    let cfg = ModelConfig {
        input_dim: 6,
        hidden: 16,
        token_hidden: 16,
        channel_hidden: 16,
        classes: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, seed)?;
    let mut perm: Vec<usize> = (0..50).collect();
    perm.shuffle(&mut stream_rng(seed, Stream::Verify));

    let base = model_forward(&prepare_operator(&ds.graph, &cfg)?, &ds.features, &params, &cfg)?;
    let mut moved = ds.permuted(&perm)?;
    if fault {
        moved.features = ds.features.clone();
    }
    let out = model_forward(&prepare_operator(&moved.graph, &cfg)?, &moved.features, &params, &cfg)?;
    let c = cfg.classes;
    let mut err = 0.0f64;
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..c {
            err = err.max((base.get2(i, j) - out.get2(p, j)).abs());
        }
    }
    Ok(err)
}

fn equivariance(seed: u64, fault: bool) -> Result<Outcome> {
    let mut worst = Worst::default();
    for s in 0..3 {
        let e = equivariance_error(seed.wrapping_add(s), fault)?;
        worst.see(e, || format!("seed {}", seed.wrapping_add(s)));
    }
    Ok(Outcome {
        cases: 3,
        worst: worst.value,
        tol: 1e-10,
        detail: worst.label,
    })
}
