//! K-hop token extraction.
//!
//! [`cheb_hop_extract`] stacks `T_k(L̂)X` for `k = 0..=K` using the three-term
//! recurrence, so the `k`-th token of a node only sees its `k`-hop
//! neighbourhood. [`exact_spectral_filter`] filters through a full
//! eigendecomposition and exists to validate the polynomial path.
//! [`hop2token_extract`] is the adjacency-power baseline.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{Tape, Var, VjpRule};
use crate::error::{Error, Result};
use crate::graph::{self, CsrGraph, LaplacianKind, SparseLaplacian, SparseMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopSource {
    Chebyshev,
    Hop2Token,
}

/// Per-node hop token sequences, shape `N×(K+1)×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HopSequence {
    data: Tensor,
    source: HopSource,
}

impl HopSequence {
    pub fn new(data: Tensor, source: HopSource) -> Result<Self> {
        data.dims3("hop sequence")?;
        Ok(Self { data, source })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn source(&self) -> HopSource {
        self.source
    }

    pub fn nodes(&self) -> usize {
        self.data.shape()[0]
    }

    /// `K`, one less than the number of tokens per node.
    pub fn k_order(&self) -> usize {
        self.data.shape()[1] - 1
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Hop `k` for every node, as an `N×d` matrix.
    pub fn slice(&self, k: usize) -> Tensor {
        hop_slice(&self.data, k)
    }
}

fn hop_slice(data: &Tensor, k: usize) -> Tensor {
    let [n, h, d] = [data.shape()[0], data.shape()[1], data.shape()[2]];
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend_from_slice(&data.data()[(i * h + k) * d..(i * h + k + 1) * d]);
    }
    Tensor::new(&[n, d], out).expect("slice shape")
}

/// Interleaves `K+1` slices of shape `N×d` into `N×(K+1)×d`.
fn stack_hops(slices: &[Tensor]) -> Tensor {
    let (n, d) = (slices[0].shape()[0], slices[0].shape()[1]);
    let h = slices.len();
    let mut out = vec![0.0; n * h * d];
    for (k, s) in slices.iter().enumerate() {
        for i in 0..n {
            out[(i * h + k) * d..(i * h + k + 1) * d].copy_from_slice(&s.data()[i * d..(i + 1) * d]);
        }
    }
    Tensor::new(&[n, h, d], out).expect("stack shape")
}

/// Linear operator whose powers (or Chebyshev polynomials) produce the hops.
#[derive(Debug, Clone)]
pub enum HopOperator {
    /// Scaled Laplacian; hop `k` is `T_k(L̂)X`.
    Chebyshev(SparseLaplacian),
    /// Self-loop-normalized adjacency; hop `k` is `Â^k X`.
    Hop2Token(SparseMatrix),
}

impl HopOperator {
    pub fn chebyshev(lhat: SparseLaplacian) -> Result<Self> {
        if lhat.kind() != LaplacianKind::Scaled {
            return Err(Error::InvalidArgument(format!(
                "Chebyshev extraction needs a scaled Laplacian, got {:?}",
                lhat.kind()
            )));
        }
        Ok(Self::Chebyshev(lhat))
    }

    pub fn hop2token(g: &CsrGraph) -> Self {
        Self::Hop2Token(graph::self_loop_normalized_adjacency(g))
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Chebyshev(l) => l.n(),
            Self::Hop2Token(a) => a.n(),
        }
    }

    pub fn source(&self) -> HopSource {
        match self {
            Self::Chebyshev(_) => HopSource::Chebyshev,
            Self::Hop2Token(_) => HopSource::Hop2Token,
        }
    }

    fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Chebyshev(l) => l.spmm(x),
            Self::Hop2Token(a) => a.spmm(x),
        }
    }

    fn hops(&self, x: &Tensor, k: usize) -> Result<Vec<Tensor>> {
        let (rows, _) = x.dims2("hop extraction")?;
        if rows != self.n() {
            return Err(Error::shape(
                "hop extraction",
                format!("operator over {} nodes, features {:?}", self.n(), x.shape()),
            ));
        }
        let mut hops = Vec::with_capacity(k + 1);
        hops.push(x.clone());
        for i in 1..=k {
            let next = match self {
                Self::Hop2Token(_) => self.spmm(&hops[i - 1])?,
                Self::Chebyshev(_) if i == 1 => self.spmm(x)?,
                Self::Chebyshev(_) => {
                    let lx = self.spmm(&hops[i - 1])?;
                    lx.zip_with("chebyshev recurrence", &hops[i - 2], |a, b| 2.0 * a - b)?
                }
            };
            hops.push(next);
        }
        Ok(hops)
    }

    pub fn extract(&self, x: &Tensor, k: usize) -> Result<HopSequence> {
        HopSequence::new(stack_hops(&self.hops(x, k)?), self.source())
    }

    /// `Σ_k P_k(M) g_k` where `P_k` is the polynomial producing hop `k`.
    /// Both operators are symmetric, so this is the adjoint of extraction.
    fn adjoint(&self, grad: &Tensor) -> Result<Tensor> {
        let (_, h, _) = grad.dims3("hop extraction backward")?;
        let g: Vec<Tensor> = (0..h).map(|k| hop_slice(grad, k)).collect();
        match self {
            Self::Chebyshev(_) => {
                // Clenshaw: b_k = g_k + 2L̂b_{k+1} − b_{k+2}; result g_0 + L̂b_1 − b_2.
                let zero = Tensor::zeros(g[0].shape());
                let (mut b1, mut b2) = (zero.clone(), zero);
                for gk in g[1..].iter().rev() {
                    let lb = self.spmm(&b1)?;
                    let bk = gk.add(&lb.scale(2.0))?.sub(&b2)?;
                    b2 = std::mem::replace(&mut b1, bk);
                }
                g[0].add(&self.spmm(&b1)?)?.sub(&b2)
            }
            Self::Hop2Token(_) => {
                let mut acc = g[h - 1].clone();
                for gk in g[..h - 1].iter().rev() {
                    acc = gk.add(&self.spmm(&acc)?)?;
                }
                Ok(acc)
            }
        }
    }

    /// Records extraction on a tape; gradients flow back to `x`.
    pub fn extract_on_tape(self: &Arc<Self>, tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
        let out = self.extract(tape.value(x), k)?.into_tensor();
        Ok(tape.custom(vec![x], out, Box::new(HopVjp(Arc::clone(self)))))
    }
}

struct HopVjp(Arc<HopOperator>);

impl VjpRule for HopVjp {
    fn name(&self) -> &'static str {
        "hop extraction"
    }

    fn vjp(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.0.adjoint(grad)?)])
    }
}

/// `X_G[:, k, :] = T_k(L̂)X` for `k = 0..=K`.
pub fn cheb_hop_extract(lhat: &SparseLaplacian, x: &Tensor, k: usize) -> Result<HopSequence> {
    HopOperator::chebyshev(lhat.clone())?.extract(x, k)
}

/// `X_G[:, k, :] = Â^k X` with `Â = D̃^{-1/2}(A + I)D̃^{-1/2}`.
pub fn hop2token_extract(g: &CsrGraph, x: &Tensor, k: usize) -> Result<HopSequence> {
    HopOperator::hop2token(g).extract(x, k)
}

/// `T_k(x)` by the three-term recurrence.
pub fn cheb_polynomial_scalar(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for _ in 1..k {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Roots of `T_{K+1}`: `x_j = cos((j + 1/2)π/(K+1))`, `j = 0..=K`, decreasing.
pub fn cheb_nodes(k: usize) -> Vec<f64> {
    let m = (k + 1) as f64;
    (0..=k)
        .map(|j| {
            let x = ((j as f64 + 0.5) * std::f64::consts::PI / m).cos();
            // cos(π/2) is 6e-17 in floating point; the middle node is exactly 0.
            if 2 * j == k {
                0.0
            } else {
                x
            }
        })
        .collect()
}

/// Largest graph the eigendecomposition oracle accepts.
pub const ORACLE_MAX_NODES: usize = 64;

/// `U·h(Λ)·Uᵀ·X` with `h(λ) = Σ_k θ_k T_k(2λ/λ_max − 1)`, from a dense
/// eigendecomposition of `L`.
pub fn exact_spectral_filter(lap: &Tensor, x: &Tensor, theta: &[f64], lambda_max: f64) -> Result<Tensor> {
    let (n, n2) = lap.dims2("exact_spectral_filter")?;
    if n != n2 {
        return Err(Error::shape("exact_spectral_filter", format!("Laplacian {:?} is not square", lap.shape())));
    }
    if n > ORACLE_MAX_NODES {
        return Err(Error::InvalidArgument(format!(
            "exact filter limited to {ORACLE_MAX_NODES} nodes, got {n}"
        )));
    }
    let (rows, d) = x.dims2("exact_spectral_filter")?;
    if rows != n {
        return Err(Error::shape(
            "exact_spectral_filter",
            format!("Laplacian {:?} against features {:?}", lap.shape(), x.shape()),
        ));
    }
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let m = DMatrix::from_row_slice(n, n, lap.data());
    if (&m - m.transpose()).amax() > 1e-12 {
        return Err(Error::InvalidArgument("Laplacian is not symmetric".into()));
    }
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let response = eig.eigenvalues.map(|lam| {
        let s = 2.0 * lam / lambda_max - 1.0;
        theta
            .iter()
            .enumerate()
            .map(|(k, t)| t * cheb_polynomial_scalar(k, s))
            .sum::<f64>()
    });
    let u = &eig.eigenvectors;
    let xm = DMatrix::from_row_slice(n, d, x.data());
    let y = u * DMatrix::from_diagonal(&response) * u.transpose() * xm;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for c in 0..d {
            out.push(y[(i, c)]);
        }
    }
    Tensor::new(&[n, d], out)
}

/// `Σ_k θ_k X_G[:, k, :]`.
pub fn filter_from_hops(hops: &HopSequence, theta: &[f64]) -> Result<Tensor> {
    if theta.len() != hops.k_order() + 1 {
        return Err(Error::shape(
            "filter_from_hops",
            format!("{} coefficients for {} hops", theta.len(), hops.k_order() + 1),
        ));
    }
    let mut acc = Tensor::zeros(&[hops.nodes(), hops.channels()]);
    for (k, t) in theta.iter().enumerate() {
        acc.add_assign(&hops.slice(k).scale(*t));
    }
    Ok(acc)
}
