//! Sparse undirected graphs and the Laplacian operators built on them.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{self, Tensor};

/// Weighted undirected graph in compressed-sparse-row form. Both directions
/// of every edge are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrGraph {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
    self_loops: bool,
}

/// `(u, v, weight)`.
pub type Edge = (usize, usize, f64);

impl CsrGraph {
    /// Builds a graph from an edge list.
    ///
    /// With `symmetrize`, each listed edge is inserted in both directions;
    /// otherwise the list must already be symmetric. Repeated entries are
    /// rejected, never summed.
    pub fn build(n: usize, edges: &[Edge], symmetrize: bool, allow_self_loops: bool) -> Result<Self> {
        let mut directed: Vec<Edge> = Vec::with_capacity(edges.len() * if symmetrize { 2 } else { 1 });
        for &(u, v, w) in edges {
            for idx in [u, v] {
                if idx >= n {
                    return Err(Error::NodeIndex { index: idx, n });
                }
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::EdgeWeight { u, v, weight: w });
            }
            if u == v && !allow_self_loops {
                return Err(Error::SelfLoop(u));
            }
            directed.push((u, v, w));
            if symmetrize && u != v {
                directed.push((v, u, w));
            }
        }
        directed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for pair in directed.windows(2) {
            if (pair[0].0, pair[0].1) == (pair[1].0, pair[1].1) {
                let (u, v) = (pair[0].0.min(pair[0].1), pair[0].0.max(pair[0].1));
                return Err(Error::DuplicateEdge { u, v });
            }
        }

        let mut row_ptr = vec![0usize; n + 1];
        for &(u, _, _) in &directed {
            row_ptr[u + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx: Vec<usize> = directed.iter().map(|e| e.1).collect();
        let weights: Vec<f64> = directed.iter().map(|e| e.2).collect();
        let g = Self {
            n,
            row_ptr,
            col_idx,
            weights,
            self_loops: allow_self_loops,
        };
        if !symmetrize {
            g.check_symmetric()?;
        }
        Ok(g)
    }

    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            weights: Vec::new(),
            self_loops: false,
        }
    }

    fn check_symmetric(&self) -> Result<()> {
        for u in 0..self.n {
            for (v, w) in self.neighbors(u) {
                if self.weight(v, u) != Some(w) {
                    return Err(Error::InvalidArgument(format!(
                        "edge ({u}, {v}) has no symmetric counterpart with weight {w}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn allows_self_loops(&self) -> bool {
        self.self_loops
    }

    /// Number of stored directed entries (twice the undirected edge count,
    /// minus self-loops).
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[u]..self.row_ptr[u + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        let span = self.row_ptr[u]..self.row_ptr[u + 1];
        self.col_idx[span.clone()]
            .binary_search(&v)
            .ok()
            .map(|k| self.weights[span.start + k])
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|u| self.neighbors(u).map(|(_, w)| w).sum()).collect()
    }

    /// Each undirected edge once, as `(u, v, w)` with `u <= v`, in row order.
    pub fn undirected_edges(&self) -> Vec<Edge> {
        (0..self.n)
            .flat_map(|u| self.neighbors(u).filter(move |&(v, _)| u <= v).map(move |(v, w)| (u, v, w)))
            .collect()
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let edges: Vec<Edge> = self
            .undirected_edges()
            .into_iter()
            .map(|(u, v, w)| (perm[u], perm[v], w))
            .collect();
        Self::build(self.n, &edges, true, self.self_loops)
    }

    pub fn adjacency_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for u in 0..self.n {
            for (v, w) in self.neighbors(u) {
                t.data_mut()[u * self.n + v] = w;
            }
        }
        t
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidArgument(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    Ok(())
}

/// Real square matrix in CSR form with ascending columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assembles `diag[i]·δ_ij + offdiag_scale(i, j)·w_ij` over the pattern of
    /// `g` plus the full diagonal.
    fn from_graph(g: &CsrGraph, diag: impl Fn(usize) -> f64, entry: impl Fn(usize, usize, f64) -> f64) -> Self {
        let n = g.n();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(g.nnz() + n);
        let mut values = Vec::with_capacity(g.nnz() + n);
        row_ptr.push(0);
        for i in 0..n {
            let mut diag_done = false;
            for (j, w) in g.neighbors(i) {
                if !diag_done && j >= i {
                    col_idx.push(i);
                    values.push(diag(i));
                    diag_done = true;
                }
                if j == i {
                    *values.last_mut().unwrap() += entry(i, j, w);
                } else {
                    col_idx.push(j);
                    values.push(entry(i, j, w));
                }
            }
            if !diag_done {
                col_idx.push(i);
                values.push(diag(i));
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.values[k] = f(i, self.col_idx[k], self.values[k]);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n.max(1), self.n.max(1)]);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                t.data_mut()[i * self.n + j] = v;
            }
        }
        t
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (self.get(j, i) - v).abs() <= tol))
    }

    /// `self · x` for a dense `n×d` matrix. Each output row sums its terms in
    /// ascending column order.
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, d) = x.dims2("spmm")?;
        if rows != self.n {
            return Err(Error::shape(
                "spmm",
                format!("operator is {}×{}, input is {:?}", self.n, self.n, x.shape()),
            ));
        }
        let mut out = vec![0.0; rows * d];
        let xd = x.data();
        tensor::for_rows(&mut out, d, self.nnz() * d, |i, orow| {
            for (j, v) in self.row(i) {
                for (o, &xv) in orow.iter_mut().zip(&xd[j * d..(j + 1) * d]) {
                    *o += v * xv;
                }
            }
        });
        Tensor::new(&[rows, d], out)
    }

    /// `self · x` for a vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianKind {
    Combinatorial,
    SymmetricNormalized,
    Scaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLaplacian {
    matrix: SparseMatrix,
    kind: LaplacianKind,
    lambda_max_used: Option<f64>,
}

impl SparseLaplacian {
    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn lambda_max_used(&self) -> Option<f64> {
        self.lambda_max_used
    }

    pub fn n(&self) -> usize {
        self.matrix.n
    }

    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        self.matrix.spmm(x)
    }

    pub fn to_dense(&self) -> Tensor {
        self.matrix.to_dense()
    }
}

/// `D − A`.
pub fn combinatorial_laplacian(g: &CsrGraph) -> SparseLaplacian {
    let deg = g.degrees();
    SparseLaplacian {
        matrix: SparseMatrix::from_graph(g, |i| deg[i], |_, _, w| -w),
        kind: LaplacianKind::Combinatorial,
        lambda_max_used: None,
    }
}

/// `I − D^{-1/2} A D^{-1/2}`, taking `D^{-1/2}_ii = 0` for isolated nodes.
pub fn sym_norm_laplacian(g: &CsrGraph) -> SparseLaplacian {
    let inv_sqrt = inv_sqrt_degrees(&g.degrees());
    SparseLaplacian {
        matrix: SparseMatrix::from_graph(g, |_| 1.0, |i, j, w| -w * inv_sqrt[i] * inv_sqrt[j]),
        kind: LaplacianKind::SymmetricNormalized,
        lambda_max_used: None,
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn self_loop_normalized_adjacency(g: &CsrGraph) -> SparseMatrix {
    let deg: Vec<f64> = g.degrees().iter().map(|d| d + 1.0).collect();
    let inv_sqrt = inv_sqrt_degrees(&deg);
    SparseMatrix::from_graph(g, |i| inv_sqrt[i] * inv_sqrt[i], |i, j, w| w * inv_sqrt[i] * inv_sqrt[j])
}

fn inv_sqrt_degrees(deg: &[f64]) -> Vec<f64> {
    deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect()
}

pub const LAMBDA_MARGIN: f64 = 1e-6;

enum Power {
    Converged(f64),
    /// The iterate vanished: the start had no component outside the null space.
    Collapsed,
    Stalled(f64),
}

fn power_iteration(m: &SparseMatrix, mut x: Vec<f64>, tol: f64, max_iter: usize) -> Power {
    let mut rho = 0.0;
    for _ in 0..max_iter {
        let y = m.matvec(&x);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Power::Collapsed;
        }
        rho = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let residual = y
            .iter()
            .zip(&x)
            .map(|(yv, xv)| (yv - rho * xv).powi(2))
            .sum::<f64>()
            .sqrt();
        x = y.into_iter().map(|v| v / norm).collect();
        if residual < tol {
            return Power::Converged(rho);
        }
    }
    Power::Stalled(rho)
}

/// Largest eigenvalue of a symmetric PSD Laplacian by power iteration,
/// inflated by a relative margin of 1e-6.
///
/// Runs from the all-ones vector, then checks the result from a seeded
/// random vector: the all-ones start is orthogonal to the dominant
/// eigenvector on some graphs (K2, or isolated nodes next to an edge). The
/// check overrides the first estimate only when it converges or stalls
/// (its Rayleigh quotient is a lower bound on λ_max) beyond the margin,
/// so relabelling the nodes never changes which branch is taken unless the
/// first estimate is wrong. Each run stops when `‖Lx − ρx‖ < tol`.
pub fn estimate_lambda_max(lap: &SparseLaplacian, tol: f64, max_iter: usize) -> Result<f64> {
    let m = &lap.matrix;
    let n = m.n;
    if n == 0 {
        return Err(Error::InvalidArgument("empty Laplacian".into()));
    }
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    let random = || {
        let mut rng = stream_rng(0, Stream::PowerRestart);
        let mut x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        x
    };
    let first = power_iteration(m, ones, tol, max_iter);
    let estimate = match (first, power_iteration(m, random(), tol, max_iter)) {
        (Power::Converged(a), Power::Converged(b)) if b > a * (1.0 + LAMBDA_MARGIN) => Ok(b),
        (Power::Converged(a), Power::Converged(_) | Power::Collapsed) => Ok(a),
        (Power::Converged(a), Power::Stalled(r)) if r <= a * (1.0 + LAMBDA_MARGIN) => Ok(a),
        (Power::Collapsed, Power::Converged(b)) => Ok(b),
        // Both starts vanished: the operator is zero.
        (Power::Collapsed, Power::Collapsed) => Ok(0.0),
        (Power::Stalled(r), _) | (_, Power::Stalled(r)) => Err(r),
    };
    match estimate {
        Ok(rho) => Ok(rho * (1.0 + LAMBDA_MARGIN)),
        Err(rho) => match lap.kind {
            LaplacianKind::SymmetricNormalized => {
                log::warn!("power iteration did not converge in {max_iter} steps (estimate {rho}); using 2.0");
                Ok(2.0)
            }
            _ => Err(Error::NoConvergence { iters: max_iter, estimate: rho }),
        },
    }
}

/// `2L/λ_max − I`.
pub fn scale_laplacian(lap: &SparseLaplacian, lambda_max: f64) -> Result<SparseLaplacian> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let s = 2.0 / lambda_max;
    Ok(SparseLaplacian {
        matrix: lap.matrix.map_values(|i, j, v| if i == j { s * v - 1.0 } else { s * v }),
        kind: LaplacianKind::Scaled,
        lambda_max_used: Some(lambda_max),
    })
}

/// Exact k-nearest-neighbour graph under Euclidean distance, symmetrized by
/// union, with unit weights. Ties go to the lower node index.
pub fn knn_graph(features: &Tensor, k: usize) -> Result<CsrGraph> {
    let (n, _) = features.dims2("knn_graph")?;
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} must satisfy 1 <= k < n = {n}")));
    }
    let mut pairs = BTreeSet::new();
    for i in 0..n {
        let xi = features.row(i);
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = xi.iter().zip(features.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in dists.iter().take(k) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let edges: Vec<Edge> = pairs.into_iter().map(|(u, v)| (u, v, 1.0)).collect();
    CsrGraph::build(n, &edges, true, false)
}
