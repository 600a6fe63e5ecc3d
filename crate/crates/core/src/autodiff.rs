//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records each differentiable kernel as it executes. Calling
//! [`Tape::backward`] walks the record in exact reverse order and
//! accumulates vector-Jacobian products into per-value gradients. The tape
//! is not consumed, so replaying it yields the same gradients bit for bit.
//!
//! Layer-specific kernels that live outside this module (hop extraction,
//! aggregation, the loss) plug in through [`VjpRule`].

use crate::error::{Error, Result};
use crate::tensor::{self, LayerNormStats, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a kernel defined outside this module.
pub trait VjpRule: Send + Sync {
    fn name(&self) -> &'static str;

    /// Given the upstream gradient of the output, returns one gradient per
    /// input in input order. `None` means the input receives no gradient.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul,
    Linear { has_bias: bool },
    LeftMix { has_bias: bool },
    LayerNorm(LayerNormStats),
    Gelu,
    Add,
    Mul,
    Abs,
    Sum,
    Custom(Box<dyn VjpRule>),
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every value on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, Node { op, inputs, requires_grad })
    }

    fn push_node(&mut self, value: Tensor, node: Node) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(
            value,
            Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                requires_grad: true,
            },
        )
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(
            value,
            Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                requires_grad: false,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul, vec![a, b]))
    }

    /// `x·wᵀ + b` along the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { has_bias: b.is_some() }, inputs))
    }

    /// `out[n] = w·x[n] + b⊗1` for every leading index `n`.
    pub fn left_mix(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let out = tensor::left_mix(self.value(w), self.value(x), b.map(|b| self.value(b)))?;
        let mut inputs = vec![w, x];
        inputs.extend(b);
        Ok(self.push(out, Op::LeftMix { has_bias: b.is_some() }, inputs))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, stats) = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm(stats), vec![x, gain, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        self.push(out, Op::Gelu, vec![x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add, vec![a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with("mul", self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul, vec![a, b]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs, vec![x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum, vec![x])
    }

    /// Records an externally computed kernel together with its backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, rule: Box<dyn VjpRule>) -> Var {
        self.push(output, Op::Custom(rule), inputs)
    }

    /// Gradients of the one-element value `loss` with respect to every
    /// recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single value, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let contributions = vjp(&node.op, &inputs, &needs, &self.values[idx], &g)?;
            for ((var, c), need) in node.inputs.iter().zip(contributions).zip(needs) {
                let Some(c) = c.filter(|_| need) else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn vjp(op: &Op, inputs: &[&Tensor], needs: &[bool], output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = if needs[0] { Some(tensor::matmul(g, &b.transpose()?)?) } else { None };
            let db = if needs[1] { Some(tensor::matmul(&a.transpose()?, g)?) } else { None };
            vec![da, db]
        }
        Op::Linear { has_bias } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (out_dim, in_dim) = w.dims2("linear")?;
            let rows = x.outer();
            // dx = g·w, computed as linear(g, wᵀ).
            let dx = if needs[0] { Some(tensor::linear(g, &w.transpose()?, None)?) } else { None };
            let mut dw = vec![0.0; out_dim * in_dim];
            let (gd, xd) = (g.data(), x.data());
            tensor::for_rows(&mut dw, in_dim, rows * out_dim * in_dim, |o, wrow| {
                for r in 0..rows {
                    let gv = gd[r * out_dim + o];
                    if gv == 0.0 {
                        continue;
                    }
                    for (acc, &xv) in wrow.iter_mut().zip(&xd[r * in_dim..(r + 1) * in_dim]) {
                        *acc += gv * xv;
                    }
                }
            });
            let mut out = vec![dx, Some(Tensor::new(&[out_dim, in_dim], dw)?)];
            if *has_bias {
                let mut db = vec![0.0; out_dim];
                for r in g.data().chunks(out_dim) {
                    for (acc, v) in db.iter_mut().zip(r) {
                        *acc += v;
                    }
                }
                out.push(Some(Tensor::vector(db)));
            }
            out
        }
        Op::LeftMix { has_bias } => {
            let (w, x) = (inputs[0], inputs[1]);
            let (m, h) = w.dims2("left_mix")?;
            let (n, _, d) = x.dims3("left_mix")?;
            let dx = if needs[1] { Some(tensor::left_mix(&w.transpose()?, g, None)?) } else { None };
            let mut dw = vec![0.0; m * h];
            let (gd, xd) = (g.data(), x.data());
            tensor::for_rows(&mut dw, h, n * m * h * d, |i, wrow| {
                for node in 0..n {
                    let grow = &gd[(node * m + i) * d..(node * m + i + 1) * d];
                    for (p, acc) in wrow.iter_mut().enumerate() {
                        let xrow = &xd[(node * h + p) * d..(node * h + p + 1) * d];
                        let mut s = 0.0;
                        for (a, b) in grow.iter().zip(xrow) {
                            s += a * b;
                        }
                        *acc += s;
                    }
                }
            });
            let mut out = vec![Some(Tensor::new(&[m, h], dw)?), dx];
            if *has_bias {
                let mut db = vec![0.0; m];
                for node in 0..n {
                    for (i, acc) in db.iter_mut().enumerate() {
                        *acc += gd[(node * m + i) * d..(node * m + i + 1) * d].iter().sum::<f64>();
                    }
                }
                out.push(Some(Tensor::vector(db)));
            }
            out
        }
        Op::LayerNorm(stats) => {
            let gain = inputs[1];
            let d = gain.numel();
            let xhat = stats.normalized.data();
            let gd = g.data();
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut dx = vec![0.0; g.numel()];
            for (r, &inv_std) in stats.inv_std.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let (gr, xr) = (&gd[span.clone()], &xhat[span.clone()]);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for c in 0..d {
                    dgain[c] += gr[c] * xr[c];
                    dbias[c] += gr[c];
                    let dxh = gr[c] * gain.data()[c];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xr[c];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                for (c, slot) in dx[span].iter_mut().enumerate() {
                    let dxh = gr[c] * gain.data()[c];
                    *slot = inv_std * (dxh - mean_dxhat - xr[c] * mean_dxhat_xhat);
                }
            }
            vec![
                Some(Tensor::new(g.shape(), dx)?),
                Some(Tensor::vector(dgain)),
                Some(Tensor::vector(dbias)),
            ]
        }
        Op::Gelu => vec![Some(inputs[0].zip_with("gelu", g, |x, gv| gv * tensor::gelu_grad_scalar(x))?)],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul => vec![
            Some(g.zip_with("mul", inputs[1], |gv, b| gv * b)?),
            Some(g.zip_with("mul", inputs[0], |gv, a| gv * a)?),
        ],
        // Derivative taken as +1 at the kink.
        Op::Abs => vec![Some(inputs[0].zip_with("abs", g, |x, gv| if x >= 0.0 { gv } else { -gv })?)],
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))],
        Op::Custom(rule) => {
            let out = rule.vjp(inputs, output, g)?;
            if out.len() != inputs.len() {
                return Err(Error::shape(
                    rule.name(),
                    format!("backward produced {} gradients for {} inputs", out.len(), inputs.len()),
                ));
            }
            out
        }
    })
}
