//! K-hop mixer layer.
//!
//! Each node's `(K+1)×d` token matrix `T` is refined independently by two
//! pre-norm residual MLP branches:
//!
//! ```text
//! T ← T + W2·gelu(W1·LN1(T) + b1) + b2        (mixes along the hop axis)
//! T ← T + (W4·gelu(W3·LN2(T)ᵀ + b3) + b4)ᵀ    (mixes along the channel axis)
//! ```
//!
//! Both layer norms act over the channel axis.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct MixerLayerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub w4: Tensor,
    pub b4: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Names of the per-layer tensors, in storage order.
pub const MIXER_TENSOR_NAMES: [&str; 12] = [
    "w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

/// Glorot-uniform matrix of shape `fan_out×fan_in`.
pub(crate) fn glorot(rng: &mut Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[fan_out, fan_in], data).expect("positive extents")
}

impl MixerLayerParams {
    pub fn init(k: usize, d: usize, d_s: usize, d_c: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || d_s == 0 || d_c == 0 {
            return Err(Error::InvalidArgument(format!(
                "mixer extents must be positive (d={d}, d_s={d_s}, d_c={d_c})"
            )));
        }
        let h = k + 1;
        Ok(Self {
            w1: glorot(rng, d_s, h),
            b1: Tensor::zeros(&[d_s]),
            w2: glorot(rng, h, d_s),
            b2: Tensor::zeros(&[h]),
            w3: glorot(rng, d_c, d),
            b3: Tensor::zeros(&[d_c]),
            w4: glorot(rng, d, d_c),
            b4: Tensor::zeros(&[d]),
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        })
    }

    /// Parameters whose branches are both zero, so the layer is the identity.
    pub fn zero_branches(k: usize, d: usize, d_s: usize, d_c: usize) -> Self {
        let h = k + 1;
        Self {
            w1: Tensor::zeros(&[d_s, h]),
            b1: Tensor::zeros(&[d_s]),
            w2: Tensor::zeros(&[h, d_s]),
            b2: Tensor::zeros(&[h]),
            w3: Tensor::zeros(&[d_c, d]),
            b3: Tensor::zeros(&[d_c]),
            w4: Tensor::zeros(&[d, d_c]),
            b4: Tensor::zeros(&[d]),
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.w4,
            &self.b4,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    /// `(K, d, d_s, d_c)` implied by the stored shapes.
    pub fn extents(&self) -> (usize, usize, usize, usize) {
        let s = self.w1.shape();
        (s[1] - 1, self.w3.shape()[1], s[0], self.w3.shape()[0])
    }

    /// Expected shape of each tensor for the given extents, in storage order.
    pub fn expected_shapes(k: usize, d: usize, d_s: usize, d_c: usize) -> [Vec<usize>; 12] {
        let h = k + 1;
        [
            vec![d_s, h],
            vec![d_s],
            vec![h, d_s],
            vec![h],
            vec![d_c, d],
            vec![d_c],
            vec![d, d_c],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> MixerLayerVars {
        let v = self.tensors().map(|t| tape.leaf(t.clone()));
        MixerLayerVars(v)
    }
}

/// `init_mixer` with its own seeded stream.
pub fn init_mixer(k: usize, d: usize, d_s: usize, d_c: usize, seed: u64) -> Result<MixerLayerParams> {
    MixerLayerParams::init(k, d, d_s, d_c, &mut stream_rng(seed, Stream::Init))
}

/// Tape handles for one layer's parameters, in [`MIXER_TENSOR_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct MixerLayerVars(pub [Var; 12]);

/// Applies one mixer layer to `x` (`N×(K+1)×d`) on the tape. With
/// `use_bias == false` the four MLP biases are left out of the graph.
pub fn mixer_layer(tape: &mut Tape, x: Var, p: &MixerLayerVars, use_bias: bool) -> Result<Var> {
    let [w1, b1, w2, b2, w3, b3, w4, b4, g1, s1, g2, s2] = p.0;
    let bias = |b: Var| use_bias.then_some(b);
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("mixer", format!("expected N×(K+1)×d input, got {shape:?}")));
    }

    let y = tape.layer_norm(x, g1, s1, LAYER_NORM_EPS)?;
    let z = tape.left_mix(w1, y, bias(b1))?;
    let z = tape.gelu(z);
    let z = tape.left_mix(w2, z, bias(b2))?;
    let x = tape.add(x, z)?;

    let y = tape.layer_norm(x, g2, s2, LAYER_NORM_EPS)?;
    let z = tape.linear(y, w3, bias(b3))?;
    let z = tape.gelu(z);
    let z = tape.linear(z, w4, bias(b4))?;
    tape.add(x, z)
}

/// Forward pass of one layer without recording gradients.
pub fn mixer_forward(x_g: &Tensor, params: &MixerLayerParams, use_bias: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_g.clone());
    let vars = params.register(&mut tape);
    let out = mixer_layer(&mut tape, x, &vars, use_bias)?;
    Ok(tape.value(out).clone())
}
