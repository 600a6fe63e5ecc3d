//! The node classifier: affine projection, hop extraction, mixer stack,
//! aggregation and an affine classification head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::aggregator::{self, AggregatorMode, AggregatorParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{estimate_lambda_max, scale_laplacian, sym_norm_laplacian, CsrGraph};
use crate::mixer::{self, glorot, MixerLayerParams, MixerLayerVars, MIXER_TENSOR_NAMES};
use crate::rng::{stream_rng, Stream};
use crate::spectral::HopOperator;
use crate::tensor::Tensor;

/// How `λ_max` for the scaled Laplacian is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMax {
    /// Power iteration on the normalized Laplacian.
    Auto,
    Fixed(f64),
}

impl fmt::Display for LambdaMax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for LambdaMax {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Self::Fixed(v)),
            _ => Err(Error::InvalidArgument(format!("lambda_max must be `auto` or a positive number, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extractor {
    Chebyshev,
    Hop2Token,
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Chebyshev => "chebyshev",
            Self::Hop2Token => "hop2token",
        })
    }
}

impl FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chebyshev" => Ok(Self::Chebyshev),
            "hop2token" => Ok(Self::Hop2Token),
            other => Err(Error::InvalidArgument(format!("unknown extractor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Raw feature width `d_raw`.
    pub input_dim: usize,
    /// Polynomial order `K`; each node carries `K+1` tokens.
    pub k: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    /// Number of mixer layers `l`.
    pub layers: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub classes: usize,
    pub aggregator: AggregatorMode,
    pub lambda_max: LambdaMax,
    pub extractor: Extractor,
    /// Include the four MLP biases inside each mixer layer.
    pub mixer_bias: bool,
    /// Halve the `k = 0` interpolation coefficient.
    pub halve_c0: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            k: 7,
            hidden: 64,
            layers: 1,
            token_hidden: 64,
            channel_hidden: 64,
            classes: 2,
            aggregator: AggregatorMode::ChebInterp,
            lambda_max: LambdaMax::Auto,
            extractor: Extractor::Chebyshev,
            mixer_bias: true,
            halve_c0: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("d", self.hidden),
            ("d_s", self.token_hidden),
            ("d_c", self.channel_hidden),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub mixers: Vec<MixerLayerParams>,
    /// Absent for the parameter-free aggregators.
    pub agg: Option<AggregatorParams>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit norms and ones `γ`, all
    /// drawn from the seed's init stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let w_in = glorot(&mut rng, cfg.hidden, cfg.input_dim);
        let mixers = (0..cfg.layers)
            .map(|_| MixerLayerParams::init(cfg.k, cfg.hidden, cfg.token_hidden, cfg.channel_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cols = cfg.aggregator.gamma_columns(cfg.hidden);
        let agg = (cols > 0).then(|| aggregator::init_gamma(cfg.k, cols, seed)).transpose()?;
        let w_out = glorot(&mut rng, cfg.classes, cfg.hidden);
        Ok(Self {
            w_in,
            b_in: Tensor::zeros(&[cfg.hidden]),
            mixers,
            agg,
            w_out,
            b_out: Tensor::zeros(&[cfg.classes]),
        })
    }

    /// Every trainable tensor with its name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_in".to_string(), &self.w_in), ("b_in".to_string(), &self.b_in)];
        for (i, m) in self.mixers.iter().enumerate() {
            for (name, t) in MIXER_TENSOR_NAMES.iter().zip(m.tensors()) {
                out.push((format!("mixer{i}.{name}"), t));
            }
        }
        if let Some(a) = &self.agg {
            out.push(("agg.gamma".to_string(), &a.gamma));
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_in, &mut self.b_in];
        for m in &mut self.mixers {
            out.extend(m.tensors_mut());
        }
        if let Some(a) = &mut self.agg {
            out.push(&mut a.gamma);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    /// Tensor names and shapes a model with this config must have.
    pub fn expected_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("w_in".to_string(), vec![cfg.hidden, cfg.input_dim]),
            ("b_in".to_string(), vec![cfg.hidden]),
        ];
        for i in 0..cfg.layers {
            let shapes = MixerLayerParams::expected_shapes(cfg.k, cfg.hidden, cfg.token_hidden, cfg.channel_hidden);
            for (name, s) in MIXER_TENSOR_NAMES.iter().zip(shapes) {
                out.push((format!("mixer{i}.{name}"), s));
            }
        }
        let cols = cfg.aggregator.gamma_columns(cfg.hidden);
        if cols > 0 {
            out.push(("agg.gamma".to_string(), vec![cfg.k + 1, cols]));
        }
        out.push(("w_out".to_string(), vec![cfg.classes, cfg.hidden]));
        out.push(("b_out".to_string(), vec![cfg.classes]));
        out
    }

    /// Rebuilds parameters from tensors listed in [`Self::expected_manifest`]
    /// order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let manifest = Self::expected_manifest(cfg);
        if manifest.len() != tensors.len() {
            return Err(Error::shape(
                "parameters",
                format!("expected {} tensors, got {}", manifest.len(), tensors.len()),
            ));
        }
        for ((name, shape), t) in manifest.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(name.clone(), format!("expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let w_in = next();
        let b_in = next();
        let mixers = (0..cfg.layers)
            .map(|_| {
                let mut p = MixerLayerParams::zero_branches(cfg.k, cfg.hidden, cfg.token_hidden, cfg.channel_hidden);
                for slot in p.tensors_mut() {
                    *slot = next();
                }
                p
            })
            .collect();
        let agg = (cfg.aggregator.gamma_columns(cfg.hidden) > 0).then(|| AggregatorParams { gamma: next() });
        Ok(Self {
            w_in,
            b_in,
            mixers,
            agg,
            w_out: next(),
            b_out: next(),
        })
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Whether decoupled weight decay applies to the named tensor. Weight
/// matrices (including `γ`) decay; biases and norm parameters do not.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf == "gamma" || (leaf.starts_with('w') && !leaf.contains("bias"))
}

/// Builds the hop operator for a graph under the model's config.
pub fn prepare_operator(g: &CsrGraph, cfg: &ModelConfig) -> Result<Arc<HopOperator>> {
    let op = match cfg.extractor {
        Extractor::Chebyshev => {
            let lap = sym_norm_laplacian(g);
            let lambda = match cfg.lambda_max {
                LambdaMax::Auto => estimate_lambda_max(&lap, 1e-6, 1000)?,
                LambdaMax::Fixed(v) => v,
            };
            HopOperator::chebyshev(scale_laplacian(&lap, lambda)?)?
        }
        Extractor::Hop2Token => HopOperator::hop2token(g),
    };
    Ok(Arc::new(op))
}

fn in_stage(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op: format!("{stage}/{op}"),
            detail,
        },
        other => other,
    }
}

/// Handles produced by [`forward_on_tape`].
pub struct ForwardVars {
    /// One per tensor, in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var>,
    pub logits: Var,
}

/// Records the full forward pass on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    op: &Arc<HopOperator>,
    x_raw: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardVars> {
    let lens = ModelParams::expected_manifest(cfg).len();
    let named = params.named_tensors();
    if named.len() != lens {
        return Err(Error::shape(
            "aggregation",
            format!("parameters do not match aggregator `{}`", cfg.aggregator),
        ));
    }
    let vars: Vec<Var> = named.into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let logits = forward_with_vars(tape, op, x_raw, &vars, cfg)?;
    Ok(ForwardVars { params: vars, logits })
}

/// Forward pass over parameter handles already on the tape, given in
/// [`ModelParams::expected_manifest`] order.
pub fn forward_with_vars(tape: &mut Tape, op: &Arc<HopOperator>, x_raw: &Tensor, vars: &[Var], cfg: &ModelConfig) -> Result<Var> {
    let expected = ModelParams::expected_manifest(cfg).len();
    if vars.len() != expected {
        return Err(Error::shape("parameters", format!("expected {expected} tensors, got {}", vars.len())));
    }
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("length checked");
    let x = tape.constant(x_raw.clone());
    let (w_in, b_in) = (next(), next());
    let h = tape.linear(x, w_in, Some(b_in)).map_err(in_stage("projection"))?;
    let mut x_g = op.extract_on_tape(tape, h, cfg.k).map_err(in_stage("extraction"))?;
    for _ in 0..cfg.layers {
        let layer = MixerLayerVars(std::array::from_fn(|_| next()));
        x_g = mixer::mixer_layer(tape, x_g, &layer, cfg.mixer_bias).map_err(in_stage("mixer"))?;
    }
    let pooled = if cfg.aggregator.is_learned() {
        let gamma = next();
        let w = aggregator::cheb_interp_weights_on_tape(tape, gamma, cfg.halve_c0).map_err(in_stage("aggregation"))?;
        aggregator::aggregate_on_tape(tape, x_g, w).map_err(in_stage("aggregation"))?
    } else {
        aggregator::baseline_aggregate_on_tape(tape, x_g, cfg.aggregator).map_err(in_stage("aggregation"))?
    };
    let (w_out, b_out) = (next(), next());
    tape.linear(pooled, w_out, Some(b_out)).map_err(in_stage("head"))
}

/// Logits `N×C` without recording gradients for later use.
pub fn model_forward(op: &Arc<HopOperator>, x_raw: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = forward_on_tape(&mut tape, op, x_raw, params, cfg)?;
    Ok(tape.value(vars.logits).clone())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
