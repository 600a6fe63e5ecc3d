//! Chebyshev-polynomial K-hop extraction, a per-node MLP-Mixer over the hop
//! axis, and Chebyshev-interpolation aggregation for transductive node
//! classification, on a small reverse-mode autodiff tape.
//!
//! ```
//! use chebmixer::data::{gen_sbm, SbmParams};
//! use chebmixer::model::{model_forward, predict, prepare_operator, ModelConfig, ModelParams};
//!
//! let ds = gen_sbm(&SbmParams { nodes: 20, blocks: 2, p_in: 0.5, p_out: 0.05, feat_dim: 4, feat_sep: 1.0, seed: 1 }).unwrap();
//! let cfg = ModelConfig { input_dim: 4, classes: 2, hidden: 8, token_hidden: 8, channel_hidden: 8, ..ModelConfig::default() };
//! let params = ModelParams::init(&cfg, 1).unwrap();
//! let logits = model_forward(&prepare_operator(&ds.graph, &cfg).unwrap(), &ds.features, &params, &cfg).unwrap();
//! assert_eq!(predict(&logits).len(), 20);
//! ```

pub mod aggregator;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mixer;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
