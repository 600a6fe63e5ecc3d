use std::sync::Arc;

use chebmixer::aggregator::AggregatorMode;
use chebmixer::data::{gen_sbm, SbmParams};
use chebmixer::graph::{scale_laplacian, sym_norm_laplacian};
use chebmixer::mixer::MixerLayerParams;
use chebmixer::model::{model_forward, prepare_operator, LambdaMax, ModelConfig, ModelParams};
use chebmixer::spectral::HopOperator;
use chebmixer::tensor::{linear, Tensor};
use chebmixer::verify::{equivariance_error, model_gradcheck};

#[test]
fn full_model_gradient_matches_central_differences() {
    for seed in 0..5 {
        let (err, worst) = model_gradcheck(seed, false).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err} at {worst}");
    }
}

#[test]
fn logits_permute_with_nodes() {
    for seed in [1, 2] {
        let err = equivariance_error(seed, false).unwrap();
        assert!(err < 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn degenerate_model_is_a_linear_map() {
    let ds = gen_sbm(&SbmParams {
        nodes: 30,
        blocks: 3,
        p_in: 0.3,
        p_out: 0.05,
        feat_dim: 5,
        feat_sep: 2.0,
        seed: 4,
    })
    .unwrap();
    let cfg = ModelConfig {
        input_dim: 5,
        k: 4,
        hidden: 6,
        token_hidden: 3,
        channel_hidden: 3,
        classes: 3,
        aggregator: AggregatorMode::ChebInterp,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg, 4).unwrap();
    params.mixers = vec![MixerLayerParams::zero_branches(4, 6, 3, 3)];
    // γ_j = 1/2 at every node interpolates W = (1, 0, …, 0).
    params.agg.as_mut().unwrap().gamma = Tensor::full(&[5, 6], 0.5);
    params.b_in = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]);
    params.b_out = Tensor::vector(vec![1.0, 2.0, -1.0]);

    let op = prepare_operator(&ds.graph, &cfg).unwrap();
    let got = model_forward(&op, &ds.features, &params, &cfg).unwrap();
    let hidden = linear(&ds.features, &params.w_in, Some(&params.b_in)).unwrap();
    let expect = linear(&hidden, &params.w_out, Some(&params.b_out)).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-10, "{}", got.max_abs_diff(&expect));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let ds = gen_sbm(&SbmParams {
        nodes: 40,
        blocks: 2,
        p_in: 0.3,
        p_out: 0.05,
        feat_dim: 4,
        feat_sep: 1.0,
        seed: 9,
    })
    .unwrap();
    let cfg = ModelConfig {
        input_dim: 4,
        classes: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 9).unwrap();
    let a = model_forward(&prepare_operator(&ds.graph, &cfg).unwrap(), &ds.features, &params, &cfg).unwrap();
    let b = model_forward(&prepare_operator(&ds.graph, &cfg).unwrap(), &ds.features, &params, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn fixed_lambda_matches_explicit_operator() {
    let ds = gen_sbm(&SbmParams {
        nodes: 20,
        blocks: 2,
        p_in: 0.4,
        p_out: 0.1,
        feat_dim: 3,
        feat_sep: 1.0,
        seed: 2,
    })
    .unwrap();
    let cfg = ModelConfig {
        input_dim: 3,
        classes: 2,
        hidden: 8,
        token_hidden: 8,
        channel_hidden: 8,
        lambda_max: LambdaMax::Fixed(2.0),
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 2).unwrap();
    let explicit = Arc::new(HopOperator::chebyshev(scale_laplacian(&sym_norm_laplacian(&ds.graph), 2.0).unwrap()).unwrap());
    let a = model_forward(&explicit, &ds.features, &params, &cfg).unwrap();
    let b = model_forward(&prepare_operator(&ds.graph, &cfg).unwrap(), &ds.features, &params, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn every_aggregator_runs() {
    let ds = gen_sbm(&SbmParams {
        nodes: 12,
        blocks: 2,
        p_in: 0.5,
        p_out: 0.1,
        feat_dim: 3,
        feat_sep: 1.0,
        seed: 5,
    })
    .unwrap();
    for mode in AggregatorMode::ALL {
        let cfg = ModelConfig {
            input_dim: 3,
            classes: 2,
            hidden: 4,
            token_hidden: 4,
            channel_hidden: 4,
            aggregator: mode,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 5).unwrap();
        let logits = model_forward(&prepare_operator(&ds.graph, &cfg).unwrap(), &ds.features, &params, &cfg).unwrap();
        assert_eq!(logits.shape(), &[12, 2], "{mode}");
        assert!(logits.is_finite(), "{mode}");
    }
}
