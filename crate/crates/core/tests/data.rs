use std::fs;

use chebmixer::data::{gen_sbm, import_planetoid, load_checkpoint, load_dataset, save_checkpoint, save_dataset, SbmParams};
use chebmixer::model::{ModelConfig, ModelParams};
use chebmixer::training::make_splits;
use proptest::prelude::*;

#[test]
fn sbm_within_block_density_concentrates() {
    for seed in 0..10 {
        let ds = gen_sbm(&SbmParams {
            nodes: 200,
            blocks: 2,
            p_in: 0.1,
            p_out: 0.01,
            feat_dim: 4,
            feat_sep: 1.0,
            seed,
        })
        .unwrap();
        let within = ds
            .graph
            .undirected_edges()
            .iter()
            .filter(|(u, v, _)| ds.labels[*u] == ds.labels[*v])
            .count();
        let pairs = 2 * (100 * 99 / 2);
        let density = within as f64 / pairs as f64;
        assert!((density - 0.1).abs() < 0.03, "seed {seed}: {density}");
    }
}

#[test]
fn sbm_features_point_at_own_block() {
    let ds = gen_sbm(&SbmParams {
        nodes: 40,
        blocks: 4,
        p_in: 0.5,
        p_out: 0.0,
        feat_dim: 6,
        feat_sep: 1e6,
        seed: 8,
    })
    .unwrap();
    for i in 0..40 {
        let row = ds.features.row(i);
        let best = (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(best, ds.labels[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_round_trip_is_exact(seed in any::<u64>(), n_blocks in 2usize..4, with_splits in any::<bool>()) {
        let mut ds = gen_sbm(&SbmParams {
            nodes: 12 * n_blocks,
            blocks: n_blocks,
            p_in: 0.4,
            p_out: 0.05,
            feat_dim: 5,
            feat_sep: 0.5,
            seed,
        })
        .unwrap();
        if with_splits {
            ds.splits = Some(make_splits(ds.n(), (0.6, 0.2, 0.2), seed).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), k in 0usize..6, layers in 0usize..3, mode in 0usize..5) {
        let cfg = ModelConfig {
            input_dim: 3,
            k,
            hidden: 4,
            layers,
            token_hidden: 2,
            channel_hidden: 5,
            classes: 3,
            aggregator: chebmixer::aggregator::AggregatorMode::ALL[mode],
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&params, &cfg, &[], &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&back.config, &cfg);
        for ((na, a), (nb, b)) in back.params.named_tensors().into_iter().zip(params.named_tensors()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn truncation_anywhere_is_rejected() {
    let cfg = ModelConfig {
        input_dim: 2,
        k: 2,
        hidden: 3,
        token_hidden: 2,
        channel_hidden: 2,
        classes: 2,
        ..ModelConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ModelParams::init(&cfg, 1).unwrap(), &cfg, &[], &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [0, 3, 7, 20, bytes.len() - 8, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&path).is_err(), "cut at {cut}");
    }
}

#[test]
fn planetoid_import() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("toy.content");
    let cites = dir.path().join("toy.cites");
    fs::write(
        &content,
        "p10\t1\t0\t1\tTheory\np20\t0\t0\t0\tNeural_Networks\np30\t0\t1\t1\tTheory\np40\t1\t1\t1\tCase_Based\n",
    )
    .unwrap();
    // Duplicate direction, a self-citation and a dangling id.
    fs::write(&cites, "p10\tp20\np20\tp10\np30\tp30\np30\tp40\np99\tp10\n").unwrap();

    let ds = import_planetoid(&content, &cites, "toy", false).unwrap();
    assert_eq!(ds.n(), 4);
    assert_eq!(ds.classes, 3);
    // Case_Based < Neural_Networks < Theory.
    assert_eq!(ds.labels, vec![2, 1, 2, 0]);
    assert_eq!(ds.graph.undirected_edges(), vec![(0, 1, 1.0), (2, 3, 1.0)]);
    assert_eq!(ds.features.row(2), &[0.0, 1.0, 1.0]);

    let norm = import_planetoid(&content, &cites, "toy", true).unwrap();
    assert_eq!(norm.features.row(2), &[0.0, 0.5, 0.5]);
    assert_eq!(norm.features.row(1), &[0.0, 0.0, 0.0]);
}
