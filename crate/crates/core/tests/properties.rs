use chebmixer::autodiff::Tape;
use chebmixer::gradcheck::grad_check;
use chebmixer::graph::{estimate_lambda_max, knn_graph, scale_laplacian, sym_norm_laplacian, CsrGraph};
use chebmixer::rng::{stream_rng, Stream};
use chebmixer::spectral::{cheb_hop_extract, exact_spectral_filter, filter_from_hops};
use chebmixer::tensor::{layer_norm, matmul, Tensor};
use chebmixer::verify::{random_graph, random_tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn eigenvalues(t: &Tensor) -> Vec<f64> {
    let n = t.shape()[0];
    SymmetricEigen::new(DMatrix::from_row_slice(n, n, t.data()))
        .eigenvalues
        .iter()
        .copied()
        .collect()
}

fn graph_strategy(max_n: usize) -> impl Strategy<Value = CsrGraph> {
    (1..=max_n, 0.0f64..1.0, any::<u64>()).prop_map(|(n, p, seed)| {
        let mut rng = stream_rng(seed, Stream::Verify);
        random_graph(&mut rng, n, p).unwrap()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_spectrum_in_zero_two(g in graph_strategy(24)) {
        for l in eigenvalues(&sym_norm_laplacian(&g).to_dense()) {
            prop_assert!((-1e-10..=2.0 + 1e-10).contains(&l), "{l}");
        }
    }

    #[test]
    fn scaled_spectrum_in_unit_band(g in graph_strategy(24)) {
        let lap = sym_norm_laplacian(&g);
        let lambda = estimate_lambda_max(&lap, 1e-6, 1000).unwrap();
        for l in eigenvalues(&scale_laplacian(&lap, lambda).unwrap().to_dense()) {
            prop_assert!(l.abs() <= 1.0 + 1e-6 + 1e-10, "{l} with λ={lambda}");
        }
    }

    #[test]
    fn spmm_matches_dense(g in graph_strategy(20), seed in any::<u64>(), d in 1usize..5) {
        let lap = sym_norm_laplacian(&g);
        let x = random_tensor(&mut stream_rng(seed, Stream::Verify), &[g.n(), d]);
        let sparse = lap.spmm(&x).unwrap();
        let dense = matmul(&lap.to_dense(), &x).unwrap();
        prop_assert!(sparse.max_abs_diff(&dense) < 1e-10);
    }

    #[test]
    fn laplacian_commutes_with_relabelling(g in graph_strategy(16), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = g.n();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream_rng(seed, Stream::Verify));
        let a = sym_norm_laplacian(&g).to_dense();
        let b = sym_norm_laplacian(&g.permuted(&perm).unwrap()).to_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a.get2(i, j) - b.get2(perm[i], perm[j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn knn_is_a_valid_symmetric_graph(n in 2usize..30, seed in any::<u64>(), d in 1usize..4) {
        let x = random_tensor(&mut stream_rng(seed, Stream::Verify), &[n, d]);
        let k = 1 + (seed as usize) % (n - 1);
        let g = knn_graph(&x, k).unwrap();
        let (rp, ci) = (g.row_ptr(), g.col_idx());
        prop_assert_eq!(rp.len(), n + 1);
        prop_assert_eq!(rp[0], 0);
        prop_assert_eq!(rp[n], ci.len());
        for u in 0..n {
            let row = &ci[rp[u]..rp[u + 1]];
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(row.len() >= k);
            for &v in row {
                prop_assert!(v != u);
                prop_assert_eq!(g.weight(v, u), Some(1.0));
            }
        }
    }

    #[test]
    fn hops_match_eigendecomposition(g in graph_strategy(20), seed in any::<u64>(), k in 0usize..9, d in 1usize..5) {
        let mut rng = stream_rng(seed, Stream::Verify);
        let x = random_tensor(&mut rng, &[g.n(), d]);
        let theta = random_tensor(&mut rng, &[k + 1]).into_data();
        let lap = sym_norm_laplacian(&g);
        let lambda = estimate_lambda_max(&lap, 1e-6, 1000).unwrap();
        let hops = cheb_hop_extract(&scale_laplacian(&lap, lambda).unwrap(), &x, k).unwrap();
        let exact = exact_spectral_filter(&lap.to_dense(), &x, &theta, lambda).unwrap();
        prop_assert!(filter_from_hops(&hops, &theta).unwrap().max_abs_diff(&exact) < 1e-8);
    }

    #[test]
    fn chebyshev_hops_are_contractions(g in graph_strategy(16), k in 0usize..9) {
        // Columns of the identity pick out T_k(L̂) itself.
        let lap = sym_norm_laplacian(&g);
        let lambda = estimate_lambda_max(&lap, 1e-6, 1000).unwrap();
        let hops = cheb_hop_extract(&scale_laplacian(&lap, lambda).unwrap(), &Tensor::identity(g.n()), k).unwrap();
        let tk = hops.slice(k);
        let norm = eigenvalues(&tk).iter().fold(0.0f64, |m, l| m.max(l.abs()));
        prop_assert!(norm <= 1.0 + 1e-9, "‖T_{k}‖ = {norm}");
    }

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(4, 6)) {
        let (y, _) = layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-5).unwrap();
        for i in 0..4 {
            let row = y.row(i);
            let var_in = {
                let r = x.row(i);
                let m = r.iter().sum::<f64>() / 6.0;
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0
            };
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn kernel_gradients(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, Stream::Verify);
        let (n, h, d, e) = (3, 4, 3, 2);
        let params = [
            random_tensor(&mut rng, &[e, h]),
            random_tensor(&mut rng, &[n, h, d]),
            random_tensor(&mut rng, &[e]),
            random_tensor(&mut rng, &[d]),
            random_tensor(&mut rng, &[d]),
            random_tensor(&mut rng, &[d, d]),
        ];
        let weights = random_tensor(&mut rng, &[n, e, d]);
        let objective = |t: &mut Tape, p: &[chebmixer::autodiff::Var]| {
            let y = t.layer_norm(p[1], p[3], p[4], 1e-5)?;
            let y = t.linear(y, p[5], None)?;
            let y = t.gelu(y);
            let y = t.left_mix(p[0], y, Some(p[2]))?;
            let w = t.constant(weights.clone());
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        };
        let report = grad_check(objective, &params, 1e-5, 1e-5).unwrap();
        prop_assert!(report.passed, "{report:?}");
    }
}
