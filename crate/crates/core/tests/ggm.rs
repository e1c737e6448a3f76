use gas_core::ggm::{compute_adjacency, gcn_propagate, ggm_update, GgmConfig, GgmParams};
use gas_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn adjacency_rows_are_distributions((p, q) in (1usize..7, 2usize..9), seed in any::<u64>(), scale in 0.1f64..30.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let adj = compute_adjacency(
            &Tensor::randn(&[p, q], scale, &mut r),
            &Tensor::randn(&[p, q], scale, &mut r),
            &Tensor::randn(&[q, q], 1.0, &mut r),
            &Tensor::randn(&[q, q], 1.0, &mut r),
        )
        .unwrap();
        prop_assert_eq!(adj.shape(), &[p, p]);
        for i in 0..p {
            prop_assert!((adj.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(adj.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_graph_weight_is_identity((n, d) in (1usize..7, 1usize..9), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::randn(&[n, d], 1.0, &mut r);
        let adj = Tensor::full(&[n, n], 1.0 / n as f64);
        prop_assert_eq!(gcn_propagate(&h, &adj, &Tensor::zeros(&[d, d])).unwrap(), h);
    }

    #[test]
    fn zero_gamma_leaves_logits_unchanged(seed in any::<u64>(), k in 1usize..4) {
        let (p, q) = (5, 8);
        let cfg = GgmConfig { gamma: 0.0, ..GgmConfig::default() };
        let params = GgmParams::new(cfg, 4, p, q, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let a = Tensor::randn(&[p, q], 1.0, &mut r);
        let prev = Tensor::randn(&[p, q], 1.0, &mut r);
        prop_assert_eq!(ggm_update(&a, &prev, &params, k).unwrap(), a);
    }
}

#[test]
fn first_cell_has_no_predecessor() {
    let params = GgmParams::new(GgmConfig::default(), 3, 5, 8, 0).unwrap();
    let a = Tensor::zeros(&[5, 8]);
    assert!(ggm_update(&a, &a, &params, 0).is_err());
    assert!(ggm_update(&a, &a, &params, 3).is_err());
}
