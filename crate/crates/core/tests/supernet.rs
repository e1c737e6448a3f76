use gas_core::arch_space::{build_network_layout, Genotype, LayoutConfig, NetworkLayout, OpKind};
use gas_core::latency::one_hot;
use gas_core::supernet::{BnMode, Network};
use gas_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> NetworkLayout {
    build_network_layout(&LayoutConfig {
        num_cells: 2,
        num_nodes: 2,
        initial_channels: 4,
        reductions: Some(vec![1]),
        num_classes: 3,
        input_size: [16, 16],
        ..LayoutConfig::default()
    })
    .unwrap()
}

#[test]
fn logits_are_full_resolution() {
    let layout = tiny();
    let net = Network::supernet(&layout, 0).unwrap();
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let zs = one_hot(&Genotype::uniform(&layout, OpKind::Conv3x3), layout.edges_per_cell());
    let y = net.predict(&x, Some(&zs), BnMode::Eval).unwrap();
    assert_eq!(y.shape(), &[2, 3, 16, 16]);
    assert!(y.is_finite());
}

// skips the zero op so every node stays connected
fn nonzero(i: usize) -> OpKind {
    let zero = OpKind::Zero.index();
    OpKind::from_index(if i >= zero { i + 1 } else { i }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn one_hot_supernet_equals_derived(ops in proptest::collection::vec(0usize..7, 10), seed in any::<u64>()) {
        let layout = tiny();
        let p = layout.edges_per_cell();
        let g = Genotype::from_ops(
            layout.fingerprint(),
            ops.chunks(p).map(|c| c.iter().map(|&i| nonzero(i)).collect()).collect(),
        );
        let sup = Network::supernet(&layout, seed).unwrap();
        let mut derived = Network::derived(&layout, &g, seed ^ 7).unwrap();
        derived.load_shared(&sup);
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for mode in [BnMode::Train, BnMode::Eval] {
            let a = sup.predict(&x, Some(&one_hot(&g, p)), mode).unwrap();
            let b = derived.predict(&x, None, mode).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-5);
        }
    }
}
