use gas_core::arch_space::{build_network_layout, LayoutConfig};
use gas_core::latency::{
    build_lut, cell_expected_latency, genotype_latency, latency_loss, min_latency, network_expected_latency, one_hot,
    LatencyTable, LutMode,
};
use gas_core::relaxation::op_probabilities;
use gas_core::search_engine::{random_search, RandomSetting};
use gas_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_layout() -> gas_core::arch_space::NetworkLayout {
    build_network_layout(&LayoutConfig {
        num_cells: 3,
        reductions: Some(vec![1]),
        ..LayoutConfig::default()
    })
    .unwrap()
}

#[test]
fn synthetic_table_covers_layout_and_round_trips() {
    let layout = toy_layout();
    let lut = build_lut(&layout, LutMode::Synthetic, 1).unwrap();
    assert!(lut.missing_entries(&layout).is_empty());
    let back = LatencyTable::from_json(&lut.to_json()).unwrap();
    assert_eq!(back.slices(&layout).unwrap(), lut.slices(&layout).unwrap());
    assert!(latency_loss(0.0, 0.1).is_err());
    assert_eq!(latency_loss(1.0, 0.1).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn expectation_is_a_convex_combination(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let lat = Tensor::randn(&[5, 8], 10.0, &mut r).map(|v| v.abs() + 0.1);
        let z = op_probabilities(&Tensor::randn(&[5, 8], 2.0, &mut r));
        let e = cell_expected_latency(&z, &lat).unwrap();
        let lo: f64 = (0..5).map(|i| lat.row(i).iter().cloned().fold(f64::INFINITY, f64::min)).sum();
        let hi: f64 = (0..5).map(|i| lat.row(i).iter().cloned().fold(0.0, f64::max)).sum();
        prop_assert!(lo - 1e-9 <= e && e <= hi + 1e-9);
    }

    #[test]
    fn one_hot_expectation_is_genotype_latency(seed in 0u64..1000) {
        let layout = toy_layout();
        let slices = build_lut(&layout, LutMode::Synthetic, 1).unwrap().slices(&layout).unwrap();
        let g = &random_search(RandomSetting::A, 1, &slices, &layout, None, seed).unwrap()[0];
        let exact = genotype_latency(g, &slices).unwrap();
        prop_assert_eq!(network_expected_latency(&one_hot(g, layout.edges_per_cell()), &slices).unwrap(), exact);
        prop_assert!(exact >= min_latency(&slices));
    }
}
