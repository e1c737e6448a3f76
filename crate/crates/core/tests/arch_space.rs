use gas_core::arch_space::{
    build_cell_topology, build_network_layout, deserialize, edge_count, serialize, validate_genotype, Genotype,
    LayoutConfig, OpKind, NUM_OPS,
};
use proptest::prelude::*;

fn layout_config() -> impl Strategy<Value = LayoutConfig> {
    (1usize..7, 1usize..5, proptest::collection::vec(1usize..7, 0..3)).prop_map(|(num_cells, num_nodes, reds)| {
        let mut reductions: Vec<usize> = reds.into_iter().filter(|&r| r < num_cells).collect();
        reductions.sort_unstable();
        reductions.dedup();
        LayoutConfig {
            num_cells,
            num_nodes,
            reductions: Some(reductions),
            ..LayoutConfig::default()
        }
    })
}

#[test]
fn op_names_round_trip() {
    for i in 0..NUM_OPS {
        let op = OpKind::from_index(i).unwrap();
        assert_eq!(op.index(), i);
        assert_eq!(OpKind::from_name(op.name()), Some(op));
    }
    assert_eq!(OpKind::from_index(NUM_OPS), None);
}

proptest! {
    #[test]
    fn edge_count_matches_enumeration(n in 1usize..8, reduction in any::<bool>()) {
        // node i (0-based) reads both inputs and every earlier intermediate node
        let brute: usize = (0..n).map(|i| 2 + i).sum();
        let spec = build_cell_topology(n, reduction).unwrap();
        prop_assert_eq!(edge_count(n), brute);
        prop_assert_eq!(spec.num_edges(), brute);
    }

    #[test]
    fn genotype_text_round_trips(cfg in layout_config(), seed in any::<u64>()) {
        let layout = build_network_layout(&cfg).unwrap();
        let mut s = seed;
        let ops = layout
            .cells
            .iter()
            .map(|c| {
                (0..c.spec.num_edges())
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        OpKind::from_index((s >> 33) as usize % NUM_OPS).unwrap()
                    })
                    .collect()
            })
            .collect();
        let g = Genotype::from_ops(layout.fingerprint(), ops);
        let text = serialize(&g);
        let back = deserialize(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize(&back), text);
    }

    #[test]
    fn all_zero_cells_are_invalid(cfg in layout_config()) {
        let layout = build_network_layout(&cfg).unwrap();
        prop_assert!(validate_genotype(&Genotype::uniform(&layout, OpKind::Conv3x3), &layout).is_empty());
        prop_assert!(!validate_genotype(&Genotype::uniform(&layout, OpKind::Zero), &layout).is_empty());
    }
}
