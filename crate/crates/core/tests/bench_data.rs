use gas_core::bench::*;
use proptest::prelude::*;

fn train_only(seed: u64, n: usize) -> DatasetConfig {
    DatasetConfig {
        seed,
        search_train: n,
        search_val: 0,
        finetune: 0,
        test: 0,
        ..Default::default()
    }
}

#[test]
fn class_frequencies_within_documented_bounds() {
    let ((bg_lo, bg_hi), (fg_lo, fg_hi)) = THREE_CLASS_FREQUENCY_BOUNDS;
    for seed in 0..6 {
        let d = make_toy_dataset(&train_only(seed, 200), 8).unwrap();
        let f = class_frequencies(d.split(Split::SearchTrain), 3);
        assert!((bg_lo..=bg_hi).contains(&f[0]), "seed {seed}: {f:?}");
        for &c in &f[1..] {
            assert!((fg_lo..=fg_hi).contains(&c), "seed {seed}: {f:?}");
        }
    }
}

#[test]
fn miou_permutation_invariant() {
    let d = make_toy_dataset(&train_only(1, 4), 8).unwrap();
    let truth: Vec<u8> = d.split(Split::SearchTrain).iter().flat_map(|s| s.mask.clone()).collect();
    let pred: Vec<u8> = truth.iter().map(|&t| (t + 1) % 3).rev().collect();
    let mut a = Confusion::new(3);
    a.accumulate(&truth, &pred).unwrap();
    let mut perm: Vec<usize> = (0..truth.len()).collect();
    perm.reverse();
    perm.rotate_left(37);
    let mut b = Confusion::new(3);
    let pt: Vec<u8> = perm.iter().map(|&i| truth[i]).collect();
    let pp: Vec<u8> = perm.iter().map(|&i| pred[i]).collect();
    b.accumulate(&pt, &pp).unwrap();
    assert_eq!(miou(&a).unwrap(), miou(&b).unwrap());
}

proptest! {
    #[test]
    fn miou_bounded_and_totals_match(
        truth in proptest::collection::vec(prop_oneof![0u8..4, Just(255u8)], 1..300),
        seed in any::<u64>(),
    ) {
        let pred: Vec<u8> = truth
            .iter()
            .enumerate()
            .map(|(i, _)| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) % 4) as u8)
            .collect();
        let mut c = Confusion::new(4);
        c.accumulate(&truth, &pred).unwrap();
        let valid = truth.iter().filter(|&&t| t != 255).count() as u64;
        prop_assert_eq!(c.total(), valid);
        if valid > 0 {
            let (_, m) = miou(&c).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn augmentation_keeps_label_alphabet(seed in any::<u64>(), idx in 0usize..4) {
        use rand::SeedableRng;
        let d = make_toy_dataset(&train_only(7, 4), 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&d.split(Split::SearchTrain)[idx], &mut rng);
        prop_assert!(a.mask.iter().all(|&m| m < 3 || m == 255));
    }
}
