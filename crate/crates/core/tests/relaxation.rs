use gas_core::relaxation::{gumbel_noise, gumbel_sample, op_probabilities, temperature, ScheduleShape, TemperatureSchedule};
use gas_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits(p: usize, q: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-20.0f64..20.0, p * q).prop_map(move |v| Tensor::new(&[p, q], v))
}

proptest! {
    #[test]
    fn samples_lie_on_the_simplex(
        (p, q) in (1usize..6, 2usize..9),
        seed in any::<u64>(),
        temp in 0.01f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Tensor::randn(&[p, q], 5.0, &mut rng);
        let noise = gumbel_noise(p, q, &mut rng);
        let z = gumbel_sample(&l, temp, &noise).unwrap().z;
        for i in 0..p {
            prop_assert!((z.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(z.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn probabilities_are_shift_invariant(l in logits(3, 8), shift in -50.0f64..50.0) {
        let a = op_probabilities(&l);
        let b = op_probabilities(&l.map(|v| v + shift));
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn temperature_is_monotone_and_bounded(
        initial in 0.05f64..5.0,
        ratio in 0.001f64..1.0,
        total in 1usize..500,
        exponential in any::<bool>(),
    ) {
        let s = TemperatureSchedule {
            initial,
            minimum: initial * ratio,
            total_steps: total,
            shape: if exponential { ScheduleShape::Exponential } else { ScheduleShape::Linear },
        };
        let ts: Vec<f64> = (0..=total).map(|t| temperature(t, &s).unwrap()).collect();
        prop_assert_eq!(ts[0], s.initial);
        prop_assert_eq!(ts[total], s.minimum);
        prop_assert!(ts.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(temperature(total + 1, &s).is_err());
    }
}
