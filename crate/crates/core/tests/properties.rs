use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchguide::checkpoint::{tensor_from_bytes, tensor_to_bytes};
use sketchguide::interpolate::{latent_angle, slerp};
use sketchguide::sampler::ddim_step;
use sketchguide::schedule::NoiseSchedule;
use sketchguide::TensorF64;

fn vector(seed: u64, len: usize) -> TensorF64 {
    TensorF64::randn(vec![len], &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #[test]
    fn slerp_keeps_equal_norms(seed in 0u64..1000, len in 2usize..64, alpha in 0.0f64..=1.0) {
        let a = vector(seed, len);
        let b = vector(seed + 7919, len);
        let b = b.scale(a.norm() / b.norm());
        let z = slerp(&a, &b, alpha).unwrap();
        prop_assert!((z.norm() - a.norm()).abs() <= 1e-9 * a.norm().max(1.0));
    }

    #[test]
    fn slerp_angle_is_linear_in_alpha(seed in 0u64..1000, alpha in 0.0f64..=1.0) {
        let a = vector(seed, 16);
        let b = vector(seed + 1, 16);
        let b = b.scale(a.norm() / b.norm());
        let theta = latent_angle(&a, &b).unwrap();
        let z = slerp(&a, &b, alpha).unwrap();
        prop_assert!((latent_angle(&a, &z).unwrap() - alpha * theta).abs() < 1e-7);
    }

    #[test]
    fn exact_noise_step_lands_on_forward_marginal(seed in 0u64..10_000, t in 1usize..=200, frac in 0.0f64..1.0) {
        let sched = NoiseSchedule::standard();
        let t_prev = ((t as f64) * frac) as usize;
        let x0 = vector(seed, 8);
        let eps = vector(seed + 3, 8);
        let x_t = sched.q_sample(&x0, t, &eps).unwrap();
        let stepped = ddim_step(&x_t, t, t_prev, &eps, &sched, 0.0, None).unwrap();
        let want = sched.q_sample(&x0, t_prev, &eps).unwrap();
        prop_assert!(stepped.sub(&want).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn tensor_bytes_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), note in "[a-z0-9 ]{0,16}") {
        let t = TensorF64::new(vec![values.len()], values).unwrap();
        let (back, n) = tensor_from_bytes(&tensor_to_bytes(&t, &note)).unwrap();
        prop_assert_eq!(back, t);
        prop_assert_eq!(n, note);
    }
}
