//! Property tests for the probability-math identities and the bit-level
//! determinism guarantees.

use proptest::collection::vec;
use proptest::prelude::*;

use dih_core::distill::{
    self, argmax_class, cross_entropy, dih_loss, ensemble_average, entropy, kd_loss,
    kl_divergence, softmax_t, student_dih_loss, student_loss, BlendWeight, Distribution,
    Temperature,
};
use dih_core::net::{Activation, Network};
use dih_core::tape::Tape;
use dih_core::tensor::{self, Tensor};

const TAU_SWEEP: [f64; 5] = [1.0, 2.0, 4.0, 5.0, 8.0];

fn dist_strategy(classes: usize) -> impl Strategy<Value = Distribution> {
    vec(1e-3..1.0f64, classes).prop_map(|raw| {
        let sum: f64 = raw.iter().sum();
        Distribution::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
    })
}

fn logits_strategy(classes: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-30.0..30.0f64, classes)
}

proptest! {
    #[test]
    fn cross_entropy_decomposes_into_kl_plus_entropy(
        p in dist_strategy(6),
        q in dist_strategy(6),
    ) {
        let ce = cross_entropy(&p, &q);
        let decomposed = kl_divergence(&p, &q) + entropy(&p);
        prop_assert!((ce - decomposed).abs() < 1e-10, "{ce} vs {decomposed}");
    }

    #[test]
    fn softened_entropy_is_monotone_in_temperature(z in logits_strategy(5)) {
        let mut previous = f64::NEG_INFINITY;
        for &t in &TAU_SWEEP {
            let h = entropy(&softmax_t(&z, Temperature::new(t).unwrap()).unwrap());
            prop_assert!(h >= previous - 1e-12, "entropy dropped: {previous} -> {h} at tau {t}");
            previous = h;
        }
    }

    #[test]
    fn argmax_is_invariant_under_temperature(z in logits_strategy(7)) {
        let reference = argmax_class(&softmax_t(&z, Temperature::new(1.0).unwrap()).unwrap());
        for &t in &TAU_SWEEP {
            let a = argmax_class(&softmax_t(&z, Temperature::new(t).unwrap()).unwrap());
            prop_assert_eq!(a, reference, "argmax moved at tau {}", t);
        }
    }

    #[test]
    fn softmax_outputs_are_normalized_distributions(
        z in logits_strategy(8),
        t in 1.0..10.0f64,
    ) {
        let d = softmax_t(&z, Temperature::new(t).unwrap()).unwrap();
        let sum: f64 = d.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(d.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn exp_log_softmax_rows_normalize_tightly(z in vec(-1e3..1e3f64, 4)) {
        let mut out = vec![0.0; 4];
        tensor::log_softmax(&z, &mut out, 1, 4);
        let sum: f64 = out.iter().map(|v| v.exp()).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
    }

    #[test]
    fn singleton_cohort_losses_reduce_bitwise(
        teacher in logits_strategy(5),
        student in logits_strategy(5),
        label in 0usize..5,
        a in 0.0..=1.0f64,
        t in 1.0..9.0f64,
    ) {
        let tau = Temperature::new(t).unwrap();
        let alpha = BlendWeight::new(a).unwrap();

        let single = dih_loss(std::slice::from_ref(&teacher), &student, tau).unwrap();
        let kd = kd_loss(&teacher, &student, tau).unwrap();
        prop_assert_eq!(single.to_bits(), kd.to_bits());

        let cohort_student =
            student_dih_loss(std::slice::from_ref(&teacher), &student, label, alpha, tau).unwrap();
        let plain_student = student_loss(&teacher, &student, label, alpha, tau).unwrap();
        prop_assert_eq!(cohort_student.to_bits(), plain_student.to_bits());
    }

    #[test]
    fn ensemble_average_entropy_at_least_min_member(
        a in dist_strategy(5),
        b in dist_strategy(5),
        c in dist_strategy(5),
    ) {
        let members = [a, b, c];
        let mean = ensemble_average(&members).unwrap();
        let min_h = members.iter().map(entropy).fold(f64::INFINITY, f64::min);
        prop_assert!(entropy(&mean) >= min_h - 1e-12);
    }

    #[test]
    fn parallel_matmul_is_bit_identical_to_sequential(
        m in 1usize..40,
        k in 1usize..40,
        n in 1usize..40,
        seed in 0.0..100.0f64,
    ) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.61 + seed).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.37 - seed).cos()).collect();
        let mut seq = vec![0.0; m * n];
        let mut dispatched = vec![0.0; m * n];
        tensor::matmul_seq(&a, &b, &mut seq, m, k, n);
        tensor::matmul(&a, &b, &mut dispatched, m, k, n);
        for (x, y) in seq.iter().zip(dispatched.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tape_forward_equals_direct_forward(
        seed in 0u64..500,
        rows in 1usize..6,
    ) {
        let net = Network::from_dims(3, &[4, 4], 3, Activation::Relu, true, vec![0, 1])
            .unwrap()
            .init_params(seed);
        let x = Tensor::from_vec(
            vec![rows, 3],
            (0..rows * 3).map(|i| ((i as f64) * 0.21 + seed as f64).sin()).collect(),
        )
        .unwrap();

        let direct = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let x_id = tape.constant(&x);
        let (logits, _, _) = net.forward_on_tape(&mut tape, x_id, false).unwrap();
        for (a, b) in direct.values().iter().zip(tape.values(logits).iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn distribution_outputs_of_ensemble_are_valid(
        dists in vec(dist_strategy(4), 1..6),
    ) {
        let mean = ensemble_average(&dists).unwrap();
        let sum: f64 = mean.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_scales_with_squared_temperature(
        teacher in logits_strategy(4),
        student in logits_strategy(4),
        t in 1.0..9.0f64,
    ) {
        let tau = Temperature::new(t).unwrap();
        let loss = kd_loss(&teacher, &student, tau).unwrap();
        let inner = cross_entropy(
            &softmax_t(&teacher, tau).unwrap(),
            &softmax_t(&student, tau).unwrap(),
        );
        prop_assert!((loss - t * t * inner).abs() < 1e-9 * loss.abs().max(1.0));
    }
}

#[test]
fn entropy_bounds_hold_for_distributions() {
    // Deterministic spot check of the [0, ln C] envelope used by the
    // analysis tables.
    for c in 2..8 {
        let u = distill::Distribution::uniform(c);
        assert!((entropy(&u) - (c as f64).ln()).abs() < 1e-12);
        let onehot = distill::Distribution::one_hot(0, c).unwrap();
        assert_eq!(entropy(&onehot), 0.0);
    }
}
