mod common;

use audiokv::spectral::*;
use common::{close, naive_irfft, naive_rfft, oracle_sss, random_signal, rng};
use proptest::prelude::*;
use rustfft::num_complex::Complex64;

fn signal(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..=max_len)
}

#[test]
fn length_seven_matches_direct_sum() {
    let x = random_signal(&mut rng(7), 7);
    let fast = rfft(&x);
    let slow = naive_rfft(&x);
    for (a, b) in fast.bins.iter().zip(&slow) {
        assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
    }
}

#[test]
fn even_length_hermitian_extension_matches_direct_inverse() {
    let bins = vec![
        Complex64::new(3.0, 0.0),
        Complex64::new(0.5, -1.0),
        Complex64::new(-0.25, 0.75),
        Complex64::new(1.5, 0.0),
    ];
    let s = Spectrum {
        bins: bins.clone(),
        original_length: 6,
    };
    assert!(close(&irfft(&s, 6).unwrap(), &naive_irfft(&bins, 6), 1e-12));
}

#[test]
fn wrong_bin_count_is_rejected() {
    let s = Spectrum {
        bins: vec![Complex64::new(1.0, 0.0); 2],
        original_length: 6,
    };
    assert!(irfft(&s, 6).is_err());
}

#[test]
fn hard_cutoff_on_two_tone_signal_keeps_the_slow_tone() {
    let n = 64;
    let x: Vec<f64> = (0..n)
        .map(|t| {
            let t = t as f64 / n as f64;
            (2.0 * std::f64::consts::PI * t).sin() * 3.0
                + (2.0 * std::f64::consts::PI * 20.0 * t).sin()
        })
        .collect();
    let slow: Vec<f64> = (0..n)
        .map(|t| (2.0 * std::f64::consts::PI * t as f64 / n as f64).sin() * 3.0)
        .collect();
    let y = sss(&x, &SssConfig::hard(0.7, 1.0));
    assert!(close(&y, &slow, 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn forward_matches_direct_sum(x in signal(64)) {
        let fast = rfft(&x);
        let slow = naive_rfft(&x);
        prop_assert_eq!(fast.len(), x.len() / 2 + 1);
        prop_assert_eq!(fast.bins[0].im, 0.0);
        if x.len() % 2 == 0 {
            prop_assert_eq!(fast.bins[x.len() / 2].im, 0.0);
        }
        for (a, b) in fast.bins.iter().zip(&slow) {
            prop_assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
        }
    }

    #[test]
    fn inverse_matches_direct_sum(x in signal(64)) {
        let s = rfft(&x);
        let slow = naive_irfft(&s.bins, x.len());
        prop_assert!(close(&irfft(&s, x.len()).unwrap(), &slow, 1e-9));
    }

    #[test]
    fn round_trip(x in signal(256)) {
        prop_assert!(close(&irfft(&rfft(&x), x.len()).unwrap(), &x, 1e-9));
    }

    #[test]
    fn smoothing_matches_direct_pipeline(
        x in signal(96),
        ratio in 0.05f64..=1.0,
        alpha in 0.0f64..=1.0,
        transition in prop::option::of(0usize..6),
    ) {
        let cfg = SssConfig {
            cutoff_ratio: ratio,
            mix_alpha: alpha,
            transition: transition.map_or(Transition::Auto, Transition::Bins),
        };
        prop_assert!(close(&sss(&x, &cfg), &oracle_sss(&x, ratio, alpha, transition), 1e-9));
    }

    #[test]
    fn identity_limits(x in signal(128)) {
        prop_assert!(close(&sss(&x, &SssConfig::new(0.4, 0.0)), &x, 1e-9));
        prop_assert!(close(&sss(&x, &SssConfig::hard(1.0, 0.7)), &x, 1e-9));
    }

    #[test]
    fn cutoff_is_monotone_in_ratio(x in signal(64), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let s = rfft(&x);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(energy_cutoff(&s, lo) <= energy_cutoff(&s, hi));
        prop_assert!(energy_cutoff(&s, hi) < s.len());
    }

    #[test]
    fn mask_shape(cutoff in 0usize..40, len in 1usize..40, width in 0usize..8) {
        let m = build_mask(cutoff, len, width);
        prop_assert_eq!(m.weights.len(), len);
        prop_assert!(m.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        prop_assert!(m.weights[..=m.cutoff_index].iter().all(|&w| w == 1.0));
        prop_assert!(m.weights.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn constants_pass_through(c in -5.0f64..5.0, len in 1usize..200) {
        let x = vec![c; len];
        prop_assert!(close(&sss(&x, &SssConfig::default()), &x, 1e-9));
    }
}
