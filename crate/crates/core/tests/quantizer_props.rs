//! Property tests for the quantization primitives.

use dfq_core::quantizer::{fake_quantize, quantize, scale_for, RangeTracker};
use ndarray::ArrayD;
use proptest::prelude::*;

fn arr(vals: &[f64]) -> ArrayD<f64> {
    ndarray::Array1::from(vals.to_vec()).into_dyn()
}

proptest! {
    #[test]
    fn ints_stay_in_signed_range(
        xs in prop::collection::vec(-100.0f64..100.0, 1..32),
        alpha in 0.01f64..50.0,
        bits in 2u32..=16,
    ) {
        let q = quantize(&arr(&xs), alpha, bits).unwrap();
        let lo = -(1i64 << (bits - 1)) as i32;
        let hi = ((1i64 << (bits - 1)) - 1) as i32;
        for &v in q.ints.iter() {
            prop_assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn fake_quant_is_idempotent(
        xs in prop::collection::vec(-10.0f64..10.0, 1..32),
        alpha in 0.01f64..10.0,
        bits in 2u32..=12,
    ) {
        let once = fake_quantize(&arr(&xs), alpha, bits).unwrap();
        let twice = fake_quantize(&once, alpha, bits).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rounding_error_bounded_inside_range(
        x in -1.0f64..1.0,
        alpha in 1.0f64..4.0,
        bits in 2u32..=12,
    ) {
        // |x| <= alpha here, so the clamp is inactive.
        let s = scale_for(alpha, bits);
        let q = fake_quantize(&arr(&[x]), alpha, bits).unwrap();
        prop_assert!((q[[0]] - x).abs() <= s / 2.0 + 1e-12);
    }

    #[test]
    fn quantization_is_monotone(
        mut xs in prop::collection::vec(-20.0f64..20.0, 2..32),
        alpha in 0.01f64..10.0,
        bits in 2u32..=12,
    ) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = fake_quantize(&arr(&xs), alpha, bits).unwrap();
        for w in q.as_slice().unwrap().windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn symmetric_inside_range(
        x in -1.0f64..1.0,
        alpha in 1.0f64..4.0,
        bits in 2u32..=12,
    ) {
        let p = fake_quantize(&arr(&[x]), alpha, bits).unwrap();
        let n = fake_quantize(&arr(&[-x]), alpha, bits).unwrap();
        prop_assert!((p[[0]] + n[[0]]).abs() < 1e-12);
    }

    #[test]
    fn tracker_stays_within_observed_extremes(
        maxima in prop::collection::vec(0.1f64..50.0, 1..16),
        momentum in 0.01f64..1.0,
    ) {
        let mut t = RangeTracker::new(momentum);
        for &m in &maxima {
            t.observe(&arr(&[m, -m / 2.0])).unwrap();
        }
        let lo = maxima.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = maxima.iter().cloned().fold(0.0f64, f64::max);
        prop_assert!(t.alpha() >= lo - 1e-9 && t.alpha() <= hi + 1e-9);
    }
}
