//! Symmetric uniform quantization with a fake-quantize operator for
//! gradient-based fine-tuning.
//!
//! A real value `x` is mapped to an integer `round(x / S)` with
//! `S = 2a / (2^N - 1)` for clip range `[-a, a]` and bit width `N`, then
//! clamped to the signed `N`-bit range. Rounding ties go away from zero.

use crate::error::{DfqError, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Quantization settings for a whole model: weight and activation bit
/// widths plus the momentum used by activation range tracking.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// EMA momentum for activation range tracking, in `[0, 1]`.
    pub range_momentum: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: 4,
            act_bits: 4,
            range_momentum: 0.1,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.act_bits)?;
        if !(0.0..=1.0).contains(&self.range_momentum) {
            return Err(DfqError::InvalidConfig(format!(
                "range_momentum must be in [0, 1], got {}",
                self.range_momentum
            )));
        }
        Ok(())
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(DfqError::InvalidBits(bits));
    }
    Ok(())
}

/// Integer payload together with the scale it was quantized at.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<F: Scalar> {
    pub ints: ArrayD<i32>,
    pub scale: F,
    pub clip: F,
    pub bits: u32,
}

impl<F: Scalar> QuantizedTensor<F> {
    pub fn int_min(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn int_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

/// Scale factor `S = 2a / (2^N - 1)`.
pub fn scale_for<F: Scalar>(alpha: F, bits: u32) -> F {
    let levels = F::from_real(((1u64 << bits) - 1) as f64);
    (alpha + alpha) / levels
}

/// Round half away from zero.
fn round_half_away<F: Scalar>(x: F) -> F {
    // `Float::round` rounds half away from zero already.
    x.round()
}

pub fn quantize<F: Scalar>(x: &ArrayD<F>, alpha: F, bits: u32) -> Result<QuantizedTensor<F>> {
    if alpha <= F::zero() {
        return Err(DfqError::InvalidRange(alpha.to_real()));
    }
    check_bits(bits)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DfqError::NonFiniteInput);
    }
    let scale = scale_for(alpha, bits);
    let lo = -(1i32 << (bits - 1));
    let hi = (1i32 << (bits - 1)) - 1;
    let ints = x.mapv(|v| {
        let q = round_half_away(v / scale).to_real() as i64;
        q.clamp(lo as i64, hi as i64) as i32
    });
    Ok(QuantizedTensor {
        ints,
        scale,
        clip: alpha,
        bits,
    })
}

pub fn dequantize<F: Scalar>(q: &QuantizedTensor<F>) -> ArrayD<F> {
    let scale = q.scale;
    q.ints.mapv(|v| F::from_real(v as f64) * scale)
}

/// Quantize-then-dequantize, simulating low-bit arithmetic in floating
/// point. The value path is the exact composition of [`quantize`] and
/// [`dequantize`]; the gradient contract (straight-through estimator) is
/// exposed via [`ste_mask`].
pub fn fake_quantize<F: Scalar>(x: &ArrayD<F>, alpha: F, bits: u32) -> Result<ArrayD<F>> {
    let q = quantize(x, alpha, bits)?;
    Ok(dequantize(&q))
}

/// Straight-through estimator mask: 1 inside `[-a, a]`, 0 outside.
/// Multiply the downstream gradient by this elementwise.
pub fn ste_mask<F: Scalar>(x: &ArrayD<F>, alpha: F) -> ArrayD<F> {
    x.mapv(|v| if v.abs() <= alpha { F::one() } else { F::zero() })
}

/// EMA tracker for activation clip ranges, driven by synthetic batches
/// only. First observation initializes `running_max`; later observations
/// blend with momentum. Once frozen the range is fixed for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RangeTracker {
    pub running_max: f64,
    pub momentum: f64,
    pub frozen: bool,
    initialized: bool,
}

impl RangeTracker {
    pub fn new(momentum: f64) -> Self {
        RangeTracker {
            running_max: 0.0,
            momentum,
            frozen: false,
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn observe<F: Scalar>(&mut self, x: &ArrayD<F>) -> Result<()> {
        if self.frozen {
            return Err(DfqError::FrozenTracker);
        }
        let batch_max = x
            .iter()
            .map(|v| v.abs().to_real())
            .fold(0.0f64, f64::max);
        if self.initialized {
            self.running_max =
                (1.0 - self.momentum) * self.running_max + self.momentum * batch_max;
        } else {
            self.running_max = batch_max;
            self.initialized = true;
        }
        Ok(())
    }

    pub fn freeze(&mut self) -> Result<()> {
        if !self.initialized || self.running_max <= 0.0 {
            return Err(DfqError::UninitializedTracker);
        }
        self.frozen = true;
        Ok(())
    }

    /// Current clip range `a = running_max`.
    pub fn alpha(&self) -> f64 {
        self.running_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn arr(xs: &[f64]) -> ArrayD<f64> {
        arr1(xs).into_dyn()
    }

    #[test]
    fn zero_maps_to_zero() {
        let q = quantize(&arr(&[0.0]), 2.0, 4).unwrap();
        assert_eq!(q.ints.as_slice().unwrap(), &[0]);
    }

    #[test]
    fn hand_example_n4() {
        // S = 4/15; round(7.5) = 8 clamps to 7.
        let q = quantize(&arr(&[-2.0, 1.0, 2.0]), 2.0, 4).unwrap();
        assert_eq!(q.ints.as_slice().unwrap(), &[-8, 4, 7]);
        assert!((q.scale - 4.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn clip_edge_clamps_n8() {
        let q = quantize(&arr(&[1.0]), 1.0, 8).unwrap();
        assert_eq!(q.ints.as_slice().unwrap(), &[127]);
    }

    #[test]
    fn dequantize_hand_values() {
        let q = QuantizedTensor {
            ints: arr1(&[-8, 4, 7]).into_dyn(),
            scale: 4.0 / 15.0,
            clip: 2.0,
            bits: 4,
        };
        let d = dequantize(&q);
        let expect = [-2.1333f64, 1.0667, 1.8667];
        for (got, want) in d.iter().zip(expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn roundtrip_error_bounded_by_half_scale() {
        let q = quantize(&arr(&[0.1]), 2.0, 4).unwrap();
        let d = dequantize(&q);
        assert_eq!(d[[0]], 0.0);
        assert!((0.1f64 - d[[0]]).abs() <= q.scale / 2.0);
    }

    #[test]
    fn fake_quantize_grid_fixed_point() {
        let alpha = 2.0;
        let bits = 4;
        let s = scale_for(alpha, bits);
        for k in -7i32..=7 {
            let x = arr(&[k as f64 * s]);
            let fq = fake_quantize(&x, alpha, bits).unwrap();
            assert_eq!(fq[[0]], x[[0]]);
        }
    }

    #[test]
    fn fake_quantize_idempotent() {
        let x = arr(&[-3.0, -0.7, 0.02, 0.9, 1.44, 5.0]);
        let once = fake_quantize(&x, 2.0, 4).unwrap();
        let twice = fake_quantize(&once, 2.0, 4).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn fake_quantize_hand_value() {
        let fq = fake_quantize(&arr(&[1.0]), 2.0, 4).unwrap();
        assert!((fq[[0]] - 1.0667).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            quantize(&arr(&[1.0]), -1.0, 4),
            Err(DfqError::InvalidRange(_))
        ));
        assert!(matches!(
            quantize(&arr(&[1.0]), 1.0, 1),
            Err(DfqError::InvalidBits(1))
        ));
        assert!(matches!(
            quantize(&arr(&[f64::NAN]), 1.0, 4),
            Err(DfqError::NonFiniteInput)
        ));
    }

    #[test]
    fn tracker_first_observation_initializes() {
        let mut t = RangeTracker::new(0.1);
        t.observe(&arr(&[-3.0, 1.0])).unwrap();
        assert_eq!(t.running_max, 3.0);
    }

    #[test]
    fn tracker_zero_momentum_keeps_value() {
        let mut t = RangeTracker::new(0.0);
        t.observe(&arr(&[3.0])).unwrap();
        t.observe(&arr(&[100.0])).unwrap();
        assert_eq!(t.running_max, 3.0);
    }

    #[test]
    fn tracker_ema_blend() {
        let mut t = RangeTracker::new(0.1);
        t.observe(&arr(&[3.0])).unwrap();
        t.observe(&arr(&[5.0])).unwrap();
        assert!((t.running_max - 3.2).abs() < 1e-12);
    }

    #[test]
    fn tracker_freeze_contract() {
        let mut t = RangeTracker::new(0.1);
        assert!(t.freeze().is_err());
        t.observe(&arr(&[3.0])).unwrap();
        t.freeze().unwrap();
        assert!(matches!(t.observe(&arr(&[9.0])), Err(DfqError::FrozenTracker)));
        assert_eq!(t.alpha(), 3.0);
    }

    #[test]
    fn scale_identity() {
        for bits in [2u32, 4, 8, 16] {
            let alpha = 1.7f64;
            let s = scale_for(alpha, bits);
            let levels = ((1u64 << bits) - 1) as f64;
            assert!((s * levels - 2.0 * alpha).abs() <= f64::EPSILON * 4.0 * alpha);
        }
    }
}
