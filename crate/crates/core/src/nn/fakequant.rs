//! Fake-quantized model wrapper: low-bit weights and activations
//! simulated in floating point, with frozen BN running statistics.

use crate::error::{DfqError, Result};
use crate::nn::layers::BnMode;
use crate::nn::model::{Layer, ModelCache, ModelGraph, ParamView, QuantPass};
use crate::quantizer::{QuantConfig, RangeTracker};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct FakeQuantModel<F: Scalar> {
    pub base: ModelGraph<F>,
    pub cfg: QuantConfig,
    /// Weight clip range per weight-bearing layer (global layer index),
    /// fixed at quantization time from max |w|.
    pub weight_alphas: BTreeMap<usize, f64>,
    /// Activation range trackers per activation layer (global index).
    pub trackers: BTreeMap<usize, RangeTracker>,
}

/// Wrap a trained model for fake-quantized execution. Weight scales are
/// frozen from the current weights; activation trackers start unfrozen
/// and must observe synthetic batches before evaluation.
pub fn quantize_model<F: Scalar>(m: &ModelGraph<F>, cfg: QuantConfig) -> Result<FakeQuantModel<F>> {
    cfg.validate()?;
    let mut weight_alphas = BTreeMap::new();
    let mut trackers = BTreeMap::new();
    let mut idx = 0usize;
    let mut visit = |l: &Layer<F>, idx: &mut usize| -> Result<()> {
        match l {
            Layer::Conv(c) => {
                weight_alphas.insert(*idx, max_abs(&c.w)?);
            }
            Layer::Linear(lin) => {
                weight_alphas.insert(*idx, max_abs(&lin.w)?);
            }
            Layer::Relu => {
                trackers.insert(*idx, RangeTracker::new(cfg.range_momentum));
            }
            _ => {}
        }
        *idx += 1;
        Ok(())
    };
    for b in &m.blocks {
        match b {
            crate::nn::model::Block::Plain(l) => visit(l, &mut idx)?,
            crate::nn::model::Block::Residual(ls) => {
                for l in ls {
                    visit(l, &mut idx)?;
                }
            }
        }
    }
    Ok(FakeQuantModel {
        base: m.clone(),
        cfg,
        weight_alphas,
        trackers,
    })
}

fn max_abs<F: Scalar>(w: &ArrayD<F>) -> Result<f64> {
    let mut m = 0.0f64;
    for v in w.iter() {
        if !v.is_finite() {
            return Err(DfqError::NonFiniteInput);
        }
        m = m.max(v.abs().to_real());
    }
    if m <= 0.0 {
        return Err(DfqError::InvalidRange(m));
    }
    Ok(m)
}

impl<F: Scalar> FakeQuantModel<F> {
    /// Forward with fake quantization. `observe` lets the activation
    /// trackers update from this batch (training time); evaluation
    /// passes `false` and uses the current (typically frozen) ranges.
    pub fn forward(
        &mut self,
        x: &ArrayD<F>,
        observe: bool,
    ) -> Result<(ArrayD<F>, ModelCache<F>)> {
        let mut pass = QuantPass {
            weight_bits: self.cfg.weight_bits,
            act_bits: self.cfg.act_bits,
            weight_alphas: &self.weight_alphas,
            trackers: &mut self.trackers,
            observe,
        };
        // BN always runs on the frozen running statistics.
        self.base.forward_full(x, BnMode::Eval, false, Some(&mut pass))
    }

    pub fn backward(&mut self, cache: &ModelCache<F>, d_logits: &ArrayD<F>) -> ArrayD<F> {
        self.base.backward(cache, d_logits, None)
    }

    pub fn zero_grads(&mut self) {
        self.base.zero_grads();
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<F>)) {
        self.base.visit_params(f);
    }

    pub fn freeze_ranges(&mut self) -> Result<()> {
        for t in self.trackers.values_mut() {
            if !t.frozen {
                t.freeze()?;
            }
        }
        Ok(())
    }

    /// Hash of the BN running statistics only, for freeze checks.
    pub fn bn_state_hash(&mut self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.base.visit_state(&mut |s| {
            for v in s.value.iter() {
                hasher.update(v.to_real().to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}
