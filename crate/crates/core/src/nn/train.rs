//! Supervised teacher training on a labeled dataset.

use crate::data::LabeledDataset;
use crate::error::{DfqError, Result};
use crate::losses;
use crate::nn::layers::BnMode;
use crate::nn::model::ModelGraph;
use crate::nn::optim::RmsProp;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherSchedule {
    fn default() -> Self {
        TeacherSchedule {
            epochs: 12,
            batch_size: 40,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Train a classifier with cross-entropy; BN layers run in train mode
/// and populate their running statistics. Deterministic given the seed.
/// Returns the mean training loss per epoch.
pub fn train_teacher<F: Scalar>(
    model: &mut ModelGraph<F>,
    data: &LabeledDataset<F>,
    schedule: &TeacherSchedule,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(DfqError::EmptyDataset);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(schedule.seed);
    let mut opt = RmsProp::<F>::new(schedule.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    let mut step = 0usize;
    for _epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch(chunk);
            let (logits, cache) = model.forward(&x, BnMode::Train)?;
            let loss = losses::ce_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(DfqError::TrainingDiverged { step });
            }
            acc += loss.to_real();
            batches += 1;
            let d_logits = losses::ce_backward(&logits, &labels)?;
            model.zero_grads();
            model.backward(&cache, &d_logits, None);
            let mut i = 0usize;
            model.visit_params(&mut |p| {
                opt.update(i, p.value, p.grad);
                i += 1;
            });
            step += 1;
        }
        epoch_losses.push(acc / batches.max(1) as f64);
    }
    Ok(epoch_losses)
}

/// Top-1 accuracy of a plain model on a dataset (eval-mode BN).
pub fn accuracy<F: Scalar>(model: &mut ModelGraph<F>, data: &LabeledDataset<F>) -> Result<f64> {
    if data.is_empty() {
        return Err(DfqError::EmptyDataset);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let (x, labels) = data.batch(chunk);
        let (logits, _) = model.forward(&x, BnMode::Eval)?;
        let mask = crate::stats::correct_mask(&logits, &labels)?;
        correct += mask.iter().filter(|&&m| m).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
