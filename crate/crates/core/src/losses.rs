//! Training objectives: cross-entropy, global BN-statistic matching,
//! feature-distribution alignment, diversity enhancement, knowledge
//! distillation, and their weighted composites.
//!
//! Every loss returns its value together with the gradients needed to
//! continue backpropagation (logit-space or statistic-space); the
//! statistic-space gradients are pushed onto feature taps by
//! [`crate::stats::class_stats_backward`].

use crate::error::{DfqError, Result};
use crate::scalar::Scalar;
use crate::stats::{CentroidBank, ClassBatchStats};
use ndarray::{Array1, Array2, ArrayD, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Trade-off weights of the composite objectives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.1,
            alpha2: 0.9,
            alpha3: 0.6,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("gamma", self.gamma),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(DfqError::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Diversity-enhancement perturbation scales.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DEConfig {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub noise_seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        DEConfig {
            lambda_mu: 0.3,
            lambda_sigma: 0.15,
            noise_seed: 0,
        }
    }
}

fn as2<'a, F: Scalar>(x: &'a ArrayD<F>, what: &str) -> Result<ndarray::ArrayView2<'a, F>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| DfqError::ShapeMismatch(format!("{what} must be 2-D")))
}

/// Row-wise stable softmax.
pub fn softmax<F: Scalar>(logits: &ArrayD<F>) -> Result<Array2<F>> {
    let l = as2(logits, "logits")?;
    let (n, k) = l.dim();
    let mut out = Array2::<F>::zeros((n, k));
    for i in 0..n {
        let row = l.row(i);
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for j in 0..k {
            let e = (row[j] - mx).exp();
            out[[i, j]] = e;
            denom += e;
        }
        for j in 0..k {
            out[[i, j]] /= denom;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of the labels.
pub fn ce_loss<F: Scalar>(logits: &ArrayD<F>, labels: &[usize]) -> Result<F> {
    let l = as2(logits, "logits")?;
    let (n, k) = l.dim();
    if n == 0 {
        return Err(DfqError::EmptyDataset);
    }
    if n != labels.len() {
        return Err(DfqError::ShapeMismatch(
            "logit rows and label count differ".into(),
        ));
    }
    let p = softmax(logits)?;
    let mut acc = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(DfqError::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
        acc -= p[[i, y]].max(F::from_real(1e-300)).ln();
    }
    Ok(acc / F::from_count(n))
}

/// d ce_loss / d logits.
pub fn ce_backward<F: Scalar>(logits: &ArrayD<F>, labels: &[usize]) -> Result<ArrayD<F>> {
    let p = softmax(logits)?;
    let n = labels.len();
    let nf = F::from_count(n);
    let mut d = p;
    for (i, &y) in labels.iter().enumerate() {
        d[[i, y]] -= F::one();
    }
    d /= nf;
    Ok(d.into_dyn())
}

/// Mean KL(teacher || student) at temperature 1.
pub fn kd_loss<F: Scalar>(student_logits: &ArrayD<F>, teacher_logits: &ArrayD<F>) -> Result<F> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(DfqError::ShapeMismatch(
            "student and teacher logits differ in shape".into(),
        ));
    }
    let ps = softmax(student_logits)?;
    let pt = softmax(teacher_logits)?;
    let (n, k) = ps.dim();
    let mut acc = F::zero();
    let floor = F::from_real(1e-300);
    for i in 0..n {
        for j in 0..k {
            let t = pt[[i, j]];
            if t > F::zero() {
                acc += t * (t.max(floor).ln() - ps[[i, j]].max(floor).ln());
            }
        }
    }
    Ok(acc / F::from_count(n))
}

/// d kd_loss / d student_logits.
pub fn kd_backward_student<F: Scalar>(
    student_logits: &ArrayD<F>,
    teacher_logits: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    let ps = softmax(student_logits)?;
    let pt = softmax(teacher_logits)?;
    let n = ps.nrows();
    let nf = F::from_count(n);
    let mut d = &ps - &pt;
    d /= nf;
    Ok(d.into_dyn())
}

/// Squared-L2 statistic matching against stored running stats, summed
/// over layers, class-agnostic. Returns the value and the gradients
/// with respect to each layer's batch (mean, std).
#[allow(clippy::type_complexity)]
pub fn bns_loss<F: Scalar>(
    batch_stats: &[(Array1<F>, Array1<F>)],
    targets: &[(Array1<F>, Array1<F>)],
) -> Result<(F, Vec<(Array1<F>, Array1<F>)>)> {
    if batch_stats.len() != targets.len() {
        return Err(DfqError::ShapeMismatch(format!(
            "bns: {} batch stat layers vs {} target layers",
            batch_stats.len(),
            targets.len()
        )));
    }
    let two = F::from_real(2.0);
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(batch_stats.len());
    for ((bm, bs), (tm, ts)) in batch_stats.iter().zip(targets) {
        if bm.len() != tm.len() {
            return Err(DfqError::ShapeMismatch(
                "bns: channel count mismatch".into(),
            ));
        }
        let dm = bm - tm;
        let ds = bs - ts;
        value += dm.iter().map(|v| *v * *v).sum::<F>();
        value += ds.iter().map(|v| *v * *v).sum::<F>();
        grads.push((dm.mapv(|v| two * v), ds.mapv(|v| two * v)));
    }
    Ok((value, grads))
}

pub type StatGrads<F> = BTreeMap<(usize, usize), (Array1<F>, Array1<F>)>;

/// Euclidean alignment of class batch statistics to their centroids,
/// over entries present in `stats` and initialized in `bank`.
pub fn fda_loss<F: Scalar>(
    stats: &ClassBatchStats<F>,
    bank: &CentroidBank<F>,
) -> (F, StatGrads<F>) {
    let two = F::from_real(2.0);
    let mut value = F::zero();
    let mut grads = StatGrads::new();
    for (&key, e) in &stats.entries {
        if key.0 < bank.l_st {
            continue;
        }
        let Some(c) = bank.entries.get(&key) else {
            continue;
        };
        let dm = &e.mean - &c.mean;
        let ds = &e.std - &c.std;
        value += dm.iter().map(|v| *v * *v).sum::<F>();
        value += ds.iter().map(|v| *v * *v).sum::<F>();
        grads.insert(key, (dm.mapv(|v| two * v), ds.mapv(|v| two * v)));
    }
    (value, grads)
}

/// FDA against centroids perturbed by elementwise Gaussian noise,
/// deterministic given the noise seed and step counter.
pub fn de_loss<F: Scalar>(
    stats: &ClassBatchStats<F>,
    bank: &CentroidBank<F>,
    cfg: &DEConfig,
    step: u64,
) -> (F, StatGrads<F>) {
    let mut rng =
        ChaCha20Rng::seed_from_u64(cfg.noise_seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let two = F::from_real(2.0);
    let mut value = F::zero();
    let mut grads = StatGrads::new();
    for (&key, e) in &stats.entries {
        if key.0 < bank.l_st {
            continue;
        }
        let Some(c) = bank.entries.get(&key) else {
            continue;
        };
        let mut dm = Array1::<F>::zeros(e.mean.len());
        let mut ds = Array1::<F>::zeros(e.std.len());
        for i in 0..dm.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let target = c.mean[i] + F::from_real(z * cfg.lambda_mu);
            dm[i] = e.mean[i] - target;
        }
        for i in 0..ds.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let target = c.std[i] + F::from_real(z * cfg.lambda_sigma);
            ds[i] = e.std[i] - target;
        }
        value += dm.iter().map(|v| *v * *v).sum::<F>();
        value += ds.iter().map(|v| *v * *v).sum::<F>();
        grads.insert(key, (dm.mapv(|v| two * v), ds.mapv(|v| two * v)));
    }
    (value, grads)
}

/// Warm-up generator objective: `CE + alpha1 * BNS`.
pub fn generator_objective_warmup<F: Scalar>(ce: F, bns: F, alpha1: f64) -> F {
    ce + F::from_real(alpha1) * bns
}

/// Full generator objective: warm-up objective plus alignment terms.
pub fn generator_objective_full<F: Scalar>(
    ce: F,
    bns: F,
    fda: F,
    de: F,
    w: &LossWeights,
) -> F {
    generator_objective_warmup(ce, bns, w.alpha1)
        + F::from_real(w.alpha2) * fda
        + F::from_real(w.alpha3) * de
}

/// Fine-tuning objective: `CE + gamma * KD`.
pub fn finetune_objective<F: Scalar>(ce: F, kd: F, gamma: f64) -> F {
    ce + F::from_real(gamma) * kd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{Centroid, StatEntry};
    use ndarray::{arr1, arr2};

    #[test]
    fn ce_uniform_logits() {
        let logits = ArrayD::zeros(ndarray::IxDyn(&[3, 10]));
        let v: f64 = ce_loss(&logits, &[0, 5, 9]).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_is_tiny() {
        let mut logits = ArrayD::zeros(ndarray::IxDyn(&[1, 10]));
        logits[[0, 3]] = 25.0;
        assert!(ce_loss(&logits, &[3]).unwrap() <= 1e-8);
    }

    #[test]
    fn ce_class_permutation_invariance() {
        let logits = arr2(&[[1.0, 2.0, 0.5], [0.1, -0.3, 0.9]]).into_dyn();
        let v1: f64 = ce_loss(&logits, &[1, 2]).unwrap();
        // permute classes (0,1,2) -> (2,0,1)
        let perm = arr2(&[[2.0, 0.5, 1.0], [-0.3, 0.9, 0.1]]).into_dyn();
        let v2 = ce_loss(&perm, &[0, 1]).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_empty_batch() {
        let logits = ArrayD::<f64>::zeros(ndarray::IxDyn(&[0, 4]));
        assert!(ce_loss(&logits, &[]).is_err());
    }

    #[test]
    fn kd_identical_logits_is_zero() {
        let logits: ArrayD<f64> = arr2(&[[0.3, -1.2, 2.0]]).into_dyn();
        assert!(kd_loss(&logits, &logits).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_hand_value() {
        // teacher probs [0.5, 0.5], student probs [0.25, 0.75]
        let t = arr2(&[[0.0, 0.0]]).into_dyn();
        let s = arr2(&[[0.0, 3f64.ln()]]).into_dyn();
        let v = kd_loss(&s, &t).unwrap();
        assert!((v - 0.1438).abs() < 1e-3, "{v}");
    }

    #[test]
    fn kd_nonnegative_fuzz() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 5]), |_| rng.gen_range(-5.0..5.0));
            let t = ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 5]), |_| rng.gen_range(-5.0..5.0));
            assert!(kd_loss(&s, &t).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn bns_zero_when_matching() {
        let stats = vec![(arr1(&[1.0, 2.0]), arr1(&[0.5, 0.7]))];
        let (v, _) = bns_loss(&stats, &stats.clone()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn bns_hand_value_and_additivity() {
        let batch = vec![(arr1::<f64>(&[1.5]), arr1(&[1.0]))];
        let target = vec![(arr1(&[1.0]), arr1(&[1.0]))];
        let (v, g) = bns_loss(&batch, &target).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert!((g[0].0[0] - 1.0).abs() < 1e-15);

        let batch2 = [batch.clone(), batch.clone()].concat();
        let target2 = [target.clone(), target.clone()].concat();
        let (v2, _) = bns_loss(&batch2, &target2).unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-15);
    }

    fn one_entry_stats(mean: &[f64], std: &[f64]) -> ClassBatchStats<f64> {
        let mut entries = BTreeMap::new();
        entries.insert(
            (0usize, 0usize),
            StatEntry {
                mean: arr1(mean),
                std: arr1(std),
                sample_count: 2,
            },
        );
        ClassBatchStats { l_st: 0, entries }
    }

    fn one_entry_bank(mean: &[f64], std: &[f64]) -> CentroidBank<f64> {
        let mut bank = CentroidBank::new(0, 0.2);
        bank.entries.insert(
            (0, 0),
            Centroid {
                mean: arr1(mean),
                std: arr1(std),
            },
        );
        bank
    }

    #[test]
    fn fda_hand_value() {
        let stats = one_entry_stats(&[1.0, 0.0], &[0.0, 1.0]);
        let bank = one_entry_bank(&[0.0, 0.0], &[0.0, 0.0]);
        let (v, _) = fda_loss(&stats, &bank);
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fda_skips_uninitialized() {
        let stats = one_entry_stats(&[1.0], &[1.0]);
        let bank = CentroidBank::new(0, 0.2);
        let (v, g) = fda_loss(&stats, &bank);
        assert_eq!(v, 0.0);
        assert!(g.is_empty());
    }

    #[test]
    fn de_zero_noise_equals_fda() {
        let stats = one_entry_stats(&[1.0, 3.0], &[0.4, 0.2]);
        let bank = one_entry_bank(&[0.5, 2.0], &[0.3, 0.25]);
        let cfg = DEConfig {
            lambda_mu: 0.0,
            lambda_sigma: 0.0,
            noise_seed: 11,
        };
        let (vf, _) = fda_loss(&stats, &bank);
        let (vd, _) = de_loss(&stats, &bank, &cfg, 5);
        assert_eq!(vf, vd);
    }

    #[test]
    fn de_deterministic_per_step() {
        let stats = one_entry_stats(&[1.0], &[0.4]);
        let bank = one_entry_bank(&[0.5], &[0.3]);
        let cfg = DEConfig {
            lambda_mu: 0.3,
            lambda_sigma: 0.15,
            noise_seed: 11,
        };
        let (a, _) = de_loss(&stats, &bank, &cfg, 5);
        let (b, _) = de_loss(&stats, &bank, &cfg, 5);
        let (c, _) = de_loss(&stats, &bank, &cfg, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn de_monte_carlo_mean() {
        // E[de] = fda + D * (lambda_mu^2 + lambda_sigma^2), D dims each
        let stats = one_entry_stats(&[1.0, 2.0], &[0.4, 0.6]);
        let bank = one_entry_bank(&[0.5, 1.0], &[0.3, 0.5]);
        let (fda, _) = fda_loss(&stats, &bank);
        let cfg = DEConfig {
            lambda_mu: 0.3,
            lambda_sigma: 0.15,
            noise_seed: 23,
        };
        let n = 20_000u64;
        let mut acc = 0.0;
        for step in 0..n {
            acc += de_loss(&stats, &bank, &cfg, step).0;
        }
        let mean = acc / n as f64;
        let expect = fda + 2.0 * (0.3f64.powi(2) + 0.15f64.powi(2));
        assert!(
            (mean - expect).abs() / expect < 0.02,
            "mean {mean}, expect {expect}"
        );
    }

    #[test]
    fn composite_arithmetic() {
        assert!((generator_objective_warmup(2.0f64, 1.0, 0.1) - 2.1).abs() < 1e-15);
        let w = LossWeights {
            alpha1: 0.1,
            alpha2: 0.9,
            alpha3: 0.6,
            gamma: 1.0,
        };
        let v: f64 = generator_objective_full(2.0, 1.0, 1.0, 0.5, &w);
        assert!((v - 3.3).abs() < 1e-15);
        assert!((finetune_objective(2.25f64, 0.1438, 1.0) - 2.3938).abs() < 1e-12);
    }

    #[test]
    fn fda_scaling_homogeneity() {
        let stats = one_entry_stats(&[2.0, 4.0], &[1.0, 1.0]);
        let bank = one_entry_bank(&[1.0, 2.0], &[1.0, 1.0]);
        let (v1, _) = fda_loss(&stats, &bank);
        let stats2 = one_entry_stats(&[3.0, 6.0], &[1.0, 1.0]); // residual doubled
        let (v2, _) = fda_loss(&stats2, &bank);
        assert!((v2 - 4.0 * v1).abs() < 1e-12);
    }
}
