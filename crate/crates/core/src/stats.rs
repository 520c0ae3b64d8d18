//! Class-conditional BN-statistic capture, the EMA centroid bank, and
//! separability/diversity metrics.
//!
//! Statistics are per-channel vectors over the correctly classified
//! samples of one class in one batch, taken at the pre-normalization
//! input of each deep BN layer.

use crate::error::{DfqError, Result};
use crate::nn::layers::as_ncs;
use crate::scalar::Scalar;
use ndarray::{Array1, ArrayD, Ix2};
use std::collections::BTreeMap;

/// Floor for standard deviations in gradient denominators.
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct StatEntry<F: Scalar> {
    pub mean: Array1<F>,
    pub std: Array1<F>,
    /// Number of correctly classified samples behind this entry.
    pub sample_count: usize,
}

/// Per-(layer, class) batch statistics of correctly classified samples.
/// Keys are `(bn_layer_index, class)`; only layers `>= l_st` and classes
/// with at least two surviving samples are present.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatchStats<F: Scalar> {
    pub l_st: usize,
    pub entries: BTreeMap<(usize, usize), StatEntry<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid<F: Scalar> {
    pub mean: Array1<F>,
    pub std: Array1<F>,
}

/// EMA-maintained per-(layer, class) statistic centroids. Presence in
/// `entries` doubles as the initialized flag; losses skip missing keys.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank<F: Scalar> {
    pub l_st: usize,
    pub decay: F,
    pub entries: BTreeMap<(usize, usize), Centroid<F>>,
}

impl<F: Scalar> CentroidBank<F> {
    pub fn new(l_st: usize, decay: F) -> Self {
        CentroidBank {
            l_st,
            decay,
            entries: BTreeMap::new(),
        }
    }
}

/// Default semantic start layer: first BN layer of the last third.
pub fn default_l_st(num_bn_layers: usize) -> usize {
    num_bn_layers - num_bn_layers.div_ceil(3)
}

/// Which samples does the teacher classify as their pseudo-label?
pub fn correct_mask<F: Scalar>(logits: &ArrayD<F>, labels: &[usize]) -> Result<Vec<bool>> {
    let l2 = logits
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| DfqError::ShapeMismatch("logits must be 2-D".into()))?;
    if l2.nrows() != labels.len() {
        return Err(DfqError::ShapeMismatch(
            "logit rows and label count differ".into(),
        ));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = l2.row(i);
            let mut best = 0usize;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .collect())
}

/// Per-channel mean and unbiased std over the selected samples of a
/// feature tensor (N, C) or (N, C, H, W). Returns `None` when fewer than
/// two samples are selected.
fn subset_stats<F: Scalar>(
    features: &ArrayD<F>,
    selected: &[usize],
) -> Option<(Array1<F>, Array1<F>)> {
    if selected.len() < 2 {
        return None;
    }
    let v = as_ncs(features).ok()?;
    let (_, c, s) = v.dim();
    let count = selected.len() * s;
    let cf = F::from_count(count);
    let cf1 = F::from_count(count - 1);
    let mut mean = Array1::<F>::zeros(c);
    let mut std = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut acc = F::zero();
        for &ni in selected {
            for si in 0..s {
                acc += v[[ni, ci, si]];
            }
        }
        let m = acc / cf;
        mean[ci] = m;
        let mut vacc = F::zero();
        for &ni in selected {
            for si in 0..s {
                let d = v[[ni, ci, si]] - m;
                vacc += d * d;
            }
        }
        std[ci] = (vacc / cf1).sqrt();
    }
    Some((mean, std))
}

/// Compute per-(layer, class) statistics from BN feature taps,
/// excluding samples the teacher misclassifies.
pub fn class_batch_stats<F: Scalar>(
    taps: &[&ArrayD<F>],
    pseudo_labels: &[usize],
    teacher_logits: Option<&ArrayD<F>>,
    l_st: usize,
) -> Result<ClassBatchStats<F>> {
    let logits = teacher_logits.ok_or(DfqError::MissingLogits)?;
    if l_st >= taps.len() {
        return Err(DfqError::SemanticLayerOutOfRange {
            l_st,
            num_layers: taps.len(),
        });
    }
    let mask = correct_mask(logits, pseudo_labels)?;
    let num_classes = pseudo_labels.iter().copied().max().unwrap_or(0) + 1;
    let mut entries = BTreeMap::new();
    for class in 0..num_classes {
        let selected: Vec<usize> = pseudo_labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| y == class && mask[i])
            .map(|(i, _)| i)
            .collect();
        if selected.len() < 2 {
            continue;
        }
        for (l, tap) in taps.iter().enumerate().skip(l_st) {
            if let Some((mean, std)) = subset_stats(tap, &selected) {
                entries.insert(
                    (l, class),
                    StatEntry {
                        mean,
                        std,
                        sample_count: selected.len(),
                    },
                );
            }
        }
    }
    Ok(ClassBatchStats { l_st, entries })
}

/// Gradient of a loss expressed in statistic space back onto the
/// feature taps. `stat_grads` maps `(layer, class)` to `(d/d mean,
/// d/d std)`. Misclassified samples receive zero gradient.
#[allow(clippy::type_complexity)]
pub fn class_stats_backward<F: Scalar>(
    taps: &[&ArrayD<F>],
    pseudo_labels: &[usize],
    teacher_logits: &ArrayD<F>,
    stat_grads: &BTreeMap<(usize, usize), (Array1<F>, Array1<F>)>,
    l_st: usize,
) -> Result<BTreeMap<usize, ArrayD<F>>> {
    let mask = correct_mask(teacher_logits, pseudo_labels)?;
    let mut out: BTreeMap<usize, ArrayD<F>> = BTreeMap::new();
    for (&(l, class), (dmean, dstd)) in stat_grads {
        if l < l_st || l >= taps.len() {
            continue;
        }
        let selected: Vec<usize> = pseudo_labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| y == class && mask[i])
            .map(|(i, _)| i)
            .collect();
        if selected.len() < 2 {
            continue;
        }
        let tap = taps[l];
        let (mean, std) = subset_stats(tap, &selected).unwrap();
        let v = as_ncs(tap)?;
        let (_, c, s) = v.dim();
        let count = selected.len() * s;
        let cf = F::from_count(count);
        let cf1 = F::from_count(count - 1);
        let grad = out
            .entry(l)
            .or_insert_with(|| ArrayD::zeros(tap.raw_dim()));
        let mut g = as_ncs(grad)?;
        for ci in 0..c {
            let sd = std[ci].max(F::from_real(STD_FLOOR));
            let dm = dmean[ci] / cf;
            let ds = dstd[ci] / (cf1 * sd);
            for &ni in &selected {
                for si in 0..s {
                    g[[ni, ci, si]] += dm + ds * (v[[ni, ci, si]] - mean[ci]);
                }
            }
        }
        let shaped = g.into_shape(ndarray::IxDyn(tap.shape())).unwrap();
        *grad = shaped;
    }
    Ok(out)
}

/// Gradient of a loss in (mean, biased std) space of a whole tap back
/// onto the features.
pub fn global_stats_backward<F: Scalar>(
    tap: &ArrayD<F>,
    dmean: &Array1<F>,
    dstd: &Array1<F>,
) -> Result<ArrayD<F>> {
    let v = as_ncs(tap)?;
    let (n, c, s) = v.dim();
    let count = F::from_count(n * s);
    let (mean, std) = crate::nn::layers::channel_stats(tap)?;
    let mut g = ndarray::Array3::<F>::zeros((n, c, s));
    for ci in 0..c {
        let sd = std[ci].max(F::from_real(STD_FLOOR));
        let dm = dmean[ci] / count;
        let ds = dstd[ci] / (count * sd);
        for ni in 0..n {
            for si in 0..s {
                g[[ni, ci, si]] = dm + ds * (v[[ni, ci, si]] - mean[ci]);
            }
        }
    }
    Ok(g.into_shape(ndarray::IxDyn(tap.shape())).unwrap())
}

/// Initialize centroids by averaging class batch statistics over K
/// batches. Entries never observed stay uninitialized.
#[allow(clippy::type_complexity)]
pub fn init_centroids<F: Scalar>(
    batches: &[ClassBatchStats<F>],
    l_st: usize,
    decay: F,
) -> CentroidBank<F> {
    let mut sums: BTreeMap<(usize, usize), (Array1<F>, Array1<F>, usize)> = BTreeMap::new();
    for batch in batches {
        for (&key, e) in &batch.entries {
            match sums.get_mut(&key) {
                Some((ms, ss, n)) => {
                    *ms += &e.mean;
                    *ss += &e.std;
                    *n += 1;
                }
                None => {
                    sums.insert(key, (e.mean.clone(), e.std.clone(), 1));
                }
            }
        }
    }
    let entries = sums
        .into_iter()
        .map(|(key, (ms, ss, n))| {
            let nf = F::from_count(n);
            (
                key,
                Centroid {
                    mean: ms / nf,
                    std: ss / nf,
                },
            )
        })
        .collect();
    CentroidBank {
        l_st,
        decay,
        entries,
    }
}

/// EMA update: `c <- (1 - decay) * c + decay * observed` for every
/// entry present in `stats`. Unseen bank entries are untouched; an
/// update for an uninitialized entry initializes it (first touch).
pub fn ema_update<F: Scalar>(bank: &mut CentroidBank<F>, stats: &ClassBatchStats<F>) {
    let beta = bank.decay;
    let one_beta = F::one() - beta;
    for (&key, e) in &stats.entries {
        if key.0 < bank.l_st {
            continue;
        }
        match bank.entries.get_mut(&key) {
            Some(c) => {
                for i in 0..c.mean.len() {
                    c.mean[i] = one_beta * c.mean[i] + beta * e.mean[i];
                    c.std[i] = one_beta * c.std[i] + beta * e.std[i];
                }
            }
            None => {
                bank.entries.insert(
                    key,
                    Centroid {
                        mean: e.mean.clone(),
                        std: e.std.clone(),
                    },
                );
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeparabilityReport<F: Scalar> {
    pub fisher_ratio: F,
    pub per_class_variance: Vec<F>,
    pub layer: usize,
}

fn group_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    groups
}

/// Fisher ratio at a feature matrix (N, D): trace of between-class
/// scatter over trace of within-class scatter, both sample-weighted.
pub fn fisher_separability<F: Scalar>(
    features: &ArrayD<F>,
    labels: &[usize],
    layer: usize,
) -> Result<SeparabilityReport<F>> {
    let x = features
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| DfqError::ShapeMismatch("features must be 2-D".into()))?;
    let groups = group_by_class(labels);
    let usable: Vec<_> = groups.iter().filter(|(_, idx)| idx.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(DfqError::InsufficientClasses);
    }
    let (n, d) = x.dim();
    let nf = F::from_count(n);
    let mut global = Array1::<F>::zeros(d);
    for row in x.rows() {
        global += &row;
    }
    global /= nf;
    let mut between = F::zero();
    let mut within = F::zero();
    let mut per_class_variance = Vec::new();
    for idx in groups.values() {
        let w = F::from_count(idx.len()) / nf;
        let mut mean = Array1::<F>::zeros(d);
        for &i in idx.iter() {
            mean += &x.row(i);
        }
        mean /= F::from_count(idx.len());
        let mut b = F::zero();
        for j in 0..d {
            let diff = mean[j] - global[j];
            b += diff * diff;
        }
        between += w * b;
        let mut v = F::zero();
        for &i in idx.iter() {
            for j in 0..d {
                let diff = x[[i, j]] - mean[j];
                v += diff * diff;
            }
        }
        let biased = v / F::from_count(idx.len());
        per_class_variance.push(biased);
        within += w * biased;
    }
    let within = within.max(F::from_real(STD_FLOOR));
    Ok(SeparabilityReport {
        fisher_ratio: between / within,
        per_class_variance,
        layer,
    })
}

/// Mean over classes of the trace of the unbiased within-class
/// covariance; higher means more intra-class variety.
pub fn class_diversity<F: Scalar>(features: &ArrayD<F>, labels: &[usize]) -> Result<F> {
    let x = features
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| DfqError::ShapeMismatch("features must be 2-D".into()))?;
    let groups = group_by_class(labels);
    let usable: Vec<_> = groups
        .iter()
        .filter(|(_, idx)| idx.len() >= 2)
        .collect();
    if usable.len() < 2 {
        return Err(DfqError::InsufficientClasses);
    }
    let d = x.ncols();
    let mut total = F::zero();
    for (_, idx) in &usable {
        let k = idx.len();
        let mut mean = Array1::<F>::zeros(d);
        for &i in idx.iter() {
            mean += &x.row(i);
        }
        mean /= F::from_count(k);
        let mut v = F::zero();
        for &i in idx.iter() {
            for j in 0..d {
                let diff = x[[i, j]] - mean[j];
                v += diff * diff;
            }
        }
        total += v / F::from_count(k - 1);
    }
    Ok(total / F::from_count(usable.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn feats(rows: &[[f64; 2]]) -> ArrayD<f64> {
        arr2(rows).into_dyn()
    }

    #[test]
    fn class_stats_constant_features() {
        let tap = feats(&[[5.0, 1.0], [5.0, 1.0], [5.0, 1.0]]);
        let labels = vec![0, 0, 0];
        let logits = feats(&[[2.0, 0.0], [2.0, 0.0], [2.0, 0.0]]);
        let s = class_batch_stats(&[&tap], &labels, Some(&logits), 0).unwrap();
        let e = &s.entries[&(0, 0)];
        assert_eq!(e.mean[0], 5.0);
        assert_eq!(e.std[0], 0.0);
    }

    #[test]
    fn misclassified_samples_are_excluded() {
        // third sample is predicted class 1 but labeled 0: excluded
        let tap = arr2(&[[1.0], [3.0], [100.0]]).into_dyn();
        let labels = vec![0, 0, 0];
        let logits = arr2(&[[2.0, 0.0], [2.0, 0.0], [0.0, 2.0]]).into_dyn();
        let s = class_batch_stats(&[&tap], &labels, Some(&logits), 0).unwrap();
        assert_eq!(s.entries[&(0, 0)].mean[0], 2.0);
        assert_eq!(s.entries[&(0, 0)].sample_count, 2);
    }

    #[test]
    fn absent_class_has_no_entry() {
        let tap = arr2(&[[1.0], [3.0]]).into_dyn();
        let labels = vec![0, 0];
        let logits = arr2(&[[2.0, 0.0], [2.0, 0.0]]).into_dyn();
        let s = class_batch_stats(&[&tap], &labels, Some(&logits), 0).unwrap();
        assert!(!s.entries.contains_key(&(0, 1)));
    }

    #[test]
    fn missing_logits_is_an_error() {
        let tap = arr2(&[[1.0]]).into_dyn();
        assert!(matches!(
            class_batch_stats(&[&tap], &[0], None, 0),
            Err(DfqError::MissingLogits)
        ));
    }

    #[test]
    fn centroid_init_averages_batches() {
        let mk = |v: f64| {
            let mut entries = BTreeMap::new();
            entries.insert(
                (0usize, 0usize),
                StatEntry {
                    mean: ndarray::arr1(&[v]),
                    std: ndarray::arr1(&[0.5]),
                    sample_count: 2,
                },
            );
            ClassBatchStats { l_st: 0, entries }
        };
        let bank = init_centroids(&[mk(1.0), mk(3.0)], 0, 0.2);
        assert_eq!(bank.entries[&(0, 0)].mean[0], 2.0);
    }

    #[test]
    fn ema_degenerate_decays() {
        let stat = {
            let mut entries = BTreeMap::new();
            entries.insert(
                (0usize, 0usize),
                StatEntry {
                    mean: ndarray::arr1(&[2.0]),
                    std: ndarray::arr1(&[1.0]),
                    sample_count: 2,
                },
            );
            ClassBatchStats { l_st: 0, entries }
        };
        let mut bank = CentroidBank::new(0, 0.0);
        bank.entries.insert(
            (0, 0),
            Centroid {
                mean: ndarray::arr1(&[1.0]),
                std: ndarray::arr1(&[0.5]),
            },
        );
        ema_update(&mut bank, &stat);
        assert_eq!(bank.entries[&(0, 0)].mean[0], 1.0);

        let mut bank = CentroidBank::new(0, 1.0);
        bank.entries.insert(
            (0, 0),
            Centroid {
                mean: ndarray::arr1(&[1.0]),
                std: ndarray::arr1(&[0.5]),
            },
        );
        ema_update(&mut bank, &stat);
        assert_eq!(bank.entries[&(0, 0)].mean[0], 2.0);

        let mut bank = CentroidBank::new(0, 0.2);
        bank.entries.insert(
            (0, 0),
            Centroid {
                mean: ndarray::arr1(&[1.0f64]),
                std: ndarray::arr1(&[0.5]),
            },
        );
        ema_update(&mut bank, &stat);
        assert!((bank.entries[&(0, 0)].mean[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn ema_first_touch_initializes() {
        let stat = {
            let mut entries = BTreeMap::new();
            entries.insert(
                (1usize, 3usize),
                StatEntry {
                    mean: ndarray::arr1(&[7.0]),
                    std: ndarray::arr1(&[0.25]),
                    sample_count: 2,
                },
            );
            ClassBatchStats { l_st: 1, entries }
        };
        let mut bank = CentroidBank::new(1, 0.2);
        ema_update(&mut bank, &stat);
        assert_eq!(bank.entries[&(1, 3)].mean[0], 7.0);
    }

    #[test]
    fn fisher_identical_means_is_zero() {
        let x = feats(&[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]);
        let r = fisher_separability(&x, &[0, 0, 1, 1], 0).unwrap();
        assert!(r.fisher_ratio.abs() < 1e-12);
    }

    #[test]
    fn fisher_hand_example() {
        // 1-D, two classes at means +/-1, biased within-variance 1
        let x = arr2(&[[0.0f64], [2.0], [-0.0], [-2.0]]).into_dyn();
        let r = fisher_separability(&x, &[0, 0, 1, 1], 0).unwrap();
        assert!((r.fisher_ratio - 1.0).abs() < 1e-12, "{}", r.fisher_ratio);
    }

    #[test]
    fn fisher_monotone_in_mean_separation() {
        let mut prev = 0.0;
        for sep in [0.5, 1.0, 2.0, 4.0] {
            let x = arr2(&[[sep], [sep + 1.0], [-sep], [-sep - 1.0]]).into_dyn();
            let r = fisher_separability(&x, &[0, 0, 1, 1], 0).unwrap();
            assert!(r.fisher_ratio > prev);
            prev = r.fisher_ratio;
        }
    }

    #[test]
    fn fisher_single_class_errors() {
        let x = arr2(&[[1.0], [2.0]]).into_dyn();
        assert!(matches!(
            fisher_separability(&x, &[0, 0], 0),
            Err(DfqError::InsufficientClasses)
        ));
    }

    #[test]
    fn diversity_identical_samples_is_zero() {
        let x = arr2(&[[1.0], [1.0], [2.0], [2.0]]).into_dyn();
        assert_eq!(class_diversity(&x, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn diversity_hand_variance() {
        // class {-1, 1}: unbiased variance 2
        let x = arr2(&[[-1.0f64], [1.0], [-1.0], [1.0]]).into_dyn();
        assert!((class_diversity(&x, &[0, 0, 1, 1]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_l_st_is_last_third() {
        assert_eq!(default_l_st(6), 4);
        assert_eq!(default_l_st(8), 5);
        assert_eq!(default_l_st(4), 2);
    }
}
