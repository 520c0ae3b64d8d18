//! Training orchestration: generator warm-up, centroid initialization,
//! alternating generator/student updates, evaluation, and ablations.
//!
//! The loop is single-threaded and fully deterministic given the root
//! seed: every random draw flows from `derive_seed`.

use crate::data::LabeledDataset;
use crate::error::{DfqError, Result};
use crate::losses::{self, DEConfig, LossWeights};
use crate::nn::fakequant::{quantize_model, FakeQuantModel};
use crate::nn::generator::{GeneratorGraph, Normalization};
use crate::nn::layers::channel_stats;
use crate::nn::model::ModelGraph;
use crate::nn::optim::RmsProp;
use crate::quantizer::QuantConfig;
use crate::scalar::Scalar;
use crate::stats::{
    self, class_batch_stats, class_stats_backward, default_l_st, global_stats_backward,
    CentroidBank, ClassBatchStats,
};
use ndarray::{Array1, Array2, ArrayD, Ix4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Epoch/step schedule of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub student_lr: f64,
    /// Student update cadence: one fine-tune step every this many
    /// alternating steps.
    pub student_update_every: usize,
    /// Batches used to initialize the centroid bank.
    pub init_batches: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_epochs: 20,
            warmup_epochs: 3,
            steps_per_epoch: 20,
            batch_size: 40,
            gen_lr: 2e-3,
            student_lr: 1e-3,
            student_update_every: 1,
            init_batches: 4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(DfqError::InvalidConfig(
                "warmup_epochs must be less than total_epochs".into(),
            ));
        }
        if self.steps_per_epoch == 0 || self.batch_size < 2 {
            return Err(DfqError::InvalidConfig(
                "steps_per_epoch must be >= 1 and batch_size >= 2".into(),
            ));
        }
        if self.student_update_every == 0 || self.init_batches == 0 {
            return Err(DfqError::InvalidConfig(
                "student_update_every and init_batches must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Full configuration of one data-free quantization run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub gen_arch: String,
    pub quant: QuantConfig,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub de: DEConfig,
    /// EMA decay for centroid updates.
    pub beta_fd: f64,
    /// Semantic start layer; default is the last third of BN layers.
    pub l_st: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gen_arch: crate::nn::generator::ARCH_TINY_GEN.into(),
            quant: QuantConfig::default(),
            schedule: TrainSchedule::default(),
            weights: LossWeights::default(),
            de: DEConfig::default(),
            beta_fd: 0.2,
            l_st: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.beta_fd) {
            return Err(DfqError::InvalidConfig(format!(
                "beta_fd must be in [0, 1], got {}",
                self.beta_fd
            )));
        }
        if self.de.lambda_mu < 0.0 || self.de.lambda_sigma < 0.0 {
            return Err(DfqError::InvalidConfig(
                "diversity perturbation scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// splitmix64 over (root, stream, counter).
pub fn derive_seed(root: u64, stream: u64, counter: u64) -> u64 {
    let mut z = root
        .wrapping_add(stream.wrapping_mul(0xA076_1D64_78BD_642F))
        .wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_NOISE: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_DE: u64 = 4;
const STREAM_CALIB: u64 = 5;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub l_ce: f64,
    pub l_bns: f64,
    pub l_fda: f64,
    pub l_de: f64,
    pub l_kd: f64,
    pub student_acc: f64,
    pub fisher_ratio: f64,
    pub diversity: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "epoch,step,l_ce,l_bns,l_fda,l_de,l_kd,student_acc,fisher_ratio,diversity\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            r.l_ce,
            r.l_bns,
            r.l_fda,
            r.l_de,
            r.l_kd,
            r.student_acc,
            r.fisher_ratio,
            r.diversity
        ));
    }
    out
}

/// Result of one complete run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub fp_acc: f64,
    /// Accuracy of the quantized model with calibrated ranges, before
    /// any fine-tuning.
    pub no_finetune_acc: f64,
    pub final_acc: f64,
    pub fisher_warmup: f64,
    pub fisher_final: f64,
    pub diversity_final: f64,
    pub metrics: Vec<MetricsRow>,
    pub teacher_hash: String,
}

pub struct ExperimentState<F: Scalar> {
    pub generator: GeneratorGraph<F>,
    pub teacher: ModelGraph<F>,
    pub student: FakeQuantModel<F>,
    pub bank: Option<CentroidBank<F>>,
    pub norm: Normalization,
    pub l_st: usize,
    pub gen_opt: RmsProp<F>,
    pub student_opt: RmsProp<F>,
    pub global_step: u64,
    pub teacher_hash: String,
}

pub struct GenStepOutcome<F: Scalar> {
    pub ce: f64,
    pub bns: f64,
    pub fda: f64,
    pub de: f64,
    pub total: f64,
    pub images: ArrayD<F>,
    pub labels: Vec<usize>,
    pub teacher_logits: ArrayD<F>,
    pub class_stats: ClassBatchStats<F>,
}

fn balanced_labels(batch: usize, num_classes: usize) -> Vec<usize> {
    (0..batch).map(|i| i % num_classes).collect()
}

/// Compute the generator objective on one synthetic batch and leave its
/// gradients in the generator. With `bank == None` only the warm-up
/// terms (CE + alpha1 * BNS) are active.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_and_grads<F: Scalar>(
    generator: &mut GeneratorGraph<F>,
    teacher: &mut ModelGraph<F>,
    bank: Option<&CentroidBank<F>>,
    weights: &LossWeights,
    de_cfg: &DEConfig,
    labels: &[usize],
    noise: &Array2<F>,
    norm: &Normalization,
    l_st: usize,
    step: u64,
) -> Result<GenStepOutcome<F>> {
    let (images, gfwd) = generator.forward(noise, labels, norm)?;
    let (logits, tcache) = teacher.forward_with_taps(&images)?;
    let taps = tcache.bn_inputs();

    let ce = losses::ce_loss(&logits, labels)?;
    let d_logits = losses::ce_backward(&logits, labels)?;

    // Global BN-statistic matching over every BN layer.
    let mut batch_stats = Vec::with_capacity(taps.len());
    for tap in &taps {
        batch_stats.push(channel_stats(tap)?);
    }
    let targets: Vec<(Array1<F>, Array1<F>)> = teacher
        .bn_layers()
        .iter()
        .map(|bn| (bn.running_mu.clone(), bn.running_sigma.clone()))
        .collect();
    let (bns, bns_grads) = losses::bns_loss(&batch_stats, &targets)?;

    let a1 = F::from_real(weights.alpha1);
    let mut tap_grads: BTreeMap<usize, ArrayD<F>> = BTreeMap::new();
    if weights.alpha1 > 0.0 {
        for (l, (dm, ds)) in bns_grads.iter().enumerate() {
            let g = global_stats_backward(taps[l], &dm.mapv(|v| v * a1), &ds.mapv(|v| v * a1))?;
            tap_grads.insert(l, g);
        }
    }

    // Class-wise alignment terms, active once the bank exists.
    let mut fda = 0.0;
    let mut de = 0.0;
    let class_stats = class_batch_stats(&taps, labels, Some(&logits), l_st)?;
    if let Some(bank) = bank {
        let (fda_v, fda_g) = losses::fda_loss(&class_stats, bank);
        let (de_v, de_g) = losses::de_loss(&class_stats, bank, de_cfg, step);
        fda = fda_v.to_real();
        de = de_v.to_real();
        let a2 = F::from_real(weights.alpha2);
        let a3 = F::from_real(weights.alpha3);
        let mut stat_grads: BTreeMap<(usize, usize), (Array1<F>, Array1<F>)> = BTreeMap::new();
        for (key, (dm, ds)) in &fda_g {
            stat_grads.insert(*key, (dm.mapv(|v| v * a2), ds.mapv(|v| v * a2)));
        }
        for (key, (dm, ds)) in &de_g {
            match stat_grads.get_mut(key) {
                Some((am, as_)) => {
                    *am += &dm.mapv(|v| v * a3);
                    *as_ += &ds.mapv(|v| v * a3);
                }
                None => {
                    stat_grads.insert(*key, (dm.mapv(|v| v * a3), ds.mapv(|v| v * a3)));
                }
            }
        }
        let cls_grads = class_stats_backward(&taps, labels, &logits, &stat_grads, l_st)?;
        for (l, g) in cls_grads {
            match tap_grads.get_mut(&l) {
                Some(acc) => *acc += &g,
                None => {
                    tap_grads.insert(l, g);
                }
            }
        }
    }

    let total = losses::generator_objective_full(
        ce.to_real(),
        bns.to_real(),
        fda,
        de,
        &LossWeights {
            alpha2: if bank.is_some() { weights.alpha2 } else { 0.0 },
            alpha3: if bank.is_some() { weights.alpha3 } else { 0.0 },
            ..*weights
        },
    );
    if !total.is_finite() {
        return Err(DfqError::TrainingDiverged {
            step: step as usize,
        });
    }

    // The CE path and the statistic paths both end at the teacher input.
    teacher.zero_grads();
    let dx = teacher.backward(&tcache, &d_logits, Some(&tap_grads));
    drop(taps);
    generator.zero_grads();
    generator.backward(&gfwd, labels, &dx, norm);

    Ok(GenStepOutcome {
        ce: ce.to_real(),
        bns: bns.to_real(),
        fda,
        de,
        total,
        images,
        labels: labels.to_vec(),
        teacher_logits: logits,
        class_stats,
    })
}

impl<F: Scalar> ExperimentState<F> {
    pub fn new(cfg: &PipelineConfig, teacher: &ModelGraph<F>, norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        let num_bn = teacher.num_bn_layers();
        let l_st = match cfg.l_st {
            Some(l) if l < num_bn => l,
            Some(l) => {
                return Err(DfqError::SemanticLayerOutOfRange {
                    l_st: l,
                    num_layers: num_bn,
                })
            }
            None => default_l_st(num_bn),
        };
        let mut teacher = teacher.clone();
        let teacher_hash = teacher.content_hash();
        let generator = crate::nn::generator::build_generator::<F>(
            &cfg.gen_arch,
            teacher.num_classes,
            derive_seed(cfg.schedule.seed, 0, 0),
        )?;
        let student = quantize_model(&teacher, cfg.quant)?;
        Ok(ExperimentState {
            generator,
            teacher,
            student,
            bank: None,
            norm,
            l_st,
            gen_opt: RmsProp::new(cfg.schedule.gen_lr),
            student_opt: RmsProp::new(cfg.schedule.student_lr),
            global_step: 0,
            teacher_hash,
        })
    }

    fn gen_step_inner(
        &mut self,
        cfg: &PipelineConfig,
        use_bank: bool,
    ) -> Result<GenStepOutcome<F>> {
        let labels = balanced_labels(cfg.schedule.batch_size, self.teacher.num_classes);
        let noise = self.generator.draw_noise(
            labels.len(),
            derive_seed(cfg.schedule.seed, STREAM_NOISE, self.global_step),
        );
        let de_cfg = DEConfig {
            noise_seed: derive_seed(cfg.schedule.seed, STREAM_DE, 0),
            ..cfg.de
        };
        if use_bank && self.bank.is_none() {
            return Err(DfqError::InvalidConfig(
                "generator_step before centroid initialization".into(),
            ));
        }
        let outcome = generator_loss_and_grads(
            &mut self.generator,
            &mut self.teacher,
            if use_bank { self.bank.as_ref() } else { None },
            &cfg.weights,
            &de_cfg,
            &labels,
            &noise,
            &self.norm,
            self.l_st,
            self.global_step,
        )?;
        let opt = &mut self.gen_opt;
        let mut i = 0usize;
        self.generator.visit_params(&mut |p| {
            opt.update(i, p.value, p.grad);
            i += 1;
        });
        self.global_step += 1;
        Ok(outcome)
    }

    /// One warm-up step: CE + alpha1 * BNS only, student untouched.
    pub fn warmup_step(&mut self, cfg: &PipelineConfig) -> Result<GenStepOutcome<F>> {
        self.gen_step_inner(cfg, false)
    }

    /// One full generator step followed by the EMA centroid update.
    pub fn generator_step(&mut self, cfg: &PipelineConfig) -> Result<GenStepOutcome<F>> {
        let outcome = self.gen_step_inner(cfg, true)?;
        let bank = self.bank.as_mut().expect("bank initialized");
        stats::ema_update(bank, &outcome.class_stats);
        Ok(outcome)
    }

    /// Generator warm-up phase; the student is bit-identical after.
    pub fn warmup_phase(&mut self, cfg: &PipelineConfig) -> Result<Vec<GenStepOutcome<F>>> {
        let mut outcomes = Vec::new();
        for _ in 0..cfg.schedule.warmup_epochs {
            for _ in 0..cfg.schedule.steps_per_epoch {
                outcomes.push(self.warmup_step(cfg)?);
            }
        }
        Ok(outcomes)
    }

    /// Initialize the centroid bank from `init_batches` fresh batches.
    pub fn init_centroids(&mut self, cfg: &PipelineConfig) -> Result<()> {
        let mut batches = Vec::new();
        for k in 0..cfg.schedule.init_batches {
            let labels = balanced_labels(cfg.schedule.batch_size, self.teacher.num_classes);
            let noise = self.generator.draw_noise(
                labels.len(),
                derive_seed(cfg.schedule.seed, STREAM_INIT, k as u64),
            );
            let (images, _) = self.generator.forward(&noise, &labels, &self.norm)?;
            let (logits, tcache) = self.teacher.forward_with_taps(&images)?;
            let taps = tcache.bn_inputs();
            batches.push(class_batch_stats(&taps, &labels, Some(&logits), self.l_st)?);
        }
        self.bank = Some(stats::init_centroids(
            &batches,
            self.l_st,
            F::from_real(cfg.beta_fd),
        ));
        Ok(())
    }

    /// One student fine-tune step on an already-generated batch.
    pub fn finetune_step(
        &mut self,
        cfg: &PipelineConfig,
        images: &ArrayD<F>,
        labels: &[usize],
        teacher_logits: &ArrayD<F>,
    ) -> Result<(f64, f64)> {
        let (slogits, scache) = self.student.forward(images, true)?;
        let ce = losses::ce_loss(&slogits, labels)?;
        let kd = losses::kd_loss(&slogits, teacher_logits)?;
        let total = losses::finetune_objective(ce, kd, cfg.weights.gamma);
        if !total.is_finite() {
            return Err(DfqError::TrainingDiverged {
                step: self.global_step as usize,
            });
        }
        let mut d = losses::ce_backward(&slogits, labels)?;
        if cfg.weights.gamma > 0.0 {
            let dk = losses::kd_backward_student(&slogits, teacher_logits)?;
            let g = F::from_real(cfg.weights.gamma);
            d.zip_mut_with(&dk, |a, b| *a += g * *b);
        }
        self.student.zero_grads();
        self.student.backward(&scache, &d);
        let opt = &mut self.student_opt;
        let mut i = 0usize;
        self.student.visit_params(&mut |p| {
            opt.update(i, p.value, p.grad);
            i += 1;
        });
        Ok((ce.to_real(), kd.to_real()))
    }

    /// Synthetic evaluation batch (fixed seed) and its teacher features:
    /// last-BN-tap pooled features for separability/diversity metrics.
    pub fn metric_features(
        &mut self,
        cfg: &PipelineConfig,
        per_class: usize,
    ) -> Result<(ArrayD<F>, Vec<usize>)> {
        let nc = self.teacher.num_classes;
        let labels: Vec<usize> = (0..nc * per_class).map(|i| i % nc).collect();
        let noise = self
            .generator
            .draw_noise(labels.len(), derive_seed(cfg.schedule.seed, STREAM_EVAL, 0));
        let (images, _) = self.generator.forward(&noise, &labels, &self.norm)?;
        let (_, tcache) = self.teacher.forward_with_taps(&images)?;
        let taps = tcache.bn_inputs();
        let last = taps.last().expect("at least one BN layer");
        let pooled = pool_features(last)?;
        Ok((pooled, labels))
    }

    /// Calibrate a clone of the untouched student on synthetic batches
    /// and evaluate it: the no-fine-tune baseline.
    pub fn no_finetune_accuracy(
        &mut self,
        cfg: &PipelineConfig,
        test: &LabeledDataset<F>,
    ) -> Result<f64> {
        let mut baseline = self.student.clone();
        for k in 0..cfg.schedule.init_batches {
            let labels = balanced_labels(cfg.schedule.batch_size, self.teacher.num_classes);
            let noise = self.generator.draw_noise(
                labels.len(),
                derive_seed(cfg.schedule.seed, STREAM_CALIB, k as u64),
            );
            let (images, _) = self.generator.forward(&noise, &labels, &self.norm)?;
            baseline.forward(&images, true)?;
        }
        baseline.freeze_ranges()?;
        evaluate_quant(&mut baseline, test)
    }
}

/// Spatially pooled (N, C) view of a (N, C, H, W) or (N, C) tap.
pub fn pool_features<F: Scalar>(tap: &ArrayD<F>) -> Result<ArrayD<F>> {
    match tap.ndim() {
        2 => Ok(tap.clone()),
        4 => {
            let v = tap.view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = v.dim();
            let denom = F::from_count(h * w);
            let mut out = Array2::<F>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    let mut acc = F::zero();
                    for y in 0..h {
                        for x in 0..w {
                            acc += v[[ni, ci, y, x]];
                        }
                    }
                    out[[ni, ci]] = acc / denom;
                }
            }
            Ok(out.into_dyn())
        }
        d => Err(DfqError::ShapeMismatch(format!(
            "features must be 2-D or 4-D, got {d}-D"
        ))),
    }
}

/// Top-1 accuracy of a fake-quant model without observing ranges.
pub fn evaluate_quant<F: Scalar>(
    model: &mut FakeQuantModel<F>,
    data: &LabeledDataset<F>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(DfqError::EmptyDataset);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let (x, labels) = data.batch(chunk);
        let (logits, _) = model.forward(&x, false)?;
        let mask = stats::correct_mask(&logits, &labels)?;
        correct += mask.iter().filter(|&&m| m).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Top-1 accuracy from precomputed logits (hand-checkable protocol).
pub fn top1_accuracy<F: Scalar>(logits: &ArrayD<F>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(DfqError::EmptyDataset);
    }
    let mask = stats::correct_mask(logits, labels)?;
    Ok(mask.iter().filter(|&&m| m).count() as f64 / labels.len() as f64)
}

/// Run the whole data-free quantization procedure.
pub fn run<F: Scalar>(
    cfg: &PipelineConfig,
    teacher: &ModelGraph<F>,
    norm: &Normalization,
    test: &LabeledDataset<F>,
) -> Result<Report> {
    run_with_state(cfg, teacher, norm, test).map(|(r, _)| r)
}

/// As [`run`], but also hands back the trained generator/student state.
pub fn run_with_state<F: Scalar>(
    cfg: &PipelineConfig,
    teacher: &ModelGraph<F>,
    norm: &Normalization,
    test: &LabeledDataset<F>,
) -> Result<(Report, ExperimentState<F>)> {
    cfg.validate()?;
    let mut state = ExperimentState::new(cfg, teacher, *norm)?;
    let mut fp_teacher = state.teacher.clone();
    let fp_acc = crate::nn::train::accuracy(&mut fp_teacher, test)?;
    let mut metrics = Vec::new();

    // Warm-up: generator only, confidence and global-statistic terms.
    for epoch in 0..cfg.schedule.warmup_epochs {
        let mut acc = MetricsAcc::default();
        for _ in 0..cfg.schedule.steps_per_epoch {
            let o = state.warmup_step(cfg)?;
            acc.add(o.ce, o.bns, 0.0, 0.0, 0.0);
        }
        metrics.push(acc.row(epoch, state.global_step, f64::NAN, f64::NAN, f64::NAN));
    }

    let (feat_w, labels_w) = state.metric_features(cfg, 8)?;
    let fisher_warmup = stats::fisher_separability(&feat_w, &labels_w, state.l_st)?
        .fisher_ratio
        .to_real();
    let no_finetune_acc = state.no_finetune_accuracy(cfg, test)?;

    state.init_centroids(cfg)?;

    // Alternating phase: generator step, EMA update, student step.
    let mut alt_step = 0usize;
    for epoch in cfg.schedule.warmup_epochs..cfg.schedule.total_epochs {
        let mut acc = MetricsAcc::default();
        for _ in 0..cfg.schedule.steps_per_epoch {
            let o = state.generator_step(cfg)?;
            let mut kd = 0.0;
            if alt_step.is_multiple_of(cfg.schedule.student_update_every) {
                let (_, kd_v) =
                    state.finetune_step(cfg, &o.images, &o.labels, &o.teacher_logits)?;
                kd = kd_v;
            }
            alt_step += 1;
            acc.add(o.ce, o.bns, o.fda, o.de, kd);
        }
        let mut probe = state.student.clone();
        if probe.freeze_ranges().is_ok() {
            let student_acc = evaluate_quant(&mut probe, test)?;
            let (feat, labels) = state.metric_features(cfg, 8)?;
            let fisher = stats::fisher_separability(&feat, &labels, state.l_st)?
                .fisher_ratio
                .to_real();
            let diversity = stats::class_diversity(&feat, &labels)?.to_real();
            metrics.push(acc.row(epoch, state.global_step, student_acc, fisher, diversity));
        } else {
            metrics.push(acc.row(epoch, state.global_step, f64::NAN, f64::NAN, f64::NAN));
        }
    }

    // Freeze ranges, final evaluation.
    state.student.freeze_ranges()?;
    let final_acc = evaluate_quant(&mut state.student, test)?;
    let (feat_f, labels_f) = state.metric_features(cfg, 8)?;
    let fisher_final = stats::fisher_separability(&feat_f, &labels_f, state.l_st)?
        .fisher_ratio
        .to_real();
    let diversity_final = stats::class_diversity(&feat_f, &labels_f)?.to_real();

    let hash_after = state.teacher.content_hash();
    if hash_after != state.teacher_hash {
        return Err(DfqError::InvalidConfig(
            "teacher parameters changed during the run".into(),
        ));
    }

    let report = Report {
        fp_acc,
        no_finetune_acc,
        final_acc,
        fisher_warmup,
        fisher_final,
        diversity_final,
        metrics,
        teacher_hash: hash_after,
    };
    Ok((report, state))
}

#[derive(Default)]
struct MetricsAcc {
    ce: f64,
    bns: f64,
    fda: f64,
    de: f64,
    kd: f64,
    n: usize,
}

impl MetricsAcc {
    fn add(&mut self, ce: f64, bns: f64, fda: f64, de: f64, kd: f64) {
        self.ce += ce;
        self.bns += bns;
        self.fda += fda;
        self.de += de;
        self.kd += kd;
        self.n += 1;
    }

    fn row(
        &self,
        epoch: usize,
        step: u64,
        student_acc: f64,
        fisher: f64,
        diversity: f64,
    ) -> MetricsRow {
        let n = self.n.max(1) as f64;
        MetricsRow {
            epoch,
            step,
            l_ce: self.ce / n,
            l_bns: self.bns / n,
            l_fda: self.fda / n,
            l_de: self.de / n,
            l_kd: self.kd / n,
            student_acc,
            fisher_ratio: fisher,
            diversity,
        }
    }
}

/// Ablation variants of the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    /// alpha3 = 0: no diversity enhancement.
    NoDe,
    /// beta_fd = 0: centroids frozen after initialization.
    NoEma,
    /// Both ablations at once.
    Neither,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoDe,
        AblationVariant::NoEma,
        AblationVariant::Neither,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDe => "no_DE",
            AblationVariant::NoEma => "no_EMA",
            AblationVariant::Neither => "neither",
        }
    }

    pub fn apply(&self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut cfg = cfg.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoDe => cfg.weights.alpha3 = 0.0,
            AblationVariant::NoEma => cfg.beta_fd = 0.0,
            AblationVariant::Neither => {
                cfg.weights.alpha3 = 0.0;
                cfg.beta_fd = 0.0;
            }
        }
        cfg
    }
}

/// One run per variant with a shared teacher and seed.
pub fn run_ablation<F: Scalar>(
    cfg: &PipelineConfig,
    teacher: &ModelGraph<F>,
    norm: &Normalization,
    test: &LabeledDataset<F>,
    variants: &[AblationVariant],
) -> Result<Vec<(AblationVariant, Report)>> {
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let vcfg = v.apply(cfg);
        out.push((*v, run(&vcfg, teacher, norm, test)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_streams_differ() {
        let a = derive_seed(1, 1, 0);
        let b = derive_seed(1, 2, 0);
        let c = derive_seed(1, 1, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule::default();
        s.warmup_epochs = s.total_epochs;
        assert!(s.validate().is_err());
    }

    #[test]
    fn top1_hand_count() {
        let logits =
            ndarray::arr2(&[[2.0, 1.0], [0.0, 1.0], [3.0, 0.0], [0.0, 5.0]]).into_dyn();
        let acc = top1_accuracy(&logits, &[0, 0, 0, 1]).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn balanced_labels_cover_classes() {
        let l = balanced_labels(20, 10);
        for c in 0..10 {
            assert_eq!(l.iter().filter(|&&x| x == c).count(), 2);
        }
    }
}
