//! Experiment configuration: TOML file, dotted command-line overrides,
//! and an environment override for the root seed.
//!
//! Defaults are the published hyperparameters with epoch counts divided
//! by 20 (the desk-scale preset); `--paper-scale` restores the full
//! schedule.

use dfq_core::data::DatasetSpec;
use dfq_core::losses::{DEConfig, LossWeights};
use dfq_core::nn::train::TeacherSchedule;
use dfq_core::pipeline::{PipelineConfig, TrainSchedule};
use dfq_core::quantizer::QuantConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ROOT_SEED_ENV: &str = "DFQ_ROOT_SEED";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub position_jitter: usize,
    pub color_jitter: u8,
    pub noise_level: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DatasetConfig {
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            image_size: d.image_size,
            position_jitter: d.position_jitter,
            color_jitter: d.color_jitter,
            noise_level: d.noise_level,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let t = TeacherSchedule::default();
        TeacherConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub range_momentum: f64,
}

impl Default for QuantSection {
    fn default() -> Self {
        let q = QuantConfig::default();
        QuantSection {
            weight_bits: q.weight_bits,
            act_bits: q.act_bits,
            range_momentum: q.range_momentum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub student_lr: f64,
    pub student_update_every: usize,
    pub init_batches: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        ScheduleSection {
            total_epochs: s.total_epochs,
            warmup_epochs: s.warmup_epochs,
            steps_per_epoch: s.steps_per_epoch,
            batch_size: s.batch_size,
            gen_lr: s.gen_lr,
            student_lr: s.student_lr,
            student_update_every: s.student_update_every,
            init_batches: s.init_batches,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsSection {
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            alpha3: w.alpha3,
            gamma: w.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DeSection {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
}

impl Default for DeSection {
    fn default() -> Self {
        let d = DEConfig::default();
        DeSection {
            lambda_mu: d.lambda_mu,
            lambda_sigma: d.lambda_sigma,
        }
    }
}

/// Full experiment configuration as persisted in TOML.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    pub arch: String,
    pub gen_arch: String,
    pub beta_fd: f64,
    pub l_st: Option<usize>,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub quant: QuantSection,
    pub schedule: ScheduleSection,
    pub weights: WeightsSection,
    pub de: DeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            root_seed: 0,
            arch: "tiny-cnn-6".into(),
            gen_arch: "tiny-gen".into(),
            beta_fd: 0.2,
            l_st: None,
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            quant: QuantSection::default(),
            schedule: ScheduleSection::default(),
            weights: WeightsSection::default(),
            de: DeSection::default(),
        }
    }
}

/// Command-line overrides; flag names mirror config keys.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long = "root-seed", global = true)]
    pub root_seed: Option<u64>,
    #[arg(long = "arch", global = true)]
    pub arch: Option<String>,
    #[arg(long = "beta-fd", global = true)]
    pub beta_fd: Option<f64>,
    #[arg(long = "l-st", global = true)]
    pub l_st: Option<usize>,
    /// Restore the paper-scale schedule (epoch counts x20).
    #[arg(long = "paper-scale", global = true)]
    pub paper_scale: bool,

    #[arg(long = "dataset.num-classes", global = true)]
    pub dataset_num_classes: Option<usize>,
    #[arg(long = "dataset.samples-per-class", global = true)]
    pub dataset_samples_per_class: Option<usize>,
    #[arg(long = "dataset.image-size", global = true)]
    pub dataset_image_size: Option<usize>,
    #[arg(long = "dataset.noise-level", global = true)]
    pub dataset_noise_level: Option<f64>,

    #[arg(long = "teacher.epochs", global = true)]
    pub teacher_epochs: Option<usize>,
    #[arg(long = "teacher.batch-size", global = true)]
    pub teacher_batch_size: Option<usize>,
    #[arg(long = "teacher.lr", global = true)]
    pub teacher_lr: Option<f64>,

    #[arg(long = "quant.weight-bits", global = true)]
    pub quant_weight_bits: Option<u32>,
    #[arg(long = "quant.act-bits", global = true)]
    pub quant_act_bits: Option<u32>,
    #[arg(long = "quant.range-momentum", global = true)]
    pub quant_range_momentum: Option<f64>,

    #[arg(long = "schedule.total-epochs", global = true)]
    pub schedule_total_epochs: Option<usize>,
    #[arg(long = "schedule.warmup-epochs", global = true)]
    pub schedule_warmup_epochs: Option<usize>,
    #[arg(long = "schedule.steps-per-epoch", global = true)]
    pub schedule_steps_per_epoch: Option<usize>,
    #[arg(long = "schedule.batch-size", global = true)]
    pub schedule_batch_size: Option<usize>,
    #[arg(long = "schedule.gen-lr", global = true)]
    pub schedule_gen_lr: Option<f64>,
    #[arg(long = "schedule.student-lr", global = true)]
    pub schedule_student_lr: Option<f64>,
    #[arg(long = "schedule.init-batches", global = true)]
    pub schedule_init_batches: Option<usize>,

    #[arg(long = "weights.alpha1", global = true)]
    pub weights_alpha1: Option<f64>,
    #[arg(long = "weights.alpha2", global = true)]
    pub weights_alpha2: Option<f64>,
    #[arg(long = "weights.alpha3", global = true)]
    pub weights_alpha3: Option<f64>,
    #[arg(long = "weights.gamma", global = true)]
    pub weights_gamma: Option<f64>,

    #[arg(long = "de.lambda-mu", global = true)]
    pub de_lambda_mu: Option<f64>,
    #[arg(long = "de.lambda-sigma", global = true)]
    pub de_lambda_sigma: Option<f64>,
}

impl ExperimentConfig {
    /// Load from an optional TOML file, apply CLI overrides, then the
    /// root-seed environment variable.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self, String> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                toml::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| format!("invalid config {}: {e}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply(ov);
        if let Ok(seed) = std::env::var(ROOT_SEED_ENV) {
            cfg.root_seed = seed
                .parse()
                .map_err(|_| format!("{ROOT_SEED_ENV} must be an unsigned integer"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = &$src {
                    $dst = v.clone();
                }
            };
        }
        set!(self.root_seed, ov.root_seed);
        set!(self.arch, ov.arch);
        set!(self.beta_fd, ov.beta_fd);
        if ov.l_st.is_some() {
            self.l_st = ov.l_st;
        }
        if ov.paper_scale {
            // Full published schedule; the desk preset is this divided
            // by 20 (warm-up rounded up to a whole epoch).
            self.schedule.total_epochs = 400;
            self.schedule.warmup_epochs = 50;
        }
        set!(self.dataset.num_classes, ov.dataset_num_classes);
        set!(self.dataset.samples_per_class, ov.dataset_samples_per_class);
        set!(self.dataset.image_size, ov.dataset_image_size);
        set!(self.dataset.noise_level, ov.dataset_noise_level);
        set!(self.teacher.epochs, ov.teacher_epochs);
        set!(self.teacher.batch_size, ov.teacher_batch_size);
        set!(self.teacher.lr, ov.teacher_lr);
        set!(self.quant.weight_bits, ov.quant_weight_bits);
        set!(self.quant.act_bits, ov.quant_act_bits);
        set!(self.quant.range_momentum, ov.quant_range_momentum);
        set!(self.schedule.total_epochs, ov.schedule_total_epochs);
        set!(self.schedule.warmup_epochs, ov.schedule_warmup_epochs);
        set!(self.schedule.steps_per_epoch, ov.schedule_steps_per_epoch);
        set!(self.schedule.batch_size, ov.schedule_batch_size);
        set!(self.schedule.gen_lr, ov.schedule_gen_lr);
        set!(self.schedule.student_lr, ov.schedule_student_lr);
        set!(self.schedule.init_batches, ov.schedule_init_batches);
        set!(self.weights.alpha1, ov.weights_alpha1);
        set!(self.weights.alpha2, ov.weights_alpha2);
        set!(self.weights.alpha3, ov.weights_alpha3);
        set!(self.weights.gamma, ov.weights_gamma);
        set!(self.de.lambda_mu, ov.de_lambda_mu);
        set!(self.de.lambda_sigma, ov.de_lambda_sigma);
    }

    /// Range validation; collects every offending key before rejecting.
    pub fn validate(&self) -> Result<(), String> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.beta_fd) {
            bad.push(format!("beta_fd={} (must be in [0, 1])", self.beta_fd));
        }
        for (name, v) in [
            ("weights.alpha1", self.weights.alpha1),
            ("weights.alpha2", self.weights.alpha2),
            ("weights.alpha3", self.weights.alpha3),
            ("weights.gamma", self.weights.gamma),
            ("de.lambda_mu", self.de.lambda_mu),
            ("de.lambda_sigma", self.de.lambda_sigma),
        ] {
            if v < 0.0 || !v.is_finite() {
                bad.push(format!("{name}={v} (must be finite and >= 0)"));
            }
        }
        for (name, v) in [
            ("quant.weight_bits", self.quant.weight_bits),
            ("quant.act_bits", self.quant.act_bits),
        ] {
            if !(2..=16).contains(&v) {
                bad.push(format!("{name}={v} (must be in 2..=16)"));
            }
        }
        if !(0.0..=1.0).contains(&self.quant.range_momentum) {
            bad.push(format!(
                "quant.range_momentum={} (must be in [0, 1])",
                self.quant.range_momentum
            ));
        }
        if self.schedule.warmup_epochs >= self.schedule.total_epochs {
            bad.push(format!(
                "schedule.warmup_epochs={} (must be < schedule.total_epochs={})",
                self.schedule.warmup_epochs, self.schedule.total_epochs
            ));
        }
        for (name, v) in [
            ("schedule.steps_per_epoch", self.schedule.steps_per_epoch),
            ("schedule.init_batches", self.schedule.init_batches),
            ("teacher.epochs", self.teacher.epochs),
        ] {
            if v == 0 {
                bad.push(format!("{name}=0 (must be >= 1)"));
            }
        }
        if self.schedule.batch_size < 2 || self.teacher.batch_size < 2 {
            bad.push("batch sizes must be >= 2".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(format!("invalid configuration: {}", bad.join("; ")))
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.dataset.num_classes,
            samples_per_class: self.dataset.samples_per_class,
            image_size: self.dataset.image_size,
            position_jitter: self.dataset.position_jitter,
            color_jitter: self.dataset.color_jitter,
            noise_level: self.dataset.noise_level,
            seed: self.root_seed,
        }
    }

    pub fn teacher_schedule(&self) -> TeacherSchedule {
        TeacherSchedule {
            epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            lr: self.teacher.lr,
            seed: self.root_seed.wrapping_add(1),
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            gen_arch: self.gen_arch.clone(),
            quant: QuantConfig {
                weight_bits: self.quant.weight_bits,
                act_bits: self.quant.act_bits,
                range_momentum: self.quant.range_momentum,
            },
            schedule: TrainSchedule {
                total_epochs: self.schedule.total_epochs,
                warmup_epochs: self.schedule.warmup_epochs,
                steps_per_epoch: self.schedule.steps_per_epoch,
                batch_size: self.schedule.batch_size,
                gen_lr: self.schedule.gen_lr,
                student_lr: self.schedule.student_lr,
                student_update_every: self.schedule.student_update_every,
                init_batches: self.schedule.init_batches,
                seed: self.root_seed.wrapping_add(2),
            },
            weights: LossWeights {
                alpha1: self.weights.alpha1,
                alpha2: self.weights.alpha2,
                alpha3: self.weights.alpha3,
                gamma: self.weights.gamma,
            },
            de: DEConfig {
                lambda_mu: self.de.lambda_mu,
                lambda_sigma: self.de.lambda_sigma,
                noise_seed: self.root_seed.wrapping_add(3),
            },
            beta_fd: self.beta_fd,
            l_st: self.l_st,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_full_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.weights.alpha1, 0.1);
        assert_eq!(cfg.weights.alpha2, 0.9);
        assert_eq!(cfg.weights.alpha3, 0.6);
        assert_eq!(cfg.weights.gamma, 1.0);
        assert_eq!(cfg.beta_fd, 0.2);
        assert_eq!(cfg.de.lambda_mu, 0.3);
        assert_eq!(cfg.de.lambda_sigma, 0.15);
        assert_eq!(cfg.schedule.total_epochs, 20);
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn out_of_range_values_are_listed_together() {
        let mut cfg = ExperimentConfig::default();
        cfg.beta_fd = 1.5;
        cfg.quant.weight_bits = 40;
        let err = cfg.validate().unwrap_err();
        assert!(err.contains("beta_fd"), "{err}");
        assert!(err.contains("quant.weight_bits"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r = toml::from_str::<ExperimentConfig>("frobnicate = 3");
        assert!(r.is_err());
    }

    #[test]
    fn paper_scale_restores_epochs() {
        let mut cfg = ExperimentConfig::default();
        let ov = Overrides {
            paper_scale: true,
            ..Overrides::default()
        };
        cfg.apply(&ov);
        assert_eq!(cfg.schedule.total_epochs, 400);
        assert_eq!(cfg.schedule.warmup_epochs, 50);
    }
}
