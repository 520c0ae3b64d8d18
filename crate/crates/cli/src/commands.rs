//! Subcommand implementations.

use crate::config::ExperimentConfig;
use crate::imaging;
use crate::manifest::{file_sha256, ExperimentManifest};
use dfq_core::checkpoint::Checkpoint;
use dfq_core::data::{load_external, make_toy_dataset, save_dataset};
use dfq_core::nn::fakequant::quantize_model;
use dfq_core::nn::model::build_classifier;
use dfq_core::nn::train::{accuracy, train_teacher as train_teacher_core};
use dfq_core::pipeline::{self, metrics_to_csv, AblationVariant};
use dfq_core::{Dataset, DfqError, Model};
use serde_json::json;
use std::path::{Path, PathBuf};

pub const TRAIN_FILE: &str = "train.dat";
pub const TEST_FILE: &str = "test.dat";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const QUANT_FILE: &str = "quantized.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const GRID_FILE: &str = "synthetic_grid.png";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PLOT_FILE: &str = "sweep.png";

#[derive(Debug)]
pub enum CmdError {
    /// A required input file does not exist (exit code 2).
    MissingArtifact(String),
    Other(String),
}

impl From<DfqError> for CmdError {
    fn from(e: DfqError) -> Self {
        match e {
            DfqError::MissingArtifact(p) => CmdError::MissingArtifact(p),
            other => CmdError::Other(other.to_string()),
        }
    }
}

impl From<String> for CmdError {
    fn from(s: String) -> Self {
        CmdError::Other(s)
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Other(e.to_string())
    }
}

type CmdResult = Result<(), CmdError>;

fn cfg_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn record(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    paths: &[PathBuf],
) -> Result<(), CmdError> {
    let mut m = ExperimentManifest::load_or_default(dir);
    m.append(dir, command, cfg.root_seed, cfg_json(cfg), paths)?;
    Ok(())
}

fn load_split(dir: &Path, file: &str) -> Result<Dataset, CmdError> {
    let path = dir.join(file);
    Ok(load_external::<f64>(&path, None)?)
}

fn load_teacher(dir: &Path) -> Result<(Model, Checkpoint), CmdError> {
    let path = dir.join(TEACHER_FILE);
    let ck = Checkpoint::load(&path)?;
    let model = ck.load_model::<f64>("teacher")?;
    Ok((model, ck))
}

pub fn gen_data(dir: &Path, cfg: &ExperimentConfig) -> CmdResult {
    let (train, test) = make_toy_dataset::<f64>(&cfg.dataset_spec())?;
    let train_path = dir.join(TRAIN_FILE);
    let test_path = dir.join(TEST_FILE);
    save_dataset(&train, &train_path)?;
    save_dataset(&test, &test_path)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        train.len(),
        test_path.display(),
        test.len()
    );
    record(dir, "gen-data", cfg, &[train_path, test_path])
}

pub fn train_teacher(dir: &Path, cfg: &ExperimentConfig) -> CmdResult {
    let train = load_split(dir, TRAIN_FILE)?;
    let test = load_split(dir, TEST_FILE)?;
    let mut model = build_classifier::<f64>(&cfg.arch, train.num_classes, cfg.root_seed)?;
    let losses = train_teacher_core(&mut model, &train, &cfg.teacher_schedule())?;
    let acc = accuracy(&mut model, &test)?;
    println!(
        "teacher trained: {} epochs, final loss {:.4}, test accuracy {:.3}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        acc
    );
    let mut ck = Checkpoint::new(json!({
        "root_seed": cfg.root_seed,
        "norm": train.norm,
        "test_accuracy": acc,
    }));
    ck.add_model("teacher", &mut model);
    let path = dir.join(TEACHER_FILE);
    ck.save(&path)?;
    record(dir, "train-teacher", cfg, &[path])
}

pub fn quantize(dir: &Path, cfg: &ExperimentConfig) -> CmdResult {
    let (teacher, teacher_ck) = load_teacher(dir)?;
    let pcfg = cfg.pipeline_config();
    let mut q = quantize_model(&teacher, pcfg.quant)?;
    let mut ck = Checkpoint::new(json!({
        "root_seed": cfg.root_seed,
        "norm": teacher_ck.manifest["norm"],
    }));
    ck.add_quant_model("student", &mut q);
    let path = dir.join(QUANT_FILE);
    ck.save(&path)?;
    println!(
        "quantized teacher at W{}A{} -> {}",
        pcfg.quant.weight_bits,
        pcfg.quant.act_bits,
        path.display()
    );
    record(dir, "quantize", cfg, &[path])
}

fn norm_from(ck: &Checkpoint) -> Result<dfq_core::nn::generator::Normalization, CmdError> {
    serde_json::from_value(ck.manifest["norm"].clone())
        .map_err(|e| CmdError::Other(format!("teacher checkpoint lacks norm: {e}")))
}

pub fn dfq_run(dir: &Path, cfg: &ExperimentConfig) -> CmdResult {
    let test = load_split(dir, TEST_FILE)?;
    let (teacher, teacher_ck) = load_teacher(dir)?;
    let norm = norm_from(&teacher_ck)?;
    let pcfg = cfg.pipeline_config();

    let (report, mut state) = pipeline::run_with_state(&pcfg, &teacher, &norm, &test)?;

    let metrics_path = dir.join(METRICS_FILE);
    std::fs::write(&metrics_path, metrics_to_csv(&report.metrics))?;

    let report_path = dir.join(REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())?;

    let mut ck = Checkpoint::new(json!({
        "root_seed": cfg.root_seed,
        "norm": norm,
        "final_accuracy": report.final_acc,
        "teacher_hash": report.teacher_hash,
    }));
    ck.add_quant_model("student", &mut state.student);
    ck.add_generator("generator", &mut state.generator);
    if let Some(bank) = &state.bank {
        ck.add_bank("bank", bank);
    }
    let student_path = dir.join(STUDENT_FILE);
    ck.save(&student_path)?;

    let grid_path = dir.join(GRID_FILE);
    imaging::dump_synthetic_grid(&mut state.generator, &norm, 8, cfg.root_seed, &grid_path)?;

    println!(
        "dfq-run: FP {:.3} | no-fine-tune {:.3} | final {:.3} (fisher {:.3} -> {:.3})",
        report.fp_acc,
        report.no_finetune_acc,
        report.final_acc,
        report.fisher_warmup,
        report.fisher_final
    );
    record(
        dir,
        "dfq-run",
        cfg,
        &[metrics_path, report_path, student_path, grid_path],
    )
}

pub fn eval(dir: &Path, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CmdResult {
    let test = load_split(dir, TEST_FILE)?;
    let default_path = dir.join(STUDENT_FILE);
    let path = checkpoint.unwrap_or(&default_path);
    let ck = Checkpoint::load(path)?;
    let acc = if ck.manifest["components"]["student"].is_object() {
        let mut q = ck.load_quant_model::<f64>("student")?;
        pipeline::evaluate_quant(&mut q, &test)?
    } else {
        let mut m = ck.load_model::<f64>("teacher")?;
        accuracy(&mut m, &test)?
    };
    println!("{}: test accuracy {:.4}", path.display(), acc);
    record(dir, "eval", cfg, &[])
}

pub fn ablate(dir: &Path, cfg: &ExperimentConfig) -> CmdResult {
    let test = load_split(dir, TEST_FILE)?;
    let (teacher, teacher_ck) = load_teacher(dir)?;
    let norm = norm_from(&teacher_ck)?;
    let pcfg = cfg.pipeline_config();
    let results = pipeline::run_ablation(&pcfg, &teacher, &norm, &test, &AblationVariant::ALL)?;

    let mut csv = String::from("variant,final_acc,no_finetune_acc,fisher_final,diversity_final\n");
    println!("variant     final   raw     fisher  diversity");
    for (v, r) in &results {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            v.name(),
            r.final_acc,
            r.no_finetune_acc,
            r.fisher_final,
            r.diversity_final
        ));
        println!(
            "{:<11} {:.4}  {:.4}  {:.4}  {:.4}",
            v.name(),
            r.final_acc,
            r.no_finetune_acc,
            r.fisher_final,
            r.diversity_final
        );
    }
    let path = dir.join(ABLATION_FILE);
    std::fs::write(&path, csv)?;
    record(dir, "ablate", cfg, &[path])
}

pub fn sweep(
    dir: &Path,
    cfg: &ExperimentConfig,
    param: &str,
    values: &[f64],
    repeats: usize,
) -> CmdResult {
    if !matches!(param, "beta_fd" | "alpha3") {
        return Err(CmdError::Other(format!(
            "sweep parameter must be beta_fd or alpha3, got {param}"
        )));
    }
    if values.is_empty() || repeats == 0 {
        return Err(CmdError::Other("need at least one value and one repeat".into()));
    }
    for &v in values {
        let ok = match param {
            "beta_fd" => (0.0..=1.0).contains(&v),
            _ => v >= 0.0,
        };
        if !ok {
            return Err(CmdError::Other(format!("value {v} out of range for {param}")));
        }
    }
    let test = load_split(dir, TEST_FILE)?;
    let (teacher, teacher_ck) = load_teacher(dir)?;
    let norm = norm_from(&teacher_ck)?;

    let mut csv = String::from("param,value,repeat,final_acc\n");
    let mut medians = Vec::new();
    for &v in values {
        let mut accs = Vec::new();
        for rep in 0..repeats {
            let mut pcfg = cfg.pipeline_config();
            match param {
                "beta_fd" => pcfg.beta_fd = v,
                _ => pcfg.weights.alpha3 = v,
            }
            pcfg.schedule.seed = pcfg.schedule.seed.wrapping_add(rep as u64);
            let r = pipeline::run(&pcfg, &teacher, &norm, &test)?;
            csv.push_str(&format!("{param},{v},{rep},{}\n", r.final_acc));
            accs.push(r.final_acc);
        }
        accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = accs[accs.len() / 2];
        println!("{param} = {v}: median accuracy {median:.4} over {repeats} repeats");
        medians.push((v, median));
    }
    let csv_path = dir.join(SWEEP_FILE);
    std::fs::write(&csv_path, csv)?;
    let plot_path = dir.join(SWEEP_PLOT_FILE);
    imaging::line_plot(&[(param, medians)], &plot_path)?;
    record(dir, "sweep", cfg, &[csv_path, plot_path])
}

/// Summarize existing artifacts; verifies hashes, never trains.
pub fn report(dir: &Path) -> CmdResult {
    let manifest_path = dir.join(crate::manifest::MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CmdError::MissingArtifact(
            manifest_path.display().to_string(),
        ));
    }
    let m = ExperimentManifest::load_or_default(dir);
    let mut bad = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for e in &m.entries {
        for a in &e.artifacts {
            if !seen.insert(a.path.clone()) {
                continue; // verified at its latest record below
            }
        }
    }
    // Verify each artifact against its most recent hash.
    for rel in &seen {
        let latest = m.find(rel).unwrap();
        let p = dir.join(rel);
        match file_sha256(&p) {
            Ok((h, _)) if h == latest.sha256 => {}
            Ok(_) => bad.push(format!("{rel}: hash mismatch")),
            Err(_) => bad.push(format!("{rel}: missing")),
        }
    }
    println!("experiment directory: {}", dir.display());
    println!("manifest entries: {}", m.entries.len());
    for e in &m.entries {
        println!(
            "  [{}] seed {} -> {} artifact(s)",
            e.command,
            e.root_seed,
            e.artifacts.len()
        );
    }
    if let Ok(text) = std::fs::read_to_string(dir.join(REPORT_FILE)) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            println!(
                "last run: FP {} | no-fine-tune {} | final {}",
                v["fp_acc"], v["no_finetune_acc"], v["final_acc"]
            );
        }
    }
    if bad.is_empty() {
        println!("all recorded artifacts verified");
        Ok(())
    } else {
        Err(CmdError::Other(format!(
            "artifact verification failed: {}",
            bad.join("; ")
        )))
    }
}
