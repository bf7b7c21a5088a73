//! Experiment orchestration behind the `nrrdd` CLI.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! teacher-<arch>-<digest>/   teacher.nrsn, metrics.json, config.toml
//! runs/<variant>-ipc<N>-s<seed>-<digest>/
//!     synthetic/             images.bin, manifest.json, previews/
//!     labels_<mode>.nrrd
//!     student-<mode>-<digest>.{nrsn,jsonl,json}
//!     config.toml
//! results.jsonl
//! report/
//! ```
//!
//! Directory names are digests of the settings that produced them, so a
//! command whose outputs exist is skipped unless forced.

pub mod config;
pub mod report;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cidd::{discover, random_real};
use crate::data::{load_cifar, procedural, Dataset, Normalization, Splits};
use crate::error::{Error, Result};
use crate::labels::{relabel, LabelMode, LabelStore};
use crate::manifest::{load_synthetic, save_synthetic, MANIFEST_FILE};
use crate::model::{train_teacher, write_atomic, ModelSnapshot};
use crate::refine::refine_dataset;
use crate::transfer::{evaluate, recover_rate, train_student, StudentSetup};

pub use config::{DatasetName, ExperimentConfig, Initialization, DATA_ROOT_ENV};
pub use report::{cmd_report, ReportOutputs};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TEACHER_FILE: &str = "teacher.nrsn";
pub const SYNTHETIC_DIR: &str = "synthetic";

/// Seed of the class/per-class subset draw; fixed so every experiment seed
/// sees the same desk dataset.
const SUBSET_SEED: u64 = 0x5B5E_7D47;

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Recompute even when outputs exist.
    pub force: bool,
    /// Write PNG previews of the synthetic images.
    pub previews: bool,
}

/// Process exit code for an error: 2 configuration, 3 missing artifact, 1 other.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

/// The configured dataset with its class subset and per-class caps applied,
/// pixel values in `[0, 1]`.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits<f32>> {
    let splits = match cfg.dataset.name {
        DatasetName::Procedural => procedural(&cfg.dataset.procedural)?,
        name @ (DatasetName::Cifar10 | DatasetName::Cifar100) => {
            let root = cfg.data_root().ok_or_else(|| {
                Error::Config(format!("dataset `{name:?}` needs `dataset.root` or the {DATA_ROOT_ENV} variable"))
            })?;
            load_cifar(&root, name == DatasetName::Cifar100)?
        }
    };
    let classes = cfg.dataset.classes.as_deref();
    Ok(Splits {
        train: splits.train.subset(classes, cfg.dataset.train_per_class, SUBSET_SEED)?,
        test: splits.test.subset(classes, cfg.dataset.test_per_class, SUBSET_SEED ^ 1)?,
    })
}

fn normalized(mut splits: Splits<f32>, norm: &Normalization) -> Splits<f32> {
    norm.apply(&mut splits.train);
    norm.apply(&mut splits.test);
    splits
}

fn dataset_label(cfg: &ExperimentConfig) -> String {
    let name = match cfg.dataset.name {
        DatasetName::Procedural => "procedural",
        DatasetName::Cifar10 => "cifar10",
        DatasetName::Cifar100 => "cifar100",
    };
    match &cfg.dataset.classes {
        Some(c) => format!("{name}[{} classes]", c.len()),
        None => name.to_string(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub snapshot_crc: u32,
    pub seconds: f64,
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig, opts: RunOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.teacher_dir();
    let path = dir.join(TEACHER_FILE);
    if path.exists() && !opts.force {
        log::info!("teacher exists at {}, skipping", path.display());
        return Ok(path);
    }
    let raw = load_splits(cfg)?;
    let norm = Normalization::fit(&raw.train);
    let splits = normalized(raw, &norm);
    let arch = cfg.teacher_arch()?;
    log::info!("training {} on {} images", arch.id, splits.train.len());
    let start = Instant::now();
    let mut snap = train_teacher(&splits.train, Some(&splits.test), &arch, &cfg.teacher.train, norm, cfg.teacher.seed)?;
    snap.meta.dataset = dataset_label(cfg);
    create_dir(&dir)?;
    let bytes = snap.to_bytes();
    write_atomic(&path, &bytes)?;
    let metrics = TeacherMetrics {
        arch: arch.id.clone(),
        dataset: snap.meta.dataset.clone(),
        seed: cfg.teacher.seed,
        epochs: cfg.teacher.train.epochs,
        train_accuracy: snap.meta.train_accuracy.unwrap_or(f64::NAN),
        test_accuracy: snap.meta.test_accuracy.unwrap_or(f64::NAN),
        snapshot_crc: crc32fast::hash(&bytes),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_atomic(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&metrics)?)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    log::info!("teacher test accuracy {:.4}", metrics.test_accuracy);
    Ok(path)
}

pub fn load_teacher(cfg: &ExperimentConfig) -> Result<ModelSnapshot<f32>> {
    let path = cfg.teacher_dir().join(TEACHER_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    ModelSnapshot::load(&path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub run: String,
    pub records: usize,
    pub refined: bool,
    /// Median per-record `L_C` before and after refinement.
    pub median_loss_initial: Option<f64>,
    pub median_loss_final: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutputs {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub stores: Vec<(LabelMode, PathBuf)>,
    pub summary: DistillSummary,
}

pub fn store_path(run_dir: &Path, mode: LabelMode) -> PathBuf {
    run_dir.join(format!("labels_{mode}.nrrd"))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// CIDD → NRR → relabel for every configured label mode.
pub fn cmd_distill(cfg: &ExperimentConfig, opts: RunOptions) -> Result<DistillOutputs> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let manifest = run_dir.join(SYNTHETIC_DIR).join(MANIFEST_FILE);
    let stores: Vec<(LabelMode, PathBuf)> = cfg.modes.iter().map(|&m| (m, store_path(&run_dir, m))).collect();
    let summary_path = run_dir.join("distill.json");
    if !opts.force && summary_path.exists() && manifest.exists() && stores.iter().all(|(_, p)| p.exists()) {
        log::info!("run {} exists, skipping distillation", cfg.run_key());
        return Ok(DistillOutputs { summary: read_json(&summary_path)?, run_dir, manifest, stores });
    }
    let teacher = load_teacher(cfg)?;
    let splits = normalized(load_splits(cfg)?, &teacher.normalization);
    if teacher.num_classes() != splits.train.num_classes || teacher.input_shape() != splits.train.image_shape() {
        return Err(Error::Config("teacher snapshot does not match the configured dataset".into()));
    }
    let r = cfg.resolved();
    let start = Instant::now();
    let mut records = match cfg.initialization {
        Initialization::Cidd => discover(&teacher, &splits.train, &r.cidd)?.1,
        Initialization::RandomReal => random_real(&splits.train, r.cidd.ipc, r.cidd.seed)?,
    };
    log::info!("{} initial images", records.len());
    if !cfg.skip_nrr {
        refine_dataset(&teacher, &mut records, &r.refine)?;
    }
    create_dir(&run_dir)?;
    for (mode, path) in &stores {
        let store = relabel(&teacher, &mut records, *mode, &r.relabel)?;
        store.write(path)?;
    }
    let summary = DistillSummary {
        run: cfg.run_key(),
        records: records.len(),
        refined: !cfg.skip_nrr,
        median_loss_initial: median(records.iter().filter_map(|x| x.loss_initial).collect()),
        median_loss_final: median(records.iter().filter_map(|x| x.loss_final).collect()),
        seconds: start.elapsed().as_secs_f64(),
    };
    let notes = serde_json::json!({
        "seed": cfg.seed,
        "run": summary.run,
        "teacher": cfg.teacher_key(),
        "median_loss_initial": summary.median_loss_initial,
        "median_loss_final": summary.median_loss_final,
    });
    save_synthetic(
        &run_dir.join(SYNTHETIC_DIR),
        &records,
        teacher.input_shape(),
        teacher.num_classes(),
        &teacher.normalization,
        notes,
        opts.previews,
    )?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    write_atomic(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;
    Ok(DistillOutputs { run_dir, manifest, stores, summary })
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run: String,
    pub variant: String,
    pub mode: LabelMode,
    pub ipc: usize,
    pub beta: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub r: f64,
    pub alpha_lr: f64,
    pub accuracy: f64,
    /// Size of the label store file.
    pub store_bytes: u64,
    /// Label payload bytes only.
    pub label_bytes: u64,
    /// `(DBR - OH) / (SL - OH)` on the DBR row when all three ran together.
    pub recover_rate: Option<f64>,
}

impl ResultRow {
    pub const COLUMNS: [&'static str; 13] = [
        "run",
        "variant",
        "mode",
        "ipc",
        "beta",
        "seed",
        "epsilon",
        "r",
        "alpha_lr",
        "accuracy",
        "store_bytes",
        "label_bytes",
        "recover_rate",
    ];

    pub fn cells(&self) -> [String; 13] {
        [
            self.run.clone(),
            self.variant.clone(),
            self.mode.to_string(),
            self.ipc.to_string(),
            self.beta.to_string(),
            self.seed.to_string(),
            format!("{}", self.epsilon),
            format!("{}", self.r),
            format!("{}", self.alpha_lr),
            format!("{:.4}", self.accuracy),
            self.store_bytes.to_string(),
            self.label_bytes.to_string(),
            self.recover_rate.map_or_else(|| "-".to_string(), |v| format!("{v:.3}")),
        ]
    }
}

pub fn variant_name(cfg: &ExperimentConfig) -> String {
    match (cfg.initialization, cfg.skip_nrr) {
        (Initialization::RandomReal, _) => "random-real".into(),
        (Initialization::Cidd, true) => "cidd".into(),
        (Initialization::Cidd, false) if cfg.refine.no_bn_loss => "cidd+nrr-nobn".into(),
        (Initialization::Cidd, false) => "cidd+nrr".into(),
    }
}

fn student_stem(cfg: &ExperimentConfig, mode: LabelMode) -> String {
    let d = crc32fast::hash(&serde_json::to_vec(&(&cfg.student, &cfg.transfer)).expect("config serializes"));
    format!("student-{mode}-{d:08x}")
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(f, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains and evaluates one student per configured mode; appends new rows.
pub fn cmd_transfer(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let set = load_synthetic::<f32>(&run_dir.join(SYNTHETIC_DIR))?;
    let images = set.images();
    let norm = set.manifest.normalization.clone();
    let test = normalized(load_splits(cfg)?, &norm).test;
    if test.num_classes != set.manifest.num_classes {
        return Err(Error::Config("synthetic set and test split disagree on the class count".into()));
    }
    let arch = cfg.student_arch()?;
    let r = cfg.resolved();
    let mut rows = Vec::new();
    let mut fresh = Vec::new();
    for &mode in &cfg.modes {
        let store_file = store_path(&run_dir, mode);
        if !store_file.exists() {
            return Err(Error::MissingArtifact(store_file));
        }
        let stem = student_stem(cfg, mode);
        let row_path = run_dir.join(format!("{stem}.json"));
        if row_path.exists() && !opts.force {
            log::info!("{stem} exists, skipping");
            rows.push(read_json(&row_path)?);
            continue;
        }
        let store = LabelStore::read(&store_file, Some(mode))?;
        let student = train_one(&store, &images, mode, &arch, &set.manifest.input_shape, &norm, &test, &r, &run_dir, &stem)?;
        let row = ResultRow {
            run: cfg.run_key(),
            variant: variant_name(cfg),
            mode,
            ipc: cfg.cidd.ipc,
            beta: cfg.cidd.beta,
            seed: cfg.seed,
            epsilon: cfg.refine.epsilon,
            r: cfg.refine.r,
            alpha_lr: cfg.refine.alpha_lr,
            accuracy: student,
            store_bytes: std::fs::metadata(&store_file).map_err(|e| Error::io(&store_file, e))?.len(),
            label_bytes: store.label_data_bytes() as u64,
            recover_rate: None,
        };
        log::info!("{mode}: accuracy {:.4}", row.accuracy);
        fresh.push(rows.len());
        rows.push(row);
    }
    let acc = |m: LabelMode| rows.iter().find(|x| x.mode == m).map(|x| x.accuracy);
    if let (Some(d), Some(o), Some(s)) = (acc(LabelMode::Dbr), acc(LabelMode::Oh), acc(LabelMode::Sl)) {
        if let Some(row) = rows.iter_mut().find(|x| x.mode == LabelMode::Dbr) {
            row.recover_rate = recover_rate(d, o, s);
        }
    }
    for &i in &fresh {
        let stem = student_stem(cfg, rows[i].mode);
        write_atomic(&run_dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&rows[i])?)?;
    }
    let new_rows: Vec<ResultRow> = fresh.iter().map(|&i| rows[i].clone()).collect();
    append_results(&cfg.results_path(), &new_rows)?;
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    store: &LabelStore,
    images: &[Vec<f32>],
    mode: LabelMode,
    arch: &crate::nn::ArchSpec,
    shape: &[usize; 3],
    norm: &Normalization,
    test: &Dataset<f32>,
    cfg: &ExperimentConfig,
    run_dir: &Path,
    stem: &str,
) -> Result<f64> {
    let init = ModelSnapshot {
        arch: arch.clone(),
        net: arch.build(*shape, store.num_classes, cfg.student_init_seed())?,
        normalization: norm.clone(),
        meta: Default::default(),
    };
    let setup = StudentSetup { arch, input_shape: *shape, normalization: norm, init: Some(&init), test: Some(test) };
    let log_path = run_dir.join(format!("{stem}.jsonl"));
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let run = train_student(store, images, mode, &setup, &cfg.transfer, Some(&mut log_file))?;
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    let accuracy = evaluate(&run.snapshot, test)?;
    run.snapshot.save(&run_dir.join(format!("{stem}.nrsn")))?;
    Ok(accuracy)
}

/// Accuracy of a snapshot (the teacher by default) on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, snapshot: Option<&Path>) -> Result<f64> {
    let snap = match snapshot {
        Some(p) => ModelSnapshot::<f32>::load(p)?,
        None => load_teacher(cfg)?,
    };
    let test = normalized(load_splits(cfg)?, &snap.normalization).test;
    evaluate(&snap, &test)
}

/// Teacher, then distill + transfer for every (seed, value) of `cfg.sweep`.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<ResultRow>> {
    let sweep = &cfg.sweep;
    if !sweep.keys.is_empty() && sweep.values.is_empty() {
        return Err(Error::Config("sweep.keys given without sweep.values".into()));
    }
    let seeds = if sweep.seeds.is_empty() { vec![cfg.seed] } else { sweep.seeds.clone() };
    let values: Vec<Option<&toml::Value>> =
        if sweep.keys.is_empty() { vec![None] } else { sweep.values.iter().map(Some).collect() };
    cmd_train_teacher(cfg, RunOptions { force: false, ..opts })?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        for value in &values {
            let mut c = cfg.clone();
            c.seed = seed;
            if let Some(v) = value {
                for key in &sweep.keys {
                    c.set_value(key, (*v).clone())?;
                }
            }
            c.validate()?;
            log::info!("sweep point seed={seed} value={}", value.map_or("-".to_string(), |v| v.to_string()));
            cmd_distill(&c, opts)?;
            rows.extend(cmd_transfer(&c, opts)?);
        }
    }
    Ok(rows)
}
