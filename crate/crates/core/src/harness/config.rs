//! Experiment configuration: one TOML file, every field defaulted, dotted-key
//! overrides for scripted sweeps.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/desk"
//! modes = ["dbr", "sl", "cl", "oh"]
//!
//! [dataset]
//! name = "procedural"          # or "cifar10" / "cifar100" (needs `root`)
//! classes = [0, 1, 2]          # optional subset, relabeled 0..
//! train_per_class = 200
//!
//! [teacher]
//! arch = "convnet3"
//! width = 32
//!
//! [cidd]
//! ipc = 10
//! beta = 1
//!
//! [refine]
//! iterations = 2000
//! epsilon = 0.5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cidd::CiddConfig;
use crate::data::ProceduralSpec;
use crate::error::{Error, Result};
use crate::labels::{LabelMode, RelabelConfig};
use crate::model::TrainConfig;
use crate::nn::ArchSpec;
use crate::refine::RefineConfig;
use crate::transfer::TransferConfig;

/// Overrides `dataset.root` when set.
pub const DATA_ROOT_ENV: &str = "NRRDD_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    #[default]
    Procedural,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Directory of the extracted binary CIFAR archive.
    pub root: Option<PathBuf>,
    pub classes: Option<Vec<usize>>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub procedural: ProceduralSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub arch: String,
    pub width: usize,
    /// Independent of the experiment seed so seed sweeps share one teacher.
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { arch: "convnet3".into(), width: 32, seed: 0, train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub arch: String,
    pub width: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { arch: "convnet3".into(), width: 32 }
    }
}

/// Where the synthetic images start from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initialization {
    #[default]
    Cidd,
    /// Random real training images (baseline).
    RandomReal,
}

/// Grid sweep: every value is written to every key, for every seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub keys: Vec<String>,
    pub values: Vec<toml::Value>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run directory name; derived from the distillation settings when unset.
    pub run_name: Option<String>,
    pub modes: Vec<LabelMode>,
    pub initialization: Initialization,
    pub skip_nrr: bool,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub cidd: CiddConfig,
    pub refine: RefineConfig,
    pub relabel: RelabelConfig,
    pub transfer: TransferConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            run_name: None,
            modes: vec![LabelMode::Dbr],
            initialization: Initialization::Cidd,
            skip_nrr: false,
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            cidd: CiddConfig::default(),
            refine: RefineConfig::default(),
            relabel: RelabelConfig::default(),
            transfer: TransferConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

// stage tags for derive_seed
const STAGE_CIDD: u64 = 1;
const STAGE_REFINE: u64 = 2;
const STAGE_RELABEL: u64 = 3;
const STAGE_TRANSFER: u64 = 4;
const STAGE_STUDENT_INIT: u64 = 5;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets a dotted key (`refine.epsilon`) to a TOML literal (`0.3`, `"sl"`,
    /// `[0, 1]`). Bare words that do not parse are taken as strings.
    pub fn set(&mut self, key: &str, literal: &str) -> Result<()> {
        let value = parse_literal(literal);
        self.set_value(key, value)
    }

    pub fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*p))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}` is not inside a table")))?;
        table.insert(parts[parts.len() - 1].to_string(), value.clone());
        let updated: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        // keys the schema does not know are dropped on the way back; catch them
        let check = toml::Value::try_from(&updated).map_err(|e| Error::Config(e.to_string()))?;
        let mut probe = &check;
        for p in &parts {
            probe = probe
                .get(*p)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        ArchSpec::parse(&self.teacher.arch, self.teacher.width).map_err(|e| Error::Config(e.to_string()))?;
        ArchSpec::parse(&self.student.arch, self.student.width).map_err(|e| Error::Config(e.to_string()))?;
        if self.modes.is_empty() {
            return bad("`modes` lists no label mode".into());
        }
        if self.cidd.ipc == 0 {
            return bad("cidd.ipc must be positive".into());
        }
        let side = (self.cidd.beta as f64).sqrt().round() as usize;
        if self.cidd.beta == 0 || side * side != self.cidd.beta {
            return bad(format!("cidd.beta = {} is not a positive perfect square", self.cidd.beta));
        }
        if !(self.refine.epsilon > 0.0 && self.refine.epsilon < 1.0) {
            return bad(format!("refine.epsilon = {} outside (0, 1)", self.refine.epsilon));
        }
        if self.skip_nrr && self.refine.no_bn_loss {
            return bad("no_bn_loss has no effect with skip_nrr".into());
        }
        if self.initialization == Initialization::RandomReal && !self.skip_nrr {
            return bad("random-real initialization is a baseline; set skip_nrr".into());
        }
        if self.relabel.mix != self.refine.mix {
            return bad(format!("relabel.mix ({}) differs from refine.mix ({})", self.relabel.mix, self.refine.mix));
        }
        if self.relabel.partner != self.refine.partner {
            return bad("relabel.partner differs from refine.partner".into());
        }
        if let Some(classes) = &self.dataset.classes {
            let mut sorted = classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != classes.len() || classes.is_empty() {
                return bad("dataset.classes must be a non-empty list of distinct ids".into());
            }
        }
        if let (Some(tr), Some(ipc)) = (self.dataset.train_per_class, Some(self.cidd.ipc)) {
            if tr < ipc {
                return bad(format!("dataset.train_per_class = {tr} below ipc = {ipc}"));
            }
        }
        Ok(())
    }

    /// Copy with every stage seed folded from the experiment seed, and the
    /// relabeling flags implied by the run variant.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.cidd.seed = crate::derive_seed(self.seed, STAGE_CIDD, self.cidd.seed);
        c.refine.seed = crate::derive_seed(self.seed, STAGE_REFINE, self.refine.seed);
        c.relabel.seed = crate::derive_seed(self.seed, STAGE_RELABEL, self.relabel.seed);
        c.transfer.seed = crate::derive_seed(self.seed, STAGE_TRANSFER, self.transfer.seed);
        c.relabel.allow_unrefined |= self.skip_nrr;
        c
    }

    pub fn student_init_seed(&self) -> u64 {
        crate::derive_seed(self.seed, STAGE_STUDENT_INIT, 0)
    }

    /// Data root after the environment override.
    pub fn data_root(&self) -> Option<PathBuf> {
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).or_else(|| self.dataset.root.clone())
    }

    pub fn teacher_arch(&self) -> Result<ArchSpec> {
        ArchSpec::parse(&self.teacher.arch, self.teacher.width)
    }

    pub fn student_arch(&self) -> Result<ArchSpec> {
        ArchSpec::parse(&self.student.arch, self.student.width)
    }

    /// Teacher directory name: digest of everything the teacher depends on.
    pub fn teacher_key(&self) -> String {
        let d = digest(&(&self.dataset, &self.teacher));
        format!("teacher-{}-{d:08x}", self.teacher.arch)
    }

    /// Run directory name: digest of everything the synthetic set depends on.
    pub fn run_key(&self) -> String {
        if let Some(name) = &self.run_name {
            return name.clone();
        }
        let variant = match (self.initialization, self.skip_nrr) {
            (Initialization::RandomReal, _) => "random",
            (Initialization::Cidd, true) => "cidd",
            (Initialization::Cidd, false) => "nrr",
        };
        let relevant = (&self.dataset, &self.teacher, &self.cidd, &self.refine, &self.relabel, self.skip_nrr);
        let d = digest(&(relevant, self.initialization));
        format!("{variant}-ipc{}-s{}-{d:08x}", self.cidd.ipc, self.seed)
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.output_dir.join(self.teacher_key())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.run_key())
    }

    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join(super::RESULTS_FILE)
    }
}

fn digest<S: Serialize>(value: &S) -> u32 {
    crc32fast::hash(&serde_json::to_vec(value).expect("config serializes"))
}

fn parse_literal(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}
