//! TOML experiment configuration.
//!
//! Key names in the `[oialr]`, `[trp]` and `[svd]` tables follow the
//! hyperparameter grids of the method they configure, so a grid row can be
//! pasted in unchanged. A sweep file is an ordinary config plus a `[grid]`
//! table mapping dotted keys to arrays, expanded as a Cartesian product.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{DepthSchedule, Projection, RankSchedule, RowWeighting, ScheduleUnit};
use crate::error::{Error, Result};
use crate::fisher::FisherMode;
use crate::net::Activation;
use crate::trainers::{Method, TrainConfig};

/// Every trainer and one-shot projector the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Sgd,
    ProxIht,
    FisherProx,
    Oialr,
    Ieht,
    Ifht,
    GlobalIeht,
    GlobalIfht,
    Trp,
    Fwtrp,
    Svd,
    Fwsvd,
    Tfwsvd,
    Activation,
}

/// What a method tag runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodKind {
    Trainer(Method),
    OneShot(Projection),
}

impl MethodTag {
    pub fn tag(self) -> &'static str {
        match self.kind_with(&SvdSection::default(), &TrainingSection::default()) {
            MethodKind::Trainer(m) => m.tag(),
            MethodKind::OneShot(p) => p.tag(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        toml::Value::String(s.into())
            .try_into()
            .map_err(|_| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn kind_with(self, svd: &SvdSection, training: &TrainingSection) -> MethodKind {
        use MethodKind::{OneShot, Trainer};
        match self {
            MethodTag::Sgd => Trainer(Method::Sgd),
            MethodTag::ProxIht => Trainer(Method::ProxIht),
            MethodTag::FisherProx => Trainer(Method::FisherProx),
            MethodTag::Oialr => Trainer(Method::Oialr),
            MethodTag::Ieht => Trainer(Method::Ieht),
            MethodTag::Ifht => Trainer(Method::Ifht),
            MethodTag::GlobalIeht => Trainer(Method::GlobalIeht),
            MethodTag::GlobalIfht => Trainer(Method::GlobalIfht),
            MethodTag::Trp => Trainer(Method::Trp),
            MethodTag::Fwtrp => Trainer(Method::Fwtrp),
            MethodTag::Svd => OneShot(Projection::Svd),
            MethodTag::Fwsvd => OneShot(Projection::Fwsvd {
                weighting: training.weighting,
            }),
            MethodTag::Tfwsvd => OneShot(Projection::WeightedAls {
                iters: svd.als_iters,
            }),
            MethodTag::Activation => OneShot(Projection::Activation {
                eps: svd.activation_eps,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SyntheticClassification,
    DeepLinear,
    CsvDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub anisotropy: f64,
    pub teacher_rank: usize,
    /// Layers of the deep linear student (whose width is `dim`; `model.hidden`
    /// is ignored for this task).
    pub depth: usize,
    pub noise: f64,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub label_column: String,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::SyntheticClassification,
            dim: 32,
            classes: 4,
            samples: 2048,
            test_samples: 512,
            anisotropy: 1.0,
            teacher_rank: 3,
            depth: 3,
            noise: 0.0,
            path: None,
            test_path: None,
            label_column: "label".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: Activation::Tanh,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub rank_penalty: f64,
    pub steps_per_epoch: usize,
    pub fisher_mode: FisherMode,
    pub weighting: RowWeighting,
    /// Dense training before a one-shot projection.
    pub pretrain_steps: usize,
    /// Frozen-basis refit after a one-shot projection.
    pub finetune_steps: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            max_steps: 500,
            learning_rate: 0.1,
            rank_penalty: 0.0,
            steps_per_epoch: 50,
            fisher_mode: FisherMode::Empirical,
            weighting: RowWeighting::Sqrt,
            pretrain_steps: 500,
            finetune_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdSection {
    /// Absolute rank per layer, clamped to each layer's smaller dimension.
    pub rank: Option<usize>,
    /// Rank as a fraction of each layer's smaller dimension.
    pub rank_fraction: Option<f64>,
    /// Leave the output layer at full rank.
    pub keep_head: bool,
    pub als_iters: usize,
    pub activation_eps: f64,
}

impl Default for SvdSection {
    fn default() -> Self {
        Self {
            rank: None,
            rank_fraction: None,
            keep_head: false,
            als_iters: 10,
            activation_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OialrSection {
    pub oialr_threshold: f64,
    pub oialr_frequency: usize,
    pub oialr_delay: usize,
    pub oialr_type: ScheduleUnit,
    pub oialr_depth_schedule: DepthSchedule,
    pub oialr_min_rank_percent: f64,
}

impl Default for OialrSection {
    fn default() -> Self {
        Self {
            oialr_threshold: 0.9,
            oialr_frequency: 2,
            oialr_delay: 4,
            oialr_type: ScheduleUnit::Epoch,
            oialr_depth_schedule: DepthSchedule::Constant,
            oialr_min_rank_percent: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrpSection {
    pub trp_threshold: f64,
    pub trp_frequency: usize,
    pub nuclear_norm_weight: f64,
    /// Defaults to `trp_frequency / 2` (at least 1).
    pub nuclear_norm_frequency: Option<usize>,
}

impl Default for TrpSection {
    fn default() -> Self {
        Self {
            trp_threshold: 0.95,
            trp_frequency: 50,
            nuclear_norm_weight: 0.0003,
            nuclear_norm_frequency: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: MethodTag,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub svd: SvdSection,
    #[serde(default)]
    pub oialr: OialrSection,
    #[serde(default)]
    pub trp: TrpSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Default synthetic-classification experiment for `method`.
    pub fn new(method: MethodTag, seed: u64) -> Self {
        Self {
            seed,
            method,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            svd: SvdSection::default(),
            oialr: OialrSection::default(),
            trp: TrpSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`, resolves data paths relative to its directory and
    /// checks that they exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        for p in [&mut self.task.path, &mut self.task.test_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::Config(format!(
                    "data file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> MethodKind {
        self.method.kind_with(&self.svd, &self.training)
    }

    pub fn nuclear_norm_frequency(&self) -> usize {
        self.trp
            .nuclear_norm_frequency
            .unwrap_or((self.trp.trp_frequency / 2).max(1))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        let o = &self.oialr;
        TrainConfig {
            max_steps: t.max_steps,
            learning_rate: t.learning_rate,
            rank_penalty: t.rank_penalty,
            schedule: RankSchedule {
                criterion: match self.kind() {
                    MethodKind::Trainer(m) => {
                        m.criterion().unwrap_or(crate::compress::Criterion::MaxSv)
                    }
                    MethodKind::OneShot(_) => crate::compress::Criterion::FixedRank,
                },
                beta: o.oialr_threshold,
                fixed_rank: self.svd.rank,
                frequency_nu: o.oialr_frequency,
                delay_d: o.oialr_delay,
                unit: o.oialr_type,
                depth_schedule: o.oialr_depth_schedule,
                min_rank_fraction: o.oialr_min_rank_percent,
            },
            steps_per_epoch: t.steps_per_epoch,
            trp_threshold: self.trp.trp_threshold,
            trp_frequency: self.trp.trp_frequency,
            nuclear_norm_weight: self.trp.nuclear_norm_weight,
            nuclear_norm_frequency: self.nuclear_norm_frequency(),
            seed: self.seed,
            fisher_mode: t.fisher_mode,
            weighting: t.weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let task = &self.task;
        match task.kind {
            TaskKind::SyntheticClassification => {
                if task.classes < 2 || task.dim == 0 || task.samples == 0 || task.test_samples == 0
                {
                    return bad("synthetic task needs classes >= 2 and positive sizes".into());
                }
                if !(task.anisotropy >= 1.0) {
                    return bad("anisotropy must be >= 1".into());
                }
            }
            TaskKind::DeepLinear => {
                if task.teacher_rank == 0 || task.teacher_rank > task.dim || task.depth == 0 {
                    return bad(
                        "deep linear task needs 1 <= teacher_rank <= dim and depth >= 1".into(),
                    );
                }
            }
            TaskKind::CsvDataset => {
                if task.path.is_none() {
                    return bad("csv_dataset needs task.path".into());
                }
            }
        }
        if self.model.hidden.contains(&0) || !(self.model.init_scale > 0.0) {
            return bad("hidden widths and init_scale must be positive".into());
        }
        if self.training.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be at least 1".into());
        }
        if let MethodKind::OneShot(_) = self.kind() {
            match (self.svd.rank, self.svd.rank_fraction) {
                (Some(r), None) if r >= 1 => {}
                (None, Some(f)) if f > 0.0 && f <= 1.0 => {}
                _ => return bad("one-shot methods need exactly one of svd.rank >= 1 or svd.rank_fraction in (0, 1]".into()),
            }
        }
        let mut tc = self.train_config();
        if matches!(self.kind(), MethodKind::OneShot(_)) {
            tc.schedule.criterion = crate::compress::Criterion::MaxSv;
        }
        tc.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Stable 16-hex-digit digest of everything except the output section.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// IEHT on a rank-3 linear teacher: 16 wide, three layers, small init so the
/// student grows only the teacher's directions before the cuts start.
pub fn deep_linear_demo_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(MethodTag::Ieht, seed);
    cfg.task.kind = TaskKind::DeepLinear;
    cfg.task.dim = 16;
    cfg.task.teacher_rank = 3;
    cfg.task.depth = 3;
    cfg.task.samples = 256;
    cfg.model.init_scale = 0.1;
    cfg.training.max_steps = 1500;
    cfg.training.learning_rate = 0.05;
    cfg.training.steps_per_epoch = 50;
    cfg.oialr.oialr_threshold = 0.95;
    cfg.oialr.oialr_delay = 20;
    cfg.oialr.oialr_frequency = 2;
    cfg
}

/// Expands a sweep file: the `[grid]` table maps dotted keys such as
/// `oialr.oialr_threshold` or `method` to arrays of values. Keys vary in
/// sorted order with the last key fastest.
pub fn expand_grid(text: &str) -> Result<Vec<ExperimentConfig>> {
    let mut base: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let grid = match base.remove("grid") {
        None => BTreeMap::new(),
        Some(toml::Value::Table(t)) => {
            let mut out = BTreeMap::new();
            for (k, v) in t {
                match v {
                    toml::Value::Array(a) if !a.is_empty() => {
                        out.insert(k, a);
                    }
                    _ => return Err(Error::Config(format!("grid.{k} must be a non-empty array"))),
                }
            }
            out
        }
        Some(_) => return Err(Error::Config("grid must be a table".into())),
    };
    let keys: Vec<&String> = grid.keys().collect();
    let sizes: Vec<usize> = grid.values().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    let mut configs = Vec::with_capacity(total);
    for mut index in 0..total {
        let mut table = base.clone();
        let mut picks = vec![0; keys.len()];
        for d in (0..keys.len()).rev() {
            picks[d] = index % sizes[d];
            index /= sizes[d];
        }
        for (d, key) in keys.iter().enumerate() {
            set_dotted(&mut table, key, grid[*key][picks[d]].clone())?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        configs.push(ExperimentConfig::from_toml_str(&text)?);
    }
    Ok(configs)
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or(key);
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("grid key {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Loads a sweep file and resolves data paths relative to it.
pub fn load_grid(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut configs = expand_grid(&text)?;
    for c in &mut configs {
        c.resolve_paths(base)?;
    }
    Ok(configs)
}
