//! Experiment configuration: one JSON file per run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hsib_data::{PreprocessConfig, DATA_DIR_ENV};
use hsib_distill::{DistillConfig, Family, Method};
use hsib_models::{ArchSpec, ModelKind, TrainConfig};
use hsib_prune::{PruneTarget, Strategy};
use hsib_quant::QuantMode;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PruneMethod {
    L1,
    Thinet,
    Slimming,
    Sfp,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 4] = [PruneMethod::L1, PruneMethod::Thinet, PruneMethod::Slimming, PruneMethod::Sfp];

    pub fn id(self) -> &'static str {
        match self {
            PruneMethod::L1 => "l1",
            PruneMethod::Thinet => "thinet",
            PruneMethod::Slimming => "slimming",
            PruneMethod::Sfp => "sfp",
        }
    }
}

/// What a run does with the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodId {
    /// Train the configured architecture from scratch.
    Baseline,
    /// Train the pruned CNN2D architecture from random initialization.
    Scratch,
    Prune(PruneMethod),
    Quant(QuantMode),
    Kd(Method),
}

impl MethodId {
    /// Report section the method belongs to.
    pub fn section(&self) -> &'static str {
        match self {
            MethodId::Baseline => "Baselines",
            MethodId::Scratch => "Scratch",
            MethodId::Prune(_) => "Pruning",
            MethodId::Quant(_) => "Quantization",
            MethodId::Kd(m) => m.family().title(),
        }
    }

    pub fn needs_ratio(&self) -> bool {
        matches!(self, MethodId::Scratch | MethodId::Prune(_) | MethodId::Kd(_))
    }

    pub fn uses_source(&self) -> bool {
        matches!(self, MethodId::Prune(_) | MethodId::Quant(_))
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodId::Baseline => f.write_str("baseline"),
            MethodId::Scratch => f.write_str("scratch"),
            MethodId::Prune(p) => write!(f, "prune.{}", p.id()),
            MethodId::Quant(q) => write!(f, "quant.{q}"),
            MethodId::Kd(m) => write!(f, "kd.{}", m.id()),
        }
    }
}

impl FromStr for MethodId {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            BenchError::config(
                "method",
                format!("unknown method {s:?} (baseline, scratch, prune.<l1|thinet|slimming|sfp>, quant.<dynamic|static|qat>, kd.<id>)"),
            )
        };
        let (head, tail) = match s.split_once('.') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        match (head, tail) {
            ("baseline", None) => Ok(MethodId::Baseline),
            ("scratch", None) => Ok(MethodId::Scratch),
            ("prune", Some(t)) => PruneMethod::ALL
                .into_iter()
                .find(|p| p.id() == t)
                .map(MethodId::Prune)
                .ok_or_else(bad),
            ("quant", Some(t)) => t.parse().map(MethodId::Quant).map_err(|_| bad()),
            ("kd", Some(t)) => Method::ALL
                .into_iter()
                .find(|m| m.id() == t)
                .map(MethodId::Kd)
                .ok_or_else(bad),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for MethodId {
    type Error = BenchError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodId> for String {
    fn from(m: MethodId) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Header path, or a scene name looked up under the data directory.
    pub path: String,
    /// Drop the all-zero and water-absorption bands of Indian Pines first.
    #[serde(default)]
    pub clean_indian_pines: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Random,
    /// The container's own mask if it has one, else per-class row-major prefixes.
    Disjoint,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub kind: SplitKind,
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<PathBuf>,
}

/// Architecture overrides; input channels, patch and classes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cnn2d,
            filters: None,
            kernels: None,
            hidden: None,
        }
    }
}

impl ModelConfig {
    /// Full spec for data with `channels` bands, `patch` side and `classes` classes.
    pub fn resolve(&self, channels: usize, patch: usize, classes: usize) -> ArchSpec {
        let mut spec = match self.kind {
            ModelKind::Cnn2d => ArchSpec {
                patch,
                ..ArchSpec::cnn2d(classes).with_in_channels(channels)
            },
            ModelKind::Mlp => ArchSpec::mlp(channels, classes),
            ModelKind::Cnn1d => ArchSpec::cnn1d(channels, classes),
        };
        if let Some(f) = self.filters {
            spec.filters = f;
        }
        if let Some(k) = self.kernels {
            spec.kernels = k;
        }
        if let Some(h) = self.hidden {
            spec.hidden = h;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneKnobs {
    #[serde(default = "d_one_shot")]
    pub epochs_one_shot: usize,
    #[serde(default = "d_per_layer")]
    pub epochs_per_layer: usize,
    #[serde(default = "d_per_pass")]
    pub epochs_per_pass: usize,
    #[serde(default = "d_passes")]
    pub passes: usize,
}

fn d_one_shot() -> usize {
    50
}
fn d_per_layer() -> usize {
    20
}
fn d_per_pass() -> usize {
    30
}
fn d_passes() -> usize {
    3
}

impl Default for FinetuneKnobs {
    fn default() -> Self {
        Self {
            epochs_one_shot: d_one_shot(),
            epochs_per_layer: d_per_layer(),
            epochs_per_pass: d_per_pass(),
            passes: d_passes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneKnobs {
    #[serde(default = "d_lambda")]
    pub slimming_lambda: f64,
    /// Sparsity-training epochs before slimming, soft-pruning epochs for SFP.
    #[serde(default = "d_pre_epochs")]
    pub pre_epochs: usize,
    #[serde(default = "d_thinet_samples")]
    pub thinet_samples: usize,
    #[serde(default = "d_thinet_positions")]
    pub thinet_positions: usize,
}

fn d_lambda() -> f64 {
    1e-4
}
fn d_pre_epochs() -> usize {
    10
}
fn d_thinet_samples() -> usize {
    hsib_prune::MIN_CALIBRATION
}
fn d_thinet_positions() -> usize {
    16
}

impl Default for PruneKnobs {
    fn default() -> Self {
        Self {
            slimming_lambda: d_lambda(),
            pre_epochs: d_pre_epochs(),
            thinet_samples: d_thinet_samples(),
            thinet_positions: d_thinet_positions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantKnobs {
    /// Calibrate on at most this many training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_samples: Option<usize>,
    #[serde(default = "d_qat_epochs")]
    pub qat_epochs: usize,
    /// Learning rate for QAT fine-tuning; defaults to a tenth of `train.lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qat_lr: Option<f64>,
}

fn d_qat_epochs() -> usize {
    5
}

impl Default for QuantKnobs {
    fn default() -> Self {
        Self {
            calib_samples: None,
            qat_epochs: d_qat_epochs(),
            qat_lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "d_reps")]
    pub reps: usize,
    #[serde(default = "d_probes")]
    pub probes: usize,
}

fn yes() -> bool {
    true
}
fn d_reps() -> usize {
    crate::latency::MIN_REPS
}
fn d_probes() -> usize {
    crate::latency::MIN_PROBES
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            reps: d_reps(),
            probes: d_probes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Run directory name under `out_dir`; derived from the method when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub method: MethodId,
    /// Compression ratio label (90, 95 or 98).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneKnobs,
    #[serde(default)]
    pub prune: PruneKnobs,
    #[serde(default)]
    pub quant: QuantKnobs,
    /// Distillation hyperparameters, without the method (taken from `method`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<serde_json::Map<String, serde_json::Value>>,
    /// Trained float checkpoint to prune or quantize; trained here when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teachers: Vec<PathBuf>,
    #[serde(default)]
    pub latency: LatencyConfig,
    /// Seed for initialization and batching.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn check(ok: bool, field: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(BenchError::config(field, msg()))
    }
}

impl ExperimentConfig {
    /// Minimal config with every optional section at its default.
    pub fn new(dataset: impl Into<String>, split: SplitConfig, method: MethodId, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: None,
            dataset: DatasetConfig {
                path: dataset.into(),
                clean_indian_pines: false,
            },
            split,
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            method,
            ratio: None,
            strategy: None,
            train: TrainConfig::default(),
            finetune: FinetuneKnobs::default(),
            prune: PruneKnobs::default(),
            quant: QuantKnobs::default(),
            distill: None,
            source: None,
            teachers: Vec::new(),
            latency: LatencyConfig::default(),
            seed: 0,
            out_dir: out_dir.into(),
        }
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| BenchError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that need no data. Runs before anything is loaded.
    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, "schema_version", || {
            format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)
        })?;
        check(!self.dataset.path.trim().is_empty(), "dataset.path", || "must not be empty".into())?;
        if let Some(n) = &self.name {
            check(
                !n.is_empty() && !n.contains(['/', '\\']) && n != "." && n != "..",
                "name",
                || format!("{n:?} is not a plain directory name"),
            )?;
        }
        let f = self.split.fraction;
        check(f > 0.0 && f < 1.0, "split.fraction", || format!("must be in (0, 1), got {f}"))?;
        check(
            (self.split.kind == SplitKind::Mask) == self.split.mask_file.is_some(),
            "split.mask_file",
            || "required exactly when split.kind is \"mask\"".into(),
        )?;
        check(self.preprocess.patch_size % 2 == 1, "preprocess.patch_size", || {
            format!("must be odd, got {}", self.preprocess.patch_size)
        })?;
        self.validate_train(&self.train, "train")?;
        if self.latency.enabled {
            check(self.latency.reps >= crate::latency::MIN_REPS, "latency.reps", || {
                format!("must be >= {}, got {}", crate::latency::MIN_REPS, self.latency.reps)
            })?;
            check(self.latency.probes >= crate::latency::MIN_PROBES, "latency.probes", || {
                format!("must be >= {}, got {}", crate::latency::MIN_PROBES, self.latency.probes)
            })?;
        }

        let m = self.method;
        match (m.needs_ratio(), self.ratio) {
            (true, None) => return Err(BenchError::config("ratio", format!("{m} needs a ratio label (90, 95 or 98)"))),
            (true, Some(r)) => {
                PruneTarget::from_label(r).map_err(|e| BenchError::config("ratio", e.to_string()))?;
            }
            (false, Some(_)) => return Err(BenchError::config("ratio", format!("not used by {m}"))),
            (false, None) => {}
        }
        check(self.strategy.is_none() || matches!(m, MethodId::Prune(_)), "strategy", || {
            format!("only pruning methods take a strategy, not {m}")
        })?;
        check(self.source.is_none() || m.uses_source(), "source", || format!("not used by {m}"))?;
        if matches!(m, MethodId::Scratch | MethodId::Prune(_) | MethodId::Kd(_)) {
            check(self.model.kind == ModelKind::Cnn2d, "model.kind", || {
                format!("{m} works on the CNN2D classifier only")
            })?;
        }
        if let MethodId::Prune(p) = m {
            let k = &self.finetune;
            check(k.epochs_one_shot + k.epochs_per_layer + k.epochs_per_pass > 0, "finetune", || {
                "all fine-tuning epoch counts are zero".into()
            })?;
            check(k.passes >= 1, "finetune.passes", || "must be >= 1".into())?;
            if p == PruneMethod::Slimming {
                let l = self.prune.slimming_lambda;
                check(l >= 0.0 && l.is_finite(), "prune.slimming_lambda", || format!("must be >= 0, got {l}"))?;
            }
            if p == PruneMethod::Thinet {
                check(
                    self.prune.thinet_samples >= hsib_prune::MIN_CALIBRATION,
                    "prune.thinet_samples",
                    || format!("must be >= {}", hsib_prune::MIN_CALIBRATION),
                )?;
                check(self.prune.thinet_positions >= 1, "prune.thinet_positions", || "must be >= 1".into())?;
            }
        }
        if let MethodId::Quant(q) = m {
            if q == QuantMode::Qat {
                check(self.quant.qat_epochs >= 1, "quant.qat_epochs", || "must be >= 1".into())?;
                if let Some(lr) = self.quant.qat_lr {
                    check(lr > 0.0 && lr.is_finite(), "quant.qat_lr", || format!("must be > 0, got {lr}"))?;
                }
            }
            check(self.quant.calib_samples != Some(0), "quant.calib_samples", || "must be >= 1".into())?;
        }
        match m {
            MethodId::Kd(method) => {
                let need = method.teachers_needed();
                check(self.teachers.len() >= need, "teachers", || {
                    format!("{} needs {need} teacher checkpoint(s), got {}", method.id(), self.teachers.len())
                })?;
                check(method.needs_teacher() || self.teachers.is_empty(), "teachers", || {
                    format!("{} ({}) takes no teacher", method.id(), family_name(method.family()))
                })?;
                self.distill_config()?;
            }
            _ => {
                check(self.teachers.is_empty(), "teachers", || format!("not used by {m}"))?;
                check(self.distill.is_none(), "distill", || format!("not used by {m}"))?;
            }
        }
        Ok(())
    }

    fn validate_train(&self, t: &TrainConfig, field: &str) -> Result<()> {
        check(t.epochs >= 1, &format!("{field}.epochs"), || "must be >= 1".into())?;
        check(t.batch_size >= 1, &format!("{field}.batch_size"), || "must be >= 1".into())?;
        check(t.lr > 0.0 && t.lr.is_finite(), &format!("{field}.lr"), || format!("must be > 0, got {}", t.lr))?;
        check(t.weight_decay >= 0.0, &format!("{field}.weight_decay"), || "must be >= 0".into())
    }

    /// Resolved distillation hyperparameters for a `kd.*` method.
    pub fn distill_config(&self) -> Result<DistillConfig> {
        let MethodId::Kd(method) = self.method else {
            return Err(BenchError::config("method", format!("{} is not a distillation method", self.method)));
        };
        let mut map = self.distill.clone().unwrap_or_default();
        if map.contains_key("method") {
            return Err(BenchError::config("distill.method", "set the method through the top-level `method`"));
        }
        map.insert("method".into(), serde_json::to_value(method).expect("method serializes"));
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| BenchError::config("distill", e.to_string()))
    }

    /// Checks that need the class count, run once the header is read.
    pub fn validate_for(&self, classes: usize) -> Result<()> {
        if let MethodId::Kd(_) = self.method {
            self.distill_config()?
                .validate(classes)
                .map_err(|e| BenchError::config("distill", e.to_string()))?;
        }
        Ok(())
    }

    pub fn target(&self) -> Option<PruneTarget> {
        self.ratio.map(|r| PruneTarget::from_label(r).expect("validated"))
    }

    /// `(header, payload)` paths of the scene. Tries the path as given, then
    /// relative to `HSIB_DATA_DIR`, each with and without `.hsij`.
    pub fn resolve_dataset(&self) -> Result<(PathBuf, PathBuf)> {
        let raw = PathBuf::from(&self.dataset.path);
        let mut candidates = vec![raw.clone()];
        if raw.is_relative() {
            if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
                candidates.push(PathBuf::from(dir).join(&raw));
            }
        }
        for c in candidates {
            for p in [c.clone(), c.with_extension("hsij")] {
                if p.is_file() {
                    let data = p.with_extension("hsib");
                    return Ok((p, data));
                }
            }
        }
        Err(BenchError::DatasetNotFound(format!(
            "{} (also looked under ${DATA_DIR_ENV})",
            self.dataset.path
        )))
    }

    /// Short scene name used in reports.
    pub fn dataset_name(&self) -> String {
        Path::new(&self.dataset.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.dataset.path.clone())
    }

    pub fn ratio_label(&self) -> String {
        self.ratio.map_or_else(|| "-".into(), |r| format!("{r}%"))
    }

    pub fn run_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = format!("{}_{}_{}", self.method, self.dataset_name(), split_name(self.split.kind));
        if self.method == MethodId::Baseline {
            s.push_str(&format!("_{}", self.model.kind));
        }
        if let Some(r) = self.ratio {
            s.push_str(&format!("_{r}"));
        }
        if let Some(st) = self.strategy {
            s.push_str(&format!("_s{st}"));
        }
        s.push_str(&format!("_seed{}", self.seed));
        s.replace('.', "-")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Offline => "offline",
        Family::Online => "online",
        Family::SelfKd => "self",
    }
}

pub fn split_name(k: SplitKind) -> &'static str {
    match k {
        SplitKind::Random => "random",
        SplitKind::Disjoint => "disjoint",
        SplitKind::Mask => "mask",
    }
}
