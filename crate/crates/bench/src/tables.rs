//! Table layouts: the static parameter/width tables and the experiment
//! matrices behind the accuracy tables.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::PathBuf;

use hsib_data::PreprocessConfig;
use hsib_distill::Method;
use hsib_models::{ArchSpec, ModelKind, TrainConfig};
use hsib_prune::{PruneTarget, Strategy, RATIO_ROWS};
use hsib_quant::QuantMode;
use serde::Serialize;

use crate::config::{ExperimentConfig, FinetuneKnobs, MethodId, ModelConfig, PruneMethod, SplitConfig, SplitKind};
use crate::error::{BenchError, Result};
use crate::report::{emit_report, Format, ReportRow};
use crate::runner::run_many;

/// Class count used for parameter accounting (Indian Pines).
pub const ACCOUNTING_CLASSES: usize = 16;
/// PCA components; input width of every model, spectral ones included.
pub const INPUT_CHANNELS: usize = 40;

/// Tables `reproduce-table` knows.
pub const TABLES: [u32; 11] = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub model: String,
    /// conv1, conv2, fc1, fc2; absent for the spectral models.
    pub layers: Option<[usize; 4]>,
    pub total: usize,
    /// `total * 4 / 1e6`.
    pub memory_mb: f64,
    /// Memory column as published, for comparison.
    pub reference_mb: f64,
}

fn layers4(spec: &ArchSpec) -> Result<[usize; 4]> {
    let l = spec.layer_params()?;
    let get = |name: &str| l.iter().find(|(n, _)| n == name).map_or(0, |(_, v)| *v);
    Ok([get("conv1"), get("conv2"), get("fc1"), get("fc2")])
}

/// Per-layer parameter counts of CNN2D and its pruned variants, plus the
/// spectral baselines' totals, with 16 classes.
pub fn param_table() -> Result<Vec<ParamRow>> {
    let row = |model: String, spec: &ArchSpec, layers: bool, reference_mb: f64| -> Result<ParamRow> {
        let total = spec.total_params()?;
        Ok(ParamRow {
            model,
            layers: if layers { Some(layers4(spec)?) } else { None },
            total,
            memory_mb: total as f64 * 4.0 / 1e6,
            reference_mb,
        })
    };
    let cnn2d = ArchSpec::cnn2d(ACCOUNTING_CLASSES);
    let mut out = vec![
        row("MLP".into(), &ArchSpec::mlp(INPUT_CHANNELS, ACCOUNTING_CLASSES), false, 0.13)?,
        row("CNN1D".into(), &ArchSpec::cnn1d(INPUT_CHANNELS, ACCOUNTING_CLASSES), false, 0.29)?,
        row("CNN2D".into(), &cnn2d, true, 1.71)?,
    ];
    for ((ratio, _), reference) in RATIO_ROWS.iter().zip([0.60, 0.31, 0.12]) {
        let spec = PruneTarget::from_label(*ratio)?.apply_to(&cnn2d);
        out.push(row(format!("Prune ({ratio}%)"), &spec, true, reference)?);
    }
    Ok(out)
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn render_param_table(rows: &[ParamRow]) -> String {
    let mut s = String::from(
        "| Model | Conv1 | Conv2 | fc1 | fc2 | Total | Memory (MB) | Memory (MB, reference) |\n|---|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let cells = match r.layers {
            Some(l) => l.map(thousands).join(" | "),
            None => "- | - | - | -".into(),
        };
        let _ = writeln!(
            s,
            "| {} | {cells} | {} | {:.3} | {:.2} |",
            r.model,
            thousands(r.total),
            r.memory_mb,
            r.reference_mb
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WidthRow {
    pub model: String,
    pub conv1: usize,
    pub conv2: usize,
    /// Inputs of fc1, i.e. the flatten size.
    pub fc1_in: usize,
    /// Inputs of fc2, i.e. the fc1 width.
    pub fc2_in: usize,
}

/// Kept filters and neurons for each ratio label.
pub fn width_table() -> Result<Vec<WidthRow>> {
    let cnn2d = ArchSpec::cnn2d(ACCOUNTING_CLASSES);
    let mut specs = vec![("CNN2D".to_string(), cnn2d.clone())];
    for (ratio, _) in RATIO_ROWS {
        specs.push((format!("Prune ({ratio}%)"), PruneTarget::from_label(ratio)?.apply_to(&cnn2d)));
    }
    specs
        .into_iter()
        .map(|(model, s)| {
            Ok(WidthRow {
                model,
                conv1: s.filters[0],
                conv2: s.filters[1],
                fc1_in: s.flatten_len()?,
                fc2_in: s.hidden,
            })
        })
        .collect()
}

pub fn render_width_table(rows: &[WidthRow]) -> String {
    let mut s = String::from("| Model | Conv1 filters | Conv2 filters | fc1 inputs | fc2 inputs |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.model,
            r.conv1,
            r.conv2,
            thousands(r.fc1_in),
            r.fc2_in
        );
    }
    s
}

/// A benchmark scene and its training fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRef {
    /// Container path, or a name under the data directory.
    pub name: Cow<'static, str>,
    pub fraction: f64,
    pub clean_indian_pines: bool,
}

pub const INDIAN_PINES: SceneRef = SceneRef {
    name: Cow::Borrowed("indian_pines"),
    fraction: 0.55,
    clean_indian_pines: true,
};

pub const PAVIA_UNIVERSITY: SceneRef = SceneRef {
    name: Cow::Borrowed("pavia_university"),
    fraction: 0.07,
    clean_indian_pines: false,
};

/// Training budget for table runs on a CPU desk machine.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskScale {
    pub train: TrainConfig,
    pub finetune: FinetuneKnobs,
    pub pre_epochs: usize,
    pub qat_epochs: usize,
}

impl Default for DeskScale {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 40,
                batch_size: 64,
                lr: 1e-3,
                patience: Some(8),
                ..TrainConfig::default()
            },
            finetune: FinetuneKnobs {
                epochs_one_shot: 20,
                epochs_per_layer: 8,
                epochs_per_pass: 10,
                passes: 3,
            },
            pre_epochs: 10,
            qat_epochs: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub scenes: Vec<SceneRef>,
    pub splits: Vec<SplitKind>,
    pub scale: DeskScale,
    pub parallel: usize,
    pub latency: bool,
    pub preprocess: PreprocessConfig,
    /// CNN2D architecture overrides; the spectral baselines keep their defaults.
    pub model: ModelConfig,
}

impl ReproduceOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            seeds: vec![0],
            scenes: vec![INDIAN_PINES, PAVIA_UNIVERSITY],
            splits: vec![SplitKind::Disjoint, SplitKind::Random],
            scale: DeskScale::default(),
            parallel: 1,
            latency: true,
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

struct Planner<'a> {
    table: u32,
    opts: &'a ReproduceOptions,
}

impl Planner<'_> {
    fn cfg(&self, scene: &SceneRef, split: SplitKind, seed: u64, method: MethodId) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            scene.name.as_ref(),
            SplitConfig {
                kind: split,
                fraction: scene.fraction,
                seed,
                mask_file: None,
            },
            method,
            self.opts.out_dir.join(format!("table{}", self.table)),
        );
        c.dataset.clean_indian_pines = scene.clean_indian_pines;
        c.seed = seed;
        c.train = self.opts.scale.train.clone();
        c.finetune = self.opts.scale.finetune.clone();
        c.prune.pre_epochs = self.opts.scale.pre_epochs;
        c.quant.qat_epochs = self.opts.scale.qat_epochs;
        c.latency.enabled = self.opts.latency;
        c.preprocess = self.opts.preprocess.clone();
        c.model = self.opts.model.clone();
        c.model.kind = ModelKind::Cnn2d;
        c
    }

    fn cells(&self) -> Vec<(&SceneRef, SplitKind, u64)> {
        let mut out = Vec::new();
        for scene in &self.opts.scenes {
            for &split in &self.opts.splits {
                for &seed in &self.opts.seeds {
                    out.push((scene, split, seed));
                }
            }
        }
        out
    }

    fn baseline(&self, scene: &SceneRef, split: SplitKind, seed: u64, kind: ModelKind) -> ExperimentConfig {
        let mut c = self.cfg(scene, split, seed, MethodId::Baseline);
        if kind != ModelKind::Cnn2d {
            c.model = ModelConfig {
                kind,
                ..ModelConfig::default()
            };
        }
        c
    }

    fn teacher_path(&self, scene: &SceneRef, split: SplitKind, seed: u64) -> PathBuf {
        self.baseline(scene, split, seed, ModelKind::Cnn2d).run_dir().join("model.ckpt")
    }

    fn second_teacher(&self, scene: &SceneRef, split: SplitKind, seed: u64) -> ExperimentConfig {
        let mut c = self.baseline(scene, split, seed, ModelKind::Cnn2d);
        c.name = Some(format!("{}_teacher2", c.run_name()));
        c.seed = seed + 1000;
        c.latency.enabled = false;
        c
    }

    /// Config phases; each phase only depends on checkpoints of earlier ones.
    fn plan(&self) -> Result<Vec<Vec<ExperimentConfig>>> {
        let kinds = [ModelKind::Mlp, ModelKind::Cnn1d, ModelKind::Cnn2d];
        let baselines = |kinds: &[ModelKind]| -> Vec<ExperimentConfig> {
            self.cells()
                .into_iter()
                .flat_map(|(sc, sp, seed)| kinds.iter().map(move |&k| (sc, sp, seed, k)))
                .map(|(sc, sp, seed, k)| self.baseline(sc, sp, seed, k))
                .collect()
        };
        let with_source = |mut c: ExperimentConfig, sc, sp, seed| {
            c.source = Some(self.teacher_path(sc, sp, seed));
            c
        };
        Ok(match self.table {
            2 => vec![baselines(&kinds)],
            5..=7 => {
                let ratio = [90, 95, 98][(self.table - 5) as usize];
                let mut second = Vec::new();
                for (sc, sp, seed) in self.cells() {
                    let mut s = self.cfg(sc, sp, seed, MethodId::Scratch);
                    s.ratio = Some(ratio);
                    s.train.epochs += s.finetune.epochs_one_shot;
                    second.push(s);
                    for p in PruneMethod::ALL {
                        let mut c = self.cfg(sc, sp, seed, MethodId::Prune(p));
                        c.ratio = Some(ratio);
                        second.push(with_source(c, sc, sp, seed));
                    }
                }
                vec![baselines(&kinds), second]
            }
            8 => {
                let mut second = Vec::new();
                for (sc, sp, seed) in self.cells() {
                    for (ratio, _) in RATIO_ROWS {
                        for st in [Strategy::I, Strategy::II, Strategy::III] {
                            let mut c = self.cfg(sc, sp, seed, MethodId::Prune(PruneMethod::L1));
                            c.ratio = Some(ratio);
                            c.strategy = Some(st);
                            second.push(with_source(c, sc, sp, seed));
                        }
                    }
                }
                vec![baselines(&[ModelKind::Cnn2d]), second]
            }
            9 => {
                let mut second = Vec::new();
                for (sc, sp, seed) in self.cells() {
                    for q in [QuantMode::Dynamic, QuantMode::Static, QuantMode::Qat] {
                        second.push(with_source(self.cfg(sc, sp, seed, MethodId::Quant(q)), sc, sp, seed));
                    }
                }
                vec![baselines(&kinds), second]
            }
            10..=12 => {
                let ratio = [90, 95, 98][(self.table - 10) as usize];
                let mut first = baselines(&kinds);
                let mut second = Vec::new();
                for (sc, sp, seed) in self.cells() {
                    let t2 = self.second_teacher(sc, sp, seed);
                    let t2_path = t2.run_dir().join("model.ckpt");
                    first.push(t2);
                    let mut s = self.cfg(sc, sp, seed, MethodId::Scratch);
                    s.ratio = Some(ratio);
                    second.push(s);
                    for m in Method::ALL {
                        let mut c = self.cfg(sc, sp, seed, MethodId::Kd(m));
                        c.ratio = Some(ratio);
                        c.teachers = match m.teachers_needed() {
                            0 => vec![],
                            1 => vec![self.teacher_path(sc, sp, seed)],
                            _ => vec![self.teacher_path(sc, sp, seed), t2_path.clone()],
                        };
                        second.push(c);
                    }
                }
                vec![first, second]
            }
            3 | 4 => return Err(BenchError::Usage(format!("table {} needs no training runs", self.table))),
            n => return Err(BenchError::Usage(format!("unknown table {n} (expected one of {TABLES:?})"))),
        })
    }
}

/// Every config table `n` would run, in phase order.
pub fn table_plan(n: u32, opts: &ReproduceOptions) -> Result<Vec<Vec<ExperimentConfig>>> {
    Planner { table: n, opts }.plan()
}

/// Runs the matrix behind table `n` and writes `table<n>.csv` and
/// `table<n>.md` under the output directory.
pub fn reproduce_table(n: u32, opts: &ReproduceOptions) -> Result<Vec<ReportRow>> {
    let phases = table_plan(n, opts)?;
    for c in phases.iter().flatten() {
        c.validate()?;
        c.resolve_dataset()?;
    }
    let mut rows = Vec::new();
    for phase in &phases {
        for r in run_many(phase, opts.parallel) {
            rows.extend(r?.rows);
        }
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(BenchError::io(&opts.out_dir))?;
    emit_report(&rows, Format::Csv, &opts.out_dir.join(format!("table{n}.csv")))?;
    emit_report(&rows, Format::Markdown, &opts.out_dir.join(format!("table{n}.md")))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(5), "5");
        assert_eq!(thousands(1616), "1,616");
        assert_eq!(thousands(426_866), "426,866");
    }

    #[test]
    fn plans_have_expected_sizes() {
        let mut o = ReproduceOptions::new("out");
        o.seeds = vec![0, 1, 2];
        let cells = 2 * 2 * 3;
        let size = |n| table_plan(n, &o).unwrap().iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(size(2), vec![3 * cells]);
        assert_eq!(size(5), vec![3 * cells, 5 * cells]);
        assert_eq!(size(8), vec![cells, 9 * cells]);
        assert_eq!(size(9), vec![3 * cells, 3 * cells]);
        assert_eq!(size(11), vec![4 * cells, 15 * cells]);
        assert!(table_plan(3, &o).is_err());
        assert!(table_plan(13, &o).is_err());
    }

    #[test]
    fn planned_configs_validate_and_have_unique_dirs() {
        let o = ReproduceOptions::new("out");
        for n in [2, 5, 6, 7, 8, 9, 10, 11, 12] {
            let plan = table_plan(n, &o).unwrap();
            let mut dirs = std::collections::BTreeSet::new();
            for c in plan.iter().flatten() {
                c.validate().unwrap();
                assert!(dirs.insert(c.run_dir()), "table {n}: duplicate {}", c.run_dir().display());
            }
        }
    }
}
