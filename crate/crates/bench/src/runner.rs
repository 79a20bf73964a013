//! Executes one experiment config end to end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use hsib_data::container::read_header;
use hsib_data::{clean_indian_pines, load_cube, preprocess, split_disjoint, split_random, HsiDataset, PatchSet, SplitMask};
use hsib_distill::{distill, save_outcome, DistillData, TeacherBundle};
use hsib_models::{
    count_params, estimate_memory, evaluate, load_checkpoint_for, save_checkpoint, train, uniform_dtype, CheckpointMeta,
    Metrics, ModelError, ModelGraph, ModelKind, TrainConfig,
};
use hsib_prune::{
    finetune, sfp_train, train_scratch, train_slimming, FinetuneConfig, L1Ranker, PruneRun, Ranker, SfpRanker,
    SlimmingRanker, Strategy, ThinetConfig, ThinetRanker,
};
use hsib_quant::{dynamic_quantize, load_quantized, qat_train, save_quantized, static_quantize, CalibConfig, QatConfig, QuantMode, QuantizedModel};
use hsib_tensor::RngState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, MethodId, PruneMethod, SplitKind};
use crate::error::{BenchError, Result};
use crate::latency::{measure_latency, Classifier, LatencyStats};
use crate::report::{emit_report, Format, ReportRow};

/// A scene after splitting and preprocessing.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub header: PathBuf,
    /// `random`, `disjoint` (mask shipped with the scene), `disjoint-prefix`
    /// (row-major fallback) or `mask` (external mask file).
    pub split: String,
    pub class_names: Vec<String>,
    pub classes: usize,
    pub train: PatchSet,
    pub test: PatchSet,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(PathBuf, HsiDataset)> {
    let (header, data) = cfg.resolve_dataset()?;
    let h = read_header(&header)?;
    cfg.validate_for(h.classes as usize)?;
    let mut ds = load_cube(&header, &data)?;
    if cfg.dataset.clean_indian_pines {
        ds.cube = clean_indian_pines(&ds.cube)?;
    }
    Ok((header, ds))
}

fn split_mask(cfg: &ExperimentConfig, ds: &HsiDataset) -> Result<(SplitMask, String)> {
    let s = &cfg.split;
    Ok(match s.kind {
        SplitKind::Random => (split_random(&ds.labels, s.fraction, s.seed)?, "random".into()),
        SplitKind::Disjoint => match &ds.mask {
            Some(m) => (m.clone(), "disjoint".into()),
            None => (split_disjoint(&ds.labels, s.fraction)?, "disjoint-prefix".into()),
        },
        SplitKind::Mask => {
            let path = s.mask_file.as_ref().expect("validated");
            let bytes = std::fs::read(path).map_err(BenchError::io(path))?;
            (SplitMask::new(&ds.labels, bytes)?, "mask".into())
        }
    })
}

/// Loads, splits and preprocesses the configured scene.
pub fn load_scene(cfg: &ExperimentConfig) -> Result<Scene> {
    let (header, ds) = load_dataset(cfg)?;
    let (mask, split) = split_mask(cfg, &ds)?;
    let prepared = preprocess(&ds, &cfg.preprocess, Some(&mask))?;
    let (train, test) = prepared.patches.split(&mask);
    log::info!(
        "{}: {} bands -> {} channels, {} train / {} test ({split})",
        ds.name,
        ds.cube.bands(),
        prepared.cube.bands(),
        train.len(),
        test.len()
    );
    Ok(Scene {
        name: cfg.dataset_name(),
        header,
        split,
        class_names: ds.class_names.clone(),
        classes: ds.classes(),
        train,
        test,
    })
}

/// Writes the preprocessed scene as a new container (cube after cleaning,
/// standardization and PCA; same labels; the active split as its mask).
pub fn preprocess_to_cache(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (_, ds) = load_dataset(cfg)?;
    let (mask, _) = split_mask(cfg, &ds)?;
    let prepared = preprocess(&ds, &cfg.preprocess, Some(&mask))?;
    let out = HsiDataset::new(
        format!("{}_prepared", ds.name),
        prepared.cube,
        ds.labels.clone(),
        Some(mask),
        ds.class_names.clone(),
    )?;
    let dir = cfg.run_dir();
    Ok(hsib_data::save(&out, &dir)?.header)
}

/// One-line summary of a container, after full validation of its payloads.
pub fn ingest_check(header: &Path) -> Result<String> {
    let data = header.with_extension("hsib");
    let ds = load_cube(header, &data)?;
    let counts = ds.labels.class_counts();
    Ok(format!(
        "{}: {} bands, {}x{} pixels, {} classes, {} labeled, mask {}; per class {:?}",
        ds.name,
        ds.cube.bands(),
        ds.cube.height(),
        ds.cube.width(),
        ds.classes(),
        ds.labels.labeled_count(),
        if ds.mask.is_some() { "present" } else { "absent" },
        counts
    ))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(BenchError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Everything needed to trace a row back to its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: String,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub dataset_header: PathBuf,
    pub split: String,
    /// File name in the run directory to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    pub latency: Option<LatencyStats>,
    pub tool_version: String,
    pub platform: String,
}

pub fn platform() -> String {
    format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ReportRow>,
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

enum Deployed {
    Float(ModelGraph<f32>),
    Quant { model: QuantizedModel, params: usize },
}

impl Deployed {
    fn metrics(&mut self, test: &PatchSet) -> Result<Metrics> {
        Ok(match self {
            Deployed::Float(m) => evaluate(m, test)?,
            Deployed::Quant { model, .. } => model.evaluate(test)?,
        })
    }

    fn params(&self) -> usize {
        match self {
            Deployed::Float(m) => count_params(m).total,
            Deployed::Quant { params, .. } => *params,
        }
    }

    fn memory_mb(&self) -> Result<f64> {
        Ok(match self {
            Deployed::Float(m) => estimate_memory(m, &uniform_dtype(m, 4))?,
            Deployed::Quant { model, .. } => model.memory_mb(),
        })
    }

    fn classifier(&mut self) -> &mut dyn Classifier {
        match self {
            Deployed::Float(m) => m,
            Deployed::Quant { model, .. } => model,
        }
    }
}

fn diverged(e: ModelError) -> BenchError {
    match e {
        ModelError::Diverged { epoch, msg } => BenchError::Diverged(format!("epoch {epoch}: {msg}")),
        e => e.into(),
    }
}

fn fit_model(m: &mut ModelGraph<f32>, data: &PatchSet, tc: &TrainConfig, rng: &mut RngState) -> Result<()> {
    let h = train(m, data, tc, rng).map_err(diverged)?;
    if h.last_loss().is_some_and(|l| !l.is_finite()) {
        return Err(BenchError::Diverged("non-finite final loss".into()));
    }
    m.set_training(false);
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    scene: &'a Scene,
    dir: &'a Path,
    meta: CheckpointMeta,
    artifacts: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn spec(&self) -> hsib_models::ArchSpec {
        let t = &self.scene.train;
        self.cfg.model.resolve(t.channels(), t.patch_size(), self.scene.classes)
    }

    fn save_float(&mut self, m: &ModelGraph<f32>, file: &str) -> Result<()> {
        let p = self.dir.join(file);
        save_checkpoint(m, &self.meta, &p)?;
        self.artifacts.push(p);
        Ok(())
    }

    fn save_json(&mut self, value: &impl Serialize, file: &str) -> Result<()> {
        let p = self.dir.join(file);
        std::fs::write(&p, serde_json::to_string_pretty(value)?).map_err(BenchError::io(&p))?;
        self.artifacts.push(p);
        Ok(())
    }

    /// The float model to compress: the configured checkpoint, or a fresh
    /// baseline trained with the run's settings.
    fn source(&mut self, rng: &mut RngState) -> Result<ModelGraph<f32>> {
        if let Some(p) = &self.cfg.source {
            if !p.is_file() {
                return Err(BenchError::config("source", format!("{} does not exist", p.display())));
            }
            let (mut m, _) = load_checkpoint_for(p, self.scene.classes)?;
            m.set_training(false);
            return Ok(m);
        }
        let mut m = ModelGraph::build(&self.spec(), rng)?;
        fit_model(&mut m, &self.scene.train, &self.cfg.train, rng)?;
        self.save_float(&m, "source.ckpt")?;
        Ok(m)
    }

    fn prune(&mut self, method: PruneMethod, rng: &mut RngState) -> Result<ModelGraph<f32>> {
        let cfg = self.cfg;
        let target = cfg.target().expect("validated");
        let mut src = self.source(rng)?;
        if src.spec.kind != ModelKind::Cnn2d {
            return Err(BenchError::config("source", "pruning needs a CNN2D checkpoint"));
        }
        let train_set = &self.scene.train;
        let ft = FinetuneConfig {
            train: cfg.train.clone(),
            epochs_one_shot: cfg.finetune.epochs_one_shot,
            epochs_per_layer: cfg.finetune.epochs_per_layer,
            epochs_per_pass: cfg.finetune.epochs_per_pass,
            passes: cfg.finetune.passes,
        };
        let run = PruneRun {
            train: train_set,
            eval: None,
            checkpoint_dir: None,
        };
        let strategy = cfg.strategy.unwrap_or(Strategy::I);
        let pre = cfg.train.clone().with_epochs(cfg.prune.pre_epochs.max(1));
        let mut thinet;
        let ranker: &mut dyn Ranker = match method {
            PruneMethod::L1 => &mut L1Ranker,
            PruneMethod::Thinet => {
                thinet = ThinetRanker {
                    calib: train_set,
                    cfg: ThinetConfig {
                        samples: cfg.prune.thinet_samples,
                        positions: cfg.prune.thinet_positions,
                        seed: cfg.seed,
                    },
                };
                &mut thinet
            }
            PruneMethod::Slimming => {
                train_slimming(&mut src, train_set, &pre, cfg.prune.slimming_lambda, rng)?;
                &mut SlimmingRanker
            }
            PruneMethod::Sfp => {
                sfp_train(&mut src, train_set, &target, &pre, rng)?;
                &mut SfpRanker
            }
        };
        src.set_training(false);
        let (mut m, report) = finetune(&src, ranker, &target, strategy, &run, &ft, rng)?;
        m.set_training(false);
        self.save_json(&report, "prune_report.json")?;
        Ok(m)
    }

    fn quantize(&mut self, mode: QuantMode, rng: &mut RngState) -> Result<Deployed> {
        let src = self.source(rng)?;
        let params = count_params(&src).total;
        let calib = CalibConfig {
            max_samples: self.cfg.quant.calib_samples,
            ..CalibConfig::default()
        };
        let model = match mode {
            QuantMode::Dynamic => dynamic_quantize(&src)?,
            QuantMode::Static => static_quantize(&src, &self.scene.train, &calib)?,
            QuantMode::Qat => {
                let mut tc = self.cfg.train.clone().with_epochs(self.cfg.quant.qat_epochs);
                tc.lr = self.cfg.quant.qat_lr.unwrap_or(self.cfg.train.lr / 10.0);
                let qc = QatConfig {
                    calib,
                    ..QatConfig::new(tc)
                };
                qat_train(&src, &self.scene.train, &qc, rng)?.0
            }
        };
        let p = self.dir.join("model.qckpt");
        save_quantized(&model, &self.meta, &p)?;
        self.artifacts.push(p);
        Ok(Deployed::Quant { model, params })
    }

    fn distill(&mut self, rng: &mut RngState) -> Result<ModelGraph<f32>> {
        let cfg = self.cfg;
        let dcfg = cfg.distill_config()?;
        let student_spec = cfg.target().expect("validated").apply_to(&self.spec());
        let student = ModelGraph::build(&student_spec, rng)?;
        let bundle = if dcfg.method.needs_teacher() {
            for t in &cfg.teachers {
                if !t.is_file() {
                    return Err(BenchError::MissingTeacher(t.clone()));
                }
            }
            Some(TeacherBundle::load(&cfg.teachers, self.scene.classes)?)
        } else {
            None
        };
        let data = DistillData {
            train: &self.scene.train,
            eval: None,
        };
        let out = distill(student, bundle.as_ref(), data, &dcfg, &cfg.train, rng)?;
        let (ckpt, json) = save_outcome(&out, self.dir, "model", &self.meta)?;
        self.artifacts.extend([ckpt, json]);
        let mut m = out.student;
        m.set_training(false);
        Ok(m)
    }
}

/// Latency on the first `cfg.latency.probes` test patches.
fn probe_latency(cfg: &ExperimentConfig, model: &mut dyn Classifier, test: &PatchSet) -> Result<Option<LatencyStats>> {
    if !cfg.latency.enabled {
        return Ok(None);
    }
    if test.len() < cfg.latency.probes {
        return Err(BenchError::Latency(format!(
            "test split has {} samples, fewer than latency.probes = {}",
            test.len(),
            cfg.latency.probes
        )));
    }
    let idx: Vec<usize> = (0..cfg.latency.probes).collect();
    measure_latency(model, &test.subset(&idx), cfg.latency.reps).map(Some)
}

pub fn config_digest(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_json().as_bytes()))
}

fn row_method(cfg: &ExperimentConfig) -> String {
    match cfg.method {
        MethodId::Baseline => format!("baseline.{}", cfg.model.kind),
        m => m.to_string(),
    }
}

/// Runs the configured pipeline, writing checkpoints, `rows.csv` and
/// `manifest.json` into the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let scene = load_scene(cfg)?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(BenchError::io(&dir))?;
    let digest = config_digest(cfg);
    let mut ctx = Ctx {
        cfg,
        scene: &scene,
        dir: &dir,
        meta: CheckpointMeta {
            class_names: scene.class_names.clone(),
            config_digest: digest.clone(),
            metrics: BTreeMap::new(),
        },
        artifacts: Vec::new(),
    };
    let mut rng = RngState::new(cfg.seed);
    log::info!("run {} ({})", cfg.run_name(), cfg.method);

    let mut deployed = match cfg.method {
        MethodId::Baseline => {
            let mut m = ModelGraph::build(&ctx.spec(), &mut rng)?;
            fit_model(&mut m, &scene.train, &cfg.train, &mut rng)?;
            Deployed::Float(m)
        }
        MethodId::Scratch => {
            let target = cfg.target().expect("validated");
            let (mut m, _) = train_scratch(&ctx.spec(), &target, &scene.train, &cfg.train, &mut rng)?;
            m.set_training(false);
            Deployed::Float(m)
        }
        MethodId::Prune(p) => Deployed::Float(ctx.prune(p, &mut rng)?),
        MethodId::Quant(q) => ctx.quantize(q, &mut rng)?,
        MethodId::Kd(_) => Deployed::Float(ctx.distill(&mut rng)?),
    };
    if let (Deployed::Float(m), false) = (&deployed, matches!(cfg.method, MethodId::Kd(_))) {
        let m = m.clone();
        ctx.save_float(&m, "model.ckpt")?;
    }

    let metrics = deployed.metrics(&scene.test)?;
    let latency = probe_latency(cfg, deployed.classifier(), &scene.test)?;
    let row = ReportRow {
        method: row_method(cfg),
        dataset: scene.name.clone(),
        split: scene.split.clone(),
        ratio: cfg.ratio_label(),
        top1: metrics.top1,
        top5: metrics.top5,
        params: deployed.params(),
        memory_mb: deployed.memory_mb()?,
        latency_ms: latency.map_or(0.0, |l| l.median_ms),
        seed: cfg.seed,
        wall_s: t0.elapsed().as_secs_f64(),
    };
    row.check()?;
    let rows = vec![row];
    let rows_path = dir.join("rows.csv");
    emit_report(&rows, Format::Csv, &rows_path)?;
    ctx.artifacts.push(rows_path);

    let mut artifacts = BTreeMap::new();
    for p in &ctx.artifacts {
        let name = p.file_name().expect("file").to_string_lossy().into_owned();
        artifacts.insert(name, sha256_file(p)?);
    }
    let manifest = RunManifest {
        run: cfg.run_name(),
        config: cfg.clone(),
        config_sha256: digest,
        dataset_header: scene.header.clone(),
        split: scene.split.clone(),
        artifacts,
        latency,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        platform: platform(),
    };
    let mp = dir.join("manifest.json");
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(BenchError::io(&mp))?;
    Ok(RunOutput { rows, manifest, dir })
}

/// Runs independent configs, at most `parallel` at a time. Results come
/// back in input order.
pub fn run_many(cfgs: &[ExperimentConfig], parallel: usize) -> Vec<Result<RunOutput>> {
    let parallel = parallel.clamp(1, cfgs.len().max(1));
    if parallel == 1 {
        return cfgs.iter().map(run_experiment).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunOutput>>>> = cfgs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallel {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cfgs.len() {
                    break;
                }
                let r = run_experiment(&cfgs[i]);
                *slots[i].lock().expect("slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every config ran"))
        .collect()
}

/// A float or quantized checkpoint, told apart by trying the float loader first.
pub fn load_any(path: &Path, classes: usize) -> Result<Box<dyn Classifier>> {
    if !path.is_file() {
        return Err(BenchError::io(path)(std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    match load_checkpoint_for(path, classes) {
        Ok((mut m, _)) => {
            m.set_training(false);
            Ok(Box::new(m))
        }
        Err(float_err) => match load_quantized(path) {
            Ok((q, _)) if q.classes() == classes => Ok(Box::new(q)),
            Ok((q, _)) => Err(BenchError::Model(ModelError::Mismatch {
                what: "classes",
                found: q.classes().to_string(),
                expected: classes.to_string(),
            })),
            Err(_) => Err(float_err.into()),
        },
    }
}

fn float_metrics(model: &mut dyn Classifier, test: &PatchSet, classes: usize) -> Result<Metrics> {
    let mut acc = hsib_models::MetricsAccumulator::new(classes);
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(hsib_models::eval::EVAL_BATCH) {
        let x = hsib_models::eval::batch_input(model.kind(), test, chunk);
        let logits = model.predict(&x, chunk.len())?;
        acc.add(&logits, &test.batch_labels(chunk));
    }
    Ok(acc.finish()?)
}

/// Scores a saved checkpoint on the configured test split. No training.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<ReportRow> {
    cfg.validate()?;
    let t0 = Instant::now();
    let scene = load_scene(cfg)?;
    let mut model = load_any(path, scene.classes)?;
    let metrics = float_metrics(model.as_mut(), &scene.test, scene.classes)?;
    let (params, memory_mb) = match (load_checkpoint_for(path, scene.classes), load_quantized(path)) {
        (Ok((m, _)), _) => (count_params(&m).total, estimate_memory(&m, &uniform_dtype(&m, 4))?),
        (_, Ok((q, _))) => (q.layer_params().iter().map(|(_, n)| n).sum(), q.memory_mb()),
        (Err(e), _) => return Err(e.into()),
    };
    let latency = probe_latency(cfg, model.as_mut(), &scene.test)?;
    let row = ReportRow {
        method: "evaluate".into(),
        dataset: scene.name,
        split: scene.split,
        ratio: cfg.ratio_label(),
        top1: metrics.top1,
        top5: metrics.top5,
        params,
        memory_mb,
        latency_ms: latency.map_or(0.0, |l| l.median_ms),
        seed: cfg.seed,
        wall_s: t0.elapsed().as_secs_f64(),
    };
    row.check()?;
    Ok(row)
}

/// Latency of a saved checkpoint on the configured test patches.
pub fn bench_checkpoint(cfg: &ExperimentConfig, path: &Path, reps: usize) -> Result<LatencyStats> {
    cfg.validate()?;
    let scene = load_scene(cfg)?;
    let mut model = load_any(path, scene.classes)?;
    let n = cfg.latency.probes.min(scene.test.len());
    let idx: Vec<usize> = (0..n).collect();
    measure_latency(model.as_mut(), &scene.test.subset(&idx), reps)
}
