//! Acceptance checks. Each test prints one `criterion N ...: PASS|FAIL`
//! line before asserting, so `cargo test --test acceptance -- --nocapture`
//! gives a readable summary.

#[path = "../../distill/tests/common/mod.rs"]
mod kd;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hsib_bench::config::{ExperimentConfig, MethodId, PruneMethod, SplitConfig, SplitKind};
use hsib_bench::report::{read_csv, ReportRow};
use hsib_bench::runner::run_experiment;
use hsib_bench::tables::{param_table, width_table, DeskScale, SceneRef, INDIAN_PINES, PAVIA_UNIVERSITY};
use hsib_data::synth::{generate, SceneSpec};
use hsib_data::{preprocess, PatchSet, PreprocessConfig, DATA_DIR_ENV};
use hsib_distill::losses::*;
use hsib_distill::Method;
use hsib_models::{estimate_memory, uniform_dtype, ArchSpec, ModelGraph, TrainConfig};
use hsib_prune::{greedy_keep, ContributionGram, Strategy};
use hsib_quant::{compute_qparams, dynamic_quantize, qat_train, static_quantize, CalibConfig, QatConfig, QuantMode};
use hsib_tensor::gradcheck::max_rel_error;
use hsib_tensor::{RngState, Tape, Var};

fn verdict(n: u32, name: &str, ok: bool, details: impl AsRef<str>) {
    println!(
        "criterion {n} {name}: {} ({})",
        if ok { "PASS" } else { "FAIL" },
        details.as_ref()
    );
    assert!(ok, "criterion {n} {name}: {}", details.as_ref());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// ---- 1. parameter accounting ----

#[test]
fn criterion_01_parameter_accounting() {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_hsib"))
        .args(["reproduce-table", "3"])
        .output()
        .expect("run hsib");
    let elapsed = t0.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let cells = |model: &str| -> Vec<String> {
        text.lines()
            .find(|l| l.starts_with(&format!("| {model} |")))
            .map(|l| l.split('|').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect())
            .unwrap_or_default()
    };
    let cnn = cells("CNN2D");
    let want_layers = ["50,050", "125,100", "250,100", "1,616", "426,866"];
    let mut problems = Vec::new();
    if cnn.get(1..6).map(|c| c.to_vec()) != Some(want_layers.map(String::from).to_vec()) {
        problems.push(format!("CNN2D row {cnn:?}"));
    }
    for (label, total) in [("90", "49,321"), ("95", "25,386"), ("98", "8,951")] {
        let row = cells(&format!("Prune ({label}%)"));
        if row.get(5).map(String::as_str) != Some(total) {
            problems.push(format!("{label}% row {row:?}"));
        }
    }
    // the library view must agree with the rendered one
    let rows = param_table().unwrap();
    let lib = rows.iter().find(|r| r.model == "CNN2D").unwrap();
    if lib.layers != Some([50_050, 125_100, 250_100, 1_616]) || lib.total != 426_866 {
        problems.push(format!("param_table CNN2D {lib:?}"));
    }
    let ok = out.status.success() && problems.is_empty() && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "parameter accounting",
        ok,
        format!("exit {:?}, {:.3} s, mismatches {problems:?}", out.status.code(), elapsed.as_secs_f64()),
    );
}

// ---- 2. pruned widths ----

#[test]
fn criterion_02_pruned_architecture_map() {
    let rows = width_table().unwrap();
    let got: Vec<(String, usize, usize, usize, usize)> = rows
        .iter()
        .map(|r| (r.model.clone(), r.conv1, r.conv2, r.fc1_in, r.fc2_in))
        .collect();
    let want = vec![
        ("CNN2D".to_string(), 50, 100, 2_500, 100),
        ("Prune (90%)".to_string(), 15, 30, 750, 30),
        ("Prune (95%)".to_string(), 10, 20, 500, 20),
        ("Prune (98%)".to_string(), 5, 10, 250, 10),
    ];
    verdict(2, "pruned architecture map", got == want, format!("{got:?}"));
}

// ---- 3. memory ----

/// Synthetic 40-channel, 19x19 patches for calibration and a short QAT run.
fn wide_patches(n: usize) -> PatchSet {
    let ds = generate(&SceneSpec {
        bands: 48,
        height: 24,
        width: 24,
        unlabeled: 0.2,
        ..SceneSpec::small(3)
    })
    .unwrap();
    let prepared = preprocess(&ds, &PreprocessConfig::default(), None).unwrap();
    let idx: Vec<usize> = (0..n.min(prepared.patches.len())).collect();
    prepared.patches.subset(&idx)
}

#[test]
fn criterion_03_memory_accounting() {
    let m = ModelGraph::<f32>::build(&ArchSpec::cnn2d(16), &mut RngState::new(0)).unwrap();
    let f32_mb = estimate_memory(&m, &uniform_dtype(&m, 4)).unwrap();
    let calib = wide_patches(64);
    assert_eq!((calib.channels(), calib.patch_size()), (40, 19));
    let stat = static_quantize(&m, &calib, &CalibConfig { batch_size: 32, max_samples: None }).unwrap();
    let dynamic = dynamic_quantize(&m).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 32,
        lr: 1e-4,
        patience: None,
        ..TrainConfig::default()
    };
    let (qat, _, _) = qat_train(&m, &calib, &QatConfig::new(tc), &mut RngState::new(1)).unwrap();
    assert_eq!(qat.mode, QuantMode::Qat);
    let (s, d, q) = (stat.memory_mb(), dynamic.memory_mb(), qat.memory_mb());
    let ok = format!("{f32_mb:.2}") == "1.71"
        && (s - 0.44).abs() <= 0.02
        && (q - 0.44).abs() <= 0.02
        && (d - 0.96).abs() <= 0.02;
    verdict(
        3,
        "memory accounting",
        ok,
        format!("f32 {f32_mb:.4} MB, static {s:.4}, qat {q:.4}, dynamic {d:.4}"),
    );
}

// ---- 4. quantization math ----

#[test]
fn criterion_04_quantization_math() {
    let t0 = Instant::now();
    let mut rng = RngState::new(44);
    let mut worst_rt = 0.0f64;
    let mut worst_grid = 0.0f64;
    let mut bad = 0usize;
    for bits in [4u32, 8] {
        for signed in [false, true] {
            let (alpha, beta) = (-1.7, 2.9);
            let qp = compute_qparams(alpha, beta, bits, signed).unwrap();
            for _ in 0..100_000 {
                let x = rng.uniform(alpha, beta);
                let back = qp.dequantize(qp.quantize(x));
                let rt = (x - back).abs();
                let grid = (back - qp.scale * (x / qp.scale).round()).abs();
                worst_rt = worst_rt.max(rt - qp.scale / 2.0);
                worst_grid = worst_grid.max(grid);
                if rt > qp.scale / 2.0 + 1e-7 || grid > 1e-6 {
                    bad += 1;
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        4,
        "quantization math",
        bad == 0 && elapsed < Duration::from_secs(5),
        format!(
            "{bad} violations over 4e5 values, max |x - x~| - S/2 = {worst_rt:.2e}, max grid error {worst_grid:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---- 5. gradients ----

fn ramp(n: usize, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Sum with distinct per-element weights so every output gets its own cotangent.
fn weighted(t: &mut Tape<f64>, y: Var) -> Var {
    let n = t.value(y).len();
    let shape = t.shape(y).to_vec();
    let w = t.input(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let p = t.mul(y, w).unwrap();
    t.sum(p).unwrap()
}

fn op_check(inputs: Vec<(Vec<usize>, Vec<f64>)>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |data: &[Vec<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .zip(data)
            .map(|((s, _), d)| t.variable(s.clone(), d.clone()).unwrap())
            .collect();
        let out = f(&mut t, &vs);
        (t, vs, out)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (mut t, vs, out) = eval(&base);
    let g = t.backward(out).unwrap();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let an = g.wrt(vs[k]).map(|v| v.to_vec()).unwrap_or(vec![0.0; base[k].len()]);
        let e = max_rel_error(&base[k], &an, 1e-5, 1e-6, |xs| {
            let mut d = base.clone();
            d[k] = xs.to_vec();
            let (t, _, out) = eval(&d);
            t.item(out)
        });
        worst = worst.max(e);
    }
    worst
}

fn layer_op_errors() -> Vec<(&'static str, f64)> {
    let mut r = RngState::new(55);
    let distinct: Vec<f64> = (0..50).map(|i| ((i * 37 % 50) as f64) * 0.1).collect();
    let distinct1: Vec<f64> = (0..24).map(|i| ((i * 7 % 24) as f64) * 0.1).collect();
    vec![
        (
            "linear",
            op_check(
                vec![(vec![3, 4], ramp(12, &mut r)), (vec![5, 4], ramp(20, &mut r)), (vec![5], ramp(5, &mut r))],
                |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                    weighted(t, y)
                },
            ),
        ),
        (
            "conv2d",
            op_check(
                vec![
                    (vec![2, 3, 5, 4], ramp(120, &mut r)),
                    (vec![4, 3, 3, 2], ramp(72, &mut r)),
                    (vec![4], ramp(4, &mut r)),
                ],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2])).unwrap();
                    weighted(t, y)
                },
            ),
        ),
        (
            "conv1d",
            op_check(
                vec![(vec![2, 2, 9], ramp(36, &mut r)), (vec![3, 2, 4], ramp(24, &mut r)), (vec![3], ramp(3, &mut r))],
                |t, v| {
                    let y = t.conv1d(v[0], v[1], Some(v[2])).unwrap();
                    weighted(t, y)
                },
            ),
        ),
        (
            "max_pool2d",
            op_check(vec![(vec![1, 2, 5, 5], distinct)], |t, v| {
                let y = t.max_pool2d(v[0], 2, 2).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "max_pool1d",
            op_check(vec![(vec![2, 2, 6], distinct1)], |t, v| {
                let y = t.max_pool1d(v[0], 2).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "batch_norm_train",
            op_check(
                vec![(vec![3, 2, 2, 2], ramp(24, &mut r)), (vec![2], vec![0.8, -1.3]), (vec![2], vec![0.1, 0.2])],
                |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
                    weighted(t, y)
                },
            ),
        ),
        (
            "batch_norm_eval",
            op_check(
                vec![(vec![3, 2, 2, 2], ramp(24, &mut r)), (vec![2], vec![0.8, -1.3]), (vec![2], vec![0.1, 0.2])],
                |t, v| {
                    let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap();
                    weighted(t, y)
                },
            ),
        ),
        (
            "relu",
            op_check(vec![(vec![2, 6], ramp(12, &mut r))], |t, v| {
                let y = t.relu(v[0]).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "softmax",
            op_check(vec![(vec![2, 5], ramp(10, &mut r))], |t, v| {
                let y = t.softmax(v[0], 4.0).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "log_softmax",
            op_check(vec![(vec![2, 5], ramp(10, &mut r))], |t, v| {
                let y = t.log_softmax(v[0], 2.0).unwrap();
                weighted(t, y)
            }),
        ),
        (
            "cross_entropy",
            op_check(vec![(vec![3, 4], ramp(12, &mut r))], |t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap()),
        ),
        (
            "flatten",
            op_check(vec![(vec![2, 3, 2], ramp(12, &mut r))], |t, v| {
                let y = t.flatten(v[0]).unwrap();
                weighted(t, y)
            }),
        ),
    ]
}

fn kd_inputs(rng: &mut RngState, shapes: &[&[usize]]) -> Vec<(Vec<usize>, Vec<f64>)> {
    shapes
        .iter()
        .map(|s| (s.to_vec(), (0..s.iter().product()).map(|_| rng.uniform(-1.5, 1.5)).collect()))
        .collect()
}

fn kd_loss_errors() -> Vec<(Method, f64)> {
    use kd::{gradcheck, gradcheck_frozen, oracles};
    let mut rng = RngState::new(56);
    let y = [1usize, 3];
    let temp = 4.0;
    let mut out = Vec::new();
    out.push((
        Method::SoftTargets,
        gradcheck(&kd_inputs(&mut rng, &[&[2, 4], &[2, 4]]), 1, |t, v| {
            soft_target_loss(t, v[0], v[1], &y, temp, 0.1).unwrap().total
        }),
    ));
    out.push((
        Method::FitNets,
        gradcheck(
            &kd_inputs(&mut rng, &[&[2, 3, 2, 2], &[3, 3, 1, 1], &[3], &[2, 3, 2, 2]]),
            3,
            |t, v| {
                let reg = t.conv2d(v[0], v[1], Some(v[2])).unwrap();
                hint_loss(t, reg, v[3]).unwrap()
            },
        ),
    ));
    out.push((
        Method::At,
        gradcheck(&kd_inputs(&mut rng, &[&[2, 3, 3, 3], &[2, 2, 3, 3]]), 1, |t, v| {
            at_loss(t, &[(v[0], v[1])]).unwrap()
        }),
    ));
    out.push((
        Method::Cc,
        gradcheck(&kd_inputs(&mut rng, &[&[3, 4], &[3, 5]]), 1, |t, v| cc_loss(t, v[0], v[1], 1.0).unwrap()),
    ));
    out.push((
        Method::SimKd,
        gradcheck(&kd_inputs(&mut rng, &[&[3, 4], &[5, 4], &[5], &[3, 5]]), 3, |t, v| {
            let p = t.linear(v[0], v[1], Some(v[2])).unwrap();
            mse(t, p, v[3]).unwrap()
        }),
    ));
    out.push((
        Method::CaMkd,
        gradcheck(
            &kd_inputs(&mut rng, &[&[2, 4], &[2, 3], &[2, 4], &[2, 4], &[2, 3], &[2, 3]]),
            2,
            |t, v| {
                camkd_loss(t, v[0], &[v[2], v[3]], Some((v[1], &[v[4], v[5]])), &y, temp, 1.0)
                    .unwrap()
                    .total
            },
        ),
    ));
    out.push((
        Method::Dml,
        gradcheck_frozen(
            &kd_inputs(&mut rng, &[&[2, 4], &[2, 4], &[2, 4]]),
            3,
            |t, v| dml_loss(t, v, &y, 1.0).unwrap().total,
            |t, v, fz| oracles::dml(t, v, fz, &y),
        ),
    ));
    out.push((
        Method::One,
        gradcheck_frozen(
            &kd_inputs(&mut rng, &[&[2, 4], &[2, 4], &[2, 4], &[2, 3]]),
            4,
            |t, v| one_loss(t, &v[..3], v[3], &y, temp).unwrap().0.total,
            |t, v, fz| oracles::one(t, &v[..3], v[3], &fz[..3], fz[3], &y, temp),
        ),
    ));
    out.push((
        Method::ClIlr,
        gradcheck_frozen(
            &kd_inputs(&mut rng, &[&[2, 4], &[2, 4], &[2, 4]]),
            3,
            |t, v| clilr_loss(t, v, &y, temp).unwrap().total,
            |t, v, fz| oracles::clilr(t, v, fz, &y, temp),
        ),
    ));
    out.push((
        Method::OkdDip,
        gradcheck_frozen(
            &kd_inputs(
                &mut rng,
                &[&[2, 4], &[2, 4], &[2, 4], &[2, 4], &[2, 5], &[2, 5], &[2, 5], &[3, 5], &[3, 5]],
            ),
            9,
            |t, v| {
                okddip_loss(t, v[0], &v[1..4], &v[4..7], v[7], v[8], &y, temp)
                    .unwrap()
                    .parts
                    .total
            },
            |t, v, fz| oracles::okddip(t, v[0], &v[1..4], &v[4..7], v[7], v[8], &fz[1..4], &y, temp),
        ),
    ));
    out.push((
        Method::TfKd,
        gradcheck(&kd_inputs(&mut rng, &[&[2, 4]]), 1, |t, v| {
            tfkd_loss(t, v[0], &y, 0.9, 0.1, 20.0).unwrap().total
        }),
    ));
    out.push((
        Method::CsKd,
        gradcheck(&kd_inputs(&mut rng, &[&[2, 4], &[2, 4]]), 1, |t, v| {
            cskd_loss(t, v[0], v[1], &y, &[true, false], 1.0, temp).unwrap().total
        }),
    ));
    out.push((
        Method::PsKd,
        gradcheck(&kd_inputs(&mut rng, &[&[2, 4]]), 1, |t, v| {
            let prev = [0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25];
            pskd_loss(t, v[0], &y, Some(&prev), 0.6).unwrap().total
        }),
    ));
    out.push((
        Method::Ddgsd,
        gradcheck_frozen(
            &kd_inputs(&mut rng, &[&[2, 4], &[2, 4], &[2, 3, 2, 2], &[2, 3, 2, 2]]),
            4,
            |t, v| {
                let g1 = gap(t, v[2]).unwrap();
                let g2 = gap(t, v[3]).unwrap();
                ddgsd_loss(t, v[0], v[1], g1, g2, &y, 0.8, 1.2, 1.0).unwrap().total
            },
            |t, v, fz| oracles::ddgsd(t, [v[0], v[1]], [fz[0], fz[1]], [v[2], v[3]], &y, 0.8, 1.2),
        ),
    ));
    out
}

#[test]
fn criterion_05_gradient_fidelity() {
    let t0 = Instant::now();
    let tol = 1e-3;
    let mut failures = Vec::new();
    let ops = layer_op_errors();
    for (name, e) in &ops {
        if !(*e < tol) {
            failures.push(format!("{name} {e:.2e}"));
        }
    }
    let losses = kd_loss_errors();
    let covered: Vec<&str> = losses.iter().map(|(m, _)| m.id()).collect();
    for m in Method::ALL {
        if !covered.contains(&m.id()) {
            failures.push(format!("{} not checked", m.id()));
        }
    }
    for (m, e) in &losses {
        if !(*e < tol) {
            failures.push(format!("{} {e:.2e}", m.id()));
        }
    }
    let worst = ops.iter().map(|x| x.1).chain(losses.iter().map(|x| x.1)).fold(0.0, f64::max);
    let elapsed = t0.elapsed();
    verdict(
        5,
        "gradient fidelity",
        failures.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} ops + {} losses, worst rel. error {worst:.2e}, {:.2} s, failures {failures:?}",
            ops.len(),
            losses.len(),
            elapsed.as_secs_f64()
        ),
    );
}

// ---- data-backed criteria (6, 7, 9, 11) ----

const SEEDS: [u64; 3] = [0, 1, 2];

/// Root of the benchmark scenes, when both are present.
fn data_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os(DATA_DIR_ENV)?);
    [&INDIAN_PINES, &PAVIA_UNIVERSITY]
        .iter()
        .all(|s| dir.join(format!("{}.hsij", s.name)).is_file() && dir.join(format!("{}.hsib", s.name)).is_file())
        .then_some(dir)
}

fn blocked(n: u32, name: &str) -> bool {
    if data_dir().is_some() {
        return false;
    }
    verdict(
        n,
        name,
        false,
        format!("blocked: dataset not found (set {DATA_DIR_ENV} to a directory with indian_pines and pavia_university containers)"),
    );
    true
}

fn work_dir() -> PathBuf {
    std::env::var_os("HSIB_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hsib-acceptance"))
}

fn desk_cfg(scene: &SceneRef, split: SplitKind, seed: u64, method: MethodId) -> ExperimentConfig {
    let scale = DeskScale::default();
    let mut c = ExperimentConfig::new(
        scene.name.as_ref(),
        SplitConfig {
            kind: split,
            fraction: scene.fraction,
            seed,
            mask_file: None,
        },
        method,
        work_dir(),
    );
    c.dataset.clean_indian_pines = scene.clean_indian_pines;
    c.seed = seed;
    c.train = scale.train;
    c.finetune = scale.finetune;
    c.prune.pre_epochs = scale.pre_epochs;
    c.quant.qat_epochs = scale.qat_epochs;
    c.latency.enabled = false;
    c
}

/// Serializes runs so concurrent criteria reuse each other's baselines.
static RUNS: Mutex<()> = Mutex::new(());

/// Runs `cfg` unless its rows are already on disk.
fn run_cached(cfg: &ExperimentConfig) -> ReportRow {
    let _guard = RUNS.lock().unwrap_or_else(|e| e.into_inner());
    let rows = cfg.run_dir().join("rows.csv");
    if rows.is_file() && cfg.run_dir().join("manifest.json").is_file() {
        if let Ok(r) = read_csv(&rows) {
            return r[0].clone();
        }
    }
    let t0 = Instant::now();
    let row = run_experiment(cfg).unwrap().rows.remove(0);
    println!("  {} top1 {:.1} ({:.0} s)", cfg.run_name(), row.top1, t0.elapsed().as_secs_f64());
    row
}

fn baseline(scene: &SceneRef, split: SplitKind, seed: u64) -> (ReportRow, PathBuf) {
    let c = desk_cfg(scene, split, seed, MethodId::Baseline);
    let row = run_cached(&c);
    (row, c.run_dir().join("model.ckpt"))
}

fn second_teacher(scene: &SceneRef, split: SplitKind, seed: u64) -> PathBuf {
    let mut c = desk_cfg(scene, split, seed, MethodId::Baseline);
    c.name = Some(format!("{}_teacher2", c.run_name()));
    c.seed = seed + 1000;
    run_cached(&c);
    c.run_dir().join("model.ckpt")
}

fn in_band(v: f64, center: f64, tol: f64) -> bool {
    (v - center).abs() <= tol
}

#[test]
fn criterion_06_baseline_reproduction() {
    let name = "baseline reproduction";
    if blocked(6, name) {
        return;
    }
    let mut details = Vec::new();
    let mut ok = true;
    for (scene, disjoint_ref) in [(INDIAN_PINES, 86.3), (PAVIA_UNIVERSITY, 83.2)] {
        let rand = median(SEEDS.iter().map(|&s| baseline(&scene, SplitKind::Random, s).0.top1).collect());
        let disj = median(SEEDS.iter().map(|&s| baseline(&scene, SplitKind::Disjoint, s).0.top1).collect());
        ok &= rand >= 97.0 && in_band(disj, disjoint_ref, 5.0);
        details.push(format!("{} random {rand:.1} (>= 97), disjoint {disj:.1} ({disjoint_ref} +- 5)", scene.name));
    }
    verdict(6, name, ok, details.join("; "));
}

#[test]
fn criterion_07_pruning_beats_scratch() {
    let name = "pruning beats scratch";
    if blocked(7, name) {
        return;
    }
    let (mut pruned, mut scratch) = (Vec::new(), Vec::new());
    for &s in &SEEDS {
        let (_, src) = baseline(&INDIAN_PINES, SplitKind::Disjoint, s);
        let mut p = desk_cfg(&INDIAN_PINES, SplitKind::Disjoint, s, MethodId::Prune(PruneMethod::L1));
        p.ratio = Some(90);
        p.strategy = Some(Strategy::I);
        p.source = Some(src);
        pruned.push(run_cached(&p).top1);
        let mut c = desk_cfg(&INDIAN_PINES, SplitKind::Disjoint, s, MethodId::Scratch);
        c.ratio = Some(90);
        c.train.epochs += c.finetune.epochs_one_shot;
        scratch.push(run_cached(&c).top1);
    }
    let (p, s) = (median(pruned), median(scratch));
    verdict(7, name, p >= s, format!("L1 90% strategy I median {p:.1} vs scratch {s:.1}"));
}

/// Random next-layer conv over ReLU inputs; per-channel contribution vectors.
fn thinet_instance(channels: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let (h, k, outs, samples) = (5, 3, 6, 30);
    let oh = h - k + 1;
    let w: Vec<f64> = (0..outs * channels * k * k).map(|_| rng.normal()).collect();
    let mut z = vec![Vec::new(); channels];
    for _ in 0..samples {
        let x: Vec<f64> = (0..channels * h * h).map(|_| rng.normal().max(0.0)).collect();
        for y in 0..oh {
            for xo in 0..oh {
                for o in 0..outs {
                    for (c, zc) in z.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                s += x[c * h * h + (y + ky) * h + xo + kx] * w[((o * channels + c) * k + ky) * k + kx];
                            }
                        }
                        zc.push(s);
                    }
                }
            }
        }
    }
    z
}

/// Best kept set by enumerating every subset, error computed from raw sums.
fn exhaustive_keep(z: &[Vec<f64>], keep: usize) -> Vec<usize> {
    let c = z.len();
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1 << c) {
        if mask.count_ones() as usize != c - keep {
            continue;
        }
        let err: f64 = (0..z[0].len())
            .map(|m| {
                let s: f64 = (0..c).filter(|&i| mask >> i & 1 == 1).map(|i| z[i][m]).sum();
                s * s
            })
            .sum();
        if best.is_none_or(|(b, _)| err < b) {
            best = Some((err, mask));
        }
    }
    let mask = best.unwrap().1;
    (0..c).filter(|&i| mask >> i & 1 == 0).collect()
}

#[test]
fn criterion_08_thinet_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = RngState::new(2024);
    let (mut instances_off, mut sizes_off, mut sizes) = (0, 0, 0);
    for i in 0..20 {
        let c = 3 + i % 6;
        let z = thinet_instance(c, &mut rng);
        let mut g = ContributionGram::new(c);
        g.add(&z.iter().flatten().copied().collect::<Vec<_>>());
        let mut off = false;
        for keep in 1..c {
            sizes += 1;
            if greedy_keep(&g, keep) != exhaustive_keep(&z, keep) {
                sizes_off += 1;
                off = true;
            }
        }
        instances_off += off as usize;
    }
    let elapsed = t0.elapsed();
    verdict(
        8,
        "ThiNet oracle equivalence",
        instances_off == 0 && elapsed < Duration::from_secs(60),
        format!(
            "greedy differs from exhaustive on {instances_off}/20 instances ({sizes_off}/{sizes} keep sizes), {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_quantization_retention() {
    let name = "quantization accuracy retention";
    if blocked(9, name) {
        return;
    }
    let mut details = Vec::new();
    let mut ok = true;
    for mode in [QuantMode::Static, QuantMode::Qat] {
        let mut drops = Vec::new();
        for &s in &SEEDS {
            let (src_row, src) = baseline(&INDIAN_PINES, SplitKind::Disjoint, s);
            let mut c = desk_cfg(&INDIAN_PINES, SplitKind::Disjoint, s, MethodId::Quant(mode));
            c.source = Some(src);
            drops.push(src_row.top1 - run_cached(&c).top1);
        }
        let d = median(drops);
        ok &= d <= 2.0;
        details.push(format!("{mode} median drop {d:.2} points"));
    }
    verdict(9, name, ok, details.join("; "));
}

// ---- 10. KD zero cases ----

fn zero_case(m: Method) -> f64 {
    let mut rng = RngState::new(100 + m as u64);
    let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect() };
    let mut t = Tape::<f64>::new();
    let var = |t: &mut Tape<f64>, shape: &[usize], d: Vec<f64>| t.variable(shape.to_vec(), d).unwrap();
    let y = [0usize, 3];
    let z = r(8);
    let v = match m {
        Method::SoftTargets => {
            let (a, b) = (var(&mut t, &[2, 4], z.clone()), var(&mut t, &[2, 4], z));
            soft_target_loss(&mut t, a, b, &y, 4.0, 0.1).unwrap().kd
        }
        Method::FitNets => {
            let f: Vec<f64> = r(24).iter().map(|v| v.abs()).collect();
            let mut eye = vec![0.0; 9];
            (0..3).for_each(|i| eye[i * 4] = 1.0);
            let fs = var(&mut t, &[2, 3, 2, 2], f.clone());
            let ft = var(&mut t, &[2, 3, 2, 2], f);
            let w = var(&mut t, &[3, 3, 1, 1], eye);
            let b = var(&mut t, &[3], vec![0.0; 3]);
            let reg = t.conv2d(fs, w, Some(b)).unwrap();
            hint_loss(&mut t, reg, ft).unwrap()
        }
        Method::At => {
            let a: Vec<f64> = r(54).iter().map(|v| v.abs()).collect();
            let (s, te) = (var(&mut t, &[2, 3, 3, 3], a.clone()), var(&mut t, &[2, 3, 3, 3], a));
            at_loss(&mut t, &[(s, te)]).unwrap()
        }
        Method::Cc => {
            let f = r(15);
            let (a, b) = (var(&mut t, &[3, 5], f.clone()), var(&mut t, &[3, 5], f));
            cc_loss(&mut t, a, b, 1.0).unwrap()
        }
        Method::SimKd => {
            let f = r(12);
            let mut eye = vec![0.0; 16];
            (0..4).for_each(|i| eye[i * 5] = 1.0);
            let (fs, ft) = (var(&mut t, &[3, 4], f.clone()), var(&mut t, &[3, 4], f));
            let w = var(&mut t, &[4, 4], eye);
            let b = var(&mut t, &[4], vec![0.0; 4]);
            let p = t.linear(fs, w, Some(b)).unwrap();
            mse(&mut t, p, ft).unwrap()
        }
        Method::CaMkd => {
            let h = r(6);
            let zs = var(&mut t, &[2, 4], z.clone());
            let t1 = var(&mut t, &[2, 4], z.clone());
            let t2 = var(&mut t, &[2, 4], z);
            let hs = var(&mut t, &[2, 3], h.clone());
            let h1 = var(&mut t, &[2, 3], h.clone());
            let h2 = var(&mut t, &[2, 3], h);
            camkd_loss(&mut t, zs, &[t1, t2], Some((hs, &[h1, h2])), &y, 4.0, 1.0).unwrap().kd
        }
        Method::Dml => {
            let peers: Vec<Var> = (0..3).map(|_| var(&mut t, &[2, 4], z.clone())).collect();
            dml_loss(&mut t, &peers, &y, 1.0).unwrap().kd
        }
        Method::One => {
            // a single branch is its own ensemble
            let head = var(&mut t, &[2, 4], z);
            let gate = var(&mut t, &[2, 1], r(2));
            one_loss(&mut t, &[head], gate, &y, 4.0).unwrap().0.kd
        }
        Method::ClIlr => {
            let heads: Vec<Var> = (0..3).map(|_| var(&mut t, &[2, 4], z.clone())).collect();
            clilr_loss(&mut t, &heads, &y, 4.0).unwrap().kd
        }
        Method::OkdDip => {
            let leader = var(&mut t, &[2, 4], z.clone());
            let peers: Vec<Var> = (0..3).map(|_| var(&mut t, &[2, 4], z.clone())).collect();
            let feats: Vec<Var> = (0..3).map(|_| var(&mut t, &[2, 5], r(10))).collect();
            let wq = var(&mut t, &[3, 5], r(15));
            let wk = var(&mut t, &[3, 5], r(15));
            let o = okddip_loss(&mut t, leader, &peers, &feats, wq, wk, &y, 4.0).unwrap();
            let (a, b) = (t.item(o.tier1).abs(), t.item(o.tier2).abs());
            return a + b;
        }
        Method::TfKd => {
            // student logits T ln p^d reproduce the virtual teacher exactly
            let (k, a, temp) = (4, 0.9, 16.0);
            let mut zl = Vec::new();
            for &c in &y {
                let p: Vec<f64> = virtual_teacher(c, k, a).unwrap();
                zl.extend(p.iter().map(|v| temp * v.ln()));
            }
            let zs = var(&mut t, &[2, k], zl);
            tfkd_loss(&mut t, zs, &y, a, 0.1, temp).unwrap().kd
        }
        Method::CsKd => {
            let (a, b) = (var(&mut t, &[2, 4], z.clone()), var(&mut t, &[2, 4], z));
            cskd_loss(&mut t, a, b, &y, &[true, true], 1.0, 4.0).unwrap().kd
        }
        Method::PsKd => {
            let zs = var(&mut t, &[2, 4], z);
            let prev = [0.25; 8];
            pskd_loss(&mut t, zs, &y, Some(&prev), 0.0).unwrap().kd
        }
        Method::Ddgsd => {
            let g = r(6);
            let (z1, z2) = (var(&mut t, &[2, 4], z.clone()), var(&mut t, &[2, 4], z));
            let (g1, g2) = (var(&mut t, &[2, 3], g.clone()), var(&mut t, &[2, 3], g));
            ddgsd_loss(&mut t, z1, z2, g1, g2, &y, 1.0, 1.0, 1.0).unwrap().kd
        }
    };
    t.item(v)
}

#[test]
fn criterion_10_kd_zero_cases() {
    let t0 = Instant::now();
    let nonzero: Vec<String> = Method::ALL
        .iter()
        .map(|&m| (m, zero_case(m)))
        .filter(|(_, v)| *v != 0.0)
        .map(|(m, v)| format!("{} = {v:e}", m.id()))
        .collect();
    let elapsed = t0.elapsed();
    verdict(
        10,
        "KD zero cases",
        nonzero.is_empty() && elapsed < Duration::from_secs(10),
        format!("{} methods, non-zero {nonzero:?}, {:.3} s", Method::ALL.len(), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_11_kd_reproduction() {
    let name = "KD reproduction";
    if blocked(11, name) {
        return;
    }
    let kd_cfg = |split: SplitKind, s: u64, m: Method| {
        let mut c = desk_cfg(&INDIAN_PINES, split, s, MethodId::Kd(m));
        c.ratio = Some(90);
        c.teachers = match m.teachers_needed() {
            0 => vec![],
            1 => vec![baseline(&INDIAN_PINES, split, s).1],
            _ => vec![baseline(&INDIAN_PINES, split, s).1, second_teacher(&INDIAN_PINES, split, s)],
        };
        c
    };
    let mut ok = true;
    let mut details = Vec::new();
    for (m, center, tol) in [(Method::SoftTargets, 83.0, 4.0), (Method::FitNets, 86.3, 4.0), (Method::Ddgsd, 87.6, 5.0)] {
        let med = median(SEEDS.iter().map(|&s| run_cached(&kd_cfg(SplitKind::Disjoint, s, m)).top1).collect());
        ok &= in_band(med, center, tol);
        details.push(format!("{} {med:.1} ({center} +- {tol})", m.id()));
    }
    // smoke runs on the random split against scratch
    let mut scratch = desk_cfg(&INDIAN_PINES, SplitKind::Random, 0, MethodId::Scratch);
    scratch.ratio = Some(90);
    let floor = run_cached(&scratch).top1 - 3.0;
    let mut below = Vec::new();
    for m in Method::ALL {
        if matches!(m, Method::SoftTargets | Method::FitNets | Method::Ddgsd) {
            continue;
        }
        let top1 = run_cached(&kd_cfg(SplitKind::Random, 0, m)).top1;
        if top1 <= floor {
            below.push(format!("{} {top1:.1}", m.id()));
        }
    }
    ok &= below.is_empty();
    details.push(format!("smoke floor {floor:.1}, below {below:?}"));
    verdict(11, name, ok, details.join("; "));
}

// ---- 12. determinism ----

/// A small synthetic scene written as a container; returns the header path.
fn synthetic_container(dir: &Path) -> PathBuf {
    let ds = generate(&SceneSpec {
        name: "synthetic".into(),
        height: 20,
        width: 20,
        unlabeled: 0.3,
        ..SceneSpec::small(12)
    })
    .unwrap();
    hsib_data::save(&ds, dir).unwrap().header
}

fn small_cfg(header: &Path, out: &Path, method: MethodId) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(
        header.to_string_lossy(),
        SplitConfig {
            kind: SplitKind::Random,
            fraction: 0.5,
            seed: 3,
            mask_file: None,
        },
        method,
        out,
    );
    c.preprocess.pca_components = Some(6);
    c.preprocess.patch_size = 7;
    c.model.kernels = Some([3, 3]);
    c.train = TrainConfig {
        epochs: 2,
        batch_size: 32,
        lr: 3e-3,
        patience: None,
        ..TrainConfig::default()
    };
    c.latency.enabled = false;
    c.seed = 3;
    c
}

#[test]
fn criterion_12_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let header = synthetic_container(dir.path());
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for method in [MethodId::Baseline, MethodId::Quant(QuantMode::Static), MethodId::Kd(Method::SoftTargets)] {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let mut c = small_cfg(&header, &dir.path().join(format!("rep{rep}")), method);
            if let MethodId::Kd(_) = method {
                let teacher = small_cfg(&header, &dir.path().join(format!("rep{rep}")), MethodId::Baseline);
                c.teachers = vec![teacher.run_dir().join("model.ckpt")];
                c.ratio = Some(90);
            }
            let out = run_experiment(&c).unwrap();
            let text = hsib_bench::report::to_csv(&out.rows.iter().map(ReportRow::without_timing).collect::<Vec<_>>())
                .unwrap();
            runs.push(text);
        }
        compared += 1;
        if runs[0] != runs[1] {
            mismatches.push(format!("{method}: {:?} vs {:?}", runs[0], runs[1]));
        }
    }
    verdict(
        12,
        "determinism",
        mismatches.is_empty(),
        format!("{compared} methods run twice, mismatches {mismatches:?}"),
    );
}
