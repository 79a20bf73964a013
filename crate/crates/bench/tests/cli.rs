use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hsib_bench::report::{from_csv, ReportRow};
use hsib_data::synth::{generate, SceneSpec};
use serde_json::json;

fn hsib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsib"))
        .args(args)
        .env_remove("HSIB_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hsib")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    p
}

fn scene(dir: &Path) -> PathBuf {
    let ds = generate(&SceneSpec {
        name: "cli_scene".into(),
        height: 30,
        width: 30,
        ..SceneSpec::small(9)
    })
    .unwrap();
    hsib_data::save(&ds, dir).unwrap().header
}

fn config(header: &Path, out: &Path, method: &str) -> serde_json::Value {
    json!({
        "schema_version": 1,
        "dataset": { "path": header, "clean_indian_pines": false },
        "split": { "kind": "random", "fraction": 0.5, "seed": 4 },
        "preprocess": { "pca_components": 6, "patch_size": 7 },
        "model": { "kind": "cnn2d", "kernels": [3, 3] },
        "method": method,
        "train": { "epochs": 2, "batch_size": 32, "lr": 0.003 },
        "latency": { "enabled": false },
        "seed": 4,
        "out_dir": out,
    })
}

fn rows_of(o: &Output) -> Vec<ReportRow> {
    from_csv(&stdout(o)).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = hsib(&["train", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("missing.json"), "{err}");
    assert!(err.to_lowercase().contains("no such file"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    for args in [&["frobnicate"][..], &["train", "--bogus"], &[]] {
        let o = hsib(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
    assert_eq!(hsib(&["--help"]).status.code(), Some(0));
    assert_eq!(hsib(&["--version"]).status.code(), Some(0));
}

#[test]
fn reproduce_table_3_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = hsib(&["reproduce-table", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let md = std::fs::read_to_string(out.join("table3.md")).unwrap();
    assert_eq!(md, stdout(&o));
    assert!(md.contains("| CNN2D | 50,050 | 125,100 | 250,100 | 1,616 | 426,866 |"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("table3.json")).unwrap()).unwrap();
    assert_eq!(json[2]["total"], 426_866);

    let o = hsib(&["reproduce-table", "4"]);
    assert!(stdout(&o).contains("| Prune (90%) | 15 | 30 | 750 | 30 |"));
}

#[test]
fn data_tables_without_data_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsib(&["reproduce-table", "6", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset not found"), "{}", stderr(&o));
    let o = hsib(&["reproduce-table", "13"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let header = scene(dir.path());
    let mut bad = config(&header, dir.path(), "baseline");
    bad["train"]["lr"] = json!(-1.0);
    let p = write_config(dir.path(), "bad.json", bad);
    let o = hsib(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));

    let mut unknown = config(&header, dir.path(), "baseline");
    unknown["colour"] = json!("blue");
    let p = write_config(dir.path(), "unknown.json", unknown);
    let o = hsib(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    // a quantization config under `train`
    let p = write_config(dir.path(), "q.json", config(&header, dir.path(), "quant.static"));
    let o = hsib(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("method"), "{}", stderr(&o));
}

#[test]
fn missing_teacher_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let header = scene(dir.path());
    let mut c = config(&header, dir.path(), "kd.soft_targets");
    c["ratio"] = json!(90);
    c["teachers"] = json!([dir.path().join("nope.ckpt")]);
    let p = write_config(dir.path(), "kd.json", c);
    let o = hsib(&["distill", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));
}

#[test]
fn end_to_end_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let header = scene(dir.path());
    let out = dir.path().join("runs");
    let cfg = write_config(dir.path(), "base.json", config(&header, &out, "baseline"));
    let cfg_s = cfg.to_str().unwrap();

    let o = hsib(&["ingest-check", header.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("cli_scene"), "{}", stdout(&o));

    let o = hsib(&["preprocess", "--config", cfg_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cached = PathBuf::from(stdout(&o).trim());
    assert!(cached.is_file());
    assert_eq!(hsib(&["ingest-check", cached.to_str().unwrap()]).status.code(), Some(0));

    let o = hsib(&["train", "--config", cfg_s, "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = rows_of(&o);
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].method.as_str(), rows[0].seed), ("baseline.cnn2d", 7));
    let run = out.join("baseline_cli_scene_random_cnn2d_seed7");
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.is_file() && run.join("manifest.json").is_file());

    // evaluation is training-free and repeatable
    let ckpt_s = ckpt.to_str().unwrap();
    let a = hsib(&["evaluate", "--config", cfg_s, "--seed", "7", "--checkpoint", ckpt_s]);
    let b = hsib(&["evaluate", "--config", cfg_s, "--seed", "7", "--checkpoint", ckpt_s]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let (ra, rb) = (rows_of(&a), rows_of(&b));
    assert_eq!(ra[0].without_timing(), rb[0].without_timing());
    assert_eq!((ra[0].top1, ra[0].params), (rows[0].top1, rows[0].params));

    let o = hsib(&["bench-latency", "--config", cfg_s, "--seed", "7", "--checkpoint", ckpt_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("median"), "{}", stdout(&o));

    let mut q = config(&header, &out, "quant.static");
    q["source"] = json!(ckpt);
    let qp = write_config(dir.path(), "q.json", q);
    let o = hsib(&["quantize", "--config", qp.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let qrow = &rows_of(&o)[0];
    assert_eq!(qrow.params, rows[0].params);
    assert!(qrow.memory_mb < rows[0].memory_mb);
    let qckpt = out.join("quant-static_cli_scene_random_seed7").join("model.qckpt");
    let o = hsib(&["evaluate", "--config", cfg_s, "--seed", "7", "--checkpoint", qckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(rows_of(&o)[0].top1, qrow.top1);

    let report = dir.path().join("all.md");
    let o = hsib(&["report", out.to_str().unwrap(), "--output", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let md = std::fs::read_to_string(&report).unwrap();
    assert!(md.contains("## Baselines") && md.contains("## Quantization"), "{md}");
}

#[test]
fn parallel_experiments_keep_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let header = scene(dir.path());
    let out = dir.path().join("runs");
    let mut paths = Vec::new();
    for (i, kind) in ["mlp", "cnn2d"].iter().enumerate() {
        let mut c = config(&header, &out, "baseline");
        c["model"] = json!({ "kind": kind });
        if *kind == "mlp" {
            c["preprocess"]["pca_components"] = json!(6);
        } else {
            c["model"]["kernels"] = json!([3, 3]);
        }
        paths.push(write_config(dir.path(), &format!("c{i}.json"), c));
    }
    let mut args = vec!["train", "--parallel-experiments", "2", "--threads", "3"];
    for p in &paths {
        args.extend(["--config", p.to_str().unwrap()]);
    }
    let o = hsib(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let methods: Vec<String> = rows_of(&o).into_iter().map(|r| r.method).collect();
    assert_eq!(methods, ["baseline.mlp", "baseline.cnn2d"]);
    assert!(stderr(&o).contains("single-threaded"), "{}", stderr(&o));
}
