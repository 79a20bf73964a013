use hsib_bench::report::{emit_report, from_csv, to_csv, to_markdown, Format, ReportRow, CSV_HEADER};
use hsib_bench::BenchError;
use proptest::prelude::*;

fn row(method: &str, top1: f64) -> ReportRow {
    ReportRow {
        method: method.into(),
        dataset: "indian_pines".into(),
        split: "disjoint".into(),
        ratio: "90%".into(),
        top1,
        top5: 99.0,
        params: 49_321,
        memory_mb: 0.197284,
        latency_ms: 0.41,
        seed: 2,
        wall_s: 12.5,
    }
}

fn arb_row() -> impl Strategy<Value = ReportRow> {
    let methods = prop::sample::select(vec![
        "baseline.cnn2d",
        "scratch",
        "prune.thinet",
        "quant.qat",
        "kd.camkd",
        "kd.ddgsd",
        "evaluate",
    ]);
    (
        methods,
        "[a-z_]{1,12}",
        prop::sample::select(vec!["random", "disjoint", "disjoint-prefix", "mask"]),
        prop::sample::select(vec!["-", "90%", "95%", "98%"]),
        0.0f64..=100.0,
        0.0f64..=1.0,
        1usize..1_000_000,
        0.0f64..10.0,
        0.0f64..100.0,
        any::<u64>(),
        0.0f64..1e5,
    )
        .prop_map(|(m, d, s, r, top1, frac, params, mem, lat, seed, wall)| ReportRow {
            method: m.into(),
            dataset: d,
            split: s.into(),
            ratio: r.into(),
            top1,
            top5: top1 + (100.0 - top1) * frac,
            params,
            memory_mb: mem,
            latency_ms: lat,
            seed,
            wall_s: wall,
        })
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact(rows in prop::collection::vec(arb_row(), 1..20)) {
        let text = to_csv(&rows).unwrap();
        prop_assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        prop_assert_eq!(from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn generated_rows_satisfy_invariants(r in arb_row()) {
        prop_assert!(r.check().is_ok());
    }
}

#[test]
fn distillation_rows_render_family_sections() {
    let rows: Vec<ReportRow> = ["baseline.cnn2d", "scratch", "kd.soft_targets", "kd.fitnets", "kd.dml", "kd.one", "kd.tfkd", "kd.pskd"]
        .iter()
        .map(|m| row(m, 80.0))
        .collect();
    let md = to_markdown(&rows);
    let pos = |s: &str| md.find(s).unwrap_or_else(|| panic!("{s}\n{md}"));
    assert!(pos("## Baselines") < pos("## Scratch"));
    assert!(pos("## Scratch") < pos("## Offline"));
    assert!(pos("## Offline") < pos("## Online"));
    assert!(pos("## Online") < pos("## Self"));
    assert!(!md.contains("## Pruning"));
    assert!(pos("kd.fitnets") < pos("## Online"));
    assert!(pos("kd.pskd") > pos("## Self"));
}

#[test]
fn emit_report_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        emit_report(&[], Format::Csv, &dir.path().join("x.csv")),
        Err(BenchError::EmptyReport)
    ));
    let unwritable = dir.path().join("no_such_dir").join("x.csv");
    match emit_report(&[row("scratch", 80.0)], Format::Csv, &unwritable) {
        Err(BenchError::Io { path, .. }) => assert_eq!(path, unwritable),
        other => panic!("{other:?}"),
    }
    let mut bad = row("scratch", 80.0);
    bad.top5 = 70.0;
    assert!(matches!(
        emit_report(&[bad], Format::Csv, &dir.path().join("y.csv")),
        Err(BenchError::Row(_))
    ));
}

#[test]
fn format_follows_extension() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [row("prune.l1", 84.6)];
    for (name, md) in [("r.md", true), ("r.csv", false), ("r.txt", false)] {
        let p = dir.path().join(name);
        emit_report(&rows, Format::from_path(&p), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.starts_with("# Results"), md, "{name}");
    }
}
