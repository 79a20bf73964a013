//! The `hsib` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, MethodId, SplitKind};
use crate::error::{BenchError, Result};
use crate::report::{emit_report, read_csv, to_csv, Format, ReportRow};
use crate::runner::{bench_checkpoint, evaluate_checkpoint, ingest_check, preprocess_to_cache, run_many};
use crate::tables::{
    param_table, render_param_table, render_width_table, reproduce_table, width_table, ReproduceOptions, INDIAN_PINES,
    PAVIA_UNIVERSITY,
};

#[derive(Debug, Parser)]
#[command(name = "hsib", version, about = "Compression benchmark for hyperspectral classifiers")]
pub struct Cli {
    /// Experiment config (JSON). Repeat to run several experiments.
    #[arg(long = "config", global = true)]
    pub configs: Vec<PathBuf>,
    /// Overrides `seed` and `split.seed` of every config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `out_dir` of every config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Compute threads per experiment. Kernels are single-threaded; only 1 has an effect.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Independent experiments run concurrently.
    #[arg(long = "parallel-experiments", global = true, default_value_t = 1)]
    pub parallel: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate containers and print a summary of each.
    IngestCheck {
        /// `.hsij` headers; defaults to the dataset of each config.
        headers: Vec<PathBuf>,
    },
    /// Write the preprocessed scene of each config as a container.
    Preprocess,
    /// Train a baseline or a from-scratch compact model.
    Train,
    /// Prune a source model.
    Prune,
    /// Quantize a source model.
    Quantize,
    /// Train a student by distillation.
    Distill,
    /// Score a checkpoint on the configured test split.
    Evaluate(CheckpointArgs),
    /// Time batch-1 inference of a checkpoint.
    BenchLatency {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value_t = crate::latency::MIN_REPS)]
        reps: usize,
    },
    /// Merge row CSVs into one CSV or markdown report.
    Report {
        /// Row CSVs, or directories searched for `rows.csv`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output path; `.md` selects markdown, anything else CSV.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Regenerate a results table.
    ReproduceTable(TableArgs),
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    pub table: u32,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Restrict to scenes (indian_pines, pavia_university).
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<String>,
    /// Restrict to splits (random, disjoint).
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
    /// Training epochs per run.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Skip latency probes.
    #[arg(long)]
    pub no_latency: bool,
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_configs(cli: &Cli) -> Result<Vec<ExperimentConfig>> {
    if cli.configs.is_empty() {
        return Err(BenchError::Usage("at least one --config is required".into()));
    }
    cli.configs
        .iter()
        .map(|p| {
            let mut c = ExperimentConfig::load(p)?;
            if let Some(s) = cli.seed {
                c.seed = s;
                c.split.seed = s;
            }
            if let Some(o) = &cli.out {
                c.out_dir = o.clone();
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

fn expect_family(cfgs: &[ExperimentConfig], cmd: &str, ok: fn(&MethodId) -> bool) -> Result<()> {
    for c in cfgs {
        if !ok(&c.method) {
            return Err(BenchError::config("method", format!("`{}` cannot run under `{cmd}`", c.method)));
        }
    }
    Ok(())
}

fn run_configs(cli: &Cli, cfgs: &[ExperimentConfig]) -> Result<()> {
    let mut rows = Vec::new();
    let mut first_err = None;
    for (c, r) in cfgs.iter().zip(run_many(cfgs, cli.parallel)) {
        match r {
            Ok(out) => {
                log::info!("{} -> {}", c.run_name(), out.dir.display());
                rows.extend(out.rows);
            }
            Err(e) => {
                log::error!("{}: {e}", c.run_name());
                first_err.get_or_insert(e);
            }
        }
    }
    if !rows.is_empty() {
        print!("{}", to_csv(&rows)?);
    }
    first_err.map_or(Ok(()), Err)
}

fn collect_rows(inputs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(BenchError::io(dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(BenchError::io(dir))?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "rows.csv") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            walk(p, &mut files)?;
        } else {
            files.push(p.clone());
        }
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_csv(&f)?);
    }
    Ok(rows)
}

fn static_table(n: u32, out: Option<&Path>) -> Result<()> {
    let text = if n == 3 {
        let rows = param_table()?;
        if let Some(dir) = out {
            let p = dir.join("table3.json");
            std::fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(BenchError::io(&p))?;
        }
        render_param_table(&rows)
    } else {
        let rows = width_table()?;
        if let Some(dir) = out {
            let p = dir.join("table4.json");
            std::fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(BenchError::io(&p))?;
        }
        render_width_table(&rows)
    };
    if let Some(dir) = out {
        let p = dir.join(format!("table{n}.md"));
        std::fs::write(&p, &text).map_err(BenchError::io(&p))?;
    }
    print!("{text}");
    Ok(())
}

fn table_options(cli: &Cli, a: &TableArgs) -> Result<ReproduceOptions> {
    let mut o = ReproduceOptions::new(cli.out.clone().unwrap_or_else(|| PathBuf::from("results")));
    o.seeds = match cli.seed {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    if !a.scenes.is_empty() {
        o.scenes = a
            .scenes
            .iter()
            .map(|s| match s.as_str() {
                "indian_pines" => Ok(INDIAN_PINES),
                "pavia_university" => Ok(PAVIA_UNIVERSITY),
                other => Err(BenchError::Usage(format!("unknown scene `{other}`"))),
            })
            .collect::<Result<_>>()?;
    }
    if !a.splits.is_empty() {
        o.splits = a
            .splits
            .iter()
            .map(|s| match s.as_str() {
                "random" => Ok(SplitKind::Random),
                "disjoint" => Ok(SplitKind::Disjoint),
                other => Err(BenchError::Usage(format!("unknown split `{other}`"))),
            })
            .collect::<Result<_>>()?;
    }
    if let Some(e) = a.epochs {
        o.scale.train.epochs = e;
    }
    o.parallel = cli.parallel;
    o.latency = !a.no_latency;
    Ok(o)
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.threads != 1 {
        log::warn!("--threads {}: compute kernels are single-threaded, running with 1", cli.threads);
    }
    if cli.parallel == 0 {
        return Err(BenchError::Usage("--parallel-experiments must be >= 1".into()));
    }
    match &cli.command {
        Command::IngestCheck { headers } => {
            let headers = if headers.is_empty() {
                load_configs(cli)?
                    .iter()
                    .map(|c| c.resolve_dataset().map(|(h, _)| h))
                    .collect::<Result<Vec<_>>>()?
            } else {
                headers.clone()
            };
            for h in headers {
                println!("{}", ingest_check(&h)?);
            }
            Ok(())
        }
        Command::Preprocess => {
            for c in load_configs(cli)? {
                println!("{}", preprocess_to_cache(&c)?.display());
            }
            Ok(())
        }
        Command::Train => {
            let cfgs = load_configs(cli)?;
            expect_family(&cfgs, "train", |m| matches!(m, MethodId::Baseline | MethodId::Scratch))?;
            run_configs(cli, &cfgs)
        }
        Command::Prune => {
            let cfgs = load_configs(cli)?;
            expect_family(&cfgs, "prune", |m| matches!(m, MethodId::Prune(_)))?;
            run_configs(cli, &cfgs)
        }
        Command::Quantize => {
            let cfgs = load_configs(cli)?;
            expect_family(&cfgs, "quantize", |m| matches!(m, MethodId::Quant(_)))?;
            run_configs(cli, &cfgs)
        }
        Command::Distill => {
            let cfgs = load_configs(cli)?;
            expect_family(&cfgs, "distill", |m| matches!(m, MethodId::Kd(_)))?;
            run_configs(cli, &cfgs)
        }
        Command::Evaluate(a) => {
            let rows = load_configs(cli)?
                .iter()
                .map(|c| evaluate_checkpoint(c, &a.checkpoint))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", to_csv(&rows)?);
            Ok(())
        }
        Command::BenchLatency { ckpt, reps } => {
            for c in load_configs(cli)? {
                let s = bench_checkpoint(&c, &ckpt.checkpoint, *reps)?;
                println!(
                    "{}: median {:.4} ms/sample, IQR {:.4} ms ({} reps)",
                    ckpt.checkpoint.display(),
                    s.median_ms,
                    s.iqr_ms(),
                    s.reps
                );
            }
            Ok(())
        }
        Command::Report { inputs, output } => {
            let rows = collect_rows(inputs)?;
            emit_report(&rows, Format::from_path(output), output)?;
            println!("{} rows -> {}", rows.len(), output.display());
            Ok(())
        }
        Command::ReproduceTable(a) => match a.table {
            3 | 4 => {
                if let Some(o) = &cli.out {
                    std::fs::create_dir_all(o).map_err(BenchError::io(o))?;
                }
                static_table(a.table, cli.out.as_deref())
            }
            n => {
                let opts = table_options(cli, a)?;
                let rows = reproduce_table(n, &opts)?;
                print!("{}", crate::report::to_markdown(&rows));
                Ok(())
            }
        },
    }
}
