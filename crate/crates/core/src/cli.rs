//! Command implementations behind the `copfl` binary.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::Value;

use crate::config::{self, ExperimentConfig};
use crate::error::{Error, Result};
use crate::orchestrator::{run_experiment, AlgorithmKind, ExperimentOutput};
use crate::report::{self, fmt_g9, Summary};

pub const OUT_ENV: &str = "COPFL_OUT";
const DEFAULT_OUT: &str = "copfl_out";

#[derive(Debug, Parser)]
#[command(name = "copfl", version, about = "Personalized federated learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment (one per seed with --seeds).
    Run(CommonArgs),
    /// Run a grid of overrides across seeds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid axis, e.g. `p=0.01,0.05,0.25`. Repeat for more axes.
        #[arg(long = "grid", value_name = "KEY=V1,V2,...", required = true)]
        grid: Vec<String>,
    },
    /// Run the four contribution-score variants across seeds.
    Ablate(CommonArgs),
    /// Check a config and print it fully resolved.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override a config value, e.g. `--set seed=7` or `--set data.train_bound=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', value_name = "A,B,C")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        config::load_config_with(&self.config, &self.overrides)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    fn seeds(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![cfg.seed])
    }
}

/// Runs one resolved config and returns its output plus summary.
pub fn execute(cfg: &ExperimentConfig, jobs: usize) -> Result<(ExperimentOutput, Summary)> {
    let started = Instant::now();
    let output = run_experiment(cfg.setup()?, cfg.rounds, cfg.eval_every, jobs.max(1))?;
    let summary = Summary::new(cfg, &output, started.elapsed().as_secs_f64() * 1e3);
    Ok((output, summary))
}

fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..cfg.clone()
    }
}

pub fn cmd_run(args: &CommonArgs) -> Result<Vec<Summary>> {
    let base = args.load()?;
    let out = args.out_dir(&base);
    let seeds = args.seeds(&base);
    let multi = args.seeds.as_ref().is_some_and(|s| s.len() > 1);
    let mut summaries = Vec::new();
    for seed in seeds {
        let cfg = with_seed(&base, seed);
        let (output, summary) = execute(&cfg, args.jobs)?;
        let dir = if multi { out.join(format!("seed_{seed}")) } else { out.clone() };
        report::write_run(&dir, &cfg, &output, &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// `key=v1,v2,...` into a key and raw value strings.
fn parse_axis(axis: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = axis
        .split_once('=')
        .ok_or_else(|| Error::arg(format!("grid axis `{axis}` must look like KEY=V1,V2")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if key.is_empty() || values.iter().any(String::is_empty) {
        return Err(Error::arg(format!("grid axis `{axis}` has an empty key or value")));
    }
    Ok((key.to_string(), values))
}

/// Cartesian product, last axis varying fastest.
fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![vec![]], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

struct Job {
    cfg: Result<ExperimentConfig>,
    dir: PathBuf,
}

/// Outcome of one run inside a sweep or ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub status: String,
}

fn run_jobs(jobs: Vec<Job>, threads: usize) -> Result<Vec<RowResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let attempt = job.cfg.as_ref().map_err(|e| e.to_string()).and_then(|cfg| {
                    let (output, summary) = execute(cfg, 1).map_err(|e| e.to_string())?;
                    report::write_run(&job.dir, cfg, &output, &summary).map_err(|e| e.to_string())?;
                    Ok(summary)
                });
                match attempt {
                    Ok(s) => RowResult {
                        mean_acc: s.final_mean_acc,
                        std_acc: s.final_std_acc,
                        status: "ok".into(),
                    },
                    Err(msg) => RowResult {
                        mean_acc: f64::NAN,
                        std_acc: f64::NAN,
                        status: msg,
                    },
                }
            })
            .collect()
    }))
}

fn config_with(text: &Value, overrides: &[String]) -> Result<ExperimentConfig> {
    config::parse_config(&text.to_string(), overrides)
}

fn load_raw(args: &CommonArgs) -> Result<Value> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut raw: Value = serde_json::from_str(&text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    config::apply_overrides(&mut raw, &args.overrides)?;
    Ok(raw)
}

fn mean_of(rows: &[&RowResult]) -> (f64, f64, usize) {
    let ok: Vec<f64> = rows.iter().filter(|r| r.status == "ok").map(|r| r.mean_acc).collect();
    let (m, s) = crate::orchestrator::mean_std(ok.iter().copied());
    (m, s, ok.len())
}

pub fn cmd_sweep(args: &CommonArgs, grid: &[String]) -> Result<Vec<RowResult>> {
    let base = args.load()?;
    let raw = load_raw(args)?;
    let out = args.out_dir(&base);
    let seeds = args.seeds(&base);
    let axes = grid.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>>>()?;
    let points = grid_points(&axes);

    let mut jobs = Vec::new();
    for (pi, point) in points.iter().enumerate() {
        for &seed in &seeds {
            let mut overrides: Vec<String> = axes
                .iter()
                .zip(point)
                .map(|((k, _), v)| format!("{k}={v}"))
                .collect();
            overrides.push(format!("seed={seed}"));
            jobs.push(Job {
                cfg: config_with(&raw, &overrides),
                dir: out.join("runs").join(format!("point{pi}_seed{seed}")),
            });
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let results = run_jobs(jobs, args.jobs)?;

    let keys: Vec<String> = axes.iter().map(|(k, _)| k.clone()).collect();
    let mut header = keys.clone();
    header.extend(["seed", "final_mean_acc", "final_std_acc", "status"].map(String::from));
    let mut rows = Vec::new();
    let mut heat_rows = Vec::new();
    for (pi, point) in points.iter().enumerate() {
        let chunk = &results[pi * seeds.len()..(pi + 1) * seeds.len()];
        for (&seed, r) in seeds.iter().zip(chunk) {
            let mut row = point.clone();
            row.extend([seed.to_string(), fmt_g9(r.mean_acc), fmt_g9(r.std_acc), r.status.clone()]);
            rows.push(row);
        }
        let (m, s, n) = mean_of(&chunk.iter().collect::<Vec<_>>());
        let mut row = point.clone();
        row.extend([fmt_g9(m), fmt_g9(s), n.to_string()]);
        heat_rows.push(row);
    }
    report::write_table(&out.join("sweep.csv"), &header, &rows)?;
    let mut heat_header = keys;
    heat_header.extend(["mean_acc", "std_over_seeds", "n_ok"].map(String::from));
    report::write_table(&out.join("heatmap.csv"), &heat_header, &heat_rows)?;
    Ok(results)
}

/// `(name, use_grad, use_data)` for the four contribution-score variants.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("grad+data", true, true),
    ("grad_only", true, false),
    ("data_only", false, true),
    ("uniform", false, false),
];

pub fn cmd_ablate(args: &CommonArgs) -> Result<Vec<RowResult>> {
    let base = args.load()?;
    if base.algorithm != AlgorithmKind::CoPfl {
        return Err(Error::ConfigField {
            field: "algorithm".into(),
            message: "ablation needs algorithm co_pfl".into(),
        });
    }
    let raw = load_raw(args)?;
    let out = args.out_dir(&base);
    let seeds = args.seeds(&base);
    let mut jobs = Vec::new();
    for (name, grad, data) in ABLATION_VARIANTS {
        for &seed in &seeds {
            let overrides = vec![
                format!("cowa.use_grad={grad}"),
                format!("cowa.use_data={data}"),
                format!("seed={seed}"),
            ];
            jobs.push(Job {
                cfg: config_with(&raw, &overrides),
                dir: out.join("runs").join(format!("{name}_seed{seed}")),
            });
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let results = run_jobs(jobs, args.jobs)?;
    let header: Vec<String> = ["variant", "use_grad", "use_data", "seed", "final_mean_acc", "final_std_acc", "status"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    let mut it = results.iter();
    for (name, grad, data) in ABLATION_VARIANTS {
        for &seed in &seeds {
            let r = it.next().expect("one result per job");
            rows.push(vec![
                name.to_string(),
                (grad as u8).to_string(),
                (data as u8).to_string(),
                seed.to_string(),
                fmt_g9(r.mean_acc),
                fmt_g9(r.std_acc),
                r.status.clone(),
            ]);
        }
    }
    report::write_table(&out.join("ablation.csv"), &header, &rows)?;
    Ok(results)
}

pub fn cmd_validate(args: &CommonArgs) -> Result<String> {
    Ok(args.load()?.to_canonical_json())
}

/// Exit code for a failed command: 2 for anything wrong with the inputs,
/// 1 for failures during the run itself.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::ConfigParse { .. }
        | Error::ConfigField { .. }
        | Error::UnknownKey { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}

pub fn error_json(err: &Error) -> String {
    serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string() } }).to_string()
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|summaries| {
            for s in summaries {
                println!(
                    "seed {}: final mean accuracy {} (std {})",
                    s.seed,
                    fmt_g9(s.final_mean_acc),
                    fmt_g9(s.final_std_acc)
                );
            }
        }),
        Command::Sweep { common, grid } => cmd_sweep(common, grid).map(|rows| report_rows(&rows)),
        Command::Ablate(args) => cmd_ablate(args).map(|rows| report_rows(&rows)),
        Command::Validate(args) => cmd_validate(args).map(|json| println!("{json}")),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

fn report_rows(rows: &[RowResult]) {
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{} runs, {} failed", rows.len(), failed);
}
