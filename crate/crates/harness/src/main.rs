use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use wsd_core::rng::derive_seed;
use wsd_core::solvers::{GridKind, Method, SolverSpec};
use wsd_core::tasks::{rollout, ForecastTask};
use wsd_core::Field;
use wsd_harness::config::TaskConfig;
use wsd_harness::pipeline::{load_bundle, run_pipeline, run_warm_start};
use wsd_harness::report::{emit_report, report_directory};
use wsd_harness::sweep::{run_forecast_sweep, run_sweep, switchover, TAG_EVAL_NOISE};
use wsd_harness::{compute_rollout_cost, ExperimentConfig};

#[derive(Parser)]
#[command(name = "wsd", version, about = "Warm-start flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the warm-start model and cache its moments.
    TrainWarmstart { config: PathBuf },
    /// Train the generator (training the warm-start model first if the mode needs it).
    TrainGen { config: PathBuf },
    /// Draw one sample per held-out context and write them as CSV rows.
    Sample {
        config: PathBuf,
        #[arg(long)]
        nfe: usize,
        #[arg(long, default_value = "midpoint")]
        method: Method,
        #[arg(long, default_value = "uniform")]
        grid: GridKind,
        #[arg(long, default_value_t = 1.0)]
        warmth: f64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every solver cell of the config's sweep and write the report.
    Sweep { config: PathBuf },
    /// Autoregressive ensemble forecast from the first held-out initial condition.
    Rollout {
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        ensemble: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 12)]
        nfe: usize,
        #[arg(long, default_value = "midpoint")]
        method: Method,
        #[arg(long, default_value = "uniform")]
        grid: GridKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge every metrics CSV in a directory into one report.
    Report { dir: PathBuf },
    /// Generator forward passes of an ensemble forecast.
    Cost {
        #[arg(long)]
        ensemble: u64,
        #[arg(long)]
        days: u64,
        #[arg(long)]
        steps_per_day: u64,
        #[arg(long)]
        nfe: u64,
    },
}

fn write_fields(path: &PathBuf, fields: &[(usize, usize, &Field)]) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for (a, b, field) in fields {
        let values: Vec<String> = field.data().iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{a},{b},{}", values.join(","))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainWarmstart { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let (summary, passes) = run_warm_start(&cfg)?;
            match summary {
                Some(s) => println!("trained warm-start model: {} steps, hash {}", s.steps, s.params_hash),
                None => println!("warm-start checkpoint already present in {}", cfg.warm_dir().display()),
            }
            println!("moment cache: {passes} warm-start forward passes");
        }
        Command::TrainGen { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let m = run_pipeline(&cfg)?;
            println!(
                "{}: generator {} steps (plateau: {}), warm-start forward passes {}",
                m.run_id, m.generator.steps, m.generator.plateaued, m.h_forward_passes
            );
        }
        Command::Sample { config, nfe, method, grid, warmth, count, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let (task, bundle) = load_bundle(&cfg)?;
            let spec = SolverSpec { warmth, ..SolverSpec::new(method, grid, nfe) };
            let contexts: Vec<_> = (0..count as u64).map(|i| task.sample(cfg.n_train as u64 + i).context).collect();
            let samples = bundle.sample_contexts(&contexts, &spec, derive_seed(cfg.seed, TAG_EVAL_NOISE), 0)?;
            let rows: Vec<_> = samples.iter().enumerate().map(|(i, s)| (i, 0, s)).collect();
            write_fields(&out, &rows)?;
            println!("{count} samples, {} generator evaluations", bundle.velocity_evals());
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let (task, bundle) = load_bundle(&cfg)?;
            let result = match &cfg.task {
                TaskConfig::Forecast(fc) => run_forecast_sweep(&cfg, &ForecastTask::new(fc.clone(), cfg.seed)?, &bundle)?,
                _ => run_sweep(&cfg, task.as_ref(), &bundle)?,
            };
            for s in &result.skipped {
                eprintln!("skipped {} at NFE {}: {}", s.method.name(), s.nfe, s.reason);
            }
            let metric = if matches!(cfg.task, TaskConfig::Forecast(_)) { "crps_mean" } else { "energy_distance" };
            for (nfe, method) in switchover(&result.rows, metric) {
                println!("best method from NFE {nfe}: {method}");
            }
            println!("{} generator evaluations", result.velocity_evals);
            for p in emit_report(&cfg.run_dir(), &cfg.run_id, &cfg.hash(), &result.rows)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Rollout { config, ensemble, steps, nfe, method, grid, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let TaskConfig::Forecast(fc) = &cfg.task else {
                bail!("rollout needs a forecast task, config has {}", cfg.task.name());
            };
            let task = ForecastTask::new(fc.clone(), cfg.seed)?;
            let (_, bundle) = load_bundle(&cfg)?;
            let (p, c) = task.initial_condition(cfg.n_train as u64);
            let spec = SolverSpec::new(method, grid, nfe);
            let ens = rollout(&bundle, &Field::from_vec(p)?, &Field::from_vec(c)?, steps, ensemble, &spec, cfg.seed)?;
            let truncated = ens.truncated.iter().filter(|t| t.is_some()).count();
            println!(
                "{} members x {steps} steps: {} generator evaluations ({} expected), {truncated} truncated",
                ensemble,
                bundle.velocity_evals(),
                compute_rollout_cost(ensemble as u64, steps as u64, 1, nfe as u64)?
            );
            let out = out.unwrap_or_else(|| cfg.run_dir().join("rollout.csv"));
            let rows: Vec<_> = ens
                .members
                .iter()
                .enumerate()
                .flat_map(|(m, states)| states.iter().enumerate().map(move |(t, s)| (m, t, s)))
                .collect();
            write_fields(&out, &rows)?;
            println!("wrote {}", out.display());
        }
        Command::Report { dir } => {
            for p in report_directory(&dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Cost { ensemble, days, steps_per_day, nfe } => {
            if [ensemble, days, steps_per_day, nfe].contains(&0) {
                bail!("all cost factors must be positive");
            }
            println!("{}", compute_rollout_cost(ensemble, days, steps_per_day, nfe)?);
        }
    }
    Ok(())
}
