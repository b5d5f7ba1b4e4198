//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::baselines::{HistoricalAverage, Last};
use crate::config::{Checkpoint, RunConfig};
use crate::data::{self, build_graph, split_windows, window_at, Dataset, DiffusionGraph, NormStats, Splits, WindowParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, measure_latency, write_forecast_csv, write_latency_csv, EvalSummary};
use crate::metrics::{metrics_svg, read_metrics_csv, write_metrics_csv, MetricRow};
use crate::model::{Forecaster, Model, ModelKind};
use crate::synthgen::{self, generate};
use crate::training::{train, write_history};

#[derive(Debug, Parser)]
#[command(name = "aseer", version, about = "Irregular traffic time series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Last,
    Ha,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write dataset.csv, nodes.csv and reach.csv.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the number of simulated days.
        #[arg(long)]
        days: Option<u32>,
    },
    /// Train a model; writes checkpoint.json and history.csv into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
        #[arg(long)]
        xi: Option<usize>,
        #[arg(long)]
        no_agdn: bool,
        #[arg(long)]
        no_pte: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the six metrics for a checkpoint and/or the baselines.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Baselines to evaluate; defaults to both.
        #[arg(long, value_enum, value_delimiter = ',')]
        baseline: Vec<Baseline>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Window sizes when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time decoding rollouts across step sizes and horizons.
    Latency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        step_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        hours: Vec<f64>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast one window and write the forecast CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Last second of the historical window.
        #[arg(long)]
        anchor: i64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw metric bars for one or more metrics CSV files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out, days } => cmd_generate(config.as_deref(), &out, days),
        Command::Train {
            config,
            model,
            xi,
            no_agdn,
            no_pte,
            epochs,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = model {
                cfg.model.kind = m;
            }
            if let Some(x) = xi {
                cfg.model.xi = x;
            }
            cfg.model.no_agdn |= no_agdn;
            cfg.model.no_pte |= no_pte;
            if let Some(e) = epochs {
                cfg.training.max_epochs = e;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            baseline,
            split,
            config,
        } => cmd_eval(checkpoint.as_deref(), &dataset, &out, &baseline, split, config.as_deref()).map(|_| ()),
        Command::Latency {
            checkpoint,
            dataset,
            step_sizes,
            hours,
            repeats,
            out,
        } => cmd_latency(&checkpoint, dataset.as_deref(), &step_sizes, &hours, repeats, &out).map(|_| ()),
        Command::Forecast {
            checkpoint,
            dataset,
            anchor,
            out,
        } => cmd_forecast(&checkpoint, &dataset, anchor, &out),
        Command::Report { metrics, out } => cmd_report(&metrics, &out),
    }
}

pub fn cmd_generate(config: Option<&Path>, out: &Path, days: Option<u32>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = days {
        cfg.days = d;
    }
    cfg.validate()?;
    let generated = generate(&cfg.scenario, cfg.days)?;
    synthgen::export(&generated, out)?;
    log::info!(
        "wrote {} sensors over {} days to {}",
        generated.dataset.len(),
        cfg.days,
        out.display()
    );
    Ok(())
}

/// Dataset and graph for a run: loaded when `cfg.dataset` is set,
/// otherwise generated and exported to `<out_dir>/data`.
pub fn run_data(cfg: &RunConfig) -> Result<(Dataset, DiffusionGraph)> {
    match &cfg.dataset {
        Some(dir) => data::load_dir(dir, cfg.epsilon_km),
        None => {
            let generated = generate(&cfg.scenario, cfg.days)?;
            synthgen::export(&generated, &cfg.out_dir.join("data"))?;
            let graph = build_graph(&generated.nodes, &generated.reachability, cfg.epsilon_km)?;
            let dataset = generated.dataset.aligned_to(&graph)?;
            Ok((dataset, graph))
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub splits: Splits,
    pub graph: DiffusionGraph,
    pub history: Vec<crate::training::EpochRecord>,
}

pub fn train_run(cfg: &RunConfig, dataset: &Dataset, graph: &DiffusionGraph) -> Result<TrainRun> {
    let splits = split_windows(dataset, &cfg.window)?;
    let norm = NormStats::fit(dataset, splits.train_end);
    let ids = graph.nodes.iter().map(|n| n.id.clone()).collect();
    let mut model = Model::new(cfg.model.clone(), ids, norm)?;
    let outcome = train(&mut model, graph, &splits, &cfg.training, |_| {})?;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            model,
            window: cfg.window,
            epsilon_km: cfg.epsilon_km,
            best_epoch: outcome.best_epoch,
            best_val: outcome.best_val,
            config: cfg.clone(),
        },
        splits,
        graph: graph.clone(),
        history: outcome.history,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun> {
    data::ensure_dir(&cfg.out_dir)?;
    let (dataset, graph) = run_data(cfg)?;
    let run = train_run(cfg, &dataset, &graph)?;
    write_history(&cfg.out_dir.join("history.csv"), &run.history)?;
    run.checkpoint.save(&cfg.out_dir.join(Checkpoint::FILE))?;
    if !run.splits.test.is_empty() {
        let s = evaluate(&run.checkpoint.model, &graph, &run.splits.test)?;
        log::info!("test: {}", s.metrics);
    }
    log::info!(
        "best epoch {} (val {:.4}); checkpoint in {}",
        run.checkpoint.best_epoch,
        run.checkpoint.best_val,
        cfg.out_dir.display()
    );
    Ok(run)
}

fn pick_split(splits: &Splits, dataset: &Dataset, params: &WindowParams, split: Split) -> Result<Vec<data::ForecastInstance>> {
    Ok(match split {
        Split::Train => splits.train.clone(),
        Split::Val => splits.val.clone(),
        Split::Test => splits.test.clone(),
        Split::All => data::make_windows(dataset, params)?,
    })
}

fn summary_line(name: &str, s: &EvalSummary) -> String {
    format!(
        "{name}: {} ({} windows, {} forecasts, {} truncated)",
        s.metrics, s.windows, s.forecasts, s.truncated
    )
}

pub fn cmd_eval(
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    out: &Path,
    baselines: &[Baseline],
    split: Split,
    config: Option<&Path>,
) -> Result<Vec<MetricRow>> {
    let ckpt = checkpoint.map(Checkpoint::load).transpose()?;
    let (params, eps, cfg) = match (&ckpt, config) {
        (Some(c), _) => (c.window, c.epsilon_km, c.config.clone()),
        (None, Some(p)) => {
            let cfg = RunConfig::load(p)?;
            (cfg.window, cfg.epsilon_km, cfg)
        }
        (None, None) => {
            let cfg = RunConfig::default();
            (cfg.window, cfg.epsilon_km, cfg)
        }
    };
    let (dataset, graph) = data::load_dir(dataset_dir, eps)?;
    let splits = split_windows(&dataset, &params)?;
    let windows = pick_split(&splits, &dataset, &params, split)?;
    if windows.is_empty() {
        return Err(Error::Data("no evaluation windows in the requested split".into()));
    }
    data::ensure_dir(out)?;

    let mut forecasters: Vec<Box<dyn Forecaster>> = Vec::new();
    if let Some(c) = &ckpt {
        forecasters.push(Box::new(c.model.clone()));
    }
    let wanted: Vec<Baseline> = if baselines.is_empty() {
        vec![Baseline::Last, Baseline::Ha]
    } else {
        baselines.to_vec()
    };
    for b in wanted {
        match b {
            Baseline::Last => forecasters.push(Box::new(Last)),
            Baseline::Ha => forecasters.push(Box::new(HistoricalAverage)),
        }
    }

    let mut rows = Vec::new();
    let mut summary = String::new();
    for f in &forecasters {
        let s = evaluate(f.as_ref(), &graph, &windows)?;
        let line = summary_line(f.name(), &s);
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
        rows.push(MetricRow::new(f.name(), &s.metrics));
    }
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;

    if let Some(c) = &ckpt {
        let first = &windows[0];
        let fc = c.model.predict(first, &graph, false)?;
        write_forecast_csv(&out.join("forecast.csv"), &c.model.sensor_ids, &fc)?;
        let mut lat = Vec::new();
        for &h in &cfg.eval.latency_hours {
            lat.push(measure_latency(
                &c.model.config,
                &c.model.sensor_ids,
                c.model.norm,
                first,
                &graph,
                c.model.config.xi,
                h,
                cfg.eval.latency_repeats,
            )?);
        }
        for r in &lat {
            let line = format!("latency xi={} {}h: {:.3} ms ({} steps)", r.xi, r.hours, r.ms, r.invocations);
            println!("{line}");
            summary.push_str(&line);
            summary.push('\n');
        }
        write_latency_csv(&out.join("latency.csv"), &lat)?;
    }
    let path = out.join("summary.txt");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn cmd_latency(
    checkpoint: &Path,
    dataset: Option<&Path>,
    step_sizes: &[usize],
    hours: &[f64],
    repeats: Option<usize>,
    out: &Path,
) -> Result<Vec<crate::eval::LatencyRecord>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    let (ds, graph) = match dataset {
        Some(d) => data::load_dir(d, ckpt.epsilon_km)?,
        None => run_data(&RunConfig {
            out_dir: std::env::temp_dir().join("aseer-latency"),
            ..cfg.clone()
        })?,
    };
    let step_sizes = if step_sizes.is_empty() { &cfg.eval.step_sizes[..] } else { step_sizes };
    let hours = if hours.is_empty() { &cfg.eval.latency_hours[..] } else { hours };
    if step_sizes.contains(&0) {
        return Err(Error::Config("step sizes must be >= 1".into()));
    }
    let anchors = data::anchors(&ds, &ckpt.window);
    let Some(&anchor) = anchors.last() else {
        return Err(Error::Data("dataset too short for one window".into()));
    };
    let inst = window_at(&ds, anchor, &ckpt.window);
    let m = &ckpt.model;
    let mut rows = Vec::new();
    for &h in hours {
        for &xi in step_sizes {
            let r = measure_latency(
                &m.config,
                &m.sensor_ids,
                m.norm,
                &inst,
                &graph,
                xi,
                h,
                repeats.unwrap_or(cfg.eval.latency_repeats),
            )?;
            println!("xi={:>3} hours={:>5} {:>10.3} ms  ({} steps)", r.xi, r.hours, r.ms, r.invocations);
            rows.push(r);
        }
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            data::ensure_dir(dir)?;
        }
    }
    write_latency_csv(out, &rows)?;
    Ok(rows)
}

pub fn cmd_forecast(checkpoint: &Path, dataset: &Path, anchor: i64, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (ds, graph) = data::load_dir(dataset, ckpt.epsilon_km)?;
    let inst = window_at(&ds, anchor, &ckpt.window);
    let fc = ckpt.model.predict(&inst, &graph, false)?;
    write_forecast_csv(out, &ckpt.model.sensor_ids, &fc)
}

pub fn cmd_report(metrics: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for p in metrics {
        rows.extend(read_metrics_csv(p)?);
    }
    if rows.is_empty() {
        return Err(Error::Data("no metric rows to report".into()));
    }
    for r in &rows {
        println!("{}: {}", r.model, r.metrics());
    }
    fs::write(out, metrics_svg(&rows)).map_err(|e| Error::io(out, e))
}
