//! Command-line front end. `main` parses arguments and maps errors to exit
//! codes; everything else lives here so tests can drive it directly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::metrics::{report, MetricsReport};
use crate::placement::{place, Backend, PlacementError, PlacementResult};
use crate::scheduler::SchedulerKind;
use crate::sim_engine::{self, SimOutput};
use crate::workload::{load_trace, save_trace, top_share};

#[derive(Debug, Parser)]
#[command(name = "muxsim", version, about = "Plan and simulate multi-LLM serving on a shared GPU cluster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Greedy,
    Ilp,
    /// Run both backends and report the objective gap.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchedulerArg {
    Adbs,
    Fcfs,
    RoundRobin,
}

impl From<SchedulerArg> for SchedulerKind {
    fn from(s: SchedulerArg) -> Self {
        match s {
            SchedulerArg::Adbs => SchedulerKind::Adbs,
            SchedulerArg::Fcfs => SchedulerKind::Fcfs,
            SchedulerArg::RoundRobin => SchedulerKind::RoundRobin,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a request trace from the config's workload.
    GenWorkload {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Multiplies every rate in the config.
        #[arg(long, default_value_t = 1.0)]
        rate_scale: f64,
    },
    /// Compute LLM units for the config's cluster and models.
    Plan {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        backend: BackendArg,
        /// With `--backend both`, `<stem>.greedy.json` and `<stem>.ilp.json`
        /// are written next to this path.
        #[arg(short, long)]
        output: PathBuf,
        /// Multiplies every rate in the config.
        #[arg(long, default_value_t = 1.0)]
        rate_scale: f64,
    },
    /// Replay a trace against a plan; writes records.csv, metrics.json and
    /// pools.json into the output directory.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        plan: PathBuf,
        #[arg(short, long)]
        trace: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Overrides `scheduler.kind` from the config.
        #[arg(long, value_enum)]
        scheduler: Option<SchedulerArg>,
        /// Also write every scheduling decision to decisions.jsonl.
        #[arg(long)]
        decisions: bool,
        /// Multiplies every rate in the config.
        #[arg(long, default_value_t = 1.0)]
        rate_scale: f64,
    },
    /// Sweep backends, schedulers and rate scales from the config's
    /// `ablate` section.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Infeasible(PlacementError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl From<PlacementError> for CliError {
    fn from(e: PlacementError) -> Self {
        if e.is_infeasible() {
            CliError::Infeasible(e)
        } else {
            CliError::Other(e.into())
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Infeasible(_) => 2,
            _ => 1,
        }
    }
}

fn check_scale(s: f64) -> Result<f64, CliError> {
    if s.is_finite() && s >= 0.0 {
        Ok(s)
    } else {
        Err(ConfigError::Invalid(format!("--rate-scale must be >= 0, got {s}")).into())
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenWorkload {
            config,
            output,
            rate_scale,
        } => gen_workload(&config, &output, check_scale(rate_scale)?),
        Command::Plan {
            config,
            backend,
            output,
            rate_scale,
        } => plan(&config, backend, &output, check_scale(rate_scale)?),
        Command::Simulate {
            config,
            plan,
            trace,
            output,
            scheduler,
            decisions,
            rate_scale,
        } => simulate(
            &config,
            &plan,
            &trace,
            &output,
            scheduler.map(Into::into),
            decisions,
            check_scale(rate_scale)?,
        ),
        Command::Ablate { config, output } => ablate(&config, &output),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn gen_workload(config: &Path, output: &Path, scale: f64) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg.workload_spec(scale)?;
    let trace = spec.generate().map_err(ConfigError::from)?;
    save_trace(&trace, output).with_context(|| format!("writing {}", output.display()))?;

    let rates: Vec<f64> = spec.llms.iter().map(|l| l.rate).collect();
    let total: f64 = rates.iter().sum();
    println!("{:<24} {:>10} {:>8}", "llm", "rate", "share");
    for l in &spec.llms {
        let share = if total > 0.0 { l.rate / total } else { 0.0 };
        println!("{:<24} {:>10.3} {:>7.1}%", l.llm, l.rate, 100.0 * share);
    }
    println!("total rate {total:.3} req/s");
    println!("top 20% of LLMs carry {:.1}% of the rate", 100.0 * top_share(&rates, 0.2));
    println!("{} requests written to {}", trace.len(), output.display());
    Ok(())
}

fn summarize(p: &PlacementResult) {
    for (u, unit) in p.units.iter().enumerate() {
        let names: Vec<String> = unit
            .llms
            .iter()
            .map(|l| format!("{}(tp {} sm {:.1} est {:.2})", l.llm, l.candidate.tp_degree, l.candidate.num_sm, l.est_tpt))
            .collect();
        println!("unit {u}: {} GPUs  {}", unit.mesh.size(), names.join(" "));
    }
    println!(
        "{}: estimated throughput {:.3} req/s, objective {:.3}",
        p.backend, p.est_total_tpt, p.objective
    );
}

fn plan(config: &Path, backend: BackendArg, output: &Path, scale: f64) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let input = cfg.placement_input(scale)?;
    let one = |b: Backend, path: &Path| -> Result<PlacementResult, CliError> {
        let p = place(&input, b)?;
        write_json(path, &p)?;
        summarize(&p);
        Ok(p)
    };
    match backend {
        BackendArg::Greedy => {
            one(Backend::Greedy, output)?;
        }
        BackendArg::Ilp => {
            one(Backend::Ilp, output)?;
        }
        BackendArg::Both => {
            let g = one(Backend::Greedy, &output.with_extension("greedy.json"))?;
            let e = one(Backend::Ilp, &output.with_extension("ilp.json"))?;
            let gap = if e.objective > 0.0 {
                (e.objective - g.objective) / e.objective
            } else {
                0.0
            };
            println!("greedy objective gap to ilp: {:.2}%", 100.0 * gap);
        }
    }
    Ok(())
}

fn write_records(out: &SimOutput, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "id",
        "llm",
        "arrival_s",
        "prompt_len",
        "output_len",
        "ttft_s",
        "tpot_s",
        "done_s",
        "reference_s",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &out.records {
        w.write_record([
            r.id.to_string(),
            r.llm.clone(),
            r.arrival_s.to_string(),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
            opt(r.ttft_s()),
            opt(r.tpot_s()),
            opt(r.done_s),
            r.reference_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn load_plan(path: &Path) -> anyhow::Result<PlacementResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))
}

fn simulate(
    config: &Path,
    plan_path: &Path,
    trace_path: &Path,
    out_dir: &Path,
    scheduler: Option<SchedulerKind>,
    decisions: bool,
    scale: f64,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let plan = load_plan(plan_path)?;
    plan.validate(&cfg.placement_input(scale)?)
        .map_err(|e| anyhow::anyhow!("plan does not match config: {e}"))?;
    let trace = load_trace(trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let mut opts = cfg.sim_options(scheduler.unwrap_or(cfg.scheduler.kind));
    opts.log_decisions = decisions;
    let out = sim_engine::run(&plan, &trace, &cfg.sim_llms(scale)?, &opts).context("simulation failed")?;
    let metrics = report(&out, &cfg.rate_map(scale)?, &cfg.slo_scales);

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_records(&out, &out_dir.join("records.csv"))?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    write_json(&out_dir.join("pools.json"), &out.units)?;
    if decisions {
        let path = out_dir.join("decisions.jsonl");
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        for d in &out.decisions {
            serde_json::to_writer(&mut w, d).context("writing decisions")?;
            writeln!(w).context("writing decisions")?;
        }
        w.flush().context("writing decisions")?;
    }
    println!(
        "{} / {} requests completed; throughput {:.3} req/s, aggregated {:.3} req/s",
        metrics.completed, metrics.requests, metrics.total_throughput, metrics.aggregated_throughput
    );
    Ok(())
}

/// One row of an ablation sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub backend: Backend,
    pub scheduler: SchedulerKind,
    pub rate_scale: f64,
    pub metrics: MetricsReport,
}

/// Every backend × rate scale × scheduler point of `cfg.ablate`. Each
/// backend places once at the base rates; rate scales change only the
/// offered load on that deployment.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let plans = cfg
        .ablate
        .backends
        .iter()
        .map(|&b| Ok((b, place(&cfg.placement_input(1.0)?, b)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut loads = Vec::new();
    for &scale in &cfg.ablate.rate_scales {
        let trace = cfg.workload_spec(scale)?.generate().map_err(ConfigError::from)?;
        loads.push((scale, trace, cfg.sim_llms(scale)?, cfg.rate_map(scale)?));
    }
    let mut points = Vec::new();
    for plan in &plans {
        for load in &loads {
            for &kind in &cfg.ablate.schedulers {
                points.push((plan, load, kind));
            }
        }
    }
    points
        .into_par_iter()
        .map(|((backend, plan), (scale, trace, llms, rates), kind)| {
            log::info!("sweep point {backend} {kind} x{scale}");
            let out = sim_engine::run(plan, trace, llms, &cfg.sim_options(kind)).context("simulation failed")?;
            Ok(SweepRow {
                backend: *backend,
                scheduler: kind,
                rate_scale: *scale,
                metrics: report(&out, rates, &cfg.slo_scales),
            })
        })
        .collect()
}

pub fn write_sweep<W: Write>(cfg: &ExperimentConfig, rows: &[SweepRow], writer: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "backend",
        "scheduler",
        "rate_scale",
        "requests",
        "completed",
        "total_throughput",
        "aggregated_throughput",
    ]
    .map(String::from)
    .to_vec();
    header.extend(cfg.slo_scales.iter().map(|s| format!("slo_{s}")));
    header.extend(["p99_latency_s", "p99_ttft_s", "p99_tpot_s", "max_fairness_gap"].map(String::from));
    header.extend(cfg.llms.iter().map(|l| format!("usage_{}", l.name)));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![
            r.backend.to_string(),
            r.scheduler.to_string(),
            r.rate_scale.to_string(),
            m.requests.to_string(),
            m.completed.to_string(),
            m.total_throughput.to_string(),
            m.aggregated_throughput.to_string(),
        ];
        rec.extend(m.slo.iter().map(|p| p.attainment.to_string()));
        rec.extend([
            m.p99_avg_latency_s.to_string(),
            m.p99_ttft_s.to_string(),
            m.p99_tpot_s.to_string(),
            opt(m.max_fairness_gap),
        ]);
        rec.extend(cfg.llms.iter().map(|l| {
            opt(m.per_llm.iter().find(|x| x.llm == l.name).and_then(|x| x.usage_ratio))
        }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn ablate(config: &Path, output: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let rows = sweep(&cfg)?;
    let f = File::create(output).with_context(|| format!("creating {}", output.display()))?;
    write_sweep(&cfg, &rows, BufWriter::new(f))?;
    for r in &rows {
        println!(
            "{:<6} {:<11} x{:<5} throughput {:>8.3}  slo@{} {:.3}",
            r.backend,
            r.scheduler.to_string(),
            r.rate_scale,
            r.metrics.total_throughput,
            cfg.slo_scales.first().copied().unwrap_or(0.0),
            r.metrics.slo.first().map(|p| p.attainment).unwrap_or(0.0),
        );
    }
    println!("{} rows written to {}", rows.len(), output.display());
    Ok(())
}
