mod report;
mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;
use mfl_core::continual::{grad_study, probe_study, route_study, Arch, Experiment, RunConfig};
use mfl_core::data::{task_sequence, write_corpus, Grammar, GrammarConfig, TaskOrder};
use mfl_core::probes::ProbeConfig;
use mfl_core::routing::Rerouting;
use mfl_core::theory::verify_all;
use mfl_core::Error;

use run_dir::RunDir;

#[derive(Parser)]
#[command(name = "mfl", version, about = "Forgetting and routing experiments on toy mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task stream and write annotated corpora.
    GenData {
        /// Grammar configuration (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one architecture on the task stream and save every checkpoint.
    TrainSeq {
        #[arg(long)]
        config: PathBuf,
        /// moe, moe-wide, mhmoe or dense.
        #[arg(long)]
        arch: String,
        /// default, 1, 2 or 3.
        #[arg(long, default_value = "default")]
        order: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probes for every feature on router inputs.
    AnalyzeProbes {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Task whose held-out sequences are probed.
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value_t = 500)]
        sequences: usize,
    },
    /// Attention-head importance for each probed feature.
    AnalyzeHeads {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value_t = 500)]
        sequences: usize,
    },
    /// Within- and between-composition gradient agreement.
    AnalyzeGrads {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        rows: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Route mixing against old-task loss change across transitions.
    AnalyzeRoutes {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fresh sequences per old task.
        #[arg(long, default_value_t = 2000)]
        sequences: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Re-route old tokens under the new parameters instead of replaying.
        #[arg(long)]
        live: bool,
    },
    /// Run the executable bound checks.
    VerifyTheory {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// CSV tables and SVG plots from a run directory and its analyses.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding analysis outputs; defaults to the run directory.
        #[arg(long)]
        analysis: Option<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn gen_data(spec: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let config: GrammarConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("grammar spec: {e}")))?;
    let grammar = Grammar::new(config, seed)?;
    let tasks = task_sequence(&grammar, &grammar.default_tasks())?;
    let manifest = write_corpus(&grammar, &tasks, out)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn train_seq(config: &Path, arch: &str, order: &str, out: &Path) -> anyhow::Result<()> {
    let config = RunConfig::load(config)?;
    let (arch, order) = (Arch::parse(arch)?, TaskOrder::parse(order)?);
    let exp = Experiment::prepare(config)?;
    let outcome = exp.run(arch, order)?;
    RunDir::new(out).save(&exp.config, &outcome)?;
    println!("{}", serde_json::to_string(&serde_json::json!({ "arch": arch, "op": outcome.summary.op, "bwt": outcome.summary.bwt }))?);
    Ok(())
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData { spec, seed, out } => gen_data(&spec, seed, &out),
        Command::TrainSeq { config, arch, order, out } => train_seq(&config, &arch, &order, &out),
        Command::AnalyzeProbes { run, out, task, sequences } => {
            let (exp, _) = RunDir::new(&run).load()?;
            let study = probe_study(&exp, task, sequences, &ProbeConfig::default())?;
            write_json(&out, "probes.json", &study.rows)
        }
        Command::AnalyzeHeads { run, out, task, sequences } => {
            let (exp, _) = RunDir::new(&run).load()?;
            let study = probe_study(&exp, task, sequences, &ProbeConfig::default())?;
            write_json(&out, "heads.json", &study.heads)
        }
        Command::AnalyzeGrads { run, out, rows, bins } => {
            let (exp, outcome) = RunDir::new(&run).load()?;
            let study = grad_study(&exp, &outcome, rows, exp.config.seed, bins)?;
            write_json(&out, "grads.json", &study)
        }
        Command::AnalyzeRoutes { run, out, sequences, bins, live } => {
            let (exp, outcome) = RunDir::new(&run).load()?;
            let analysis = (0..exp.tasks.len()).map(|t| exp.analysis_rows(t, sequences)).collect::<Result<Vec<_>, _>>()?;
            let mode = if live { Rerouting::Live } else { Rerouting::Frozen };
            let study = route_study(&exp, &outcome, &analysis, bins, mode)?;
            write_json(&out, "routes.json", &study)
        }
        Command::VerifyTheory { trials, seed } => {
            let report = verify_all(trials, seed)?;
            for line in &report.lines {
                println!("{}", serde_json::to_string(line)?);
            }
            if !report.all_hold() {
                let failed: Vec<&str> = report.lines.iter().filter(|l| !l.holds).map(|l| l.check.as_str()).collect();
                return Err(Error::Violation(format!("failed checks: {}", failed.join(", "))).into());
            }
            Ok(())
        }
        Command::Report { run, out, analysis } => report::write_report(&run, analysis.as_deref().unwrap_or(&run), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
