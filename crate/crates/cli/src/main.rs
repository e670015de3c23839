//! `governor`: run, compare and audit policy-bounded pipeline control.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use governor_core::harness::{
    compare, compute_metrics, emit_report, replay_audit, run_experiment, BaselineConfig,
    ControllerSpec, MetricsReport, RunOptions, RunResult,
};
use governor_core::policy::PolicyError;
use governor_core::scenario::ScenarioError;
use governor_core::{
    parse_policy, parse_scenario, AgentSet, BackendSpec, PolicyDocument, ScenarioSpec,
};

#[derive(Parser)]
#[command(
    name = "governor",
    version,
    about = "Policy-bounded agentic control of simulated data pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller over a scenario.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Controller::Agentic)]
        controller: Controller,
    },
    /// Run the static baseline and the agentic controller on the same
    /// scenario and seeds, then write the comparison report.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Parse and validate a policy document.
    ValidatePolicy { file: PathBuf },
    /// Parse and validate a scenario document.
    ValidateScenario { file: PathBuf },
    /// Verify an audit log's hash chain and re-check every decision.
    ReplayAudit { log: PathBuf },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// `builtin` or `stub:<path>`.
    #[arg(long, default_value = "builtin")]
    backend: String,
    /// Repeatable. Defaults to the scenario seed for `run` and seeds 1-5 for `compare`.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Static,
    Agentic,
}

/// A failure with the exit code it maps to.
enum Failure {
    Invalid(String),
    Usage(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(format!("{e:#}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("{}: no such file", path.display())));
    }
    fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_policy(path: &Path) -> Result<PolicyDocument, Failure> {
    let text = read(path)?;
    parse_policy(&text).map_err(|e| {
        let at = path.display();
        Failure::Invalid(match e {
            PolicyError::MissingField { path, line, column } => {
                format!("{at}:{line}:{column}: missing field `{path}`")
            }
            PolicyError::UnknownKey { path, line, column } => {
                format!("{at}:{line}:{column}: unknown key `{path}`")
            }
            PolicyError::Syntax {
                path,
                message,
                line,
                column,
            } => format!("{at}:{line}:{column}: {path}: {message}"),
            other => format!("{at}: {other}"),
        })
    })
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec, Failure> {
    let text = read(path)?;
    parse_scenario(&text).map_err(|e| {
        let at = path.display();
        Failure::Invalid(match e {
            ScenarioError::Parse {
                path,
                line,
                column,
                message,
            } => format!("{at}:{line}:{column}: {path}: {message}"),
            other => format!("{at}: {other}"),
        })
    })
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::ValidatePolicy { file } => {
            let p = load_policy(&file)?;
            println!(
                "{}: policy `{}` version {} is valid",
                file.display(),
                p.id,
                p.version
            );
            Ok(())
        }
        Command::ValidateScenario { file } => {
            let s = load_scenario(&file)?;
            println!(
                "{}: scenario valid ({} pipelines, {} ticks, {} faults, hash {})",
                file.display(),
                s.pipelines.len(),
                s.horizon,
                s.fault_schedule.len(),
                &s.hash()[..12]
            );
            Ok(())
        }
        Command::ReplayAudit { log } => {
            if !log.is_file() {
                return Err(Failure::Usage(format!("{}: no such file", log.display())));
            }
            let bytes =
                fs::read(&log).map_err(|e| Failure::Invalid(format!("{}: {e}", log.display())))?;
            let s = replay_audit(&bytes).map_err(|e| {
                Failure::Invalid(format!(
                    "{}: first bad seq {}: {}",
                    log.display(),
                    e.seq,
                    e.reason
                ))
            })?;
            println!(
                "{}: ok ({} records, {} decisions, {} approvals, {} outcomes)",
                log.display(),
                s.records,
                s.decisions,
                s.approvals,
                s.outcomes
            );
            Ok(())
        }
        Command::Run { common, controller } => {
            let inputs = Inputs::load(&common)?;
            let seeds = if common.seeds.is_empty() {
                vec![inputs.scenario.seed]
            } else {
                common.seeds.clone()
            };
            let spec = match controller {
                Controller::Static => ControllerSpec::Static(inputs.baseline.clone()),
                Controller::Agentic => inputs.agentic(),
            };
            prepare_out(&common.out)?;
            for seed in seeds {
                let run = inputs.run(&spec, seed)?;
                let m = compute_metrics(&run);
                let name = format!("{}_seed{seed}", run.controller);
                write(
                    &common.out.join(format!("audit_{name}.jsonl")),
                    &run.audit.to_jsonl(),
                )?;
                let json = serde_json::to_string_pretty(&m).expect("metrics serialize") + "\n";
                write(&common.out.join(format!("metrics_{name}.json")), &json)?;
                if !common.quiet {
                    print_metrics(&m);
                }
            }
            Ok(())
        }
        Command::Compare { common } => {
            let inputs = Inputs::load(&common)?;
            let seeds = if common.seeds.is_empty() {
                (1..=5).collect()
            } else {
                common.seeds.clone()
            };
            prepare_out(&common.out)?;
            let fixed = ControllerSpec::Static(inputs.baseline.clone());
            let agentic = inputs.agentic();
            let mut runs = Vec::new();
            let (mut base, mut agent) = (Vec::new(), Vec::new());
            for &seed in &seeds {
                let s = inputs.run(&fixed, seed)?;
                let a = inputs.run(&agentic, seed)?;
                base.push(compute_metrics(&s));
                agent.push(compute_metrics(&a));
                runs.push(s);
                runs.push(a);
            }
            let report = compare(&base, &agent).context("comparing runs")?;
            emit_report(&report, &runs, &common.out).context("writing report")?;
            if !common.quiet {
                println!("seeds {seeds:?}, scenario {}", &report.scenario_hash[..12]);
                println!(
                    "{:<28} {:>14} {:>14} {:>10}",
                    "metric", "static", "agentic", "change %"
                );
                for (k, b) in &report.baseline.stats {
                    let a = report
                        .agentic
                        .stats
                        .get(k)
                        .map(|s| format!("{:.3}", s.mean));
                    let d = report.deltas_percent.get(k).map(|d| format!("{d:.1}"));
                    println!(
                        "{k:<28} {:>14.3} {:>14} {:>10}",
                        b.mean,
                        a.unwrap_or_else(|| "-".into()),
                        d.unwrap_or_else(|| "-".into())
                    );
                }
                println!("report written to {}", common.out.display());
            }
            Ok(())
        }
    }
}

struct Inputs {
    scenario: ScenarioSpec,
    policy: PolicyDocument,
    backend: BackendSpec,
    baseline: BaselineConfig,
}

impl Inputs {
    /// Everything is read and validated before any simulation starts.
    fn load(c: &Common) -> Result<Self, Failure> {
        let scenario = load_scenario(&c.scenario)?;
        let policy = load_policy(&c.policy)?;
        let backend = match c.backend.as_str() {
            "builtin" => BackendSpec::Builtin,
            s if s.starts_with("stub:") => {
                BackendSpec::parse(s).map_err(|e| Failure::Invalid(e.to_string()))?
            }
            other => {
                return Err(Failure::Usage(format!(
                    "--backend `{other}`: expected `builtin` or `stub:<path>`"
                )))
            }
        };
        let baseline =
            BaselineConfig::calibrated(&scenario).context("calibrating baseline allocations")?;
        Ok(Self {
            scenario,
            policy,
            backend,
            baseline,
        })
    }

    fn agentic(&self) -> ControllerSpec {
        ControllerSpec::Agentic {
            baseline: self.baseline.clone(),
            backend: self.backend.clone(),
            agents: AgentSet::all(),
        }
    }

    fn run(&self, spec: &ControllerSpec, seed: u64) -> Result<RunResult, Failure> {
        run_experiment(
            &self.scenario,
            &self.policy,
            spec,
            seed,
            RunOptions::default(),
        )
        .with_context(|| format!("{} run, seed {seed}", spec.name()))
        .map_err(Failure::from)
    }
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Invalid(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn print_metrics(m: &MetricsReport) {
    let mttr = m
        .mttr_mean
        .map_or_else(|| "absent".to_string(), |v| format!("{v:.2}"));
    println!(
        "{} seed {}: mttr {mttr}, cost {:.2}, manual interventions {}, unresolved {}",
        m.controller,
        m.seed,
        m.total_cost,
        m.manual_interventions,
        m.unresolved.len()
    );
    for (p, v) in &m.freshness_p95 {
        println!("  freshness_p95 {p}: {v}");
    }
}
