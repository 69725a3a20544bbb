//! `rotary`: scenario-driven front end for the residency simulator.
//!
//! Exit codes: 0 success, 1 usage error, 2 initialization failure (budget
//! infeasible at startup), 3 I/O or parse error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rotary_core::gguf::{self, ExpertClassifier, DEFAULT_EXPERT_PATTERN};
use rotary_core::workload::{self, gen_phased, gen_uniform, gen_zipf, parse_phases};
use rotary_core::{
    batch, check_startup, compare, run, BudgetSide, Feasibility, Outcome, PolicyKind, RunReport,
    ScenarioConfig, ScenarioFile, StepRecord, Trace,
};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "rotary",
    version,
    about = "Slot-group residency simulator for MoE weights"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario file (`key = value` lines).
    #[arg(short = 'c', long = "config")]
    config: PathBuf,
    /// Override a scenario key, e.g. `--set context_length=2048`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one trace under one policy.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Trace file; defaults to the scenario's `trace` key.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the per-step timeline as CSV.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Run several policies on the same trace.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_value = "lru,rotary,belady")]
        policies: Vec<String>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every `*.jsonl` trace in a directory and report completion.
    Batch {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic trace: phased if `--phases`, Zipf if `--zipf-s`,
    /// uniform otherwise.
    GenTrace(GenTraceArgs),
    /// Read a GGUF file's tensor table and emit a layout JSON.
    InspectGguf {
        path: PathBuf,
        #[arg(long, default_value = DEFAULT_EXPERT_PATTERN)]
        expert_pattern: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check device and host budgets at startup without running anything.
    Feasibility {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    universe: Option<u32>,
    #[arg(long, default_value_t = 1)]
    top_k: u32,
    #[arg(long)]
    zipf_s: Option<f64>,
    /// Phase id sets, e.g. `0-3;4-7` or `0,2,5;1-3`.
    #[arg(long)]
    phases: Option<String>,
    #[arg(long)]
    phase_len: Option<u64>,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Infeasible,
    Io(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Io(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible) => ExitCode::from(2),
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Simulate {
            scenario,
            trace,
            out,
            timeline,
        } => simulate(&scenario, trace, out, timeline),
        Command::Compare {
            scenario,
            policies,
            trace,
            out,
        } => compare_cmd(&scenario, &policies, trace, out),
        Command::Batch {
            scenario,
            traces,
            out,
        } => batch_cmd(&scenario, &traces, out),
        Command::GenTrace(args) => gen_trace(args),
        Command::InspectGguf {
            path,
            expert_pattern,
            out,
        } => inspect_gguf(&path, &expert_pattern, out),
        Command::Feasibility { scenario, out } => feasibility(&scenario, out),
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<(ScenarioFile, ScenarioConfig), Failure> {
    let mut file = ScenarioFile::read(&args.config)
        .with_context(|| format!("reading scenario {}", args.config.display()))?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        file.set(k, v)
            .map_err(|e| Failure::Usage(format!("--set {kv}: {e}")))?;
    }
    let cfg = file
        .to_config()
        .with_context(|| format!("scenario {}", args.config.display()))?;
    Ok((file, cfg))
}

fn load_trace(file: &ScenarioFile, explicit: Option<PathBuf>) -> Result<Trace, Failure> {
    let path = explicit
        .or_else(|| file.trace_path())
        .ok_or_else(|| Failure::Usage("no trace given: pass --trace or set `trace`".into()))?;
    Ok(Trace::read(&path).with_context(|| format!("reading trace {}", path.display()))?)
}

fn emit(out: Option<&Path>, content: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, content).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(content)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn json_bytes(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn write_timeline(path: &Path, timeline: &[StepRecord]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "step",
        "decision",
        "prefetch_bytes",
        "misses",
        "hits",
        "stall_s",
        "step_s",
        "resident_bytes",
    ])?;
    for r in timeline {
        w.write_record([
            r.step.to_string(),
            r.decision.map(|d| d.to_string()).unwrap_or_default(),
            r.prefetch_bytes.to_string(),
            r.demand_misses.len().to_string(),
            r.hit_count.to_string(),
            r.stall_seconds.to_string(),
            r.step_seconds.to_string(),
            r.resident_bytes_after.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn side_name(side: BudgetSide) -> &'static str {
    match side {
        BudgetSide::Device => "device",
        BudgetSide::Host => "host",
    }
}

fn report_failure(report: &RunReport) -> CmdResult {
    if let Outcome::InitializationFailure { violations } = &report.outcome {
        for v in violations {
            eprintln!(
                "initialization failure: {} requires {} bytes, budget {} (short by {})",
                side_name(v.side),
                v.required,
                v.budget,
                v.deficit
            );
        }
        return Err(Failure::Infeasible);
    }
    Ok(())
}

fn simulate(
    args: &ScenarioArgs,
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    timeline: Option<PathBuf>,
) -> CmdResult {
    let (file, cfg) = load_scenario(args)?;
    let trace = load_trace(&file, trace)?;
    let report = run(&cfg, &trace).map_err(|e| anyhow!(e))?;
    emit(out.as_deref(), &json_bytes(&report))?;
    if let Some(t) = timeline {
        write_timeline(&t, &report.timeline)?;
    }
    log::info!(
        "{}: {} tokens, {} misses, {:.3} tokens/s",
        report.policy,
        report.metrics.tokens,
        report.metrics.misses,
        report.metrics.throughput
    );
    report_failure(&report)
}

fn compare_cmd(
    args: &ScenarioArgs,
    names: &[String],
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let (file, cfg) = load_scenario(args)?;
    let trace = load_trace(&file, trace)?;
    let rotary = file.rotary_params().map_err(|e| anyhow!(e))?;
    let kinds = names
        .iter()
        .map(|n| PolicyKind::parse(n, cfg.seed, rotary))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let report = compare(&cfg, &kinds, &trace).map_err(|e| anyhow!(e))?;
    emit(out.as_deref(), &json_bytes(&report))?;
    eprintln!(
        "{:<8} {:>10} {:>10} {:>16} {:>12} {:>12}",
        "policy", "misses", "prefetch", "bytes", "stall_s", "tokens/s"
    );
    for r in &report.rows {
        eprintln!(
            "{:<8} {:>10} {:>10} {:>16} {:>12.4} {:>12.3}",
            r.policy, r.misses, r.prefetch_loads, r.bytes_transferred, r.stall_time, r.throughput
        );
    }
    match report.runs.first() {
        Some(first) => report_failure(first),
        None => Ok(()),
    }
}

fn batch_cmd(args: &ScenarioArgs, dir: &Path, out: Option<PathBuf>) -> CmdResult {
    let (_, cfg) = load_scenario(args)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Usage(format!(
            "no *.jsonl traces in {}",
            dir.display()
        )));
    }
    let traces = paths
        .iter()
        .map(|p| Trace::read(p).with_context(|| format!("reading trace {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = batch(&cfg, &traces);
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    emit(
        out.as_deref(),
        &json_bytes(&json!({ "traces": names, "report": report })),
    )?;
    eprintln!(
        "completed {}/{} ({:.1}%), initialization failures {}, abnormal terminations {}",
        report.completed,
        report.total,
        report.completion_rate * 100.0,
        report.initialization_failures,
        report.abnormal_terminations
    );
    if report.abnormal_terminations > 0 {
        Err(Failure::Io(anyhow!("batch had abnormal terminations")))
    } else if report.initialization_failures > 0 {
        Err(Failure::Infeasible)
    } else {
        Ok(())
    }
}

fn gen_trace(a: GenTraceArgs) -> CmdResult {
    let usage = |e: workload::TraceError| Failure::Usage(e.to_string());
    let trace = if let Some(spec) = &a.phases {
        let phases = parse_phases(spec).map_err(usage)?;
        let len = a
            .phase_len
            .ok_or_else(|| Failure::Usage("--phases needs --phase-len".into()))?;
        gen_phased(&phases, len, a.repeats, a.seed).map_err(usage)?
    } else {
        let (Some(steps), Some(universe)) = (a.steps, a.universe) else {
            return Err(Failure::Usage(
                "uniform and zipf traces need --steps and --universe".into(),
            ));
        };
        match a.zipf_s {
            Some(s) => gen_zipf(steps, universe, a.top_k, s, a.seed).map_err(usage)?,
            None => gen_uniform(steps, universe, a.top_k, a.seed).map_err(usage)?,
        }
    };
    emit(a.out.as_deref(), &trace.to_jsonl())?;
    Ok(())
}

fn inspect_gguf(path: &Path, pattern: &str, out: Option<PathBuf>) -> CmdResult {
    let classifier = ExpertClassifier::new(pattern).map_err(|e| Failure::Usage(e.to_string()))?;
    let file = gguf::read_path(path).with_context(|| format!("reading {}", path.display()))?;
    let layout = gguf::build_layout(&file.tensors, &classifier)
        .with_context(|| format!("building layout for {}", path.display()))?;
    let mut text = layout.to_json().into_bytes();
    text.push(b'\n');
    emit(out.as_deref(), &text)?;
    let experts = layout.submodules().len() - layout.mandatory_resident().len();
    eprintln!(
        "{}: GGUF v{}, {} tensors, {} bytes; {} expert sub-modules over {} layers, {} mandatory bytes",
        path.display(),
        file.header.version,
        file.tensors.len(),
        layout.total_bytes(),
        experts,
        layout.expert_layers().len(),
        layout.mandatory_bytes()
    );
    if let Some(arch) = &file.metadata.architecture {
        log::info!("architecture {arch}");
    }
    Ok(())
}

fn feasibility(args: &ScenarioArgs, out: Option<PathBuf>) -> CmdResult {
    let (_, cfg) = load_scenario(args)?;
    let result = check_startup(&cfg.startup_inputs());
    let report = json!({
        "host_pinned_layers": cfg.host_pinned_layers,
        "context_length": cfg.context_length,
        "slot_count": cfg.slot_count,
        "result": result,
    });
    emit(out.as_deref(), &json_bytes(&report))?;
    match result {
        Feasibility::Feasible { .. } => Ok(()),
        Feasibility::InitializationFailure { violations } => {
            for v in violations {
                eprintln!(
                    "initialization failure: {} requires {} bytes, budget {} (short by {})",
                    side_name(v.side),
                    v.required,
                    v.budget,
                    v.deficit
                );
            }
            Err(Failure::Infeasible)
        }
    }
}
