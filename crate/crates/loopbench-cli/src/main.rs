//! `loopbench`: run symmetry-breaking experiments on over-constrained cycles,
//! re-aggregate trace directories, query the brute-force oracle, and inspect
//! strategy-note evolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use loopbench::agent::lint_strategy;
use loopbench::graph::{chromatic_number_bruteforce, make_cycle, min_conflicts_bruteforce};
use loopbench::metrics::{aggregate, csv_row, CSV_HEADER};
use loopbench::sim::{load_trace, run_experiment, DecisionSource, ExperimentConfig};
use loopbench::Error;

#[derive(Parser)]
#[command(name = "loopbench", version, about = "Distributed symmetry-breaking benchmark on over-constrained cycle graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config: repeated seeded simulations, traces, and a summary row
    Run(RunArgs),
    /// Re-derive the summary CSV from a directory of trace files
    Aggregate {
        /// Directory containing *.jsonl traces
        #[arg(long)]
        traces: PathBuf,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the minimum conflict count and chromatic number for a cycle
    Oracle {
        /// Cycle length n
        #[arg(long)]
        cycle: usize,
        /// Palette size c
        #[arg(long)]
        colors: usize,
    },
    /// Dump per-node strategy note evolution from a trace
    Strategies {
        #[arg(long)]
        trace: PathBuf,
        /// Restrict output to one node
        #[arg(long)]
        node: Option<usize>,
    },
    /// Run with strategy notes injected into every round-0 prompt
    Distill(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of rounds per run
    #[arg(long)]
    steps: Option<u32>,
    /// Override the number of repeated runs
    #[arg(long)]
    repeats: Option<u32>,
    /// Note-injection seed file (UTF-8 text, or JSON {"node_id": "text"})
    #[arg(long)]
    inject: Option<PathBuf>,
    /// Persist full prompt text into traces
    #[arg(long)]
    log_prompts: bool,
    /// Output directory for traces and the summary row
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, machine-parseable; payloads may carry newlines.
            let msg = e.to_string().replace('\n', "\\n");
            eprintln!("error: {msg}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidInstance(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => run(args, false),
        Command::Distill(args) => run(args, true),
        Command::Oracle { cycle, colors } => oracle(cycle, colors),
        Command::Aggregate { traces, out } => aggregate_traces(&traces, out.as_deref()),
        Command::Strategies { trace, node } => strategies(&trace, node),
    }
}

fn overlay_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_toml_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(repeats) = args.repeats {
        cfg.repeats = repeats;
    }
    if let Some(inject) = &args.inject {
        cfg.inject = Some(inject.clone());
    }
    if args.log_prompts {
        cfg.log_prompts = true;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_out_dir(config_path: &Path) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    PathBuf::from("runs").join(stem)
}

fn run(args: RunArgs, distill: bool) -> Result<(), Error> {
    let cfg = overlay_config(&args)?;
    if distill && cfg.inject.is_none() {
        return Err(Error::Config(
            "distill needs an injection file (--inject or config inject)".into(),
        ));
    }
    let out_dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| default_out_dir(&args.config));
    let outcome = run_experiment(&cfg, Some(&out_dir))?;
    if !outcome.aborted_repeats.is_empty() {
        eprintln!(
            "warning: repeats {:?} aborted; partial traces saved, excluded from the row",
            outcome.aborted_repeats
        );
    }
    println!("{CSV_HEADER}");
    println!("{}", csv_row(&outcome.graph_label, &outcome.agent_label, &outcome.row));
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn oracle(cycle: usize, colors: usize) -> Result<(), Error> {
    let g = make_cycle(cycle)?;
    let min_conflicts = min_conflicts_bruteforce(&g, colors)?;
    let chromatic = chromatic_number_bruteforce(&g)?;
    println!("min_conflicts={min_conflicts} chromatic={chromatic}");
    Ok(())
}

fn aggregate_traces(dir: &Path, out: Option<&Path>) -> Result<(), Error> {
    let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    let mut skipped = 0usize;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!("no .jsonl traces under {}", dir.display())));
    }
    for path in entries {
        let trace = load_trace(&path)?;
        if trace.summary.aborted {
            skipped += 1;
            continue;
        }
        // Re-derive metrics from the stored conflict series rather than
        // trusting the stored summary.
        let (prox, stab) = trace.recompute_metrics()?;
        let Some(stab) = stab else {
            skipped += 1;
            continue;
        };
        let key = (trace.header.config.graph_label(), trace.header.config.agent_label());
        groups.entry(key).or_default().push((prox, stab));
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} trace(s) (aborted or single-round)");
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for ((graph, agent), pairs) in &groups {
        let row = aggregate(pairs)?;
        csv.push_str(&csv_row(graph, agent, &row));
        csv.push('\n');
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn strategies(trace_path: &Path, node: Option<usize>) -> Result<(), Error> {
    let trace = load_trace(trace_path)?;
    let n = trace.header.graph.node_count();
    let nodes: Vec<usize> = match node {
        Some(v) if v >= n => {
            return Err(Error::InvalidArgument(format!(
                "node {v} outside graph of {n} nodes"
            )))
        }
        Some(v) => vec![v],
        None => (0..n).collect(),
    };
    for v in nodes {
        println!("node {v}");
        let mut any = false;
        for round in &trace.rounds {
            let Some(decision) = round.decisions.iter().find(|d| d.node == v) else {
                continue;
            };
            match (&decision.strategy, decision.source) {
                (Some(text), _) => {
                    any = true;
                    let tags = lint_strategy(text);
                    println!(
                        "  round {} [NEW:{} MODIFIED:{} SAME:{} violations:{}]",
                        round.round, tags.new, tags.modified, tags.same, tags.violations
                    );
                    for line in text.lines() {
                        println!("    {line}");
                    }
                }
                (None, DecisionSource::Fallback) => {
                    any = true;
                    println!("  round {} (fallback, note unchanged)", round.round);
                }
                _ => {}
            }
        }
        if !any {
            println!("  (no strategy notes in this trace)");
        }
    }
    Ok(())
}
