//! The synchronous round engine and the repeated-experiment driver.
//!
//! One controller per run owns all mutable state. Within a round, agent
//! evaluations may proceed concurrently; they synchronize at a barrier before
//! the round's decisions are applied simultaneously.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::agent::{build_observation_with_cap, parse_decision, parse_injection, render_prompt, response_schema, NoteLedger};
use crate::client::{Backend, BackendScript, CompletionRequest, HttpBackend, RequestMeta, ScriptedBackend, TokenUsage};
use crate::error::{Error, Result};
use crate::graph::{conflict_report, init_coloring, Coloring, Graph, InitMode};
use crate::metrics::{aggregate, csv_row, MetricsRow, CSV_HEADER};
use crate::policies::{LocalView, PolicySpec};
use crate::rng::{derive_stream, mix64};
use crate::sim::config::ExperimentConfig;
use crate::sim::trace::{
    DecisionRecord, DecisionSource, PromptRecord, RoundRecord, RunTrace, TraceHeader,
    TraceSummary, FORMAT_VERSION,
};

/// Domain tags for sub-seed derivation.
const SEED_DOMAIN_REPEAT: u64 = 0x5250_5431;
const SEED_DOMAIN_INIT: u64 = 0x494e_4954;

/// Bound on resampling random initial colorings that land on `conf_best`.
const MAX_INIT_ATTEMPTS: u64 = 100;

/// An LLM run aborts after this many consecutive rounds in which every node
/// fell back; fewer failures are absorbed by the per-node hold fallback.
pub const MAX_CONSECUTIVE_FAILED_ROUNDS: u32 = 3;

const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

/// Independent per-repeat seeds derived from one declared master seed.
pub fn repeat_seed(master_seed: u64, repeat_index: u32) -> u64 {
    mix64(&[master_seed, repeat_index as u64, SEED_DOMAIN_REPEAT])
}

/// Runs `count` jobs with at most `cap` in flight; returns results in job
/// order. The scope end is the round barrier.
fn fan_out<R: Send>(count: usize, cap: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let results: Vec<Mutex<Option<R>>> = (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cap.min(count).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let result = f(i);
                *results[i].lock().unwrap() = Some(result);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker stored a result"))
        .collect()
}

/// Builds the backend an llm config calls for: the script file when set,
/// otherwise the live endpoint from the environment.
pub fn build_backend(cfg: &ExperimentConfig) -> Result<Arc<dyn Backend>> {
    match &cfg.agent.script {
        Some(path) => {
            let content = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read script {}: {e}", path.display())))?;
            Ok(Arc::new(ScriptedBackend::new(BackendScript::from_json(&content)?)))
        }
        None => Ok(Arc::new(HttpBackend::from_env()?)),
    }
}

struct LlmRuntime {
    backend: Arc<dyn Backend>,
    model: String,
    temperature: f64,
    extra_params: BTreeMap<String, serde_json::Value>,
    timeout: Duration,
    concurrency: usize,
    log_prompts: bool,
    history_cap: Option<usize>,
    run_id: String,
}

enum AgentRuntime {
    Classical(PolicySpec),
    Llm(Box<LlmRuntime>),
}

fn classical_round(
    g: &Graph,
    palette: usize,
    current: &[usize],
    spec: &PolicySpec,
    run_seed: u64,
    round: u32,
) -> (Vec<DecisionRecord>, Vec<usize>) {
    let coloring = Coloring::new(current.to_vec(), palette).expect("state stays in palette");
    let mut new_state = current.to_vec();
    let mut decisions = Vec::with_capacity(g.node_count());
    for node in 0..g.node_count() {
        let view = LocalView::from_coloring(g, &coloring, node);
        let mut rng = derive_stream(run_seed, node, round);
        let color = spec.decide(&view, &mut rng);
        new_state[node] = color;
        decisions.push(DecisionRecord {
            node,
            color,
            source: DecisionSource::Policy,
            strategy: None,
            error: None,
            prompt: None,
            attempts: None,
            usage: None,
            timing_ms: None,
        });
    }
    (decisions, new_state)
}

type LlmOutcome = (
    std::result::Result<(crate::agent::AgentDecision, u32, Option<TokenUsage>), Error>,
    Option<u64>,
);

fn llm_round(
    g: &Graph,
    palette: usize,
    states: &[Vec<usize>],
    ledger: &mut NoteLedger,
    rt: &LlmRuntime,
    round: u32,
) -> Result<(Vec<DecisionRecord>, Vec<usize>, bool)> {
    let n = g.node_count();
    let round_index = states.len() - 1;

    // Observations and prompts are built before any request leaves, from
    // states strictly before this round.
    let mut requests = Vec::with_capacity(n);
    for node in 0..n {
        let obs = build_observation_with_cap(g, palette, states, node, round_index, rt.history_cap)?;
        let notes = ledger.latest(node).map(|e| e.text.as_str()).unwrap_or("");
        let (system, user) = render_prompt(&obs, notes);
        requests.push(CompletionRequest {
            model: rt.model.clone(),
            system,
            user,
            temperature: rt.temperature,
            schema: response_schema(palette),
            timeout: rt.timeout,
            extra_params: rt.extra_params.clone(),
            meta: RequestMeta {
                run_id: rt.run_id.clone(),
                node_id: node,
                round,
            },
        });
    }

    let record_timing = !rt.backend.deterministic();
    let outcomes: Vec<LlmOutcome> = fan_out(n, rt.concurrency, |i| {
        let started = Instant::now();
        let result = rt.backend.complete(&requests[i]).and_then(|resp| {
            let decision = parse_decision(&resp.content, palette)?;
            Ok((decision, resp.attempts, resp.usage))
        });
        let timing = record_timing.then(|| started.elapsed().as_millis() as u64);
        (result, timing)
    });

    let current = states.last().expect("at least the initial state");
    let mut new_state = current.clone();
    let mut decisions = Vec::with_capacity(n);
    let mut fallbacks = 0usize;
    for (node, (outcome, timing_ms)) in outcomes.into_iter().enumerate() {
        let prompt = rt.log_prompts.then(|| PromptRecord {
            system: requests[node].system.clone(),
            user: requests[node].user.clone(),
        });
        match outcome {
            Ok((decision, attempts, usage)) => {
                new_state[node] = decision.color;
                ledger.record(node, round, decision.strategy.clone())?;
                decisions.push(DecisionRecord {
                    node,
                    color: decision.color,
                    source: DecisionSource::Llm,
                    strategy: Some(decision.strategy),
                    error: None,
                    prompt,
                    attempts: Some(attempts),
                    usage,
                    timing_ms,
                });
            }
            Err(e) => {
                // Holding the current color injects the least information
                // while keeping the synchronous model total.
                fallbacks += 1;
                decisions.push(DecisionRecord {
                    node,
                    color: current[node],
                    source: DecisionSource::Fallback,
                    strategy: None,
                    error: Some(e.to_string()),
                    prompt,
                    attempts: None,
                    usage: None,
                    timing_ms,
                });
            }
        }
    }
    Ok((decisions, new_state, fallbacks == n))
}

fn draw_initial(
    cfg: &ExperimentConfig,
    g: &Graph,
    run_seed: u64,
    conf_best: usize,
) -> Result<(Coloring, usize)> {
    match cfg.init_mode()? {
        InitMode::Uniform(k) => {
            let coloring = init_coloring(g, cfg.palette, InitMode::Uniform(k), run_seed)?;
            let conf_initial = conflict_report(g, &coloring)?.total;
            if conf_initial <= conf_best {
                return Err(Error::DegenerateSeries {
                    conf_initial,
                    conf_best,
                });
            }
            Ok((coloring, conf_initial))
        }
        InitMode::Random => {
            // Resample until the proximity denominator is defined.
            let mut last = (0, conf_best);
            for attempt in 0..MAX_INIT_ATTEMPTS {
                let seed = mix64(&[run_seed, attempt, SEED_DOMAIN_INIT]);
                let coloring = init_coloring(g, cfg.palette, InitMode::Random, seed)?;
                let conf_initial = conflict_report(g, &coloring)?.total;
                if conf_initial > conf_best {
                    return Ok((coloring, conf_initial));
                }
                last = (conf_initial, conf_best);
            }
            Err(Error::DegenerateSeries {
                conf_initial: last.0,
                conf_best: last.1,
            })
        }
    }
}

fn summarize(trace_rounds: &[RoundRecord], conf_initial: usize, conf_best: usize) -> Result<(f64, Option<f64>)> {
    let series = crate::metrics::ConflictSeries::new(
        conf_initial,
        trace_rounds.iter().map(|r| r.conflicts.total).collect(),
        conf_best,
    )?;
    let prox = crate::metrics::proximity(&series)?;
    let stab = if series.conf.len() >= 2 {
        Some(crate::metrics::stability(&series)?)
    } else {
        None
    };
    Ok((prox, stab))
}

/// Runs one seeded simulation, building the backend from the config when the
/// agent is LLM-backed.
pub fn run_simulation(cfg: &ExperimentConfig, repeat_index: u32) -> Result<RunTrace> {
    let backend = if cfg.is_llm() {
        Some(build_backend(cfg)?)
    } else {
        None
    };
    run_simulation_inner(cfg, repeat_index, backend)
}

/// Runs one seeded simulation against a caller-supplied backend (probe
/// backends, pre-built scripts).
pub fn run_simulation_with_backend(
    cfg: &ExperimentConfig,
    repeat_index: u32,
    backend: Arc<dyn Backend>,
) -> Result<RunTrace> {
    run_simulation_inner(cfg, repeat_index, Some(backend))
}

fn run_simulation_inner(
    cfg: &ExperimentConfig,
    repeat_index: u32,
    backend: Option<Arc<dyn Backend>>,
) -> Result<RunTrace> {
    cfg.validate()?;
    let g = cfg.build_graph()?;
    let n = g.node_count();
    let run_seed = repeat_seed(cfg.seed, repeat_index);
    let conf_best = cfg.resolve_conf_best(&g)?;
    let (initial, conf_initial) = draw_initial(cfg, &g, run_seed, conf_best)?;
    let run_id = format!("{}-{}-r{repeat_index}", cfg.graph_label(), cfg.agent_label());

    let runtime = if cfg.is_llm() {
        let backend = backend.ok_or_else(|| Error::Config("llm run needs a backend".into()))?;
        AgentRuntime::Llm(Box::new(LlmRuntime {
            backend,
            model: cfg.agent.model.clone().unwrap_or_else(|| "scripted".into()),
            temperature: cfg.agent.temperature.unwrap_or(1.0),
            extra_params: cfg.agent.params.clone(),
            timeout: cfg
                .request_timeout_secs
                .map(Duration::from_secs)
                .unwrap_or(DEFAULT_REQUEST_TIMEOUT),
            concurrency: cfg.concurrency,
            log_prompts: cfg.log_prompts,
            history_cap: cfg.history_cap,
            run_id: run_id.clone(),
        }))
    } else {
        AgentRuntime::Classical(cfg.policy_spec()?)
    };

    let mut ledger = NoteLedger::new(n);
    if let Some(path) = &cfg.inject {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read injection file {}: {e}", path.display())))?;
        ledger.inject(&parse_injection(&content, n)?)?;
    }

    let header = TraceHeader {
        format_version: FORMAT_VERSION,
        run_id,
        repeat_index,
        run_seed,
        config: cfg.clone(),
        graph: g.clone(),
        conf_best,
        initial_coloring: initial.colors().to_vec(),
        conf_initial,
    };

    let mut states: Vec<Vec<usize>> = vec![initial.colors().to_vec()];
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut consecutive_failed_rounds = 0u32;

    for round in 1..=cfg.steps {
        let (decisions, new_state, all_fell_back) = match &runtime {
            AgentRuntime::Classical(spec) => {
                let (decisions, new_state) =
                    classical_round(&g, cfg.palette, states.last().unwrap(), spec, run_seed, round);
                (decisions, new_state, false)
            }
            AgentRuntime::Llm(rt) => llm_round(&g, cfg.palette, &states, &mut ledger, rt, round)?,
        };

        let coloring = Coloring::new(new_state.clone(), cfg.palette)?;
        let conflicts = conflict_report(&g, &coloring)?;
        rounds.push(RoundRecord {
            round,
            coloring: new_state.clone(),
            conflicts,
            decisions,
        });
        states.push(new_state);

        if all_fell_back {
            consecutive_failed_rounds += 1;
            if consecutive_failed_rounds >= MAX_CONSECUTIVE_FAILED_ROUNDS {
                let reason = format!(
                    "every node fell back for {consecutive_failed_rounds} consecutive rounds \
                     (last round {round})"
                );
                let (prox, stab) = summarize(&rounds, conf_initial, conf_best)?;
                let partial = RunTrace {
                    header,
                    rounds,
                    summary: TraceSummary {
                        proximity: prox,
                        stability: stab,
                        aborted: true,
                        abort_reason: Some(reason.clone()),
                    },
                };
                return Err(Error::Aborted {
                    reason,
                    partial: Box::new(partial),
                });
            }
        } else {
            consecutive_failed_rounds = 0;
        }
    }

    let (prox, stab) = summarize(&rounds, conf_initial, conf_best)?;
    Ok(RunTrace {
        header,
        rounds,
        summary: TraceSummary {
            proximity: prox,
            stability: stab,
            aborted: false,
            abort_reason: None,
        },
    })
}

/// Result of a repeated experiment: the aggregated row plus bookkeeping.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub row: MetricsRow,
    pub graph_label: String,
    pub agent_label: String,
    pub aborted_repeats: Vec<u32>,
    pub trace_paths: Vec<PathBuf>,
    pub csv_path: Option<PathBuf>,
}

/// Executes `repeats` runs with repeat-indexed seeds, persists traces when an
/// output directory is given, and aggregates the completed runs into one row.
///
/// Aborted runs keep their partial traces on disk, are excluded from the
/// aggregate, and are flagged in the outcome and the experiment metadata.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if cfg.steps < 2 {
        return Err(Error::InsufficientData(
            "stability is undefined for single-step runs; experiments need steps >= 2".into(),
        ));
    }
    let out = out_dir.or(cfg.out_dir.as_deref());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let backend = if cfg.is_llm() { Some(build_backend(cfg)?) } else { None };

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut aborted_repeats = Vec::new();
    let mut trace_paths = Vec::new();

    for repeat in 0..cfg.repeats {
        let outcome = run_simulation_inner(cfg, repeat, backend.clone());
        let (trace, aborted) = match outcome {
            Ok(trace) => (trace, false),
            Err(Error::Aborted { reason, partial }) => {
                log::warn!("repeat {repeat} aborted: {reason}");
                aborted_repeats.push(repeat);
                (*partial, true)
            }
            Err(other) => return Err(other),
        };
        if let Some(dir) = out {
            let path = dir.join(format!("run{repeat:03}.jsonl"));
            crate::sim::trace::persist_trace(&trace, &path)?;
            trace_paths.push(path);
        }
        if !aborted {
            let stability = trace.summary.stability.ok_or_else(|| {
                Error::InsufficientData("run completed without a stability value".into())
            })?;
            pairs.push((trace.summary.proximity, stability));
        }
    }

    if pairs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "all {} runs aborted; nothing to aggregate",
            cfg.repeats
        )));
    }
    let row = aggregate(&pairs)?;
    let graph_label = cfg.graph_label();
    let agent_label = cfg.agent_label();

    let mut csv_path = None;
    if let Some(dir) = out {
        let path = dir.join("summary.csv");
        let csv = format!("{CSV_HEADER}\n{}\n", csv_row(&graph_label, &agent_label, &row));
        std::fs::write(&path, csv)?;
        csv_path = Some(path);

        let meta = serde_json::json!({
            "graph": graph_label,
            "agent": agent_label,
            "row": row,
            "aborted_repeats": aborted_repeats,
            "traces": trace_paths
                .iter()
                .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
                .collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("experiment.json"), serde_json::to_string_pretty(&meta)?)?;
    }

    Ok(ExperimentOutcome {
        row,
        graph_label,
        agent_label,
        aborted_repeats,
        trace_paths,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{CompletionResponse, ScriptRule};

    fn config(toml: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(toml).unwrap()
    }

    fn greedy_uniform(n: usize, steps: u32) -> ExperimentConfig {
        config(&format!(
            "steps = {steps}\n[graph]\nfamily = \"cycle\"\nn = {n}\n\
             [init]\nmode = \"uniform\"\ncolor = 0\n[agent]\npolicy = \"greedy_det\""
        ))
    }

    #[test]
    fn greedy_lockstep_on_uniform_c3() {
        // All nodes see identical views and flip together: conflicts stay 3.
        let trace = run_simulation(&greedy_uniform(3, 6), 0).unwrap();
        let series: Vec<usize> = trace.rounds.iter().map(|r| r.conflicts.total).collect();
        assert_eq!(series, vec![3; 6]);
        let states = trace.states();
        assert_eq!(states[1], vec![1, 1, 1]);
        assert_eq!(states[2], vec![0, 0, 0]);
        for t in 0..states.len() - 2 {
            assert_eq!(states[t], states[t + 2], "period-2 oscillation broken at {t}");
        }
    }

    #[test]
    fn greedy_never_reaches_best_on_odd_cycles() {
        for n in [3usize, 5, 11] {
            let trace = run_simulation(&greedy_uniform(n, 50), 0).unwrap();
            assert!(trace.rounds.iter().all(|r| r.conflicts.total == n));
        }
    }

    #[test]
    fn soft_fp_zero_p_is_constant() {
        let cfg = config(
            "steps = 10\n[graph]\nfamily = \"cycle\"\nn = 5\n[agent]\npolicy = \"soft_fp\"\np = 0.0",
        );
        let trace = run_simulation(&cfg, 0).unwrap();
        let initial = trace.header.initial_coloring.clone();
        for round in &trace.rounds {
            assert_eq!(round.coloring, initial);
        }
    }

    #[test]
    fn classical_runs_are_deterministic() {
        let cfg = config(
            "seed = 99\nsteps = 15\n[graph]\nfamily = \"cycle\"\nn = 5\n[agent]\npolicy = \"random\"",
        );
        let a = run_simulation(&cfg, 2).unwrap();
        let b = run_simulation(&cfg, 2).unwrap();
        assert_eq!(a, b);
        let c = run_simulation(&cfg, 3).unwrap();
        assert_ne!(a, c, "different repeats should differ");
    }

    #[test]
    fn stored_metrics_match_recomputed() {
        let cfg = config(
            "seed = 5\nsteps = 15\n[graph]\nfamily = \"cycle\"\nn = 11\n[agent]\npolicy = \"soft_fp\"",
        );
        let trace = run_simulation(&cfg, 0).unwrap();
        let (prox, stab) = trace.recompute_metrics().unwrap();
        assert_eq!(trace.summary.proximity, prox);
        assert_eq!(trace.summary.stability, stab);
    }

    #[test]
    fn random_init_resamples_degenerate_draws() {
        // On C3 with c = 2 the only colorings with more than conf_best = 1
        // conflicts are the all-same ones, so every accepted initial state
        // must have 3 conflicts.
        let cfg = config(
            "steps = 2\n[graph]\nfamily = \"cycle\"\nn = 3\n[agent]\npolicy = \"random\"",
        );
        for repeat in 0..50 {
            let trace = run_simulation(&cfg, repeat).unwrap();
            assert_eq!(trace.header.conf_initial, 3);
        }
    }

    #[test]
    fn degenerate_uniform_init_errors() {
        // conf_best override equal to the uniform initial conflicts makes the
        // proximity denominator undefined.
        let mut cfg = greedy_uniform(3, 5);
        cfg.conf_best = Some(3);
        assert!(matches!(
            run_simulation(&cfg, 0),
            Err(Error::DegenerateSeries { .. })
        ));
    }

    #[test]
    fn conservative_random_monte_carlo_profile() {
        // Exact chain analysis for C3, c = 2, uniform(0) init: the expected
        // conflict count drops from 3 to 1.5 after one round and stays at 1.5
        // (the all-same probability is stationary at 1/4 from round 1 on).
        let cfg = config(
            "steps = 6\n[graph]\nfamily = \"cycle\"\nn = 3\n\
             [init]\nmode = \"uniform\"\ncolor = 0\n[agent]\npolicy = \"conservative_random\"",
        );
        let runs = 4_000u32;
        let mut sums = vec![0.0f64; 6];
        for repeat in 0..runs {
            let trace = run_simulation(&cfg, repeat).unwrap();
            for (t, round) in trace.rounds.iter().enumerate() {
                sums[t] += round.conflicts.total as f64;
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / runs as f64).collect();
        assert!(means[0] < 2.0, "round-1 mean should drop well below 3: {means:?}");
        for (t, &m) in means.iter().enumerate() {
            assert!((m - 1.5).abs() < 0.15, "round {} mean {m} drifted: {means:?}", t + 1);
        }
    }

    #[test]
    fn random_policy_long_run_mean_on_c11() {
        // Each edge conflicts with probability 1/2 under independent uniform
        // colors, so the long-run mean is 11/2.
        let cfg = config(
            "steps = 1000\n[graph]\nfamily = \"cycle\"\nn = 11\n[agent]\npolicy = \"random\"",
        );
        let trace = run_simulation(&cfg, 0).unwrap();
        let mean = trace.rounds.iter().map(|r| r.conflicts.total).sum::<usize>() as f64 / 1000.0;
        assert!((mean - 5.5).abs() < 0.3, "long-run mean {mean}");
    }

    fn scripted_llm_config(n: usize, steps: u32) -> ExperimentConfig {
        // Validation requires a script path for offline llm agents; tests
        // inject the backend directly, so the path itself is never read.
        config(&format!(
            "steps = {steps}\n[graph]\nfamily = \"cycle\"\nn = {n}\n\
             [init]\nmode = \"uniform\"\ncolor = 0\n[agent]\npolicy = \"llm\"\nscript = \"unused.json\""
        ))
    }

    #[test]
    fn scripted_keep_rule_freezes_conflicts() {
        let cfg = scripted_llm_config(5, 4);
        let backend = ScriptedBackend::shared(BackendScript::new().with_default(ScriptRule::KeepOwnColor));
        let trace = run_simulation_with_backend(&cfg, 0, backend).unwrap();
        for round in &trace.rounds {
            assert_eq!(round.conflicts.total, 5);
            assert!(round.decisions.iter().all(|d| d.source == DecisionSource::Llm));
            assert!(round.decisions.iter().all(|d| d.strategy.is_some()));
        }
    }

    #[test]
    fn scripted_best_response_reproduces_greedy_oscillation() {
        let llm_cfg = scripted_llm_config(3, 6);
        let backend = ScriptedBackend::shared(BackendScript::new().with_default(ScriptRule::BestResponse));
        let llm_trace = run_simulation_with_backend(&llm_cfg, 0, backend).unwrap();
        let greedy_trace = run_simulation(&greedy_uniform(3, 6), 0).unwrap();
        assert_eq!(llm_trace.states(), greedy_trace.states());
    }

    #[test]
    fn scripted_runs_are_deterministic() {
        let cfg = scripted_llm_config(5, 6);
        let backend = || ScriptedBackend::shared(BackendScript::new().with_default(ScriptRule::FlipOnConflict));
        let a = run_simulation_with_backend(&cfg, 1, backend()).unwrap();
        let b = run_simulation_with_backend(&cfg, 1, backend()).unwrap();
        assert_eq!(a, b);
    }

    /// Backend that always fails.
    struct FailingBackend;
    impl Backend for FailingBackend {
        fn complete(&self, _req: &CompletionRequest) -> Result<CompletionResponse> {
            Err(Error::Transport {
                attempts: 1,
                msg: "synthetic outage".into(),
            })
        }
        fn deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn persistent_failure_aborts_with_partial_trace() {
        let cfg = scripted_llm_config(3, 10);
        let err = run_simulation_with_backend(&cfg, 0, Arc::new(FailingBackend)).unwrap_err();
        match err {
            Error::Aborted { reason, partial } => {
                assert!(reason.contains("fell back"));
                assert_eq!(partial.rounds.len(), MAX_CONSECUTIVE_FAILED_ROUNDS as usize);
                assert!(partial.summary.aborted);
                // Every node held its color the whole time.
                for round in &partial.rounds {
                    assert_eq!(round.coloring, vec![0, 0, 0]);
                    assert!(round
                        .decisions
                        .iter()
                        .all(|d| d.source == DecisionSource::Fallback));
                    assert!(round.decisions.iter().all(|d| d.error.is_some()));
                }
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    /// Fails only for one node; everyone else follows a rule.
    struct PartiallyFailingBackend {
        inner: ScriptedBackend,
        failing_node: usize,
    }
    impl Backend for PartiallyFailingBackend {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
            if req.meta.node_id == self.failing_node {
                Err(Error::Transport {
                    attempts: 1,
                    msg: "synthetic node outage".into(),
                })
            } else {
                self.inner.complete(req)
            }
        }
        fn deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn single_node_failure_falls_back_without_abort() {
        let cfg = scripted_llm_config(5, 6);
        let backend = Arc::new(PartiallyFailingBackend {
            inner: ScriptedBackend::new(BackendScript::new().with_default(ScriptRule::KeepOwnColor)),
            failing_node: 0,
        });
        let trace = run_simulation_with_backend(&cfg, 0, backend).unwrap();
        assert!(!trace.summary.aborted);
        assert_eq!(trace.rounds.len(), 6);
        for round in &trace.rounds {
            assert_eq!(round.decisions[0].source, DecisionSource::Fallback);
            assert_eq!(round.decisions[0].color, 0, "fallback holds the current color");
            assert!(round.decisions[1..].iter().all(|d| d.source == DecisionSource::Llm));
        }
    }

    /// Records the round of every request in arrival order, then delegates.
    struct ProbeBackend {
        inner: ScriptedBackend,
        rounds_seen: Mutex<Vec<u32>>,
        prompts: Mutex<Vec<(usize, u32, String)>>,
    }
    impl Backend for ProbeBackend {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
            self.rounds_seen.lock().unwrap().push(req.meta.round);
            self.prompts.lock().unwrap().push((
                req.meta.node_id,
                req.meta.round,
                req.user.clone(),
            ));
            self.inner.complete(req)
        }
        fn deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn rounds_are_barriered_and_observations_lag_decisions() {
        let cfg = scripted_llm_config(5, 4);
        let probe = Arc::new(ProbeBackend {
            inner: ScriptedBackend::new(BackendScript::new().with_default(ScriptRule::FlipOnConflict)),
            rounds_seen: Mutex::new(Vec::new()),
            prompts: Mutex::new(Vec::new()),
        });
        let trace = run_simulation_with_backend(&cfg, 0, probe.clone()).unwrap();

        // Barrier contract: all round-t requests arrive before any round-t+1
        // request.
        let rounds_seen = probe.rounds_seen.lock().unwrap().clone();
        let mut sorted = rounds_seen.clone();
        sorted.sort_unstable();
        assert_eq!(rounds_seen, sorted, "request issue order crossed a round barrier");

        // Synchrony: every round-t prompt shows neighbor colors from state
        // t-1, never same-round decisions.
        let states = trace.states();
        let g = crate::graph::make_cycle(5).unwrap();
        for (node, round, user) in probe.prompts.lock().unwrap().iter() {
            let previous = &states[(*round - 1) as usize];
            let expected: Vec<String> = g
                .neighbors(*node)
                .iter()
                .map(|&w| format!("{w}: {}", previous[w]))
                .collect();
            let line = format!("- Neighbors' colors: {{{}}}", expected.join(", "));
            assert!(
                user.contains(&line),
                "round {round} node {node} prompt lacks {line:?}"
            );
        }
    }

    #[test]
    fn traces_replay_through_the_scripted_backend() {
        let cfg = scripted_llm_config(5, 6);
        let original = run_simulation_with_backend(
            &cfg,
            0,
            ScriptedBackend::shared(BackendScript::new().with_default(ScriptRule::FlipOnConflict)),
        )
        .unwrap();
        let replay_backend = ScriptedBackend::shared(original.to_replay_script());
        let replayed = run_simulation_with_backend(&cfg, 0, replay_backend).unwrap();
        assert_eq!(replayed, original);
    }

    #[test]
    fn experiment_repeats_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "seed = 3\nrepeats = 1\nsteps = 15\n[graph]\nfamily = \"cycle\"\nn = 5\n[agent]\npolicy = \"soft_fp\"",
        );
        let outcome = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert_eq!(outcome.row.repeats, 1);
        assert_eq!(outcome.row.proximity_std, 0.0);
        assert_eq!(outcome.row.stability_std, 0.0);
        assert!(outcome.aborted_repeats.is_empty());
        assert!(dir.path().join("run000.jsonl").exists());
        let csv = std::fs::read_to_string(outcome.csv_path.unwrap()).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("C5,soft_fp,"));
        assert!(dir.path().join("experiment.json").exists());
    }

    #[test]
    fn five_repeat_fp_band_on_c5() {
        // Wide acceptance band for the five-repeat protocol.
        let cfg = config(
            "seed = 0\nrepeats = 5\nsteps = 15\n[graph]\nfamily = \"cycle\"\nn = 5\n[agent]\npolicy = \"soft_fp\"",
        );
        let outcome = run_experiment(&cfg, None).unwrap();
        assert!(
            (60.0..=95.0).contains(&outcome.row.proximity_mean),
            "proximity mean {}",
            outcome.row.proximity_mean
        );
    }

    #[test]
    fn all_aborted_experiment_errors_but_saves_traces() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = scripted_llm_config(3, 10);
        cfg.repeats = 2;
        cfg.out_dir = Some(dir.path().to_path_buf());
        // The scripted path points at a file with no entries and no default,
        // so every request gaps and every run aborts.
        std::fs::write(dir.path().join("empty.json"), "{}").unwrap();
        cfg.agent.script = Some(dir.path().join("empty.json"));
        let err = run_experiment(&cfg, None).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)), "{err}");
        // Partial traces from both aborted repeats were persisted anyway.
        assert!(dir.path().join("run000.jsonl").exists());
        assert!(dir.path().join("run001.jsonl").exists());
        let partial = crate::sim::trace::load_trace(&dir.path().join("run000.jsonl")).unwrap();
        assert!(partial.summary.aborted);
    }
}
