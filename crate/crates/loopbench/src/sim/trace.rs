//! JSONL run traces: one header line, one line per round, one summary line.
//!
//! Determinism contract: for classical policies and scripted backends,
//! identical config and seed produce byte-identical trace files. Wall-clock
//! fields are only populated for live backends, which are nondeterministic
//! anyway.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::TokenUsage;
use crate::error::{Error, Result};
use crate::graph::{ConflictReport, Graph};
use crate::metrics::{proximity, stability, ConflictSeries};
use crate::sim::config::ExperimentConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub run_id: String,
    pub repeat_index: u32,
    pub run_seed: u64,
    pub config: ExperimentConfig,
    pub graph: Graph,
    pub conf_best: usize,
    pub initial_coloring: Vec<usize>,
    pub conf_initial: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    /// Classical policy evaluation.
    Policy,
    /// Parsed from a backend response (live or scripted).
    Llm,
    /// Backend failed; the node kept its color for the round.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub node: usize,
    pub color: usize,
    pub source: DecisionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub coloring: Vec<usize>,
    pub conflicts: ConflictReport,
    pub decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub proximity: f64,
    /// Undefined for single-round runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<f64>,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

/// One seeded simulation's full history.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub rounds: Vec<RoundRecord>,
    pub summary: TraceSummary,
}

impl RunTrace {
    /// Initial coloring followed by each round's applied coloring.
    pub fn states(&self) -> Vec<Vec<usize>> {
        let mut states = Vec::with_capacity(self.rounds.len() + 1);
        states.push(self.header.initial_coloring.clone());
        states.extend(self.rounds.iter().map(|r| r.coloring.clone()));
        states
    }

    pub fn conflict_series(&self) -> Result<ConflictSeries> {
        ConflictSeries::new(
            self.header.conf_initial,
            self.rounds.iter().map(|r| r.conflicts.total).collect(),
            self.header.conf_best,
        )
    }

    /// Recomputes `(proximity, stability)` from the stored conflict series.
    pub fn recompute_metrics(&self) -> Result<(f64, Option<f64>)> {
        let series = self.conflict_series()?;
        let prox = proximity(&series)?;
        let stab = if series.conf.len() >= 2 {
            Some(stability(&series)?)
        } else {
            None
        };
        Ok((prox, stab))
    }

    /// Rebuilds a backend script that replays this run's decisions offline.
    ///
    /// Fallback decisions are synthesized by the runner, not the backend, so
    /// they are skipped; replaying a run that contained fallbacks needs a
    /// default rule supplied by the caller.
    pub fn to_replay_script(&self) -> crate::client::BackendScript {
        let mut script = crate::client::BackendScript::new();
        for round in &self.rounds {
            for decision in &round.decisions {
                if decision.source == DecisionSource::Llm {
                    if let Some(strategy) = &decision.strategy {
                        script.set_canned(
                            decision.node,
                            round.round,
                            &serde_json::json!({ "color": decision.color, "strategy": strategy }),
                        );
                    }
                }
            }
        }
        script
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Round(RoundRecord),
    Summary(TraceSummary),
}

/// Writes a trace as JSONL. Byte-deterministic for a given trace value.
pub fn persist_trace(trace: &RunTrace, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut write_line = |line: &TraceLine| -> Result<()> {
        serde_json::to_writer(&mut file, line)?;
        file.write_all(b"\n")?;
        Ok(())
    };
    write_line(&TraceLine::Header(trace.header.clone()))?;
    for round in &trace.rounds {
        write_line(&TraceLine::Round(round.clone()))?;
    }
    write_line(&TraceLine::Summary(trace.summary.clone()))?;
    file.flush()?;
    Ok(())
}

/// Loads and structurally validates a JSONL trace.
pub fn load_trace(path: &Path) -> Result<RunTrace> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut header: Option<TraceHeader> = None;
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut summary: Option<TraceSummary> = None;

    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(Error::TraceFormat(format!(
                "line {}: content after the summary line",
                index + 1
            )));
        }
        if header.is_none() {
            // Check the version before a full typed parse, so traces from a
            // different format fail with a version error, not a field error.
            let probe: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::TraceFormat(format!("line 1: {e}")))?;
            if probe.get("kind").and_then(|k| k.as_str()) != Some("header") {
                return Err(Error::TraceFormat("first line is not a header".into()));
            }
            let found = probe
                .get("format_version")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::TraceFormat("header lacks format_version".into()))?
                as u32;
            if found != FORMAT_VERSION {
                return Err(Error::TraceVersion {
                    found,
                    expected: FORMAT_VERSION,
                });
            }
            match serde_json::from_str(&line) {
                Ok(TraceLine::Header(h)) => header = Some(h),
                Ok(_) => return Err(Error::TraceFormat("first line is not a header".into())),
                Err(e) => return Err(Error::TraceFormat(format!("line 1: {e}"))),
            }
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)
            .map_err(|e| Error::TraceFormat(format!("line {}: {e}", index + 1)))?;
        match parsed {
            TraceLine::Header(_) => {
                return Err(Error::TraceFormat(format!("line {}: duplicate header", index + 1)))
            }
            TraceLine::Round(r) => {
                let expected = rounds.len() as u32 + 1;
                if r.round != expected {
                    return Err(Error::TraceFormat(format!(
                        "round {} out of order (expected {expected})",
                        r.round
                    )));
                }
                rounds.push(r);
            }
            TraceLine::Summary(s) => summary = Some(s),
        }
    }

    let header = header.ok_or_else(|| Error::TraceFormat("empty trace".into()))?;
    let summary =
        summary.ok_or_else(|| Error::TraceFormat("truncated trace: missing summary".into()))?;
    Ok(RunTrace {
        header,
        rounds,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_cycle;

    fn sample_trace() -> RunTrace {
        let config = ExperimentConfig::from_toml_str(
            "[graph]\nfamily = \"cycle\"\nn = 3\n[agent]\npolicy = \"greedy_det\"",
        )
        .unwrap();
        let graph = make_cycle(3).unwrap();
        RunTrace {
            header: TraceHeader {
                format_version: FORMAT_VERSION,
                run_id: "test-run".into(),
                repeat_index: 0,
                run_seed: 7,
                config,
                graph,
                conf_best: 1,
                initial_coloring: vec![0, 0, 0],
                conf_initial: 3,
            },
            rounds: vec![
                RoundRecord {
                    round: 1,
                    coloring: vec![1, 1, 1],
                    conflicts: ConflictReport {
                        total: 3,
                        per_node: vec![2, 2, 2],
                    },
                    decisions: (0..3)
                        .map(|node| DecisionRecord {
                            node,
                            color: 1,
                            source: DecisionSource::Llm,
                            strategy: Some("[NEW] line one\n[SAME] line two".into()),
                            error: None,
                            prompt: None,
                            attempts: Some(1),
                            usage: None,
                            timing_ms: None,
                        })
                        .collect(),
                },
                RoundRecord {
                    round: 2,
                    coloring: vec![0, 1, 1],
                    conflicts: ConflictReport {
                        total: 1,
                        per_node: vec![0, 1, 1],
                    },
                    decisions: (0..3)
                        .map(|node| DecisionRecord {
                            node,
                            color: if node == 0 { 0 } else { 1 },
                            source: DecisionSource::Llm,
                            strategy: Some("[SAME] hold".into()),
                            error: None,
                            prompt: None,
                            attempts: Some(1),
                            usage: None,
                            timing_ms: None,
                        })
                        .collect(),
                },
            ],
            summary: TraceSummary {
                proximity: 50.0,
                stability: Some(100.0),
                aborted: false,
                abort_reason: None,
            },
        }
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let trace = sample_trace();
        persist_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded, trace);
    }

    #[test]
    fn persistence_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let trace = sample_trace();
        persist_trace(&trace, &a).unwrap();
        persist_trace(&trace, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn strategies_survive_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let trace = sample_trace();
        persist_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(
            loaded.rounds[0].decisions[0].strategy.as_deref(),
            Some("[NEW] line one\n[SAME] line two")
        );
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let trace = sample_trace();
        persist_trace(&trace, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = content.lines().take(2).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        assert!(matches!(load_trace(&path), Err(Error::TraceFormat(_))));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let trace = sample_trace();
        persist_trace(&trace, &path).unwrap();
        let content = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":99");
        std::fs::write(&path, content).unwrap();
        match load_trace(&path) {
            Err(Error::TraceVersion { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_rounds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut trace = sample_trace();
        trace.rounds[1].round = 5;
        persist_trace(&trace, &path).unwrap();
        assert!(matches!(load_trace(&path), Err(Error::TraceFormat(_))));
    }

    #[test]
    fn garbage_line_is_a_format_error_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        std::fs::write(&path, "{ not json\n").unwrap();
        assert!(matches!(load_trace(&path), Err(Error::TraceFormat(_))));
    }

    #[test]
    fn metrics_recompute_from_series() {
        let trace = sample_trace();
        let (prox, stab) = trace.recompute_metrics().unwrap();
        // Series [3, 1] from initial 3, best 1: excesses {1, 0}, mean 1/2.
        assert!((prox - 50.0).abs() < 1e-9);
        assert_eq!(stab, Some(100.0));
        assert_eq!(trace.summary.proximity, prox);
        assert_eq!(trace.summary.stability, stab);
    }

    #[test]
    fn states_include_initial() {
        let trace = sample_trace();
        let states = trace.states();
        assert_eq!(states.len(), 3);
        assert_eq!(states[0], vec![0, 0, 0]);
        assert_eq!(states[2], vec![0, 1, 1]);
    }
}
