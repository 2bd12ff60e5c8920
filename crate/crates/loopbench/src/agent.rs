//! Per-node agent plumbing: observation assembly, prompt rendering, the
//! strict decision schema, and the feed-forward private-note ledger.
//!
//! Rendering is canonical and pure: identical inputs produce byte-identical
//! text, which the golden tests rely on. Mappings render as `{id: value, ...}`
//! with ids ascending, lists as `[a, b, c]`, and rates with two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Usage statistics for one palette color in a node's own history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPerformance {
    pub rounds_used: usize,
    /// Mean of the node's conflict counts over the rounds it held this color.
    pub mean_conflicts: f64,
}

/// Everything one node may see at a given round: local colors, histories,
/// and performance feedback. Histories run oldest to newest and include the
/// initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub node_id: usize,
    pub degree: usize,
    pub neighbor_ids: Vec<usize>,
    pub own_color: usize,
    pub neighbor_colors: BTreeMap<usize, usize>,
    pub palette_size: usize,
    pub colors_used_by_neighbors: Vec<usize>,
    pub own_color_history: Vec<usize>,
    pub own_conflict_history: Vec<usize>,
    pub neighbor_color_histories: BTreeMap<usize, Vec<usize>>,
    pub color_performance: BTreeMap<usize, ColorPerformance>,
    pub current_conflicts: usize,
    pub recent_conflict_rate: f64,
}

/// Window for the recent conflict rate: mean conflicts per round over the
/// last `min(5, history length)` rounds.
pub const RECENT_RATE_WINDOW: usize = 5;

impl AgentObservation {
    /// `CONFLICT FREE` or `<k> CONFLICTS`.
    pub fn status(&self) -> String {
        if self.current_conflicts == 0 {
            "CONFLICT FREE".to_string()
        } else {
            format!("{} CONFLICTS", self.current_conflicts)
        }
    }
}

fn node_conflicts(g: &Graph, state: &[usize], node: usize) -> usize {
    g.neighbors(node)
        .iter()
        .filter(|&&w| state[w] == state[node])
        .count()
}

/// Assembles a node's observation from the states recorded so far.
///
/// `states` holds the initial coloring followed by the applied coloring of
/// each completed round, oldest first. `round_index` is the number of
/// completed decision rounds; the observation uses `states[0..=round_index]`,
/// so no agent ever observes same-round decisions.
pub fn build_observation(
    g: &Graph,
    palette_size: usize,
    states: &[Vec<usize>],
    node_id: usize,
    round_index: usize,
) -> Result<AgentObservation> {
    build_observation_with_cap(g, palette_size, states, node_id, round_index, None)
}

/// [`build_observation`] with an optional history cap: when set, rendered
/// histories keep only the most recent `cap` entries. Full history makes
/// prompt length grow linearly per round (quadratically over a run); the cap
/// bounds it.
pub fn build_observation_with_cap(
    g: &Graph,
    palette_size: usize,
    states: &[Vec<usize>],
    node_id: usize,
    round_index: usize,
    history_cap: Option<usize>,
) -> Result<AgentObservation> {
    if node_id >= g.node_count() {
        return Err(Error::InvalidArgument(format!(
            "node {node_id} outside graph of {} nodes",
            g.node_count()
        )));
    }
    if states.len() <= round_index {
        return Err(Error::Sequencing(format!(
            "observation for round index {round_index} needs {} recorded states, have {}",
            round_index + 1,
            states.len()
        )));
    }
    let full = &states[..=round_index];
    let window_start = match history_cap {
        Some(cap) if cap >= 1 => full.len().saturating_sub(cap),
        Some(_) => {
            return Err(Error::InvalidArgument("history cap must be at least 1".into()))
        }
        None => 0,
    };
    let history = &full[window_start..];
    for state in history {
        if state.len() != g.node_count() {
            return Err(Error::Dimension(format!(
                "state has {} entries, graph has {} nodes",
                state.len(),
                g.node_count()
            )));
        }
    }

    let neighbor_ids = g.neighbors(node_id).to_vec();
    let current = &history[history.len() - 1];
    let own_color = current[node_id];
    let neighbor_colors: BTreeMap<usize, usize> =
        neighbor_ids.iter().map(|&w| (w, current[w])).collect();
    let mut colors_used_by_neighbors: Vec<usize> = neighbor_colors.values().copied().collect();
    colors_used_by_neighbors.sort_unstable();
    colors_used_by_neighbors.dedup();

    let own_color_history: Vec<usize> = history.iter().map(|s| s[node_id]).collect();
    let own_conflict_history: Vec<usize> =
        history.iter().map(|s| node_conflicts(g, s, node_id)).collect();
    let neighbor_color_histories: BTreeMap<usize, Vec<usize>> = neighbor_ids
        .iter()
        .map(|&w| (w, history.iter().map(|s| s[w]).collect()))
        .collect();

    let mut color_performance: BTreeMap<usize, ColorPerformance> = BTreeMap::new();
    for (&color, &conflicts) in own_color_history.iter().zip(&own_conflict_history) {
        let entry = color_performance.entry(color).or_insert(ColorPerformance {
            rounds_used: 0,
            mean_conflicts: 0.0,
        });
        entry.rounds_used += 1;
        entry.mean_conflicts += conflicts as f64;
    }
    for perf in color_performance.values_mut() {
        perf.mean_conflicts /= perf.rounds_used as f64;
    }

    let window = own_conflict_history.len().min(RECENT_RATE_WINDOW);
    let recent_conflict_rate = own_conflict_history[own_conflict_history.len() - window..]
        .iter()
        .sum::<usize>() as f64
        / window as f64;

    let current_conflicts = own_conflict_history[own_conflict_history.len() - 1];

    Ok(AgentObservation {
        node_id,
        degree: neighbor_ids.len(),
        neighbor_ids,
        own_color,
        neighbor_colors,
        palette_size,
        colors_used_by_neighbors,
        own_color_history,
        own_conflict_history,
        neighbor_color_histories,
        color_performance,
        current_conflicts,
        recent_conflict_rate,
    })
}

pub const SYSTEM_PROMPT: &str = "You are a node in a graph coloring problem. \
Your goal is to achieve a stable global coloring where no neighbors share the same color.";

/// Placeholder shown in MY PRIVATE NOTES before any note exists.
pub const EMPTY_NOTES_PLACEHOLDER: &str = "(none yet)";

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    let mut out = String::from("[");
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{item}");
    }
    out.push(']');
    out
}

fn fmt_map<V: std::fmt::Display>(map: &BTreeMap<usize, V>) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{k}: {v}");
    }
    out.push('}');
    out
}

fn fmt_history_map(map: &BTreeMap<usize, Vec<usize>>) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{k}: {}", fmt_list(v));
    }
    out.push('}');
    out
}

fn fmt_performance(map: &BTreeMap<usize, ColorPerformance>) -> String {
    let mut out = String::from("{");
    for (i, (k, perf)) in map.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(
            out,
            "{k}: {{rounds_used: {}, mean_conflicts: {:.2}}}",
            perf.rounds_used, perf.mean_conflicts
        );
    }
    out.push('}');
    out
}

/// Renders the system and user prompts for one agent-round.
///
/// Pure function of `(obs, notes)`: identical inputs produce byte-identical
/// text. Empty notes render as the `(none yet)` placeholder.
pub fn render_prompt(obs: &AgentObservation, notes: &str) -> (String, String) {
    let available: Vec<usize> = (0..obs.palette_size).collect();
    let notes_text = if notes.is_empty() { EMPTY_NOTES_PLACEHOLDER } else { notes };
    let user = format!(
        "You are a node in a graph coloring problem. Your task is to choose a color that \
minimizes conflicts in the global graph (but you can only observe your immediate neighbors). \
Consider all information provided below to develop a strategy and choose a color.\n\
\n\
### LOCAL INFORMATION:\n\
- Your current color: {own}\n\
- Neighbors' colors: {nbr_colors}\n\
- Available colors: {available}\n\
- Colors currently used by neighbors: {used}\n\
\n\
### STRUCTURAL INFORMATION:\n\
- Your node ID: {node}\n\
- Number of neighbors (node degree): {degree}\n\
- Neighbor IDs: {nbr_ids}\n\
\n\
### HISTORICAL DATA:\n\
- Your color history: {color_hist}\n\
- Your conflict history: {conflict_hist}\n\
- Neighbors' color history: {nbr_hist}\n\
- Color performance history: {perf}\n\
\n\
### PERFORMANCE FEEDBACK:\n\
- Current conflict count: {cur} neighbors share your color\n\
- Recent conflict rate: {rate:.2} conflicts per turn\n\
- Current success status: {status}\n\
\n\
### MY PRIVATE NOTES:\n\
{notes_text}\n\
\n\
Based on your experience, update your private notes with concise, transferable insights. \
Focus on documenting general patterns and strategies that have emerged from observing \
neighbor behavior and conflict resolution, not specific color choices. Your notes should \
be a single string containing a list of strategies written in a concise, pseudocode-like \
style. When updating, follow these rules:\n\
1. Prefix each strategy with `[NEW]`, `[MODIFIED]`, or `[SAME]`.\n\
2. If modifying, keep the original wording as much as possible.\n\
3. Use a newline to separate different strategies.",
        own = obs.own_color,
        nbr_colors = fmt_map(&obs.neighbor_colors),
        available = fmt_list(&available),
        used = fmt_list(&obs.colors_used_by_neighbors),
        node = obs.node_id,
        degree = obs.degree,
        nbr_ids = fmt_list(&obs.neighbor_ids),
        color_hist = fmt_list(&obs.own_color_history),
        conflict_hist = fmt_list(&obs.own_conflict_history),
        nbr_hist = fmt_history_map(&obs.neighbor_color_histories),
        perf = fmt_performance(&obs.color_performance),
        cur = obs.current_conflicts,
        rate = obs.recent_conflict_rate,
        status = obs.status(),
    );
    (SYSTEM_PROMPT.to_string(), user)
}

/// Strict response schema for a `c`-color decision: integer `color` within
/// the palette enum plus a free-text `strategy`, nothing else.
pub fn response_schema(c: usize) -> serde_json::Value {
    assert!(c >= 1, "palette size must be at least 1");
    let colors: Vec<usize> = (0..c).collect();
    serde_json::json!({
        "type": "object",
        "properties": {
            "color": { "type": "integer", "enum": colors },
            "strategy": { "type": "string" }
        },
        "required": ["color", "strategy"],
        "additionalProperties": false
    })
}

/// A parsed agent decision: the chosen color plus the private strategy note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub color: usize,
    pub strategy: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDecision {
    color: i64,
    strategy: String,
}

/// Parses and validates a decision document against the palette.
///
/// Errors carry the raw payload so failed responses can be trace-logged.
pub fn parse_decision(raw: &[u8], c: usize) -> Result<AgentDecision> {
    let payload = String::from_utf8_lossy(raw).into_owned();
    let parsed: RawDecision = serde_json::from_slice(raw).map_err(|e| Error::Parse {
        msg: e.to_string(),
        payload: payload.clone(),
    })?;
    if parsed.color < 0 || parsed.color as usize >= c {
        return Err(Error::Validation {
            msg: format!("color {} outside enum [0, {})", parsed.color, c),
            payload,
        });
    }
    if parsed.strategy.is_empty() {
        return Err(Error::Validation {
            msg: "strategy is empty".into(),
            payload,
        });
    }
    Ok(AgentDecision {
        color: parsed.color as usize,
        strategy: parsed.strategy,
    })
}

/// Tag census of a strategy note. Advisory only: models sometimes break the
/// format, so untagged lines are reported, never fatal.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagReport {
    pub new: usize,
    pub modified: usize,
    pub same: usize,
    pub violations: usize,
}

/// Classifies each non-empty line of a note by its leading tag.
pub fn lint_strategy(text: &str) -> TagReport {
    let mut report = TagReport::default();
    for line in text.lines() {
        let line = line.trim_start();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("[NEW]") {
            report.new += 1;
        } else if line.starts_with("[MODIFIED]") {
            report.modified += 1;
        } else if line.starts_with("[SAME]") {
            report.same += 1;
        } else {
            report.violations += 1;
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteProvenance {
    /// Written by the agent at the stamped round.
    Written,
    /// Seeded into the round-0 prompt by a distillation run.
    Injected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEntry {
    pub round: u32,
    pub text: String,
    pub provenance: NoteProvenance,
}

/// Per-node sequence of strategy notes, round-stamped.
///
/// The note stored from round `t` is exactly the text fed forward into the
/// round `t + 1` prompt. Updated only at round barriers by the single
/// simulation controller.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteLedger {
    entries: Vec<Vec<NoteEntry>>,
}

impl NoteLedger {
    pub fn new(node_count: usize) -> Self {
        Self {
            entries: vec![Vec::new(); node_count],
        }
    }

    pub fn node_count(&self) -> usize {
        self.entries.len()
    }

    /// Seeds round-0 notes before the simulation starts.
    pub fn inject(&mut self, seeds: &BTreeMap<usize, String>) -> Result<()> {
        if self.entries.iter().any(|e| !e.is_empty()) {
            return Err(Error::Sequencing(
                "note injection is only allowed before round 0".into(),
            ));
        }
        for (&node, text) in seeds {
            if node >= self.entries.len() {
                return Err(Error::InvalidArgument(format!(
                    "injection targets node {node}, ledger has {} nodes",
                    self.entries.len()
                )));
            }
            self.entries[node].push(NoteEntry {
                round: 0,
                text: text.clone(),
                provenance: NoteProvenance::Injected,
            });
        }
        Ok(())
    }

    /// Stores the note an agent wrote at `round` (1-based decision rounds).
    pub fn record(&mut self, node: usize, round: u32, text: String) -> Result<()> {
        if node >= self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "node {node} outside ledger of {} nodes",
                self.entries.len()
            )));
        }
        if round == 0 {
            return Err(Error::Sequencing(
                "round-0 notes come from injection, not agents".into(),
            ));
        }
        if let Some(last) = self.entries[node].last() {
            if round <= last.round {
                return Err(Error::Sequencing(format!(
                    "note round {round} not after previous round {}",
                    last.round
                )));
            }
        }
        self.entries[node].push(NoteEntry {
            round,
            text,
            provenance: NoteProvenance::Written,
        });
        Ok(())
    }

    /// The note text the node's next prompt should carry, if any.
    pub fn latest(&self, node: usize) -> Option<&NoteEntry> {
        self.entries[node].last()
    }

    pub fn history(&self, node: usize) -> &[NoteEntry] {
        &self.entries[node]
    }
}

/// Parses an injection seed file: a JSON object mapping node id to note text,
/// or plain UTF-8 applied to every node.
pub fn parse_injection(content: &str, node_count: usize) -> Result<BTreeMap<usize, String>> {
    let trimmed = content.trim_start();
    if trimmed.starts_with('{') {
        let map: BTreeMap<String, String> = serde_json::from_str(trimmed).map_err(|e| {
            Error::InvalidArgument(format!("injection file looks like JSON but failed to parse: {e}"))
        })?;
        let mut seeds = BTreeMap::new();
        for (key, text) in map {
            let node: usize = key.parse().map_err(|_| {
                Error::InvalidArgument(format!("injection key {key:?} is not a node id"))
            })?;
            if node >= node_count {
                return Err(Error::InvalidArgument(format!(
                    "injection targets node {node}, graph has {node_count} nodes"
                )));
            }
            seeds.insert(node, text);
        }
        Ok(seeds)
    } else {
        let text = content.trim_end_matches('\n').to_string();
        Ok((0..node_count).map(|v| (v, text.clone())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_cycle;

    fn c3_states() -> Vec<Vec<usize>> {
        vec![vec![0, 0, 0]]
    }

    #[test]
    fn observation_initial_state_only() {
        let g = make_cycle(3).unwrap();
        let obs = build_observation(&g, 2, &c3_states(), 0, 0).unwrap();
        assert_eq!(obs.own_color_history, vec![0]);
        assert_eq!(obs.own_conflict_history, vec![2]);
        assert_eq!(obs.current_conflicts, 2);
        assert_eq!(obs.status(), "2 CONFLICTS");
        assert_eq!(obs.neighbor_ids, vec![1, 2]);
        assert_eq!(obs.degree, 2);
    }

    #[test]
    fn observation_color_performance() {
        // Node 0 held color 0 with 2 conflicts, then color 1 with 0.
        let g = make_cycle(3).unwrap();
        let states = vec![vec![0, 0, 0], vec![1, 0, 0]];
        let obs = build_observation(&g, 2, &states, 0, 1).unwrap();
        assert_eq!(obs.own_color_history, vec![0, 1]);
        assert_eq!(obs.own_conflict_history, vec![2, 0]);
        let perf0 = &obs.color_performance[&0];
        assert_eq!(perf0.rounds_used, 1);
        assert_eq!(perf0.mean_conflicts, 2.0);
        let perf1 = &obs.color_performance[&1];
        assert_eq!(perf1.rounds_used, 1);
        assert_eq!(perf1.mean_conflicts, 0.0);
    }

    #[test]
    fn observation_recent_rate_window() {
        // Conflict history [2, 2, 0, 0, 1, 1]: last five average to 0.8.
        let g = make_cycle(3).unwrap();
        // Node 0's conflicts per state are controlled via its neighbors' colors.
        let states = vec![
            vec![0, 0, 0], // 2
            vec![0, 0, 0], // 2
            vec![0, 1, 1], // 0
            vec![0, 1, 1], // 0
            vec![0, 0, 1], // 1
            vec![0, 0, 1], // 1
        ];
        let obs = build_observation(&g, 2, &states, 0, 5).unwrap();
        assert_eq!(obs.own_conflict_history, vec![2, 2, 0, 0, 1, 1]);
        assert!((obs.recent_conflict_rate - 0.8).abs() < 1e-9);
    }

    #[test]
    fn observation_history_cap_keeps_recent_window() {
        let g = make_cycle(3).unwrap();
        let states: Vec<Vec<usize>> = (0..10).map(|t| vec![t % 2, 0, 0]).collect();
        let capped = build_observation_with_cap(&g, 2, &states, 0, 9, Some(3)).unwrap();
        assert_eq!(capped.own_color_history, vec![1, 0, 1]);
        assert_eq!(capped.own_color, 1);
        let full = build_observation(&g, 2, &states, 0, 9).unwrap();
        assert_eq!(full.own_color_history.len(), 10);
        // Current-state fields are unaffected by the cap.
        assert_eq!(capped.current_conflicts, full.current_conflicts);
        assert_eq!(capped.neighbor_colors, full.neighbor_colors);
        assert!(build_observation_with_cap(&g, 2, &states, 0, 9, Some(0)).is_err());
    }

    #[test]
    fn prompt_growth_linear_uncapped_bounded_capped() {
        // Full history makes the prompt grow with t; a cap bounds it.
        let g = make_cycle(3).unwrap();
        let states: Vec<Vec<usize>> = (0..60).map(|t| vec![t % 2, (t / 2) % 2, 0]).collect();
        let len_at = |round_index: usize, cap: Option<usize>| {
            let obs = build_observation_with_cap(&g, 2, &states, 0, round_index, cap).unwrap();
            render_prompt(&obs, "").1.len()
        };
        assert!(len_at(50, None) > len_at(25, None));
        assert!(len_at(25, None) > len_at(10, None));
        // Linear per-round growth: doubling t roughly doubles the history
        // payload, never worse.
        let base = len_at(10, None);
        let grown = len_at(50, None);
        assert!(grown < base * 6, "uncapped growth worse than linear: {base} -> {grown}");
        // Capped prompts stop growing once the window is full.
        assert_eq!(len_at(30, Some(5)), len_at(50, Some(5)));
    }

    #[test]
    fn observation_round_out_of_range() {
        let g = make_cycle(3).unwrap();
        assert!(matches!(
            build_observation(&g, 2, &c3_states(), 0, 1),
            Err(Error::Sequencing(_))
        ));
    }

    #[test]
    fn observation_status_conflict_free() {
        let g = make_cycle(3).unwrap();
        let states = vec![vec![0, 1, 1]];
        let obs = build_observation(&g, 2, &states, 0, 0).unwrap();
        assert_eq!(obs.status(), "CONFLICT FREE");
        assert_eq!(obs.colors_used_by_neighbors, vec![1]);
    }

    #[test]
    fn render_contains_canonical_lines() {
        let g = make_cycle(3).unwrap();
        let (system, user) = {
            let obs = build_observation(&g, 2, &c3_states(), 0, 0).unwrap();
            render_prompt(&obs, "")
        };
        assert_eq!(system, SYSTEM_PROMPT);
        assert!(user.contains("- Your current color: 0"));
        assert!(user.contains("- Neighbors' colors: {1: 0, 2: 0}"));
        assert!(user.contains("- Available colors: [0, 1]"));
        assert!(user.contains("### MY PRIVATE NOTES:\n(none yet)"));
        assert!(user.contains("- Current success status: 2 CONFLICTS"));
        assert!(user.contains("Prefix each strategy with `[NEW]`"));
    }

    #[test]
    fn render_is_pure() {
        let g = make_cycle(5).unwrap();
        let obs = build_observation(&g, 2, &[vec![0, 1, 0, 1, 0]], 2, 0).unwrap();
        assert_eq!(render_prompt(&obs, "[NEW] x"), render_prompt(&obs, "[NEW] x"));
    }

    #[test]
    fn render_carries_notes_verbatim() {
        let g = make_cycle(3).unwrap();
        let obs = build_observation(&g, 2, &c3_states(), 1, 0).unwrap();
        let note = "[NEW] wait one turn\n[SAME] prefer rare colors";
        let (_, user) = render_prompt(&obs, note);
        assert!(user.contains(&format!("### MY PRIVATE NOTES:\n{note}")));
    }

    #[test]
    fn schema_enum_matches_palette() {
        let schema = response_schema(2);
        assert_eq!(schema["properties"]["color"]["enum"], serde_json::json!([0, 1]));
        assert_eq!(response_schema(1)["properties"]["color"]["enum"], serde_json::json!([0]));
        assert_eq!(schema["required"], serde_json::json!(["color", "strategy"]));
        assert_eq!(schema["additionalProperties"], serde_json::json!(false));
    }

    #[test]
    fn parse_valid_decision() {
        let d = parse_decision(br#"{"color":1,"strategy":"[NEW] wait one turn"}"#, 2).unwrap();
        assert_eq!(d.color, 1);
        assert_eq!(d.strategy, "[NEW] wait one turn");
    }

    #[test]
    fn parse_rejects_out_of_enum() {
        let err = parse_decision(br#"{"color":5,"strategy":"x"}"#, 2).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn parse_rejects_missing_field_and_garbage() {
        assert!(matches!(
            parse_decision(br#"{"color":0}"#, 2),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(parse_decision(b"not json", 2), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_decision(br#"{"color":0,"strategy":"x","extra":1}"#, 2),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_decision(br#"{"color":0,"strategy":""}"#, 2),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn parse_error_carries_payload() {
        match parse_decision(b"oops", 2) {
            Err(Error::Parse { payload, .. }) => assert_eq!(payload, "oops"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn lint_counts_tags() {
        let report = lint_strategy("[NEW] a\n[SAME] b");
        assert_eq!(report, TagReport { new: 1, modified: 0, same: 1, violations: 0 });
        let report = lint_strategy("[MODIFIED] Prioritize colors not used by neighbors to minimize conflicts.");
        assert_eq!(report.modified, 1);
        assert_eq!(lint_strategy("hold color").violations, 1);
        assert_eq!(lint_strategy("").violations, 0);
    }

    #[test]
    fn ledger_feed_forward_and_injection() {
        let mut ledger = NoteLedger::new(3);
        assert!(ledger.latest(0).is_none());
        let seeds: BTreeMap<usize, String> = [(0usize, "wait one turn".to_string())].into();
        ledger.inject(&seeds).unwrap();
        assert_eq!(ledger.latest(0).unwrap().text, "wait one turn");
        assert_eq!(ledger.latest(0).unwrap().provenance, NoteProvenance::Injected);
        assert!(ledger.latest(1).is_none());

        ledger.record(0, 1, "[NEW] a".into()).unwrap();
        assert_eq!(ledger.latest(0).unwrap().text, "[NEW] a");
        // Injection after the run started is a sequencing error.
        assert!(matches!(ledger.inject(&seeds), Err(Error::Sequencing(_))));
        // Rounds must strictly increase.
        assert!(matches!(ledger.record(0, 1, "x".into()), Err(Error::Sequencing(_))));
    }

    #[test]
    fn injection_file_formats() {
        let per_node = parse_injection(r#"{"0": "a", "2": "b"}"#, 3).unwrap();
        assert_eq!(per_node.len(), 2);
        assert_eq!(per_node[&0], "a");
        assert_eq!(per_node[&2], "b");

        let broadcast = parse_injection("hold color\n", 3).unwrap();
        assert_eq!(broadcast.len(), 3);
        assert_eq!(broadcast[&1], "hold color");

        assert!(parse_injection(r#"{"9": "a"}"#, 3).is_err());
        assert!(parse_injection(r#"{"x": "a"}"#, 3).is_err());
    }
}
