//! Declarative description of an experiment campaign, mirrored by the TOML
//! config files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{make_cycle, min_conflicts_bruteforce, Graph, InitMode};
use crate::policies::PolicySpec;

pub const POLICY_IDS: &[&str] = &[
    "soft_fp",
    "soft_cfp",
    "conservative_random",
    "random",
    "greedy_det",
    "llm",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Only `cycle` is generated; the graph type itself stays general.
    pub family: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    /// `uniform` or `random`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<usize>,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            mode: "random".into(),
            color: None,
        }
    }
}

/// Agent selection: a classical policy id with parameters, or `llm` with
/// either a live model id or an offline script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Provider-specific pass-through parameters (e.g. reasoning effort).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
}

fn default_palette() -> usize {
    2
}
fn default_steps() -> u32 {
    15
}
fn default_repeats() -> u32 {
    5
}
fn default_concurrency() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSpec,
    pub agent: AgentSpec,
    #[serde(default = "default_palette")]
    pub palette: usize,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    /// Skips the brute-force oracle when set; required beyond its capacity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf_best: Option<usize>,
    /// Note-injection seed file for distillation runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Persist full prompt text in traces (opt-in; prompts grow O(T^2)).
    #[serde(default)]
    pub log_prompts: bool,
    /// Per-round request fan-out cap for LLM runs.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_timeout_secs: Option<u64>,
    /// Keep only the most recent K history entries in prompts. Off by
    /// default: the full-history protocol scales prompts as O(T^2) per run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_cap: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(content: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(content).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&content)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.family != "cycle" {
            return Err(Error::Config(format!(
                "unsupported graph family {:?} (only \"cycle\")",
                self.graph.family
            )));
        }
        if self.graph.n < 3 {
            return Err(Error::Config(format!("cycle needs n >= 3, got {}", self.graph.n)));
        }
        if self.palette == 0 {
            return Err(Error::Config("palette must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.history_cap == Some(0) {
            return Err(Error::Config("history_cap must be at least 1".into()));
        }
        self.init_mode()?;
        if !POLICY_IDS.contains(&self.agent.policy.as_str()) {
            return Err(Error::Config(format!(
                "unknown policy id {:?}; expected one of {}",
                self.agent.policy,
                POLICY_IDS.join(", ")
            )));
        }
        if self.is_llm() {
            match (&self.agent.model, &self.agent.script) {
                (None, None) => {
                    return Err(Error::Config(
                        "llm agent needs either agent.model or agent.script".into(),
                    ))
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "agent.model and agent.script are mutually exclusive".into(),
                    ))
                }
                _ => {}
            }
        } else {
            self.policy_spec()?;
            if self.inject.is_some() {
                return Err(Error::Config("note injection requires an llm agent".into()));
            }
        }
        Ok(())
    }

    pub fn is_llm(&self) -> bool {
        self.agent.policy == "llm"
    }

    pub fn policy_spec(&self) -> Result<PolicySpec> {
        PolicySpec::from_id(&self.agent.policy, self.agent.p)
    }

    pub fn build_graph(&self) -> Result<Graph> {
        make_cycle(self.graph.n)
    }

    pub fn init_mode(&self) -> Result<InitMode> {
        match self.init.mode.as_str() {
            "random" => Ok(InitMode::Random),
            "uniform" => {
                let color = self.init.color.ok_or_else(|| {
                    Error::Config("uniform init needs init.color".into())
                })?;
                if color >= self.palette {
                    return Err(Error::Config(format!(
                        "init.color {color} outside palette 0..{}",
                        self.palette
                    )));
                }
                Ok(InitMode::Uniform(color))
            }
            other => Err(Error::Config(format!(
                "unknown init mode {other:?} (expected \"uniform\" or \"random\")"
            ))),
        }
    }

    /// `conf_best` from the override, else the brute-force oracle.
    pub fn resolve_conf_best(&self, g: &Graph) -> Result<usize> {
        match self.conf_best {
            Some(v) => Ok(v),
            None => min_conflicts_bruteforce(g, self.palette),
        }
    }

    pub fn graph_label(&self) -> String {
        format!("C{}", self.graph.n)
    }

    pub fn agent_label(&self) -> String {
        if self.is_llm() {
            self.agent.model.clone().unwrap_or_else(|| "llm".into())
        } else {
            self.agent.policy.clone()
        }
    }
}
