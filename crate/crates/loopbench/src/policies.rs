//! Classical per-node decision policies.
//!
//! All policies are pure given `(view, stream)`, so a round's node
//! evaluations can run in any order or in parallel without changing the
//! outcome.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Coloring, Graph};
use crate::rng::RandomStream;

/// Everything one node may see when a classical policy decides: its own
/// color, its neighbors' colors, and the palette.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalView {
    pub own_color: usize,
    pub neighbor_colors: BTreeMap<usize, usize>,
    pub palette_size: usize,
    pub in_conflict: bool,
}

impl LocalView {
    pub fn new(own_color: usize, neighbor_colors: BTreeMap<usize, usize>, palette_size: usize) -> Self {
        let in_conflict = neighbor_colors.values().any(|&c| c == own_color);
        Self {
            own_color,
            neighbor_colors,
            palette_size,
            in_conflict,
        }
    }

    /// View of `node` under `coloring` on `g`.
    pub fn from_coloring(g: &Graph, coloring: &Coloring, node: usize) -> Self {
        let neighbor_colors = g
            .neighbors(node)
            .iter()
            .map(|&w| (w, coloring.color_of(w)))
            .collect();
        Self::new(coloring.color_of(node), neighbor_colors, coloring.palette_size())
    }

    /// Colors minimizing occurrences among the neighbors, ascending.
    /// The node's own color participates like any other, so a conflict-free
    /// node's best response always includes holding.
    pub fn best_response_set(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.palette_size];
        for &c in self.neighbor_colors.values() {
            counts[c] += 1;
        }
        let min = *counts.iter().min().expect("palette is non-empty");
        (0..self.palette_size).filter(|&c| counts[c] == min).collect()
    }
}

/// Soft Colorer FP: with probability `p`, move to a uniformly chosen best
/// response; otherwise hold. `p = 0` is the identity.
pub fn decide_soft_fp(view: &LocalView, p: f64, rng: &mut RandomStream) -> usize {
    if rng.next_f64() < p {
        *rng.choose(&view.best_response_set())
    } else {
        view.own_color
    }
}

/// Soft Colorer CFP: conflict-free nodes never move; conflicted nodes behave
/// exactly like FP.
pub fn decide_soft_cfp(view: &LocalView, p: f64, rng: &mut RandomStream) -> usize {
    if !view.in_conflict {
        view.own_color
    } else {
        decide_soft_fp(view, p, rng)
    }
}

/// Conservative Random: hold when conflict-free, otherwise resample uniformly
/// over the whole palette (possibly re-picking the current color).
pub fn decide_conservative_random(view: &LocalView, rng: &mut RandomStream) -> usize {
    if !view.in_conflict {
        view.own_color
    } else {
        rng.pick(view.palette_size)
    }
}

/// Random: uniform resample every round, ignoring the view.
pub fn decide_random(view: &LocalView, rng: &mut RandomStream) -> usize {
    rng.pick(view.palette_size)
}

/// Deterministic greedy: lowest-indexed best response. Provably deadlocks on
/// uniform-initialized odd cycles; kept to witness the failure.
pub fn decide_greedy_deterministic(view: &LocalView) -> usize {
    view.best_response_set()[0]
}

/// Default update probability for the soft colorers.
pub const DEFAULT_SOFT_P: f64 = 0.3;

/// A classical policy plus its parameters, selected by string id in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicySpec {
    SoftFp { p: f64 },
    SoftCfp { p: f64 },
    ConservativeRandom,
    Random,
    GreedyDet,
}

impl PolicySpec {
    /// Resolves a config policy id. `p` applies to the soft colorers and
    /// defaults to 0.3.
    pub fn from_id(id: &str, p: Option<f64>) -> Result<Self> {
        if let Some(p) = p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("p must be in [0, 1], got {p}")));
            }
        }
        let p = p.unwrap_or(DEFAULT_SOFT_P);
        match id {
            "soft_fp" => Ok(Self::SoftFp { p }),
            "soft_cfp" => Ok(Self::SoftCfp { p }),
            "conservative_random" => Ok(Self::ConservativeRandom),
            "random" => Ok(Self::Random),
            "greedy_det" => Ok(Self::GreedyDet),
            other => Err(Error::Config(format!("unknown policy id: {other}"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::SoftFp { .. } => "soft_fp",
            Self::SoftCfp { .. } => "soft_cfp",
            Self::ConservativeRandom => "conservative_random",
            Self::Random => "random",
            Self::GreedyDet => "greedy_det",
        }
    }

    pub fn decide(&self, view: &LocalView, rng: &mut RandomStream) -> usize {
        match *self {
            Self::SoftFp { p } => decide_soft_fp(view, p, rng),
            Self::SoftCfp { p } => decide_soft_cfp(view, p, rng),
            Self::ConservativeRandom => decide_conservative_random(view, rng),
            Self::Random => decide_random(view, rng),
            Self::GreedyDet => decide_greedy_deterministic(view),
        }
    }
}
