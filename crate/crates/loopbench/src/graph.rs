//! Graph representation, coloring state, conflict accounting, instance
//! generators, and a brute-force minimum-conflict oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Enumeration guard for the brute-force oracles: at most 10^7 colorings.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

/// An undirected graph over contiguous node ids `0..n`.
///
/// Immutable after construction; safe to share read-only across concurrent
/// agent evaluations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    /// Normalized `(u, v)` with `u < v`, sorted lexicographically.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list, normalizing and validating it.
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidInstance("graph needs at least one node".into()));
        }
        let mut normalized: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidInstance(format!("self-loop at node {a}")));
            }
            if a >= node_count || b >= node_count {
                return Err(Error::InvalidInstance(format!(
                    "edge ({a}, {b}) references a node outside 0..{node_count}"
                )));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        let before = normalized.len();
        normalized.dedup();
        if normalized.len() != before {
            return Err(Error::InvalidInstance("duplicate edge".into()));
        }
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v) in &normalized {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        Ok(Self {
            node_count,
            edges: normalized,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as normalized `(u, v)` pairs with `u < v`, lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbor ids of `v`, ascending.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }
}

/// Wire form used inside traces: `{"n": int, "edges": [[u,v],...]}` with
/// `u < v` and edges sorted lexicographically.
#[derive(Serialize, Deserialize)]
struct GraphWire {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Serialize for Graph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        GraphWire {
            n: self.node_count,
            edges: self.edges.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = GraphWire::deserialize(deserializer)?;
        Graph::new(wire.n, wire.edges).map_err(serde::de::Error::custom)
    }
}

/// Assignment of one of `c` palette colors to every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring {
    assignment: Vec<usize>,
    palette_size: usize,
}

impl Coloring {
    pub fn new(assignment: Vec<usize>, palette_size: usize) -> Result<Self> {
        if palette_size == 0 {
            return Err(Error::InvalidArgument("palette size must be at least 1".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= palette_size) {
            return Err(Error::InvalidArgument(format!(
                "color {bad} outside palette 0..{palette_size}"
            )));
        }
        Ok(Self {
            assignment,
            palette_size,
        })
    }

    pub fn colors(&self) -> &[usize] {
        &self.assignment
    }

    pub fn color_of(&self, v: usize) -> usize {
        self.assignment[v]
    }

    pub fn palette_size(&self) -> usize {
        self.palette_size
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Conflict accounting for one (graph, coloring) pair.
///
/// `total` counts conflicted edges; `per_node[v]` counts conflicted edges
/// incident to `v`, so `sum(per_node) == 2 * total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub total: usize,
    pub per_node: Vec<usize>,
}

/// How an initial coloring is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Every node gets color `k`.
    Uniform(usize),
    /// Each node's color drawn independently and uniformly from the palette.
    Random,
}

/// Cycle graph `C_n`: edges `{i, (i+1) mod n}`.
pub fn make_cycle(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::InvalidInstance(format!("cycle needs n >= 3, got {n}")));
    }
    Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
}

/// Counts conflicted edges and the per-node incidence counts.
pub fn conflict_report(g: &Graph, col: &Coloring) -> Result<ConflictReport> {
    if col.len() != g.node_count() {
        return Err(Error::Dimension(format!(
            "coloring has {} entries, graph has {} nodes",
            col.len(),
            g.node_count()
        )));
    }
    let mut total = 0;
    let mut per_node = vec![0usize; g.node_count()];
    for &(u, v) in g.edges() {
        if col.color_of(u) == col.color_of(v) {
            total += 1;
            per_node[u] += 1;
            per_node[v] += 1;
        }
    }
    Ok(ConflictReport { total, per_node })
}

/// Conflicted edges for a raw assignment slice (no palette validation).
pub(crate) fn count_conflicts(g: &Graph, assignment: &[usize]) -> usize {
    g.edges()
        .iter()
        .filter(|&&(u, v)| assignment[u] == assignment[v])
        .count()
}

fn check_enumeration_guard(n: usize, c: usize) -> Result<u64> {
    let mut states: u64 = 1;
    for _ in 0..n {
        states = states.checked_mul(c as u64).unwrap_or(u64::MAX);
        if states > ENUMERATION_GUARD {
            return Err(Error::Capacity(format!(
                "{c}^{n} colorings exceed the {ENUMERATION_GUARD} state guard; \
                 supply conf_best explicitly"
            )));
        }
    }
    Ok(states)
}

/// Exact minimum of total conflicts over all `c^n` colorings (`conf_best`).
///
/// Plain base-`c` counter enumeration with early exit on a zero-conflict
/// coloring; performance is irrelevant at desk scale.
pub fn min_conflicts_bruteforce(g: &Graph, c: usize) -> Result<usize> {
    if c == 0 {
        return Err(Error::InvalidArgument("palette size must be at least 1".into()));
    }
    let n = g.node_count();
    check_enumeration_guard(n, c)?;

    let mut assignment = vec![0usize; n];
    let mut best = count_conflicts(g, &assignment);
    'outer: while best > 0 {
        // Advance the base-c odometer.
        let mut i = 0;
        loop {
            if i == n {
                break 'outer;
            }
            assignment[i] += 1;
            if assignment[i] < c {
                break;
            }
            assignment[i] = 0;
            i += 1;
        }
        best = best.min(count_conflicts(g, &assignment));
    }
    Ok(best)
}

/// Smallest `c` admitting a zero-conflict coloring.
///
/// A palette smaller than this makes the instance over-constrained.
pub fn chromatic_number_bruteforce(g: &Graph) -> Result<usize> {
    for c in 1..=g.node_count() {
        if min_conflicts_bruteforce(g, c)? == 0 {
            return Ok(c);
        }
    }
    // A graph on n nodes is always n-colorable, so this is unreachable.
    unreachable!("n-coloring of an n-node graph is always proper")
}

/// Draws an initial coloring. Pure function of `(g, c, mode, seed)`.
pub fn init_coloring(g: &Graph, c: usize, mode: InitMode, seed: u64) -> Result<Coloring> {
    match mode {
        InitMode::Uniform(k) => {
            if k >= c {
                return Err(Error::InvalidArgument(format!(
                    "uniform color {k} outside palette 0..{c}"
                )));
            }
            Coloring::new(vec![k; g.node_count()], c)
        }
        InitMode::Random => {
            let mut stream = RandomStream::from_seed(seed);
            let assignment = (0..g.node_count()).map(|_| stream.pick(c)).collect();
            Coloring::new(assignment, c)
        }
    }
}
