//! Computational graphs: a DAG whose sources carry distributions, whose
//! internal nodes apply Lipschitz-annotated scalar functions, and which has a
//! unique terminal node every other node feeds into.
//!
//! Construction *is* validation: [`CompGraph::new`] either returns a graph
//! whose invariants hold (acyclic, unique reachable terminal, arities
//! consistent) or an error enumerating every violation. Path accounting —
//! how many source-to-terminal paths exist and what the product of Lipschitz
//! constants along them sums or maxes to — is done by dynamic programming
//! over the DAG, since path counts grow exponentially in staged graphs, with
//! an explicit enumerator kept alongside as the cross-check.
//!
//! On top of the path accounting sit the two propagation error bounds for
//! compressed-and-quantized evaluation: the per-source sum
//! [`theorem1_bound`] and the max-based [`crude_bound`].

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::measure::DiscreteMeasure;
use crate::quantize::{quantization_error, quantize_source, QuantileFn, SourceSpec};
use crate::{Error, Result};

/// Default cap on explicitly enumerated paths.
pub const DEFAULT_PATH_CAP: u64 = 1_000_000;

pub type ScalarFn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ScalarFnN = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A node function together with the Lipschitz constant it contributes to
/// path distortions (with respect to the l1 norm on its inputs).
#[derive(Clone)]
pub enum NodeOp {
    /// `x -> a*x + b`.
    Affine { a: f64, b: f64 },
    /// `(x, y) -> x + y`.
    Add,
    /// `(x, y) -> x - y`.
    Sub,
    /// `(x, y) -> min(x, y)`.
    Min,
    /// `(x, y) -> max(x, y)`.
    Max,
    /// `(x, y) -> x + c*y`.
    ScaleAdd { c: f64 },
    /// Fused Euler–Maruyama step `(y, xi) -> y + a(t,y)*dt + b(t,y)*sqrt(dt)*xi`.
    /// Not globally Lipschitz in `xi`, so bound evaluators reject it; the
    /// `sde` module provides its specialized analysis.
    EmStep { drift: ScalarFn2, diffusion: ScalarFn2, t: f64, dt: f64 },
    /// Arbitrary scalar function with a caller-declared Lipschitz constant
    /// (`None` if the caller cannot provide one; such nodes evaluate but are
    /// rejected by the bound evaluators).
    Custom { arity: usize, lip: Option<f64>, f: ScalarFnN },
}

impl std::fmt::Debug for NodeOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Affine { a, b } => write!(f, "affine({a}, {b})"),
            Self::Add => write!(f, "add"),
            Self::Sub => write!(f, "sub"),
            Self::Min => write!(f, "min"),
            Self::Max => write!(f, "max"),
            Self::ScaleAdd { c } => write!(f, "scale_add({c})"),
            Self::EmStep { t, dt, .. } => write!(f, "em_step(t={t}, dt={dt})"),
            Self::Custom { arity, lip, .. } => write!(f, "custom(arity={arity}, lip={lip:?})"),
        }
    }
}

impl NodeOp {
    pub fn arity(&self) -> usize {
        match self {
            Self::Affine { .. } => 1,
            Self::Add | Self::Sub | Self::Min | Self::Max | Self::ScaleAdd { .. } => 2,
            Self::EmStep { .. } => 2,
            Self::Custom { arity, .. } => *arity,
        }
    }

    /// Auto-derived Lipschitz constant under the l1 input norm, when one
    /// exists.
    pub fn lipschitz(&self) -> Option<f64> {
        match self {
            Self::Affine { a, .. } => Some(a.abs()),
            Self::Add | Self::Sub | Self::Min | Self::Max => Some(1.0),
            Self::ScaleAdd { c } => Some(c.abs().max(1.0)),
            Self::EmStep { .. } => None,
            Self::Custom { lip, .. } => *lip,
        }
    }

    /// Applies the function to one input tuple.
    pub fn eval(&self, inputs: &[f64]) -> f64 {
        match self {
            Self::Affine { a, b } => a * inputs[0] + b,
            Self::Add => inputs[0] + inputs[1],
            Self::Sub => inputs[0] - inputs[1],
            Self::Min => inputs[0].min(inputs[1]),
            Self::Max => inputs[0].max(inputs[1]),
            Self::ScaleAdd { c } => inputs[0] + c * inputs[1],
            Self::EmStep { drift, diffusion, t, dt } => {
                let y = inputs[0];
                let xi = inputs[1];
                y + drift(*t, y) * dt + diffusion(*t, y) * dt.sqrt() * xi
            }
            Self::Custom { f, .. } => f(inputs),
        }
    }
}

/// Builder-side description of one node; fed to [`CompGraph::new`].
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeSpecKind,
}

#[derive(Debug, Clone)]
pub enum NodeSpecKind {
    Source(SourceSpec),
    Op { op: NodeOp, inputs: Vec<String>, lip_override: Option<f64> },
}

impl NodeSpec {
    pub fn source(id: impl Into<String>, spec: SourceSpec) -> Self {
        Self { id: id.into(), kind: NodeSpecKind::Source(spec) }
    }

    pub fn op(id: impl Into<String>, op: NodeOp, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind: NodeSpecKind::Op {
                op,
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
                lip_override: None,
            },
        }
    }

    pub fn with_lip(mut self, lip: f64) -> Self {
        if let NodeSpecKind::Op { lip_override, .. } = &mut self.kind {
            *lip_override = Some(lip);
        }
        self
    }
}

#[derive(Debug)]
pub(crate) enum NodeKind {
    Source(SourceSpec),
    Op { op: NodeOp, inputs: Vec<usize>, lip_override: Option<f64> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// A validated computational graph.
#[derive(Debug)]
pub struct CompGraph {
    nodes: Vec<Node>,
    ids: HashMap<String, usize>,
    terminal: usize,
    topo: Vec<usize>,
    /// Out-edges with multiplicity (a node listed twice as input appears
    /// twice here).
    consumers: Vec<Vec<usize>>,
}

impl CompGraph {
    /// Validates and builds. All violated invariants are reported together:
    /// duplicate or unknown ids, arity mismatches, cycles, terminal
    /// misconfiguration, and nodes with no path to the terminal.
    pub fn new(specs: Vec<NodeSpec>, terminal_id: &str) -> Result<Self> {
        let mut violations = Vec::new();

        let mut ids = HashMap::new();
        for (i, s) in specs.iter().enumerate() {
            if ids.insert(s.id.clone(), i).is_some() {
                violations.push(format!("duplicate node id '{}'", s.id));
            }
        }

        let mut nodes = Vec::with_capacity(specs.len());
        for s in &specs {
            let kind = match &s.kind {
                NodeSpecKind::Source(src) => NodeKind::Source(src.clone()),
                NodeSpecKind::Op { op, inputs, lip_override } => {
                    if inputs.is_empty() {
                        violations.push(format!(
                            "node '{}': op node with no inputs (sources must carry a distribution)",
                            s.id
                        ));
                    } else if inputs.len() != op.arity() {
                        violations.push(format!(
                            "node '{}': op {:?} expects {} input(s), got {}",
                            s.id,
                            op,
                            op.arity(),
                            inputs.len()
                        ));
                    }
                    let mut resolved = Vec::with_capacity(inputs.len());
                    for name in inputs {
                        match ids.get(name) {
                            Some(&k) => resolved.push(k),
                            None => violations
                                .push(format!("node '{}': unknown input '{}'", s.id, name)),
                        }
                    }
                    NodeKind::Op { op: op.clone(), inputs: resolved, lip_override: *lip_override }
                }
            };
            nodes.push(Node { id: s.id.clone(), kind });
        }

        let terminal = match ids.get(terminal_id) {
            Some(&t) => t,
            None => {
                violations.push(format!("terminal '{terminal_id}' is not a node"));
                return Err(Error::InvalidGraph(violations));
            }
        };

        if !violations.is_empty() {
            // Structural references are broken; topology checks below would
            // only produce noise.
            return Err(Error::InvalidGraph(violations));
        }

        let n = nodes.len();
        let mut consumers = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for (v, node) in nodes.iter().enumerate() {
            if let NodeKind::Op { inputs, .. } = &node.kind {
                indeg[v] = inputs.len();
                for &u in inputs {
                    consumers[u].push(v);
                }
            }
        }

        // Kahn's algorithm; min-heap ready set for a deterministic
        // topological order.
        let mut topo = Vec::with_capacity(n);
        let mut remaining = indeg.clone();
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
            .filter(|&v| remaining[v] == 0)
            .map(std::cmp::Reverse)
            .collect();
        while let Some(std::cmp::Reverse(v)) = ready.pop() {
            topo.push(v);
            for &w in &consumers[v] {
                remaining[w] -= 1;
                if remaining[w] == 0 {
                    ready.push(std::cmp::Reverse(w));
                }
            }
        }
        if topo.len() != n {
            let cyclic: Vec<&str> = (0..n)
                .filter(|&v| remaining[v] > 0)
                .map(|v| nodes[v].id.as_str())
                .collect();
            violations.push(format!("cycle through nodes: {}", cyclic.join(", ")));
        }

        if !consumers[terminal].is_empty() {
            violations.push(format!("terminal '{}' has outgoing edges", nodes[terminal].id));
        }
        if indeg[terminal] == 0 {
            violations.push(format!("terminal '{}' has no inputs", nodes[terminal].id));
        }
        for (v, node) in nodes.iter().enumerate() {
            if v != terminal && consumers[v].is_empty() {
                violations.push(format!("node '{}' has no path to the terminal", node.id));
            }
        }
        // Reverse reachability from the terminal catches stranded clusters
        // that do have outgoing edges among themselves.
        if topo.len() == n {
            let mut reach = vec![false; n];
            let mut stack = vec![terminal];
            reach[terminal] = true;
            while let Some(v) = stack.pop() {
                if let NodeKind::Op { inputs, .. } = &nodes[v].kind {
                    for &u in inputs {
                        if !reach[u] {
                            reach[u] = true;
                            stack.push(u);
                        }
                    }
                }
            }
            for (v, node) in nodes.iter().enumerate() {
                if !reach[v] && !consumers[v].is_empty() {
                    violations.push(format!("node '{}' has no path to the terminal", node.id));
                }
            }
        }

        if violations.is_empty() {
            Ok(Self { nodes, ids, terminal, topo, consumers })
        } else {
            violations.sort();
            violations.dedup();
            Err(Error::InvalidGraph(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn terminal_id(&self) -> &str {
        &self.nodes[self.terminal].id
    }

    /// Node ids in a deterministic topological order.
    pub fn topo_order(&self) -> Vec<&str> {
        self.topo.iter().map(|&v| self.nodes[v].id.as_str()).collect()
    }

    /// Ids of source nodes, in insertion order.
    pub fn source_ids(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Source(_)))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn source_spec(&self, id: &str) -> Option<&SourceSpec> {
        let &v = self.ids.get(id)?;
        match &self.nodes[v].kind {
            NodeKind::Source(s) => Some(s),
            _ => None,
        }
    }

    // --- crate-internal accessors used by the evaluators -------------------

    pub(crate) fn idx(&self, id: &str) -> Option<usize> {
        self.ids.get(id).copied()
    }

    pub(crate) fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub(crate) fn terminal_idx(&self) -> usize {
        self.terminal
    }

    pub(crate) fn topo_idx(&self) -> &[usize] {
        &self.topo
    }

    pub(crate) fn consumers_of(&self, v: usize) -> &[usize] {
        &self.consumers[v]
    }

    fn source_indices(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&v| matches!(self.nodes[v].kind, NodeKind::Source(_)))
            .collect()
    }

    /// Effective Lipschitz constant of an op node (override beats the
    /// auto-derived one); `None` for sources.
    fn effective_lip(&self, v: usize) -> Result<Option<f64>> {
        match &self.nodes[v].kind {
            NodeKind::Source(_) => Ok(None),
            NodeKind::Op { op, lip_override, .. } => match lip_override.or(op.lipschitz()) {
                Some(l) => Ok(Some(l)),
                None => Err(Error::NodeUnsupported {
                    node: self.nodes[v].id.clone(),
                    reason: format!("op {op:?} has no Lipschitz constant"),
                }),
            },
        }
    }

    /// Per-node path counts toward the terminal (needs no Lipschitz data).
    fn count_dp(&self) -> Vec<u128> {
        let n = self.nodes.len();
        let mut count = vec![0u128; n];
        count[self.terminal] = 1;
        for &v in self.topo.iter().rev() {
            if v == self.terminal {
                continue;
            }
            for &w in &self.consumers[v] {
                count[v] += count[w];
            }
        }
        count
    }

    /// Per-node distortion accounting toward the terminal, by DP in reverse
    /// topological order: sum over paths of the product of Lipschitz
    /// constants, and the maximal product.
    fn path_dp(&self) -> Result<PathDp> {
        let n = self.nodes.len();
        let mut sum = vec![0.0f64; n];
        let mut max = vec![0.0f64; n];
        sum[self.terminal] = 1.0;
        max[self.terminal] = 1.0;
        for &v in self.topo.iter().rev() {
            if v == self.terminal {
                continue;
            }
            for &w in &self.consumers[v] {
                let lip = self.effective_lip(w)?.expect("consumers are op nodes");
                sum[v] += lip * sum[w];
                max[v] = max[v].max(lip * max[w]);
            }
        }
        Ok(PathDp { count: self.count_dp(), sum, max })
    }

    /// Number of directed paths from `source_id` to the terminal (dynamic
    /// programming; no enumeration).
    pub fn count_paths(&self, source_id: &str) -> Result<u128> {
        let v = self
            .idx(source_id)
            .ok_or_else(|| Error::Eval(format!("unknown node '{source_id}'")))?;
        Ok(self.count_dp()[v])
    }

    /// Explicitly enumerates every directed path from `source_id` to the
    /// terminal, each exactly once, as id sequences. Errs when the
    /// DP-computed count exceeds `cap`.
    pub fn enumerate_paths(&self, source_id: &str, cap: u64) -> Result<PathEnumeration<'_>> {
        let v = self
            .idx(source_id)
            .ok_or_else(|| Error::Eval(format!("unknown node '{source_id}'")))?;
        let count = self.count_dp()[v];
        if count > cap as u128 {
            return Err(Error::PathOverflow { source_id: source_id.into(), cap });
        }
        Ok(PathEnumeration { graph: self, count: count as u64, stack: vec![(v, 0)] })
    }

    /// Maximum over sources of the *shortest* directed distance to the
    /// terminal (graph distance is an infimum over path lengths).
    pub fn depth(&self) -> usize {
        let n = self.nodes.len();
        let mut dist = vec![usize::MAX; n];
        dist[self.terminal] = 0;
        for &v in self.topo.iter().rev() {
            for &w in &self.consumers[v] {
                if dist[w] != usize::MAX {
                    dist[v] = dist[v].min(dist[w] + 1);
                }
            }
        }
        self.source_indices().into_iter().map(|s| dist[s]).max().unwrap_or(0)
    }
}

struct PathDp {
    count: Vec<u128>,
    sum: Vec<f64>,
    max: Vec<f64>,
}

/// Lazy depth-first path enumerator (see [`CompGraph::enumerate_paths`]).
pub struct PathEnumeration<'g> {
    graph: &'g CompGraph,
    count: u64,
    stack: Vec<(usize, usize)>,
}

impl PathEnumeration<'_> {
    /// DP-computed number of paths this enumeration will yield.
    pub fn count(&self) -> u64 {
        self.count
    }
}

impl Iterator for PathEnumeration<'_> {
    type Item = Vec<String>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.stack.is_empty() {
            let (v, next_child) = *self.stack.last().unwrap();
            if v == self.graph.terminal && next_child == 0 {
                let path: Vec<String> =
                    self.stack.iter().map(|&(u, _)| self.graph.nodes[u].id.clone()).collect();
                self.stack.pop();
                return Some(path);
            }
            let cons = &self.graph.consumers[v];
            if next_child < cons.len() {
                self.stack.last_mut().unwrap().1 += 1;
                self.stack.push((cons[next_child], 0));
            } else {
                self.stack.pop();
            }
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Error bounds
// ---------------------------------------------------------------------------

/// Which compression constant the bounds use: the statement-level `3/2^n`
/// (loose, the default) or the sharper `3/2^(n+1)` its derivation supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundConstant {
    Loose,
    Tight,
}

impl BoundConstant {
    fn compression_factor(self, n: u32) -> f64 {
        let pow = match self {
            Self::Loose => n,
            Self::Tight => n + 1,
        };
        3.0 / (1u128 << pow.min(127)) as f64
    }
}

/// One source's contribution to [`theorem1_bound`].
#[derive(Debug, Clone)]
pub struct SourceTerm {
    pub id: String,
    /// `W1(mu_s, mu_s^(n))`, evaluated exactly.
    pub quantization_error: f64,
    /// Diameter of the *quantized* source support.
    pub quantized_diameter: f64,
    /// Sum over paths source -> terminal of the product of Lipschitz
    /// constants.
    pub path_sum: f64,
    pub term: f64,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub total: f64,
    pub n: u32,
    pub constant: BoundConstant,
    pub per_source: Vec<SourceTerm>,
}

/// Upper bound on `W1` between the exact output law and the
/// compressed-and-quantized output law at level `n`:
/// `sum_s (quant_error_s + factor * quantized_diam_s) * path_sum_s`.
///
/// Path sums are computed by dynamic programming, never enumeration. Errs on
/// graphs containing nodes without a Lipschitz constant.
pub fn theorem1_bound(g: &CompGraph, n: u32, constant: BoundConstant) -> Result<BoundReport> {
    let dp = g.path_dp()?;
    let factor = constant.compression_factor(n);
    let mut per_source = Vec::new();
    let mut total = 0.0;
    for v in g.source_indices() {
        let spec = match &g.nodes[v].kind {
            NodeKind::Source(s) => s,
            _ => unreachable!(),
        };
        let qe = quantization_error(spec, n)?;
        let (mq, _) = quantize_source(spec, n)?;
        let diam = mq.diameter();
        let term = (qe + factor * diam) * dp.sum[v];
        total += term;
        per_source.push(SourceTerm {
            id: g.nodes[v].id.clone(),
            quantization_error: qe,
            quantized_diameter: diam,
            path_sum: dp.sum[v],
            term,
        });
    }
    Ok(BoundReport { total, n, constant, per_source })
}

/// The cruder, max-aggregated form of the same bound:
/// `#paths * max path distortion * max_s (quant_error_s + factor * diam_s)`.
///
/// Uses the same compression factor as [`theorem1_bound`] so the two are
/// directly comparable; with matched constants the crude value dominates.
pub fn crude_bound(g: &CompGraph, n: u32, constant: BoundConstant) -> Result<f64> {
    let dp = g.path_dp()?;
    let factor = constant.compression_factor(n);
    let mut n_paths = 0u128;
    let mut max_distortion = 0.0f64;
    let mut worst_source = 0.0f64;
    for v in g.source_indices() {
        n_paths += dp.count[v];
        max_distortion = max_distortion.max(dp.max[v]);
        let spec = match &g.nodes[v].kind {
            NodeKind::Source(s) => s,
            _ => unreachable!(),
        };
        let qe = quantization_error(spec, n)?;
        let (mq, _) = quantize_source(spec, n)?;
        worst_source = worst_source.max(qe + factor * mq.diameter());
    }
    Ok(n_paths as f64 * max_distortion * worst_source)
}

// ---------------------------------------------------------------------------
// JSON wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireGraph {
    nodes: Vec<WireNode>,
    terminal: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WireNode {
    Source {
        id: String,
        dist: WireDist,
    },
    Op {
        id: String,
        #[serde(flatten)]
        op: WireOp,
        inputs: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lip: Option<f64>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum WireDist {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete { atoms: Vec<f64>, weights: Vec<f64> },
    Quantile { table: Vec<(f64, f64)> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum WireOp {
    Affine { a: f64, b: f64 },
    Add,
    Sub,
    Min,
    Max,
    ScaleAdd { c: f64 },
}

impl CompGraph {
    /// Parses the JSON graph format:
    ///
    /// ```json
    /// {"nodes": [
    ///    {"id": "s1", "kind": "source", "dist": {"type": "gaussian", "mean": 0.0, "std": 1.0}},
    ///    {"id": "s2", "kind": "source", "dist": {"type": "uniform", "lo": 0.0, "hi": 1.0}},
    ///    {"id": "v1", "kind": "op", "op": "add", "inputs": ["s1", "s2"]}],
    ///  "terminal": "v1"}
    /// ```
    ///
    /// An optional per-op `"lip"` overrides the auto-derived constant.
    pub fn from_json(text: &str) -> Result<Self> {
        let wire: WireGraph =
            serde_json::from_str(text).map_err(|e| Error::GraphJson(e.to_string()))?;
        let mut specs = Vec::with_capacity(wire.nodes.len());
        for node in wire.nodes {
            match node {
                WireNode::Source { id, dist } => {
                    let src = match dist {
                        WireDist::Gaussian { mean, std } => SourceSpec::gaussian(mean, std),
                        WireDist::Uniform { lo, hi } => SourceSpec::uniform(lo, hi),
                        WireDist::Discrete { atoms, weights } => {
                            DiscreteMeasure::from_parts(atoms, weights).map(SourceSpec::discrete)
                        }
                        WireDist::Quantile { table } => SourceSpec::quantile_table(table),
                    }
                    .map_err(|e| Error::GraphJson(format!("node '{id}', field 'dist': {e}")))?;
                    specs.push(NodeSpec::source(id, src));
                }
                WireNode::Op { id, op, inputs, lip } => {
                    let op = match op {
                        WireOp::Affine { a, b } => NodeOp::Affine { a, b },
                        WireOp::Add => NodeOp::Add,
                        WireOp::Sub => NodeOp::Sub,
                        WireOp::Min => NodeOp::Min,
                        WireOp::Max => NodeOp::Max,
                        WireOp::ScaleAdd { c } => NodeOp::ScaleAdd { c },
                    };
                    specs.push(NodeSpec {
                        id,
                        kind: NodeSpecKind::Op { op, inputs, lip_override: lip },
                    });
                }
            }
        }
        Self::new(specs, &wire.terminal)
    }

    /// Serializes back to the JSON wire format. Errs on graphs holding
    /// non-serializable ops (fused steps, custom closures) or callable
    /// quantile sources.
    pub fn to_json(&self) -> Result<String> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let wire = match &node.kind {
                NodeKind::Source(s) => WireNode::Source {
                    id: node.id.clone(),
                    dist: match s {
                        SourceSpec::Gaussian { mean, std } => {
                            WireDist::Gaussian { mean: *mean, std: *std }
                        }
                        SourceSpec::Uniform { lo, hi } => WireDist::Uniform { lo: *lo, hi: *hi },
                        SourceSpec::Discrete(m) => WireDist::Discrete {
                            atoms: m.atoms().to_vec(),
                            weights: m.weights().to_vec(),
                        },
                        SourceSpec::Quantile(QuantileFn::Table(t)) => {
                            WireDist::Quantile { table: t.as_ref().clone() }
                        }
                        SourceSpec::Quantile(QuantileFn::Func(_)) => {
                            return Err(Error::NodeUnsupported {
                                node: node.id.clone(),
                                reason: "callable quantile sources are not serializable".into(),
                            })
                        }
                    },
                },
                NodeKind::Op { op, inputs, lip_override } => {
                    let wire_op = match op {
                        NodeOp::Affine { a, b } => WireOp::Affine { a: *a, b: *b },
                        NodeOp::Add => WireOp::Add,
                        NodeOp::Sub => WireOp::Sub,
                        NodeOp::Min => WireOp::Min,
                        NodeOp::Max => WireOp::Max,
                        NodeOp::ScaleAdd { c } => WireOp::ScaleAdd { c: *c },
                        other => {
                            return Err(Error::NodeUnsupported {
                                node: node.id.clone(),
                                reason: format!("op {other:?} is not serializable"),
                            })
                        }
                    };
                    WireNode::Op {
                        id: node.id.clone(),
                        op: wire_op,
                        inputs: inputs.iter().map(|&u| self.nodes[u].id.clone()).collect(),
                        lip: *lip_override,
                    }
                }
            };
            nodes.push(wire);
        }
        let wire = WireGraph { nodes, terminal: self.terminal_id().to_string() };
        serde_json::to_string_pretty(&wire).map_err(|e| Error::GraphJson(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn ladder(m: u32) -> SourceSpec {
        let atoms: Vec<f64> = (1..=(1u32 << m)).map(f64::from).collect();
        SourceSpec::discrete(DiscreteMeasure::uniform_on(&atoms).unwrap())
    }

    fn chain(k: usize) -> CompGraph {
        let mut specs = vec![NodeSpec::source("s", ladder(3))];
        let mut prev = "s".to_string();
        for i in 0..k {
            let id = format!("v{i}");
            specs.push(NodeSpec::op(&id, NodeOp::Affine { a: 1.0, b: 0.0 }, &[&prev]));
            prev = id;
        }
        let term = format!("v{}", k - 1);
        CompGraph::new(specs, &term).unwrap()
    }

    fn diamond() -> CompGraph {
        CompGraph::new(
            vec![
                NodeSpec::source("s", ladder(2)),
                NodeSpec::op("a", NodeOp::Affine { a: 2.0, b: 0.0 }, &["s"]),
                NodeSpec::op("b", NodeOp::Affine { a: 0.5, b: 1.0 }, &["s"]),
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap()
    }

    #[test]
    fn validate_accepts_simple_chain() {
        let g = chain(1);
        assert_eq!(g.topo_order(), vec!["s", "v0"]);
        assert_eq!(g.terminal_id(), "v0");
    }

    #[test]
    fn validate_rejects_cycle() {
        let err = CompGraph::new(
            vec![
                NodeSpec::source("s", ladder(1)),
                NodeSpec::op("a", NodeOp::Add, &["s", "b"]),
                NodeSpec::op("b", NodeOp::Affine { a: 1.0, b: 0.0 }, &["a"]),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["b"]),
            ],
            "t",
        )
        .unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn validate_enumerates_all_violations() {
        let err = CompGraph::new(
            vec![
                NodeSpec::source("s", ladder(1)),
                NodeSpec::op("a", NodeOp::Add, &["s"]),       // arity mismatch
                NodeSpec::op("b", NodeOp::Add, &["s", "zz"]), // unknown input
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expects 2 input(s)"), "{msg}");
        assert!(msg.contains("unknown input 'zz'"), "{msg}");
    }

    #[test]
    fn validate_rejects_orphans_and_bad_terminal() {
        let err = CompGraph::new(
            vec![
                NodeSpec::source("s", ladder(1)),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["s"]),
                NodeSpec::source("lonely", ladder(1)),
            ],
            "t",
        )
        .unwrap_err();
        assert!(err.to_string().contains("'lonely' has no path"), "{err}");

        let err = CompGraph::new(vec![NodeSpec::source("s", ladder(1))], "s").unwrap_err();
        assert!(err.to_string().contains("no inputs"), "{err}");
    }

    #[test]
    fn path_counts() {
        assert_eq!(chain(5).count_paths("s").unwrap(), 1);
        assert_eq!(diamond().count_paths("s").unwrap(), 2);
    }

    #[test]
    fn path_enumeration_matches_dp() {
        let g = diamond();
        let iter = g.enumerate_paths("s", 100).unwrap();
        assert_eq!(iter.count(), 2);
        let paths: Vec<_> = g.enumerate_paths("s", 100).unwrap().collect();
        assert_eq!(paths.len(), 2);
        assert!(paths.contains(&vec!["s".into(), "a".into(), "t".into()]));
        assert!(paths.contains(&vec!["s".into(), "b".into(), "t".into()]));
    }

    #[test]
    fn path_cap_overflow() {
        let g = diamond();
        assert!(matches!(g.enumerate_paths("s", 1), Err(Error::PathOverflow { .. })));
    }

    #[test]
    fn depth_examples() {
        assert_eq!(chain(4).depth(), 4);
        assert_eq!(diamond().depth(), 2);
    }

    #[test]
    fn dp_matches_hand_path_sums() {
        let g = diamond();
        let dp = g.path_dp().unwrap();
        let s = g.idx("s").unwrap();
        // paths: s->a->t (2.0 * 1.0) and s->b->t (0.5 * 1.0)
        assert_close(dp.sum[s], 2.5, 1e-12);
        assert_close(dp.max[s], 2.0, 1e-12);
    }

    #[test]
    fn theorem1_hand_value() {
        // Dyadic ladder of 8 atoms through one identity op at n = 1:
        // quantization error 1, quantized diameter 4, one path, Lip 1,
        // loose factor 3/2 gives 1 + (3/2)*4 = 7.
        let g = chain(1);
        let report = theorem1_bound(&g, 1, BoundConstant::Loose).unwrap();
        assert_close(report.total, 7.0, 1e-12);
        assert_eq!(report.per_source.len(), 1);
        assert_close(report.per_source[0].quantization_error, 1.0, 1e-12);
        assert_close(report.per_source[0].quantized_diameter, 4.0, 1e-12);
        let tight = theorem1_bound(&g, 1, BoundConstant::Tight).unwrap();
        assert_close(tight.total, 1.0 + 0.75 * 4.0, 1e-12);
    }

    #[test]
    fn constant_functions_give_zero_bound() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("s", ladder(2)),
                NodeSpec::op("t", NodeOp::Affine { a: 0.0, b: 3.0 }, &["s"]),
            ],
            "t",
        )
        .unwrap();
        let report = theorem1_bound(&g, 2, BoundConstant::Loose).unwrap();
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn crude_equals_theorem1_on_single_chain() {
        let g = chain(3);
        for n in 0..4 {
            let t1 = theorem1_bound(&g, n, BoundConstant::Loose).unwrap().total;
            let cr = crude_bound(&g, n, BoundConstant::Loose).unwrap();
            assert_close(cr, t1, 1e-12);
        }
    }

    #[test]
    fn crude_dominates_theorem1_with_matched_constants() {
        let g = diamond();
        for n in 0..5 {
            let t1 = theorem1_bound(&g, n, BoundConstant::Loose).unwrap().total;
            let cr = crude_bound(&g, n, BoundConstant::Loose).unwrap();
            assert!(cr >= t1 - 1e-12, "n={n}: crude {cr} < theorem1 {t1}");
        }
    }

    #[test]
    fn lip_override_feeds_bounds() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("s", ladder(1)),
                NodeSpec::op("t", NodeOp::Add, &["s", "s"]).with_lip(5.0),
            ],
            "t",
        )
        .unwrap();
        let dp = g.path_dp().unwrap();
        let s = g.idx("s").unwrap();
        assert_close(dp.sum[s], 10.0, 1e-12); // two parallel edges, Lip 5 each
        assert_eq!(g.count_paths("s").unwrap(), 2);
    }

    #[test]
    fn em_step_rejected_by_bounds() {
        let drift: ScalarFn2 = Arc::new(|_, _| 0.0);
        let diff: ScalarFn2 = Arc::new(|_, _| 1.0);
        let g = CompGraph::new(
            vec![
                NodeSpec::source("y", SourceSpec::discrete(DiscreteMeasure::dirac(0.0))),
                NodeSpec::source("xi", SourceSpec::gaussian(0.0, 1.0).unwrap()),
                NodeSpec::op(
                    "t",
                    NodeOp::EmStep { drift, diffusion: diff, t: 0.0, dt: 0.5 },
                    &["y", "xi"],
                ),
            ],
            "t",
        )
        .unwrap();
        assert!(matches!(
            theorem1_bound(&g, 2, BoundConstant::Loose),
            Err(Error::NodeUnsupported { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"nodes":[
            {"id":"s1","kind":"source","dist":{"type":"gaussian","mean":0.0,"std":1.0}},
            {"id":"s2","kind":"source","dist":{"type":"uniform","lo":0.0,"hi":1.0}},
            {"id":"v1","kind":"op","op":"scale_add","c":0.5,"inputs":["s1","s2"],"lip":2.0}],
            "terminal":"v1"}"#;
        let g = CompGraph::from_json(text).unwrap();
        assert_eq!(g.terminal_id(), "v1");
        let back = CompGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back.topo_order(), g.topo_order());
    }

    #[test]
    fn json_errors_name_the_problem() {
        let bad = r#"{"nodes":[{"id":"s1","kind":"source",
            "dist":{"type":"gaussian","mean":0.0,"std":-1.0}}],"terminal":"s1"}"#;
        let err = CompGraph::from_json(bad).unwrap_err();
        assert!(err.to_string().contains("s1"), "{err}");
        assert!(err.to_string().contains("dist"), "{err}");
    }
}
