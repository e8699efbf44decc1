//! Evaluation semantics for computational graphs.
//!
//! Three evaluators share the graph model:
//!
//! * [`eval_exact_joint`] enumerates the full product space of source atoms
//!   and pushes every tuple through the graph. Dependence between
//!   intermediate nodes is exact by construction, which makes this the
//!   ground-truth oracle (within its atom cap).
//! * [`eval_cq`] propagates quantized sources stage by stage, keeping the
//!   joint law over the current *frontier* (computed-but-unconsumed nodes)
//!   as weighted tuples. When the frontier collapses to a single node, that
//!   node's law is a genuine marginal, so the support cap can be enforced by
//!   compression without breaking dependence; staged graphs such as
//!   Euler–Maruyama chains hit this at every stage.
//! * [`eval_mc`] is the seeded Monte Carlo baseline; sampling is
//!   counter-based (ChaCha8, one stream per fixed-size block), so results
//!   are bit-reproducible regardless of thread schedule.
//!
//! [`build_bubble_sort_graph`] constructs the min/max sorting network whose
//! terminal is a chosen order statistic.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::graph::{CompGraph, NodeKind, NodeOp, NodeSpec, NodeSpecKind};
use crate::measure::{empirical_from_samples, DiscreteMeasure};
use crate::quantize::{compress, quantize_source, QuantileFn, SourceSpec};
use crate::{Error, Result};

/// Default cap on joint atom tuples.
pub const DEFAULT_ATOM_CAP: u64 = 1 << 24;

/// Tuples per work block; fixed so that parallel and serial runs sum weights
/// in the same order.
const BLOCK: u64 = 1 << 16;

/// Paths per Monte Carlo block; each block draws from its own RNG stream.
const MC_BLOCK: u64 = 8192;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Upper bound on simultaneously tracked joint atoms.
    pub joint_atom_cap: u64,
    /// Node ids whose marginal law should be returned alongside the
    /// terminal.
    pub marginals: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { joint_atom_cap: DEFAULT_ATOM_CAP, marginals: Vec::new() }
    }
}

/// Support bookkeeping for one node.
#[derive(Debug, Clone)]
pub struct NodeStats {
    pub id: String,
    /// Distinct values observed before any compression.
    pub support_before: usize,
    /// Support size after compression (equal to `support_before` where no
    /// compression applies).
    pub support_after: usize,
}

/// Output of an evaluation.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub terminal: DiscreteMeasure,
    /// Raw terminal samples (Monte Carlo mode only).
    pub samples: Option<Vec<f64>>,
    pub node_stats: Vec<NodeStats>,
    pub marginals: HashMap<String, DiscreteMeasure>,
    pub wall: Duration,
}

/// Canonical float: collapses `-0.0` into `+0.0` so bit-keyed merging
/// treats them as one atom.
#[inline]
fn canon(x: f64) -> f64 {
    x + 0.0
}

/// Resolves the measure each source contributes: discrete sources pass
/// through (or are quantized when a level is given); continuous sources
/// require a level.
fn source_measures(
    g: &CompGraph,
    quantize_at: Option<u32>,
) -> Result<Vec<(usize, DiscreteMeasure)>> {
    let mut out = Vec::new();
    for v in g.topo_idx() {
        let node = g.node(*v);
        if let NodeKind::Source(spec) = &node.kind {
            let m = match (spec, quantize_at) {
                (SourceSpec::Discrete(m), None) => m.clone(),
                (_, Some(n)) => quantize_source(spec, n)?.0,
                (_, None) => {
                    return Err(Error::Eval(format!(
                        "source '{}' is continuous; pass a quantization level",
                        node.id
                    )))
                }
            };
            out.push((*v, m));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exact joint enumeration
// ---------------------------------------------------------------------------

struct BlockOut {
    terminal: HashMap<u64, f64>,
    marginals: Vec<HashMap<u64, f64>>,
    supports: Vec<HashSet<u64>>,
}

/// Enumerates the product measure over all source atoms and evaluates every
/// node per tuple, returning the exact law of the terminal (and any
/// requested marginal).
///
/// Sources must be discrete, or `quantize_sources_at` must provide the level
/// at which continuous sources are quantized first. When a level is given,
/// discrete sources are quantized too (this is the quantized-but-never-
/// compressed evaluation).
pub fn eval_exact_joint(
    g: &CompGraph,
    quantize_sources_at: Option<u32>,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let start = Instant::now();
    let sources = source_measures(g, quantize_sources_at)?;

    let mut total: u128 = 1;
    for (_, m) in &sources {
        total = total.saturating_mul(m.len() as u128);
    }
    if total > opts.joint_atom_cap as u128 {
        return Err(Error::AtomCapExceeded {
            node: g.terminal_id().to_string(),
            atoms: total,
            cap: opts.joint_atom_cap,
        });
    }
    let total = total as u64;

    let marg_idx: Vec<usize> = opts
        .marginals
        .iter()
        .map(|id| g.idx(id).ok_or_else(|| Error::Eval(format!("unknown node '{id}'"))))
        .collect::<Result<_>>()?;

    let n_nodes = g.len();
    let topo: Vec<usize> = g.topo_idx().to_vec();
    let n_blocks = total.div_ceil(BLOCK);

    let run_block = |b: u64| -> BlockOut {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(total);
        let mut out = BlockOut {
            terminal: HashMap::new(),
            marginals: vec![HashMap::new(); marg_idx.len()],
            supports: vec![HashSet::new(); n_nodes],
        };
        let mut values = vec![0.0f64; n_nodes];
        for t in lo..hi {
            // Mixed-radix decode: the last-listed source varies fastest.
            let mut rem = t;
            let mut weight = 1.0f64;
            for (v, m) in sources.iter().rev() {
                let k = (rem % m.len() as u64) as usize;
                rem /= m.len() as u64;
                values[*v] = m.atoms()[k];
                weight *= m.weights()[k];
            }
            for &v in &topo {
                if let NodeKind::Op { op, inputs, .. } = &g.node(v).kind {
                    let args: Vec<f64> = inputs.iter().map(|&u| values[u]).collect();
                    values[v] = canon(op.eval(&args));
                }
                out.supports[v].insert(values[v].to_bits());
            }
            *out.terminal.entry(values[g.terminal_idx()].to_bits()).or_insert(0.0) += weight;
            for (slot, &v) in out.marginals.iter_mut().zip(&marg_idx) {
                *slot.entry(values[v].to_bits()).or_insert(0.0) += weight;
            }
        }
        out
    };

    // Fixed block partition + in-order fold: identical grouping of weight
    // additions no matter how many threads run the blocks.
    let blocks: Vec<BlockOut> = (0..n_blocks).into_par_iter().map(run_block).collect();
    let mut terminal: HashMap<u64, f64> = HashMap::new();
    let mut marginals: Vec<HashMap<u64, f64>> = vec![HashMap::new(); marg_idx.len()];
    let mut supports: Vec<HashSet<u64>> = vec![HashSet::new(); n_nodes];
    for b in blocks {
        for (bits, w) in b.terminal {
            *terminal.entry(bits).or_insert(0.0) += w;
        }
        for (acc, part) in marginals.iter_mut().zip(b.marginals) {
            for (bits, w) in part {
                *acc.entry(bits).or_insert(0.0) += w;
            }
        }
        for (acc, part) in supports.iter_mut().zip(b.supports) {
            acc.extend(part);
        }
    }

    let to_measure = |map: HashMap<u64, f64>| -> Result<DiscreteMeasure> {
        DiscreteMeasure::from_pairs(
            map.into_iter().map(|(bits, w)| (f64::from_bits(bits), w)).collect(),
        )
    };

    let node_stats = topo
        .iter()
        .map(|&v| NodeStats {
            id: g.node(v).id.clone(),
            support_before: supports[v].len(),
            support_after: supports[v].len(),
        })
        .collect();

    let mut marg_out = HashMap::new();
    for (map, id) in marginals.into_iter().zip(&opts.marginals) {
        marg_out.insert(id.clone(), to_measure(map)?);
    }

    Ok(EvalResult {
        terminal: to_measure(terminal)?,
        samples: None,
        node_stats,
        marginals: marg_out,
        wall: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Compressed-and-quantized propagation
// ---------------------------------------------------------------------------

/// Joint law over the frontier nodes, as weighted value tuples (row-major).
struct Frontier {
    cols: Vec<usize>,
    tuples: Vec<f64>,
    weights: Vec<f64>,
}

impl Frontier {
    fn rows(&self) -> usize {
        self.weights.len()
    }

    fn col_pos(&self, v: usize) -> Option<usize> {
        self.cols.iter().position(|&c| c == v)
    }

    /// Kronecker-expands with an independent source's atoms.
    fn expand(&mut self, v: usize, m: &DiscreteMeasure) {
        let ncols = self.cols.len();
        let nrows = self.rows();
        let mut tuples = Vec::with_capacity((ncols + 1) * nrows * m.len());
        let mut weights = Vec::with_capacity(nrows * m.len());
        for r in 0..nrows {
            let row = &self.tuples[r * ncols..(r + 1) * ncols];
            let w = self.weights[r];
            for (x, wx) in m.atoms().iter().zip(m.weights()) {
                tuples.extend_from_slice(row);
                tuples.push(*x);
                weights.push(w * wx);
            }
        }
        self.cols.push(v);
        self.tuples = tuples;
        self.weights = weights;
    }

    /// Removes columns, then merges bit-identical rows (weights summed in
    /// sorted row order, so the result is schedule-independent).
    fn drop_cols(&mut self, dead: &[usize]) {
        if dead.is_empty() {
            return;
        }
        let keep: Vec<usize> =
            (0..self.cols.len()).filter(|&i| !dead.contains(&self.cols[i])).collect();
        let ncols = self.cols.len();
        let nrows = self.rows();
        let mut tuples = Vec::with_capacity(keep.len() * nrows);
        for r in 0..nrows {
            let row = &self.tuples[r * ncols..(r + 1) * ncols];
            for &i in &keep {
                tuples.push(row[i]);
            }
        }
        self.cols = keep.iter().map(|&i| self.cols[i]).collect();
        self.tuples = tuples;
        self.merge_rows();
    }

    fn merge_rows(&mut self) {
        let ncols = self.cols.len();
        let nrows = self.rows();
        if ncols == 0 || nrows == 0 {
            return;
        }
        let tuples = std::mem::take(&mut self.tuples);
        let row = |r: usize| &tuples[r * ncols..(r + 1) * ncols];
        let mut order: Vec<usize> = (0..nrows).collect();
        order.sort_unstable_by(|&a, &b| {
            row(a)
                .iter()
                .zip(row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut merged: Vec<f64> = Vec::with_capacity(tuples.len());
        let mut weights: Vec<f64> = Vec::with_capacity(nrows);
        for &r in &order {
            let same = !weights.is_empty() && {
                let last = &merged[merged.len() - ncols..];
                last.iter().zip(row(r)).all(|(x, y)| x.to_bits() == y.to_bits())
            };
            if same {
                *weights.last_mut().unwrap() += self.weights[r];
            } else {
                merged.extend_from_slice(row(r));
                weights.push(self.weights[r]);
            }
        }
        self.tuples = merged;
        self.weights = weights;
    }
}

/// Compressed-and-quantized evaluation at level `n`: sources are quantized
/// to at most `2^n` atoms, node laws are propagated over the frontier joint,
/// and whenever a node is a cut vertex (the whole frontier), its marginal is
/// compressed back to at most `2^n` atoms.
///
/// Graphs whose frontier joint exceeds the atom cap before reaching a cut
/// vertex are rejected with the offending node named.
pub fn eval_cq(g: &CompGraph, n: u32, opts: &EvalOptions) -> Result<EvalResult> {
    let start = Instant::now();
    let mut remaining: Vec<usize> = (0..g.len()).map(|v| g.consumers_of(v).len()).collect();
    let mut fr = Frontier { cols: Vec::new(), tuples: Vec::new(), weights: vec![1.0] };
    let mut node_stats = Vec::new();
    let mut marginals = HashMap::new();
    let terminal = g.terminal_idx();

    let want_marginal = |id: &str| -> bool { opts.marginals.iter().any(|m| m == id) };

    for &v in g.topo_idx() {
        let node = g.node(v);
        let (op, inputs) = match &node.kind {
            NodeKind::Source(_) => continue, // activated on first use
            NodeKind::Op { op, inputs, .. } => (op, inputs),
        };

        // Activate source inputs that are not yet tracked.
        for &u in inputs {
            if fr.col_pos(u).is_none() {
                let spec = match &g.node(u).kind {
                    NodeKind::Source(s) => s,
                    _ => unreachable!("non-source inputs precede v in topo order"),
                };
                let (mq, _) = quantize_source(spec, n)?;
                let new_rows = fr.rows() as u128 * mq.len() as u128;
                if new_rows > opts.joint_atom_cap as u128 {
                    return Err(Error::AtomCapExceeded {
                        node: node.id.clone(),
                        atoms: new_rows,
                        cap: opts.joint_atom_cap,
                    });
                }
                node_stats.push(NodeStats {
                    id: g.node(u).id.clone(),
                    support_before: mq.len(),
                    support_after: mq.len(),
                });
                if want_marginal(&g.node(u).id) {
                    marginals.insert(g.node(u).id.clone(), mq.clone());
                }
                fr.expand(u, &mq);
            }
        }

        // Compute the node's column.
        let ncols = fr.cols.len();
        let positions: Vec<usize> =
            inputs.iter().map(|&u| fr.col_pos(u).expect("activated above")).collect();
        let mut args = vec![0.0f64; positions.len()];
        let mut with_new = Vec::with_capacity((ncols + 1) * fr.rows());
        for r in 0..fr.rows() {
            let row = &fr.tuples[r * ncols..(r + 1) * ncols];
            for (a, &p) in args.iter_mut().zip(&positions) {
                *a = row[p];
            }
            with_new.extend_from_slice(row);
            with_new.push(canon(op.eval(&args)));
        }
        fr.tuples = with_new;
        fr.cols.push(v);

        // Consume inputs and retire exhausted columns.
        for &u in inputs {
            remaining[u] -= 1;
        }
        let dead: Vec<usize> = fr
            .cols
            .iter()
            .copied()
            .filter(|&c| c != terminal && c != v && remaining[c] == 0)
            .collect();
        fr.drop_cols(&dead);

        if fr.cols == [v] {
            // Cut vertex: the frontier is this node's genuine marginal.
            let m = DiscreteMeasure::from_pairs(
                fr.tuples.iter().copied().zip(fr.weights.iter().copied()).collect(),
            )?;
            let before = m.len();
            let mc = compress(&m, n);
            node_stats.push(NodeStats {
                id: node.id.clone(),
                support_before: before,
                support_after: mc.len(),
            });
            if want_marginal(&node.id) {
                marginals.insert(node.id.clone(), mc.clone());
            }
            fr.tuples = mc.atoms().to_vec();
            fr.weights = mc.weights().to_vec();
        } else {
            let pos = fr.col_pos(v).expect("just pushed");
            let width = fr.cols.len();
            let distinct: HashSet<u64> =
                (0..fr.rows()).map(|r| fr.tuples[r * width + pos].to_bits()).collect();
            node_stats.push(NodeStats {
                id: node.id.clone(),
                support_before: distinct.len(),
                support_after: distinct.len(),
            });
            if want_marginal(&node.id) {
                let m = DiscreteMeasure::from_pairs(
                    (0..fr.rows())
                        .map(|r| (fr.tuples[r * width + pos], fr.weights[r]))
                        .collect(),
                )?;
                marginals.insert(node.id.clone(), m);
            }
        }
    }

    debug_assert_eq!(fr.cols, [terminal]);
    let terminal_measure = DiscreteMeasure::from_pairs(
        fr.tuples.iter().copied().zip(fr.weights.iter().copied()).collect(),
    )?;

    Ok(EvalResult {
        terminal: terminal_measure,
        samples: None,
        node_stats,
        marginals,
        wall: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo baseline
// ---------------------------------------------------------------------------

enum Sampler {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete { atoms: Vec<f64>, cum: Vec<f64> },
    Quantile(QuantileFn),
}

impl Sampler {
    fn new(spec: &SourceSpec) -> Self {
        match spec {
            SourceSpec::Gaussian { mean, std } => Self::Gaussian { mean: *mean, std: *std },
            SourceSpec::Uniform { lo, hi } => Self::Uniform { lo: *lo, hi: *hi },
            SourceSpec::Discrete(m) => {
                let mut cum = Vec::with_capacity(m.len());
                let mut acc = 0.0;
                for w in m.weights() {
                    acc += w;
                    cum.push(acc);
                }
                Self::Discrete { atoms: m.atoms().to_vec(), cum }
            }
            SourceSpec::Quantile(q) => Self::Quantile(q.clone()),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::Gaussian { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
            Self::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            Self::Discrete { atoms, cum } => {
                let u: f64 = rng.random();
                let k = cum.partition_point(|&c| c <= u).min(atoms.len() - 1);
                atoms[k]
            }
            Self::Quantile(q) => quantile_eval(q, rng.random()),
        }
    }
}

fn quantile_eval(q: &QuantileFn, u: f64) -> f64 {
    match q {
        QuantileFn::Func(f) => f(u),
        QuantileFn::Table(knots) => {
            if u <= 0.0 {
                return knots[0].1;
            }
            if u >= 1.0 {
                return knots.last().unwrap().1;
            }
            let k = knots.partition_point(|&(uu, _)| uu <= u);
            let (u0, x0) = knots[k - 1];
            let (u1, x1) = knots[k];
            x0 + (x1 - x0) * (u - u0) / (u1 - u0)
        }
    }
}

/// Seeded Monte Carlo evaluation: draws `samples` independent source
/// vectors, pushes each through the graph, and returns the terminal sample
/// list together with its empirical measure. Identical seeds give identical
/// samples, independent of thread count.
pub fn eval_mc(g: &CompGraph, samples: u64, seed: u64, opts: &EvalOptions) -> Result<EvalResult> {
    let start = Instant::now();
    if samples == 0 {
        return Err(Error::Eval("sample count must be positive".into()));
    }
    let source_idx: Vec<usize> = g
        .topo_idx()
        .iter()
        .copied()
        .filter(|&v| matches!(g.node(v).kind, NodeKind::Source(_)))
        .collect();
    let samplers: Vec<Sampler> = source_idx
        .iter()
        .map(|&v| match &g.node(v).kind {
            NodeKind::Source(s) => Sampler::new(s),
            _ => unreachable!(),
        })
        .collect();

    let marg_idx: Vec<usize> = opts
        .marginals
        .iter()
        .map(|id| g.idx(id).ok_or_else(|| Error::Eval(format!("unknown node '{id}'"))))
        .collect::<Result<_>>()?;

    let topo: Vec<usize> = g.topo_idx().to_vec();
    let n_nodes = g.len();
    let n_blocks = samples.div_ceil(MC_BLOCK);

    let run_block = |b: u64| -> (Vec<f64>, Vec<Vec<f64>>) {
        let lo = b * MC_BLOCK;
        let hi = (lo + MC_BLOCK).min(samples);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b + 1);
        let mut out = Vec::with_capacity((hi - lo) as usize);
        let mut marg = vec![Vec::with_capacity((hi - lo) as usize); marg_idx.len()];
        let mut values = vec![0.0f64; n_nodes];
        for _ in lo..hi {
            for (&v, s) in source_idx.iter().zip(&samplers) {
                values[v] = s.draw(&mut rng);
            }
            for &v in &topo {
                if let NodeKind::Op { op, inputs, .. } = &g.node(v).kind {
                    let args: Vec<f64> = inputs.iter().map(|&u| values[u]).collect();
                    values[v] = op.eval(&args);
                }
            }
            out.push(values[g.terminal_idx()]);
            for (slot, &v) in marg.iter_mut().zip(&marg_idx) {
                slot.push(values[v]);
            }
        }
        (out, marg)
    };

    let blocks: Vec<(Vec<f64>, Vec<Vec<f64>>)> =
        (0..n_blocks).into_par_iter().map(run_block).collect();
    let mut all = Vec::with_capacity(samples as usize);
    let mut marg_samples: Vec<Vec<f64>> = vec![Vec::new(); marg_idx.len()];
    for (block, marg) in blocks {
        all.extend(block);
        for (acc, part) in marg_samples.iter_mut().zip(marg) {
            acc.extend(part);
        }
    }

    let mut marginals = HashMap::new();
    for (vals, id) in marg_samples.into_iter().zip(&opts.marginals) {
        marginals.insert(id.clone(), empirical_from_samples(&vals)?);
    }

    Ok(EvalResult {
        terminal: empirical_from_samples(&all)?,
        samples: Some(all),
        node_stats: Vec::new(),
        marginals,
        wall: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Bubble-sort order statistics
// ---------------------------------------------------------------------------

/// Builds the min/max network of the (modified) bubble sort over the given
/// sources and returns the graph whose terminal is the `k`-th order
/// statistic (1-based: `k = 1` is the minimum). Only the ancestor cone of
/// the chosen output is kept; all ops have Lipschitz constant 1.
pub fn build_bubble_sort_graph(sources: &[SourceSpec], k: usize) -> Result<CompGraph> {
    let n = sources.len();
    if n < 2 {
        return Err(Error::Eval("bubble sort needs at least 2 sources".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Eval(format!("order statistic index {k} outside 1..={n}")));
    }

    let mut specs: Vec<NodeSpec> = Vec::new();
    let mut current: Vec<String> = Vec::with_capacity(n);
    for (i, s) in sources.iter().enumerate() {
        let id = format!("x{i}");
        specs.push(NodeSpec::source(&id, s.clone()));
        current.push(id);
    }
    for i in 0..n {
        // Pass i settles position n-1-i; the inner loop is a sequential
        // chain of compare-and-swap pairs.
        for j in 0..n.saturating_sub(i + 1) {
            let lo = format!("min_{i}_{j}");
            let hi = format!("max_{i}_{j}");
            specs.push(NodeSpec::op(&lo, NodeOp::Min, &[&current[j], &current[j + 1]]));
            specs.push(NodeSpec::op(&hi, NodeOp::Max, &[&current[j], &current[j + 1]]));
            current[j] = lo;
            current[j + 1] = hi;
        }
    }
    let terminal = current[k - 1].clone();

    // Keep only the ancestor cone of the terminal.
    let by_id: HashMap<&str, &NodeSpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut needed: HashSet<String> = HashSet::new();
    let mut stack = vec![terminal.clone()];
    while let Some(id) = stack.pop() {
        if !needed.insert(id.clone()) {
            continue;
        }
        if let NodeSpecKind::Op { inputs, .. } = &by_id[id.as_str()].kind {
            for u in inputs {
                stack.push(u.clone());
            }
        }
    }
    let pruned: Vec<NodeSpec> = specs.into_iter().filter(|s| needed.contains(&s.id)).collect();
    CompGraph::new(pruned, &terminal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::wasserstein1;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn dirac_src(x: f64) -> SourceSpec {
        SourceSpec::discrete(DiscreteMeasure::dirac(x))
    }

    fn coin() -> SourceSpec {
        SourceSpec::discrete(DiscreteMeasure::from_parts(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap())
    }

    #[test]
    fn identity_over_point_mass() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("s", dirac_src(3.0)),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["s"]),
            ],
            "t",
        )
        .unwrap();
        let r = eval_exact_joint(&g, None, &EvalOptions::default()).unwrap();
        assert_eq!(r.terminal, DiscreteMeasure::dirac(3.0));
    }

    #[test]
    fn coin_convolution() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("a", coin()),
                NodeSpec::source("b", coin()),
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap();
        let r = eval_exact_joint(&g, None, &EvalOptions::default()).unwrap();
        assert_eq!(r.terminal.atoms(), &[0.0, 1.0, 2.0]);
        assert_eq!(r.terminal.weights(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn atom_cap_is_enforced() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("a", coin()),
                NodeSpec::source("b", coin()),
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap();
        let opts = EvalOptions { joint_atom_cap: 3, ..Default::default() };
        assert!(matches!(eval_exact_joint(&g, None, &opts), Err(Error::AtomCapExceeded { .. })));
        assert!(matches!(eval_cq(&g, 1, &opts), Err(Error::AtomCapExceeded { .. })));
    }

    #[test]
    fn continuous_source_needs_level() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("s", SourceSpec::gaussian(0.0, 1.0).unwrap()),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["s"]),
            ],
            "t",
        )
        .unwrap();
        assert!(eval_exact_joint(&g, None, &EvalOptions::default()).is_err());
        assert!(eval_exact_joint(&g, Some(3), &EvalOptions::default()).is_ok());
    }

    #[test]
    fn cq_agrees_with_exact_when_nothing_compresses() {
        // Supports stay below 2^n: the frontier evaluation must reproduce
        // the exact joint law exactly.
        let g = CompGraph::new(
            vec![
                NodeSpec::source("a", coin()),
                NodeSpec::source("b", coin()),
                NodeSpec::op("u", NodeOp::Add, &["a", "b"]),
                NodeSpec::op("t", NodeOp::Affine { a: 2.0, b: 1.0 }, &["u"]),
            ],
            "t",
        )
        .unwrap();
        let exact = eval_exact_joint(&g, Some(4), &EvalOptions::default()).unwrap();
        let cq = eval_cq(&g, 4, &EvalOptions::default()).unwrap();
        assert_eq!(exact.terminal, cq.terminal);
    }

    #[test]
    fn cq_compresses_at_cut_vertices() {
        // One stage: a + b has 9 atoms; at n = 2 the terminal is compressed
        // to 4 and equals compress(exact law).
        let three = SourceSpec::discrete(DiscreteMeasure::uniform_on(&[0.0, 1.0, 2.5]).unwrap());
        let g = CompGraph::new(
            vec![
                NodeSpec::source("a", three.clone()),
                NodeSpec::source("b", three),
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap();
        let exact = eval_exact_joint(&g, Some(2), &EvalOptions::default()).unwrap();
        let cq = eval_cq(&g, 2, &EvalOptions::default()).unwrap();
        assert_eq!(cq.terminal, compress(&exact.terminal, 2));
        assert!(cq.terminal.len() <= 4);
        let stats = cq.node_stats.iter().find(|s| s.id == "t").unwrap();
        assert!(stats.support_before > stats.support_after);
    }

    #[test]
    fn cq_marginals_are_projections() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("a", coin()),
                NodeSpec::source("b", coin()),
                NodeSpec::op("u", NodeOp::Add, &["a", "b"]),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["u"]),
            ],
            "t",
        )
        .unwrap();
        let opts = EvalOptions { marginals: vec!["u".into()], ..Default::default() };
        let r = eval_cq(&g, 4, &opts).unwrap();
        assert_eq!(r.marginals["u"].atoms(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn bubble_sort_examples() {
        // Two sources, k = 1: a single min node.
        let u = SourceSpec::discrete(DiscreteMeasure::uniform_on(&[1.0, 2.0]).unwrap());
        let g = build_bubble_sort_graph(&[u.clone(), u.clone()], 1).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.terminal_id().starts_with("min"));

        // Max of three iid uniform{1,2,3}: brute force over 27 tuples.
        let u3 = SourceSpec::discrete(DiscreteMeasure::uniform_on(&[1.0, 2.0, 3.0]).unwrap());
        let g = build_bubble_sort_graph(&[u3.clone(), u3.clone(), u3.clone()], 3).unwrap();
        let r = eval_exact_joint(&g, None, &EvalOptions::default()).unwrap();
        let mut counts = HashMap::new();
        for a in 1..=3u32 {
            for b in 1..=3u32 {
                for c in 1..=3u32 {
                    *counts.entry(a.max(b).max(c)).or_insert(0u32) += 1;
                }
            }
        }
        for (atom, w) in r.terminal.atoms().iter().zip(r.terminal.weights()) {
            let expect = counts[&(*atom as u32)] as f64 / 27.0;
            assert_close(*w, expect, 1e-12);
        }
    }

    #[test]
    fn mc_point_mass_and_determinism() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("s", dirac_src(3.0)),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["s"]),
            ],
            "t",
        )
        .unwrap();
        let r = eval_mc(&g, 1000, 9, &EvalOptions::default()).unwrap();
        assert!(r.samples.as_ref().unwrap().iter().all(|&x| x == 3.0));

        let g2 = CompGraph::new(
            vec![
                NodeSpec::source("a", SourceSpec::uniform(0.0, 1.0).unwrap()),
                NodeSpec::source("b", SourceSpec::gaussian(0.0, 1.0).unwrap()),
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap();
        let r1 = eval_mc(&g2, 50_000, 42, &EvalOptions::default()).unwrap();
        let r2 = eval_mc(&g2, 50_000, 42, &EvalOptions::default()).unwrap();
        assert_eq!(r1.samples, r2.samples);
        let r3 = eval_mc(&g2, 50_000, 43, &EvalOptions::default()).unwrap();
        assert_ne!(r1.samples, r3.samples);
    }

    #[test]
    fn mc_two_uniform_sum_near_triangle() {
        let g = CompGraph::new(
            vec![
                NodeSpec::source("a", SourceSpec::uniform(0.0, 1.0).unwrap()),
                NodeSpec::source("b", SourceSpec::uniform(0.0, 1.0).unwrap()),
                NodeSpec::op("t", NodeOp::Add, &["a", "b"]),
            ],
            "t",
        )
        .unwrap();
        let r = eval_mc(&g, 100_000, 7, &EvalOptions::default()).unwrap();
        assert_close(r.terminal.mean(), 1.0, 0.01);
        // Compare against a fine quantization of the triangular law.
        let tri = SourceSpec::quantile_table(triangle_quantile_table()).unwrap();
        let (tri_m, _) = quantize_source(&tri, 10).unwrap();
        assert!(wasserstein1(&r.terminal, &tri_m) < 0.02);
    }

    fn triangle_quantile_table() -> Vec<(f64, f64)> {
        // Quantile of the sum of two uniform(0,1): F(x) = x^2/2 on [0,1],
        // 1 - (2-x)^2/2 on [1,2].
        (0..=512)
            .map(|i| {
                let u = i as f64 / 512.0;
                let x = if u <= 0.5 { (2.0 * u).sqrt() } else { 2.0 - (2.0 * (1.0 - u)).sqrt() };
                (u, x)
            })
            .collect()
    }

    #[test]
    fn quantized_sources_flow_through_exact_joint() {
        // quantize_sources_at quantizes discrete sources too.
        let ladder: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let src = SourceSpec::discrete(DiscreteMeasure::uniform_on(&ladder).unwrap());
        let g = CompGraph::new(
            vec![
                NodeSpec::source("s", src),
                NodeSpec::op("t", NodeOp::Affine { a: 1.0, b: 0.0 }, &["s"]),
            ],
            "t",
        )
        .unwrap();
        let r = eval_exact_joint(&g, Some(1), &EvalOptions::default()).unwrap();
        assert_eq!(r.terminal.atoms(), &[2.5, 6.5]);
    }
}
