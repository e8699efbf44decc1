//! Euler–Maruyama schemes as staged computational graphs, plus the
//! quantization/compression error study against a Monte Carlo reference.
//!
//! One scheme step is the fused map `y' = y + a(t,y)*dt + b(t,y)*sqrt(dt)*xi`
//! with fresh standard-normal noise `xi`; no compression happens inside a
//! step, only once on the step output. [`em_propagate`] runs the
//! compressed-and-quantized recursion directly (quantized noise is computed
//! once and reused across steps — the marginals are identical), while
//! [`build_em_graph`] exposes the same chain to the generic graph engine.
//!
//! [`em_error_experiment`] measures `W1` between the scheme's Monte Carlo
//! law and its compressed-and-quantized law over an `(N, n)` grid. The
//! scheme's iterates have no closed-form law, so the reference is seeded
//! Monte Carlo; its own `~1/sqrt(paths)` resolution is part of any
//! tolerance read off the results.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::graph::{CompGraph, NodeOp, NodeSpec, ScalarFn2};
use crate::measure::{empirical_from_samples, wasserstein1, DiscreteMeasure};
use crate::numeric::KahanAcc;
use crate::quantize::{compress, quantize_source, SourceSpec};
use crate::{Error, Result};

/// Paths per Monte Carlo reference block (one RNG stream per block).
const REF_BLOCK: u64 = 16_384;

/// Drift and diffusion coefficients `a(t, x)`, `b(t, x)`.
#[derive(Clone)]
pub enum SdeCoeffs {
    /// Geometric Brownian motion: `a = mu*x`, `b = sigma*x`.
    Gbm { mu: f64, sigma: f64 },
    Custom { drift: ScalarFn2, diffusion: ScalarFn2 },
}

impl std::fmt::Debug for SdeCoeffs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Gbm { mu, sigma } => write!(f, "gbm(mu={mu}, sigma={sigma})"),
            Self::Custom { .. } => write!(f, "custom"),
        }
    }
}

impl SdeCoeffs {
    pub fn drift(&self, t: f64, x: f64) -> f64 {
        match self {
            Self::Gbm { mu, .. } => mu * x,
            Self::Custom { drift, .. } => drift(t, x),
        }
    }

    pub fn diffusion(&self, t: f64, x: f64) -> f64 {
        match self {
            Self::Gbm { sigma, .. } => sigma * x,
            Self::Custom { diffusion, .. } => diffusion(t, x),
        }
    }

    fn as_fns(&self) -> (ScalarFn2, ScalarFn2) {
        match self {
            Self::Gbm { mu, sigma } => {
                let (mu, sigma) = (*mu, *sigma);
                (
                    std::sync::Arc::new(move |_t, x| mu * x),
                    std::sync::Arc::new(move |_t, x| sigma * x),
                )
            }
            Self::Custom { drift, diffusion } => (drift.clone(), diffusion.clone()),
        }
    }
}

/// An Euler–Maruyama discretization: `steps` equal steps of size
/// `horizon / steps` starting from `y0`.
#[derive(Debug, Clone)]
pub struct SdeSpec {
    pub coeffs: SdeCoeffs,
    pub y0: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl SdeSpec {
    pub fn new(coeffs: SdeCoeffs, y0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidSource(format!("horizon {horizon} must be > 0")));
        }
        if steps == 0 {
            return Err(Error::InvalidSource("need at least one step".into()));
        }
        if let SdeCoeffs::Gbm { sigma, .. } = coeffs {
            if !(sigma > 0.0) {
                return Err(Error::InvalidSource(format!("gbm sigma {sigma} must be > 0")));
            }
        }
        Ok(Self { coeffs, y0, horizon, steps })
    }

    /// Geometric Brownian motion scheme.
    pub fn gbm(mu: f64, sigma: f64, y0: f64, horizon: f64, steps: usize) -> Result<Self> {
        Self::new(SdeCoeffs::Gbm { mu, sigma }, y0, horizon, steps)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.coeffs.clone(), self.y0, self.horizon, steps)
    }
}

/// Expresses the scheme as a computational graph: a chain of fused step
/// nodes `y1..yN` fed by the initial point mass and one fresh
/// standard-normal source per step.
pub fn build_em_graph(spec: &SdeSpec) -> CompGraph {
    let dt = spec.dt();
    let mut nodes = vec![NodeSpec::source("y0", SourceSpec::discrete(DiscreteMeasure::dirac(spec.y0)))];
    for k in 0..spec.steps {
        nodes.push(NodeSpec::source(format!("xi{k}"), SourceSpec::Gaussian { mean: 0.0, std: 1.0 }));
    }
    for k in 0..spec.steps {
        let (drift, diffusion) = spec.coeffs.as_fns();
        nodes.push(NodeSpec::op(
            format!("y{}", k + 1),
            NodeOp::EmStep { drift, diffusion, t: k as f64 * dt, dt },
            &[&format!("y{k}"), &format!("xi{k}")],
        ));
    }
    CompGraph::new(nodes, &format!("y{}", spec.steps)).expect("chain construction is valid")
}

/// Below this product size a step sorts and merges the full pushforward
/// before compressing; above it, compression provably applies and the
/// sort-free mean-split recursion on raw pairs is used instead.
const EXACT_STEP_LIMIT: usize = 1 << 16;

/// Runs the compressed-and-quantized recursion: the noise is quantized once
/// to at most `2^n` atoms, each step pushes the product of the current state
/// with fresh noise through the fused map, merges colliding atoms, and
/// compresses back to at most `2^n` atoms. Returns the law after each step.
///
/// Fully deterministic; repeated runs are bit-identical. Large products skip
/// the full sort: once the pushforward support provably exceeds `2^n`
/// (checked with an early-exit distinct count), the mean-split recursion is
/// applied to the raw pairs by in-place partitioning, which costs `O(n * M)`
/// instead of `O(M log M)`.
pub fn em_propagate(spec: &SdeSpec, n: u32) -> Result<Vec<DiscreteMeasure>> {
    if n == 0 {
        return Err(Error::InvalidSource("quantization level must be >= 1".into()));
    }
    let (noise, _) = quantize_source(&SourceSpec::Gaussian { mean: 0.0, std: 1.0 }, n)?;
    let dt = spec.dt();
    let sqrt_dt = dt.sqrt();
    let mut state = DiscreteMeasure::dirac(spec.y0);
    let mut out = Vec::with_capacity(spec.steps);
    let mut xs: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for k in 0..spec.steps {
        let t = k as f64 * dt;
        xs.clear();
        ws.clear();
        xs.reserve(state.len() * noise.len());
        ws.reserve(state.len() * noise.len());
        for (&y, &wy) in state.atoms().iter().zip(state.weights()) {
            let base = y + spec.coeffs.drift(t, y) * dt;
            let scale = spec.coeffs.diffusion(t, y) * sqrt_dt;
            for (&xi, &wxi) in noise.atoms().iter().zip(noise.weights()) {
                xs.push(base + scale * xi);
                ws.push(wy * wxi);
            }
        }
        let exact = xs.len() <= EXACT_STEP_LIMIT || !distinct_exceeds(&xs, 1usize << n);
        state = if exact {
            let pushed =
                DiscreteMeasure::from_pairs(xs.iter().copied().zip(ws.iter().copied()).collect())?;
            compress(&pushed, n)
        } else {
            DiscreteMeasure::from_pairs(quantize_pairs(&mut xs, &mut ws, n))?
        };
        out.push(state.clone());
    }
    Ok(out)
}

/// True when more than `limit` distinct bit patterns occur (early exit, so
/// the generic case costs about `limit` hash insertions).
fn distinct_exceeds(xs: &[f64], limit: usize) -> bool {
    let mut seen = std::collections::HashSet::with_capacity(limit + 2);
    for &x in xs {
        seen.insert(x.to_bits());
        if seen.len() > limit {
            return true;
        }
    }
    false
}

/// Mean-split quantization of raw `(value, weight)` pairs by in-place
/// partitioning; returns leaf `(mean, mass)` pairs in ascending order.
/// Equivalent to sorting, merging, and quantizing, up to the placement of
/// values that tie within the merge tolerance across a split boundary.
fn quantize_pairs(xs: &mut [f64], ws: &mut [f64], n: u32) -> Vec<(f64, f64)> {
    let mut mass = KahanAcc::default();
    let mut first = KahanAcc::default();
    for (&x, &w) in xs.iter().zip(ws.iter()) {
        mass.add(w);
        first.add(w * x);
    }
    let mut leaves = Vec::with_capacity(1 << n.min(24));
    partition_rec(xs, ws, n, mass.value(), first.value(), &mut leaves);
    leaves
}

fn partition_rec(
    xs: &mut [f64],
    ws: &mut [f64],
    depth: u32,
    mass: f64,
    first: f64,
    leaves: &mut Vec<(f64, f64)>,
) {
    let mean = first / mass;
    if depth == 0 || xs.len() <= 1 {
        leaves.push((mean, mass));
        return;
    }
    // Lomuto partition around the mean: lower cell is {x < mean}. Each
    // element is examined at its original index exactly once, so the side
    // sums accumulate deterministically.
    let mut k = 0usize;
    let mut lmass = KahanAcc::default();
    let mut lfirst = KahanAcc::default();
    let mut rmass = KahanAcc::default();
    let mut rfirst = KahanAcc::default();
    for i in 0..xs.len() {
        let (x, w) = (xs[i], ws[i]);
        if x < mean {
            xs.swap(i, k);
            ws.swap(i, k);
            k += 1;
            lmass.add(w);
            lfirst.add(w * x);
        } else {
            rmass.add(w);
            rfirst.add(w * x);
        }
    }
    if k == 0 || k == xs.len() {
        // One side is empty: the cell is a point mass at its mean.
        leaves.push((mean, mass));
        return;
    }
    let (xl, xr) = xs.split_at_mut(k);
    let (wl, wr) = ws.split_at_mut(k);
    partition_rec(xl, wl, depth - 1, lmass.value(), lfirst.value(), leaves);
    partition_rec(xr, wr, depth - 1, rmass.value(), rfirst.value(), leaves);
}

/// Seeded Monte Carlo sample of `Y_N` (the scheme's terminal iterate):
/// `paths` trajectories, blocked into independent RNG streams so the result
/// does not depend on thread scheduling.
pub fn em_reference_samples(spec: &SdeSpec, paths: u64, seed: u64) -> Vec<f64> {
    let dt = spec.dt();
    let sqrt_dt = dt.sqrt();
    let n_blocks = paths.div_ceil(REF_BLOCK);
    let blocks: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * REF_BLOCK;
            let hi = (lo + REF_BLOCK).min(paths);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b + 1);
            let mut out = Vec::with_capacity((hi - lo) as usize);
            for _ in lo..hi {
                let mut y = spec.y0;
                for k in 0..spec.steps {
                    let t = k as f64 * dt;
                    let xi: f64 = rng.sample(StandardNormal);
                    y += spec.coeffs.drift(t, y) * dt + spec.coeffs.diffusion(t, y) * sqrt_dt * xi;
                }
                out.push(y);
            }
            out
        })
        .collect();
    let mut all = Vec::with_capacity(paths as usize);
    for b in blocks {
        all.extend(b);
    }
    all
}

/// One grid cell of the error study.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    /// Number of scheme steps N.
    pub steps: usize,
    /// Quantization level n.
    pub level: u32,
    /// `W1` between the Monte Carlo reference law of `Y_N` and the
    /// compressed-and-quantized law.
    pub w1: f64,
    /// Fitted bound value at this cell (see [`fit_theorem2_constants`]).
    pub bound_fit: f64,
    /// Support diameter of the compressed-and-quantized terminal law.
    pub diam: f64,
    /// Support size of the terminal law.
    pub support: usize,
    pub runtime_ms: f64,
}

/// Result of [`em_error_experiment`]: the grid records plus the fitted
/// bound constants.
#[derive(Debug, Clone)]
pub struct EmExperiment {
    pub records: Vec<ExperimentRecord>,
    /// Multiplier `c` of the fitted bound `c * exp(c_prime * k * sqrt(n*dt)) / 2^n`.
    pub c: f64,
    pub c_prime: f64,
}

/// Sweeps the `(N, n)` grid: for every step count `N` in `n_steps` and level
/// `n` in `levels`, computes `W1` between the seeded Monte Carlo reference
/// of `Y_N` (`ref_samples` paths; computed once per `N` and shared across
/// levels) and the deterministic compressed-and-quantized law. Grid cells
/// run in parallel; results are deterministic for a fixed seed.
pub fn em_error_experiment(
    spec: &SdeSpec,
    levels: &[u32],
    n_steps: &[usize],
    ref_samples: u64,
    seed: u64,
) -> Result<EmExperiment> {
    let cells: Vec<(usize, u32)> = n_steps
        .iter()
        .flat_map(|&ns| levels.iter().map(move |&n| (ns, n)))
        .collect();

    // Reference sample sets are shared across levels with the same N; the
    // per-N stream offset keeps cells independent of grid layout.
    let references: Vec<(usize, DiscreteMeasure)> = n_steps
        .par_iter()
        .map(|&ns| {
            let spec_n = spec.with_steps(ns)?;
            let samples = em_reference_samples(&spec_n, ref_samples, seed ^ (ns as u64) << 20);
            Ok((ns, empirical_from_samples(&samples)?))
        })
        .collect::<Result<_>>()?;
    let reference = |ns: usize| -> &DiscreteMeasure {
        &references.iter().find(|(k, _)| *k == ns).expect("reference computed").1
    };

    let mut records: Vec<ExperimentRecord> = cells
        .par_iter()
        .map(|&(ns, n)| {
            let start = Instant::now();
            let spec_n = spec.with_steps(ns)?;
            let laws = em_propagate(&spec_n, n)?;
            let terminal = laws.last().expect("at least one step");
            let w1 = wasserstein1(reference(ns), terminal);
            Ok(ExperimentRecord {
                steps: ns,
                level: n,
                w1,
                bound_fit: 0.0,
                diam: terminal.diameter(),
                support: terminal.len(),
                runtime_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect::<Result<_>>()?;

    let (c, c_prime) = fit_theorem2_constants(spec, &records);
    for r in &mut records {
        let spec_n = spec.with_steps(r.steps)?;
        r.bound_fit = em_theorem2_bound(&spec_n, r.level, r.steps, c, c_prime);
    }
    Ok(EmExperiment { records, c, c_prime })
}

/// Bound expression `c * exp(c_prime * k * sqrt(n * dt)) / 2^n`. The
/// constants are existential, so callers supply them (typically from
/// [`fit_theorem2_constants`]); only the bound's shape is meaningful.
pub fn em_theorem2_bound(spec: &SdeSpec, n: u32, k: usize, c: f64, c_prime: f64) -> f64 {
    c * (c_prime * k as f64 * (n as f64 * spec.dt()).sqrt()).exp() / (1u128 << n.min(127)) as f64
}

/// Least-squares fit of `(c, c_prime)` on the measured grid
/// (`log w1 + n log 2 = log c + c_prime * k * sqrt(n*dt)`), with `c` then
/// inflated so the bound dominates every measured point.
pub fn fit_theorem2_constants(spec: &SdeSpec, records: &[ExperimentRecord]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.w1 > 0.0)
        .map(|r| {
            let dt = spec.horizon / r.steps as f64;
            let s = r.steps as f64 * (r.level as f64 * dt).sqrt();
            let y = r.w1.ln() + r.level as f64 * std::f64::consts::LN_2;
            (s, y)
        })
        .collect();
    if pts.len() < 2 {
        return (1.0, 1.0);
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, intercept, _) = crate::numeric::linear_fit(&xs, &ys);
    let c_prime = slope.max(1e-9);
    let mut c = intercept.exp();
    // Domination: scale c up by the worst shortfall.
    let mut worst = 1.0f64;
    for r in records.iter().filter(|r| r.w1 > 0.0) {
        let spec_n = match spec.with_steps(r.steps) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let b = em_theorem2_bound(&spec_n, r.level, r.steps, c, c_prime);
        if b > 0.0 {
            worst = worst.max(r.w1 / b);
        }
    }
    c *= worst;
    (c, c_prime)
}

/// Deterministic mean recursion of the scheme for GBM: quantization and
/// compression preserve means and the quantized noise has mean zero by
/// symmetry, so `E[Y_k] = y0 * (1 + mu*dt)^k` must hold step by step.
pub fn gbm_mean_recursion(spec: &SdeSpec, k: usize) -> Result<f64> {
    match spec.coeffs {
        SdeCoeffs::Gbm { mu, .. } => Ok(spec.y0 * (1.0 + mu * spec.dt()).powi(k as i32)),
        _ => Err(Error::Eval("mean recursion is closed-form for the GBM variant only".into())),
    }
}
