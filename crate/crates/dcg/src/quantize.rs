//! The recursive mean-split quantizer `T(mu, n)`.
//!
//! The real line is split at the measure's mean, each half is renormalized
//! and split again at its conditional mean, and after at most `n` levels
//! every cell collapses to a point mass at its conditional mean. The
//! recursion is recorded in a [`CellTree`]; the leaf `(mass, mean)` pairs
//! form the quantized measure. Splitting puts the boundary point itself in
//! the upper cell (`Omega_+ = {x >= mean}`), and a cell whose split leaves
//! one side empty becomes a leaf at the occupied side's conditional mean.
//!
//! Quantization error is evaluated exactly: the W1 distance between a
//! measure and its quantization equals the mass-weighted sum over cells of
//! the conditional absolute deviation from the cell mean, so for analytic
//! sources the error comes out of closed-form (or adaptively integrated)
//! cell moments rather than a distance computation.

use std::fmt;
use std::sync::Arc;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::gaussian;
use crate::measure::DiscreteMeasure;
use crate::numeric::KahanAcc;
use crate::{Error, Result};

/// Absolute tolerance for the adaptive integration of quantile-function
/// sources; cell means feed multiplicative error chains downstream, so this
/// is kept tight.
const QUANTILE_TOL: f64 = 1e-10;
const QUANTILE_MAX_DEPTH: u32 = 48;

/// A split side carrying less than this fraction of its parent's mass is
/// treated as empty, so sliver cells produced by rounding collapse to leaves.
const ZERO_SIDE_REL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

/// An input distribution: analytic, discrete, or given by its quantile
/// function.
#[derive(Clone)]
pub enum SourceSpec {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete(DiscreteMeasure),
    Quantile(QuantileFn),
}

/// A nondecreasing quantile function on `(0, 1)`, either tabulated with
/// linear interpolation or supplied as a callable.
#[derive(Clone)]
pub enum QuantileFn {
    /// `(u, x)` knots covering `[0, 1]`, `u` strictly increasing and `x`
    /// nondecreasing.
    Table(Arc<Vec<(f64, f64)>>),
    Func(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian { mean, std } => write!(f, "gaussian({mean}, {std})"),
            Self::Uniform { lo, hi } => write!(f, "uniform({lo}, {hi})"),
            Self::Discrete(m) => write!(f, "discrete({} atoms)", m.len()),
            Self::Quantile(QuantileFn::Table(t)) => write!(f, "quantile(table, {} knots)", t.len()),
            Self::Quantile(QuantileFn::Func(_)) => write!(f, "quantile(fn)"),
        }
    }
}

impl SourceSpec {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(Error::InvalidSource(format!("gaussian({mean}, {std}): std must be > 0")));
        }
        Ok(Self::Gaussian { mean, std })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidSource(format!("uniform({lo}, {hi}): need lo < hi")));
        }
        Ok(Self::Uniform { lo, hi })
    }

    pub fn discrete(m: DiscreteMeasure) -> Self {
        Self::Discrete(m)
    }

    pub fn quantile_table(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidSource("quantile table needs >= 2 knots".into()));
        }
        if knots[0].0 != 0.0 || knots.last().unwrap().0 != 1.0 {
            return Err(Error::InvalidSource("quantile table must cover u in [0, 1]".into()));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) || !(w[1].1 >= w[0].1) {
                return Err(Error::InvalidSource(
                    "quantile table must be strictly increasing in u, nondecreasing in x".into(),
                ));
            }
        }
        if knots.iter().any(|&(u, x)| !u.is_finite() || !x.is_finite()) {
            return Err(Error::InvalidSource("quantile table has non-finite knots".into()));
        }
        Ok(Self::Quantile(QuantileFn::Table(Arc::new(knots))))
    }

    pub fn quantile_fn(f: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Result<Self> {
        let q = QuantileFn::Func(f);
        // Probe a grid: the callable must be finite and nondecreasing.
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1024 {
            let u = k as f64 / 1024.0;
            let x = q.eval(u);
            if !x.is_finite() {
                return Err(Error::InvalidSource(format!("quantile({u}) = {x} is not finite")));
            }
            if x < prev - 1e-12 {
                return Err(Error::InvalidSource(format!("quantile not nondecreasing near u = {u}")));
            }
            prev = prev.max(x);
        }
        Ok(Self::Quantile(q))
    }

    /// Mean of the distribution (closed form where available; quantile
    /// sources are integrated).
    pub fn mean(&self) -> Result<f64> {
        match self {
            Self::Gaussian { mean, .. } => Ok(*mean),
            Self::Uniform { lo, hi } => Ok(0.5 * (lo + hi)),
            Self::Discrete(m) => Ok(m.mean()),
            Self::Quantile(q) => q.integrate(0.0, 1.0, QUANTILE_TOL),
        }
    }
}

impl QuantileFn {
    fn eval(&self, u: f64) -> f64 {
        match self {
            Self::Func(f) => f(u),
            Self::Table(knots) => {
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

    /// Integral of the quantile function over `[a, b] subset [0, 1]`.
    /// Exact for tables; adaptive Simpson with a Richardson error estimate
    /// for callables.
    fn integrate(&self, a: f64, b: f64, tol: f64) -> Result<f64> {
        if a >= b {
            return Ok(0.0);
        }
        match self {
            Self::Table(knots) => {
                let mut acc = KahanAcc::default();
                for w in knots.windows(2) {
                    let (u0, x0) = w[0];
                    let (u1, x1) = w[1];
                    let lo = u0.max(a);
                    let hi = u1.min(b);
                    if lo >= hi {
                        continue;
                    }
                    // Trapezoid of the linear segment restricted to [lo, hi].
                    let xl = x0 + (x1 - x0) * (lo - u0) / (u1 - u0);
                    let xh = x0 + (x1 - x0) * (hi - u0) / (u1 - u0);
                    acc.add(0.5 * (xl + xh) * (hi - lo));
                }
                Ok(acc.value())
            }
            Self::Func(f) => {
                let fa = f(a);
                let fm = f(0.5 * (a + b));
                let fb = f(b);
                for v in [fa, fm, fb] {
                    if !v.is_finite() {
                        return Err(Error::QuantileIntegration(format!(
                            "non-finite quantile value on [{a}, {b}]"
                        )));
                    }
                }
                let whole = simpson_rule(a, b, fa, fm, fb);
                adaptive_simpson(&**f, a, b, fa, fm, fb, whole, tol, QUANTILE_MAX_DEPTH)
            }
        }
    }
}

fn simpson_rule(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    if !flm.is_finite() || !frm.is_finite() {
        return Err(Error::QuantileIntegration(format!(
            "non-finite quantile value on [{a}, {b}]"
        )));
    }
    let left = simpson_rule(a, m, fa, flm, fm);
    let right = simpson_rule(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        // Jump discontinuities shrink the residual only linearly in the
        // interval width, so tolerance halving never catches them; at the
        // depth floor the interval is ~2^-48 of the cell and a bounded jump
        // contributes negligibly.
        if delta.abs() <= 1e-7 * (1.0 + whole.abs()) {
            return Ok(left + right + delta / 15.0);
        }
        return Err(Error::QuantileIntegration(format!(
            "no convergence on [{a}, {b}] (mean check fails; is the quantile integrable?)"
        )));
    }
    let lv = adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let rv = adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(lv + rv)
}

// ---------------------------------------------------------------------------
// Cell tree
// ---------------------------------------------------------------------------

/// One interval cell of the mean-split recursion. Intervals are half-open,
/// left-closed at split points; the root is the whole line.
#[derive(Debug, Clone)]
pub struct CellNode {
    /// `(lo, hi)` with `-inf`/`+inf` at the unbounded ends.
    pub interval: (f64, f64),
    /// Probability mass of the cell.
    pub mass: f64,
    /// Conditional mean of the cell (the atom position if this is a leaf).
    pub mean: f64,
    pub children: Option<Box<(CellNode, CellNode)>>,
}

/// The binary interval partition generated by quantizing one source.
#[derive(Debug, Clone)]
pub struct CellTree {
    root: CellNode,
}

impl CellTree {
    pub fn root(&self) -> &CellNode {
        &self.root
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&CellNode> {
        let mut out = Vec::new();
        fn walk<'a>(n: &'a CellNode, out: &mut Vec<&'a CellNode>) {
            match &n.children {
                None => out.push(n),
                Some(kids) => {
                    walk(&kids.0, out);
                    walk(&kids.1, out);
                }
            }
        }
        walk(&self.root, &mut out);
        out
    }

    /// Maximum leaf depth actually reached.
    pub fn depth(&self) -> u32 {
        fn walk(n: &CellNode) -> u32 {
            match &n.children {
                None => 0,
                Some(kids) => 1 + walk(&kids.0).max(walk(&kids.1)),
            }
        }
        walk(&self.root)
    }

    /// Nested-node JSON with fields `interval`, `mass`, `mean` (and
    /// `children` for internal nodes). Unbounded interval ends serialize as
    /// `null`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.root).expect("cell tree serialization")
    }
}

impl Serialize for CellNode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = if self.children.is_some() { 4 } else { 3 };
        let mut st = s.serialize_struct("CellNode", n)?;
        let lo = self.interval.0.is_finite().then_some(self.interval.0);
        let hi = self.interval.1.is_finite().then_some(self.interval.1);
        st.serialize_field("interval", &[lo, hi])?;
        st.serialize_field("mass", &self.mass)?;
        st.serialize_field("mean", &self.mean)?;
        if let Some(kids) = &self.children {
            st.serialize_field("children", &[&kids.0, &kids.1])?;
        }
        st.end()
    }
}

// ---------------------------------------------------------------------------
// Cell calculus: per-source closed forms behind one recursion
// ---------------------------------------------------------------------------

/// Exact cell arithmetic for one source family. `Cell` lives in whatever
/// coordinate system makes the family exact (standardized for Gaussians,
/// index ranges for discrete measures, quantile space for quantile sources);
/// only conditional means and split points surface in x-space.
trait CellCalc {
    type Cell: Copy;
    fn root(&self) -> Self::Cell;
    fn mass(&self, c: Self::Cell) -> f64;
    /// Conditional mean in x-space.
    fn mean_x(&self, c: Self::Cell) -> Result<f64>;
    /// Split at the conditional mean; returns `(lower, upper, mean_x)` where
    /// the upper cell is `{x >= mean}`.
    fn split_at_mean(&self, c: Self::Cell) -> Result<(Self::Cell, Self::Cell, f64)>;
    /// `E[|X - center|; X in cell]`, unnormalized.
    fn abs_dev(&self, c: Self::Cell, center: f64) -> Result<f64>;
}

struct GaussianCalc {
    mu: f64,
    sigma: f64,
}

impl CellCalc for GaussianCalc {
    // Standardized bounds; keeping the recursion in z-space makes
    // quantization exactly equivariant under x = mu + sigma * z.
    type Cell = (f64, f64);

    fn root(&self) -> Self::Cell {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn mass(&self, (a, b): Self::Cell) -> f64 {
        gaussian::interval_mass(a, b)
    }

    fn mean_x(&self, c: Self::Cell) -> Result<f64> {
        let (a, b) = c;
        let zm = gaussian::interval_first_moment(a, b) / self.mass(c);
        Ok(self.mu + self.sigma * zm)
    }

    fn split_at_mean(&self, c: Self::Cell) -> Result<(Self::Cell, Self::Cell, f64)> {
        let (a, b) = c;
        let zm = gaussian::interval_first_moment(a, b) / self.mass(c);
        Ok(((a, zm), (zm, b), self.mu + self.sigma * zm))
    }

    fn abs_dev(&self, (a, b): Self::Cell, center: f64) -> Result<f64> {
        let zc = (center - self.mu) / self.sigma;
        Ok(self.sigma * gaussian::interval_abs_dev(a, b, zc))
    }
}

struct UniformCalc {
    lo: f64,
    hi: f64,
}

impl CellCalc for UniformCalc {
    type Cell = (f64, f64);

    fn root(&self) -> Self::Cell {
        (self.lo, self.hi)
    }

    fn mass(&self, (a, b): Self::Cell) -> f64 {
        (b - a) / (self.hi - self.lo)
    }

    fn mean_x(&self, (a, b): Self::Cell) -> Result<f64> {
        Ok(0.5 * (a + b))
    }

    fn split_at_mean(&self, (a, b): Self::Cell) -> Result<(Self::Cell, Self::Cell, f64)> {
        let m = 0.5 * (a + b);
        Ok(((a, m), (m, b), m))
    }

    fn abs_dev(&self, (a, b): Self::Cell, center: f64) -> Result<f64> {
        let d = 0.5 * ((center - a).powi(2) + (b - center).powi(2)) / (self.hi - self.lo);
        Ok(d)
    }
}

/// Kahan-compensated prefix sums over sorted atoms: `w[i]` and `wx[i]` cover
/// `atoms[0..i]`, so any index range's mass and first moment are two
/// subtractions, and leaf moments telescope exactly back to the totals.
struct Prefix {
    w: Vec<f64>,
    wx: Vec<f64>,
}

impl Prefix {
    fn new(m: &DiscreteMeasure) -> Self {
        let mut w = Vec::with_capacity(m.len() + 1);
        let mut wx = Vec::with_capacity(m.len() + 1);
        let mut aw = KahanAcc::default();
        let mut awx = KahanAcc::default();
        w.push(0.0);
        wx.push(0.0);
        for (&x, &wt) in m.atoms().iter().zip(m.weights()) {
            aw.add(wt);
            awx.add(wt * x);
            w.push(aw.value());
            wx.push(awx.value());
        }
        Self { w, wx }
    }

    fn mass(&self, i: usize, j: usize) -> f64 {
        self.w[j] - self.w[i]
    }

    fn mean(&self, i: usize, j: usize) -> f64 {
        (self.wx[j] - self.wx[i]) / self.mass(i, j)
    }
}

struct DiscreteCalc<'a> {
    atoms: &'a [f64],
    weights: &'a [f64],
    prefix: Prefix,
}

impl<'a> DiscreteCalc<'a> {
    fn new(m: &'a DiscreteMeasure) -> Self {
        Self { atoms: m.atoms(), weights: m.weights(), prefix: Prefix::new(m) }
    }

    fn split_index(&self, (i, j): (usize, usize), mean: f64) -> usize {
        i + self.atoms[i..j].partition_point(|&x| x < mean)
    }
}

impl CellCalc for DiscreteCalc<'_> {
    type Cell = (usize, usize);

    fn root(&self) -> Self::Cell {
        (0, self.atoms.len())
    }

    fn mass(&self, (i, j): Self::Cell) -> f64 {
        self.prefix.mass(i, j)
    }

    fn mean_x(&self, (i, j): Self::Cell) -> Result<f64> {
        // Clamping keeps rounding from pushing a cell mean outside the cell's
        // atom hull (and makes single-atom cells exact).
        Ok(self.prefix.mean(i, j).clamp(self.atoms[i], self.atoms[j - 1]))
    }

    fn split_at_mean(&self, c: Self::Cell) -> Result<(Self::Cell, Self::Cell, f64)> {
        let (i, j) = c;
        let mean = self.prefix.mean(i, j).clamp(self.atoms[i], self.atoms[j - 1]);
        let k = self.split_index(c, mean);
        Ok(((i, k), (k, j), mean))
    }

    fn abs_dev(&self, c: Self::Cell, center: f64) -> Result<f64> {
        let (i, j) = c;
        // Atoms below `center` contribute center*w - w*x, atoms above the
        // opposite; split the range once and use the prefix sums.
        let k = i + self.atoms[i..j].partition_point(|&x| x < center);
        let below = center * self.prefix.mass(i, k) - (self.prefix.wx[k] - self.prefix.wx[i]);
        let above = (self.prefix.wx[j] - self.prefix.wx[k]) - center * self.prefix.mass(k, j);
        Ok(below + above)
    }
}

struct QuantileCalc<'a> {
    q: &'a QuantileFn,
}

impl CellCalc for QuantileCalc<'_> {
    // Quantile-space interval; the source is the pushforward of uniform(0,1).
    type Cell = (f64, f64);

    fn root(&self) -> Self::Cell {
        (0.0, 1.0)
    }

    fn mass(&self, (u0, u1): Self::Cell) -> f64 {
        u1 - u0
    }

    fn mean_x(&self, (u0, u1): Self::Cell) -> Result<f64> {
        Ok(self.q.integrate(u0, u1, QUANTILE_TOL)? / (u1 - u0))
    }

    fn split_at_mean(&self, c: Self::Cell) -> Result<(Self::Cell, Self::Cell, f64)> {
        let (u0, u1) = c;
        let mean = self.mean_x(c)?;
        let us = self.crossing(c, mean);
        Ok(((u0, us), (us, u1), mean))
    }

    fn abs_dev(&self, c: Self::Cell, center: f64) -> Result<f64> {
        let (u0, u1) = c;
        let us = self.crossing(c, center);
        let below = center * (us - u0) - self.q.integrate(u0, us, QUANTILE_TOL)?;
        let above = self.q.integrate(us, u1, QUANTILE_TOL)? - center * (u1 - us);
        Ok(below + above)
    }
}

impl QuantileCalc<'_> {
    /// Smallest `u` in the cell with `Q(u) >= x`, by bisection.
    fn crossing(&self, (u0, u1): (f64, f64), x: f64) -> f64 {
        if self.q.eval(u0) >= x {
            return u0;
        }
        if self.q.eval(u1) < x {
            return u1;
        }
        let (mut lo, mut hi) = (u0, u1); // Q(lo) < x <= Q(hi)
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.q.eval(mid) < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

// ---------------------------------------------------------------------------
// Recursions
// ---------------------------------------------------------------------------

/// Leaf accumulator: `(mean, mass)` pairs in left-to-right order plus the
/// exact quantization error.
struct Leaves {
    pairs: Vec<(f64, f64)>,
    error: KahanAcc,
}

fn quantize_cells<C: CellCalc>(calc: &C, n: u32, want_error: bool) -> Result<(Vec<(f64, f64)>, f64)> {
    let mut leaves = Leaves { pairs: Vec::new(), error: KahanAcc::default() };
    rec_flat(calc, calc.root(), n, want_error, &mut leaves)?;
    Ok((leaves.pairs, leaves.error.value()))
}

fn rec_flat<C: CellCalc>(
    calc: &C,
    cell: C::Cell,
    depth_left: u32,
    want_error: bool,
    out: &mut Leaves,
) -> Result<()> {
    let mass = calc.mass(cell);
    if depth_left == 0 {
        let mean = calc.mean_x(cell)?;
        out.pairs.push((mean, mass));
        if want_error {
            out.error.add(calc.abs_dev(cell, mean)?);
        }
        return Ok(());
    }
    let (lo, hi, mean) = calc.split_at_mean(cell)?;
    if calc.mass(lo) <= ZERO_SIDE_REL * mass || calc.mass(hi) <= ZERO_SIDE_REL * mass {
        // One side is empty: the cell is (numerically) a point mass at its
        // conditional mean and the recursion stops here.
        out.pairs.push((mean, mass));
        if want_error {
            out.error.add(calc.abs_dev(cell, mean)?);
        }
        return Ok(());
    }
    rec_flat(calc, lo, depth_left - 1, want_error, out)?;
    rec_flat(calc, hi, depth_left - 1, want_error, out)
}

fn build_tree<C: CellCalc>(calc: &C, n: u32) -> Result<(CellTree, Vec<(f64, f64)>)> {
    let mut pairs = Vec::new();
    let root = rec_tree(
        calc,
        calc.root(),
        (f64::NEG_INFINITY, f64::INFINITY),
        n,
        &mut pairs,
    )?;
    Ok((CellTree { root }, pairs))
}

fn rec_tree<C: CellCalc>(
    calc: &C,
    cell: C::Cell,
    interval: (f64, f64),
    depth_left: u32,
    pairs: &mut Vec<(f64, f64)>,
) -> Result<CellNode> {
    let mass = calc.mass(cell);
    if depth_left > 0 {
        let (lo, hi, mean) = calc.split_at_mean(cell)?;
        if calc.mass(lo) > ZERO_SIDE_REL * mass && calc.mass(hi) > ZERO_SIDE_REL * mass {
            let left = rec_tree(calc, lo, (interval.0, mean), depth_left - 1, pairs)?;
            let right = rec_tree(calc, hi, (mean, interval.1), depth_left - 1, pairs)?;
            return Ok(CellNode { interval, mass, mean, children: Some(Box::new((left, right))) });
        }
    }
    let mean = calc.mean_x(cell)?;
    pairs.push((mean, mass));
    Ok(CellNode { interval, mass, mean, children: None })
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Quantizes a discrete measure to at most `2^n` atoms by the mean-split
/// recursion. Preserves the mean (law of total expectation) and keeps the
/// support inside the input's hull; `n = 0` collapses to the point mass at
/// the mean.
pub fn quantize_discrete(m: &DiscreteMeasure, n: u32) -> DiscreteMeasure {
    let calc = DiscreteCalc::new(m);
    let (pairs, _) = quantize_cells(&calc, n, false).expect("discrete cells are infallible");
    DiscreteMeasure::from_pairs(pairs).expect("leaf masses form a probability measure")
}

/// Quantizes a source at level `n`, returning both the measure and the cell
/// tree that produced it. Gaussian and uniform cells use closed forms;
/// quantile sources are integrated adaptively to `1e-10` per cell.
pub fn quantize_source(s: &SourceSpec, n: u32) -> Result<(DiscreteMeasure, CellTree)> {
    let (tree, pairs) = match s {
        SourceSpec::Gaussian { mean, std } => {
            build_tree(&GaussianCalc { mu: *mean, sigma: *std }, n)?
        }
        SourceSpec::Uniform { lo, hi } => build_tree(&UniformCalc { lo: *lo, hi: *hi }, n)?,
        SourceSpec::Discrete(m) => build_tree(&DiscreteCalc::new(m), n)?,
        SourceSpec::Quantile(q) => build_tree(&QuantileCalc { q }, n)?,
    };
    Ok((DiscreteMeasure::from_pairs(pairs)?, tree))
}

/// Exact `W1(mu, T(mu, n))`: the mass-weighted sum over cells of the
/// conditional absolute deviation from the cell mean.
pub fn quantization_error(s: &SourceSpec, n: u32) -> Result<f64> {
    let (_, err) = match s {
        SourceSpec::Gaussian { mean, std } => {
            quantize_cells(&GaussianCalc { mu: *mean, sigma: *std }, n, true)?
        }
        SourceSpec::Uniform { lo, hi } => quantize_cells(&UniformCalc { lo: *lo, hi: *hi }, n, true)?,
        SourceSpec::Discrete(m) => quantize_cells(&DiscreteCalc::new(m), n, true)?,
        SourceSpec::Quantile(q) => quantize_cells(&QuantileCalc { q }, n, true)?,
    };
    Ok(err)
}

/// Caps a measure's support at `2^n` atoms: identity when the support
/// already fits, otherwise one application of the quantizer.
pub fn compress(m: &DiscreteMeasure, n: u32) -> DiscreteMeasure {
    if (m.len() as u128) <= (1u128 << n.min(127)) {
        m.clone()
    } else {
        quantize_discrete(m, n)
    }
}

/// `E[|X - X^(n)|]` under the cell coupling that sends each atom to its
/// cell's conditional mean. Equals `wasserstein1(m, quantize_discrete(m, n))`.
pub fn cell_coupling_error(m: &DiscreteMeasure, n: u32) -> f64 {
    let calc = DiscreteCalc::new(m);
    let (_, err) = quantize_cells(&calc, n, true).expect("discrete cells are infallible");
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::wasserstein1;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn ladder(m: u32) -> DiscreteMeasure {
        let atoms: Vec<f64> = (1..=(1u32 << m)).map(f64::from).collect();
        DiscreteMeasure::uniform_on(&atoms).unwrap()
    }

    #[test]
    fn point_mass_is_fixed_point() {
        let d = DiscreteMeasure::dirac(7.5);
        for n in 0..6 {
            assert_eq!(quantize_discrete(&d, n), d);
        }
    }

    #[test]
    fn coin_splits_exactly_at_mean() {
        let coin = DiscreteMeasure::from_parts(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize_discrete(&coin, 1), coin);
    }

    #[test]
    fn ladder_one_level() {
        let q = quantize_discrete(&ladder(3), 1);
        assert_eq!(q.atoms(), &[2.5, 6.5]);
        assert_eq!(q.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn ladder_two_levels() {
        let q = quantize_discrete(&ladder(3), 2);
        assert_eq!(q.atoms(), &[1.5, 3.5, 5.5, 7.5]);
        assert!(q.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn level_zero_is_mean() {
        let m = DiscreteMeasure::from_parts(vec![0.0, 1.0, 5.0], vec![0.2, 0.3, 0.5]).unwrap();
        let q = quantize_discrete(&m, 0);
        assert_eq!(q.len(), 1);
        assert_close(q.atoms()[0], m.mean(), 1e-15);
    }

    #[test]
    fn uniform_source_one_level() {
        let (m, tree) = quantize_source(&SourceSpec::uniform(0.0, 1.0).unwrap(), 1).unwrap();
        assert_eq!(m.atoms(), &[0.25, 0.75]);
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert_eq!(tree.depth(), 1);
    }

    #[test]
    fn gaussian_source_one_level() {
        let (m, _) = quantize_source(&SourceSpec::gaussian(0.0, 1.0).unwrap(), 1).unwrap();
        let c = (2.0 / std::f64::consts::PI).sqrt();
        assert_close(m.atoms()[0], -c, 1e-15);
        assert_close(m.atoms()[1], c, 1e-15);
    }

    #[test]
    fn discrete_source_two_levels() {
        let (m, tree) = quantize_source(&SourceSpec::discrete(ladder(3)), 2).unwrap();
        assert_eq!(m.atoms(), &[1.5, 3.5, 5.5, 7.5]);
        assert_eq!(tree.leaves().len(), 4);
    }

    #[test]
    fn quantization_error_examples() {
        let dirac = SourceSpec::discrete(DiscreteMeasure::dirac(3.0));
        assert_eq!(quantization_error(&dirac, 4).unwrap(), 0.0);
        // Worst-case dyadic ladder: 2^(m-n)/4 while n < m, 0 afterwards.
        for m in 1..=6u32 {
            let src = SourceSpec::discrete(ladder(m));
            for n in 0..=m + 2 {
                let expect = if n < m { (1u64 << (m - n)) as f64 / 4.0 } else { 0.0 };
                assert_close(quantization_error(&src, n).unwrap(), expect, 1e-12);
            }
        }
        let u01 = SourceSpec::uniform(0.0, 1.0).unwrap();
        assert_close(quantization_error(&u01, 0).unwrap(), 0.25, 1e-15);
    }

    #[test]
    fn error_matches_direct_w1_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let k = rng.random_range(2..40);
            let pairs: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(-50.0..50.0), rng.random_range(0.05..1.0)))
                .collect();
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let m = DiscreteMeasure::from_pairs(
                pairs.into_iter().map(|(x, w)| (x, w / total)).collect(),
            )
            .unwrap();
            for n in 0..6 {
                let src = SourceSpec::discrete(m.clone());
                let lemma_route = quantization_error(&src, n).unwrap();
                let direct = wasserstein1(&m, &quantize_discrete(&m, n));
                assert_close(lemma_route, direct, 1e-10);
            }
        }
    }

    #[test]
    fn cell_coupling_matches_w1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let k = rng.random_range(2..32);
            let pairs: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(-20.0..20.0), rng.random_range(0.05..1.0)))
                .collect();
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let m = DiscreteMeasure::from_pairs(
                pairs.into_iter().map(|(x, w)| (x, w / total)).collect(),
            )
            .unwrap();
            let n = rng.random_range(1..5);
            assert_close(
                cell_coupling_error(&m, n),
                wasserstein1(&m, &quantize_discrete(&m, n)),
                1e-10,
            );
        }
        // Every atom isolated: coupling error vanishes.
        let m = DiscreteMeasure::uniform_on(&[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(cell_coupling_error(&m, 8), 0.0);
        // Ladder with m=3, n=1.
        assert_close(cell_coupling_error(&ladder(3), 1), 1.0, 1e-12);
    }

    #[test]
    fn compress_identity_and_cap() {
        let four = DiscreteMeasure::uniform_on(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(compress(&four, 2), four);
        let l3 = ladder(3);
        assert_eq!(compress(&l3, 3), l3);
        let c = compress(&l3, 1);
        assert_eq!(c.atoms(), &[2.5, 6.5]);
    }

    #[test]
    fn tree_consistency() {
        let (_, tree) = quantize_source(&SourceSpec::gaussian(0.0, 1.0).unwrap(), 5).unwrap();
        fn check(n: &CellNode) {
            if let Some(kids) = &n.children {
                assert_close(kids.0.mass + kids.1.mass, n.mass, 1e-12);
                assert_eq!(kids.0.interval.1, kids.1.interval.0); // partition
                check(&kids.0);
                check(&kids.1);
            }
        }
        check(tree.root());
        let leaves = tree.leaves();
        let total: f64 = leaves.iter().map(|l| l.mass).sum();
        assert_close(total, 1.0, 1e-12);
        for w in leaves.windows(2) {
            assert!(w[0].mean < w[1].mean);
        }
    }

    #[test]
    fn tree_json_has_expected_fields() {
        let (_, tree) = quantize_source(&SourceSpec::uniform(0.0, 1.0).unwrap(), 1).unwrap();
        let json = tree.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["interval"][0].is_null()); // root = whole line
        assert_eq!(v["mass"], 1.0);
        assert_eq!(v["children"][0]["interval"][1], 0.5);
    }

    #[test]
    fn quantile_table_matches_uniform() {
        let table = SourceSpec::quantile_table(vec![(0.0, 0.0), (1.0, 2.0)]).unwrap();
        let closed = SourceSpec::uniform(0.0, 2.0).unwrap();
        for n in 0..5 {
            let (mt, _) = quantize_source(&table, n).unwrap();
            let (mc, _) = quantize_source(&closed, n).unwrap();
            assert_eq!(mt.len(), mc.len());
            for (a, b) in mt.atoms().iter().zip(mc.atoms()) {
                assert_close(*a, *b, 1e-9);
            }
            assert_close(
                quantization_error(&table, n).unwrap(),
                quantization_error(&closed, n).unwrap(),
                1e-9,
            );
        }
    }

    #[test]
    fn quantile_fn_matches_uniform() {
        let func = SourceSpec::quantile_fn(Arc::new(|u| 2.0 * u)).unwrap();
        let closed = SourceSpec::uniform(0.0, 2.0).unwrap();
        for n in 0..5 {
            let (mf, _) = quantize_source(&func, n).unwrap();
            let (mc, _) = quantize_source(&closed, n).unwrap();
            for (a, b) in mf.atoms().iter().zip(mc.atoms()) {
                assert_close(*a, *b, 1e-9);
            }
        }
    }

    #[test]
    fn quantile_with_flat_region_stops_cleanly() {
        // Two-point law as a step quantile: flat at 0, jump to 1 at u = 1/2.
        let q = SourceSpec::quantile_fn(Arc::new(|u| if u < 0.5 { 0.0 } else { 1.0 })).unwrap();
        let (m, _) = quantize_source(&q, 4).unwrap();
        assert_eq!(m.len(), 2);
        assert_close(m.atoms()[0], 0.0, 1e-8);
        assert_close(m.atoms()[1], 1.0, 1e-8);
        assert_close(m.weights()[0], 0.5, 1e-8);
    }

    #[test]
    fn non_integrable_quantile_errors() {
        let res = SourceSpec::quantile_fn(Arc::new(|u| 1.0 / (1.0 - u)));
        assert!(res.is_err()); // infinite at u = 1
    }

    #[test]
    fn source_validation() {
        assert!(SourceSpec::gaussian(0.0, 0.0).is_err());
        assert!(SourceSpec::uniform(1.0, 1.0).is_err());
        assert!(SourceSpec::quantile_table(vec![(0.0, 1.0), (1.0, 0.0)]).is_err());
    }

    prop_compose! {
        fn arb_measure()(n in 2usize..64)(
            atoms in prop::collection::vec(-1000.0f64..1000.0, n),
            raw in prop::collection::vec(0.01f64..1.0, n),
        ) -> DiscreteMeasure {
            let total: f64 = raw.iter().sum();
            DiscreteMeasure::from_parts(
                atoms,
                raw.iter().map(|w| w / total).collect(),
            ).unwrap()
        }
    }

    proptest! {
        #[test]
        fn mean_preserved_and_support_bounded(m in arb_measure(), n in 0u32..10) {
            let q = quantize_discrete(&m, n);
            prop_assert!((q.mean() - m.mean()).abs() <= 1e-10 * m.mean().abs().max(1.0));
            prop_assert!((q.len() as u64) <= 1u64 << n);
            prop_assert!(q.min() >= m.min());
            prop_assert!(q.max() <= m.max());
        }

        #[test]
        fn discrete_upper_bound(m in arb_measure(), n in 1u32..8) {
            // W1(mu, mu^(n)) <= diam(supp mu) / 2^(n+1) for n <= log2(atoms).
            prop_assume!((1usize << n) <= m.len());
            let err = wasserstein1(&m, &quantize_discrete(&m, n));
            let bound = m.diameter() / (1u64 << (n + 1)) as f64;
            prop_assert!(err <= bound * (1.0 + 1e-9) + 1e-12);
        }
    }
}
