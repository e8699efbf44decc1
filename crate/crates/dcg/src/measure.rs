//! Finite discrete probability measures on the real line and exact
//! one-dimensional Wasserstein-1 computations.
//!
//! A [`DiscreteMeasure`] keeps strictly increasing atom positions with
//! positive weights summing to one. It is the universal currency of the
//! crate: sources are quantized into it, graph nodes push it forward, and
//! error bounds are measured against it with [`wasserstein1`].

use crate::numeric::{kahan_sum, KahanAcc};
use crate::{Error, Result};

/// Atom positions closer than this are merged during construction. Pushforward
/// maps produce float noise well below this scale; genuine support structure
/// sits well above it.
pub const ATOM_MERGE_TOL: f64 = 1e-12;

/// Weight sums farther than this from one indicate an upstream bug rather
/// than accumulated rounding, and construction fails.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Weight sums within this of one are accepted verbatim so that
/// reconstruction of an already-normalized measure is bit-stable.
const RENORM_SKIP_TOL: f64 = 1e-13;

/// A finite probability measure `sum_i w_i * delta_{x_i}` on the real line.
///
/// Invariants established at construction and preserved thereafter:
/// atoms strictly increasing, every weight positive, weights summing to one
/// within `1e-12`. Values are immutable after construction, so measures can
/// be shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from parallel atom/weight lists.
    ///
    /// Atoms are sorted, positions within [`ATOM_MERGE_TOL`] are merged by
    /// weight addition (the merged position is the weight-weighted mean so
    /// the measure's mean is unaffected), zero weights are dropped, and the
    /// weight sum is renormalized if it is within [`WEIGHT_SUM_TOL`] of one.
    pub fn from_parts(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms vs {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights).collect();
        Self::from_pairs(pairs)
    }

    /// Builds a measure from unsorted `(position, weight)` pairs.
    pub fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        for &(x, w) in &pairs {
            if !x.is_finite() {
                return Err(Error::InvalidMeasure(format!("non-finite atom {x}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidMeasure(format!("invalid weight {w} at atom {x}")));
            }
        }
        pairs.retain(|&(_, w)| w > 0.0);
        if pairs.is_empty() {
            return Err(Error::InvalidMeasure("all weights zero".into()));
        }
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

        let mut atoms = Vec::with_capacity(pairs.len());
        let mut weights = Vec::with_capacity(pairs.len());
        let (mut cur_x, mut cur_w) = pairs[0];
        for &(x, w) in &pairs[1..] {
            if x - cur_x <= ATOM_MERGE_TOL {
                // Weighted-mean position keeps the measure's mean intact;
                // exact duplicates keep their exact position.
                let tw = cur_w + w;
                if x != cur_x {
                    cur_x = (cur_x * cur_w + x * w) / tw;
                }
                cur_w = tw;
            } else {
                atoms.push(cur_x);
                weights.push(cur_w);
                cur_x = x;
                cur_w = w;
            }
        }
        atoms.push(cur_x);
        weights.push(cur_w);

        let total = kahan_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if (total - 1.0).abs() > RENORM_SKIP_TOL {
            for w in &mut weights {
                *w /= total;
            }
        }
        Ok(Self { atoms, weights })
    }

    /// The point mass at `x`.
    pub fn dirac(x: f64) -> Self {
        Self { atoms: vec![x], weights: vec![1.0] }
    }

    /// Equal weights on the given positions (duplicates merged).
    pub fn uniform_on(positions: &[f64]) -> Result<Self> {
        let w = 1.0 / positions.len() as f64;
        Self::from_pairs(positions.iter().map(|&x| (x, w)).collect())
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of support atoms.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least one atom
    }

    pub fn min(&self) -> f64 {
        self.atoms[0]
    }

    pub fn max(&self) -> f64 {
        *self.atoms.last().unwrap()
    }

    /// `sum_i w_i x_i`.
    pub fn mean(&self) -> f64 {
        kahan_sum(self.atoms.iter().zip(&self.weights).map(|(x, w)| x * w))
    }

    /// `max atom - min atom`; zero for a point mass.
    pub fn diameter(&self) -> f64 {
        self.max() - self.min()
    }

    /// Right-continuous CDF: total weight of atoms `<= x`.
    pub fn cdf_at(&self, x: f64) -> f64 {
        let k = self.atoms.partition_point(|&a| a <= x);
        kahan_sum(self.weights[..k].iter().copied())
    }

    /// Serializes as `atom,weight` CSV rows with 17 significant digits
    /// (lossless for f64). `comments` are emitted first as `#`-prefixed lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("atom,weight\n");
        for (x, w) in self.atoms.iter().zip(&self.weights) {
            out.push_str(&format!("{x:.16e},{w:.16e}\n"));
        }
        out
    }

    /// Parses the CSV format produced by [`Self::to_csv`]; `#` lines and the
    /// header row are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("atom") {
                continue;
            }
            let (sx, sw) = line.split_once(',').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `atom,weight`", lineno + 1))
            })?;
            let x: f64 = sx.trim().parse().map_err(|e| {
                Error::Parse(format!("line {}: bad atom `{sx}`: {e}", lineno + 1))
            })?;
            let w: f64 = sw.trim().parse().map_err(|e| {
                Error::Parse(format!("line {}: bad weight `{sw}`: {e}", lineno + 1))
            })?;
            pairs.push((x, w));
        }
        Self::from_pairs(pairs)
    }
}

/// Exact Wasserstein-1 distance between two discrete measures, computed as
/// the integral of `|F_a - F_b|` by sweeping the merged sorted support.
///
/// Symmetric, nonnegative, and zero exactly on equal measures. Cost is
/// `O(len_a + len_b)` after the measures' own construction-time sorts.
pub fn wasserstein1(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let (xa, wa) = (a.atoms(), a.weights());
    let (xb, wb) = (b.atoms(), b.weights());
    let mut i = 0;
    let mut j = 0;
    let mut fa = KahanAcc::default();
    let mut fb = KahanAcc::default();
    let mut total = KahanAcc::default();
    let mut prev: Option<f64> = None;
    while i < xa.len() || j < xb.len() {
        let x = match (xa.get(i), xb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total.add((fa.value() - fb.value()).abs() * (x - p));
        }
        while i < xa.len() && xa[i] == x {
            fa.add(wa[i]);
            i += 1;
        }
        while j < xb.len() && xb[j] == x {
            fb.add(wb[j]);
            j += 1;
        }
        prev = Some(x);
    }
    total.value()
}

/// Empirical measure of a sample list: weight `1/N` per sample, ties merged.
pub fn empirical_from_samples(samples: &[f64]) -> Result<DiscreteMeasure> {
    if samples.is_empty() {
        return Err(Error::InvalidMeasure("empty sample list".into()));
    }
    let w = 1.0 / samples.len() as f64;
    DiscreteMeasure::from_pairs(samples.iter().map(|&x| (x, w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn mean_examples() {
        assert_eq!(DiscreteMeasure::dirac(5.0).mean(), 5.0);
        let coin = DiscreteMeasure::from_parts(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(coin.mean(), 0.5);
        let u8 = DiscreteMeasure::uniform_on(&[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(u8.mean(), 4.5);
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(DiscreteMeasure::dirac(3.0).diameter(), 0.0);
        let u8 = DiscreteMeasure::uniform_on(&[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(u8.diameter(), 7.0);
        let two = DiscreteMeasure::from_parts(vec![-2.0, 6.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(two.diameter(), 8.0);
    }

    #[test]
    fn cdf_examples() {
        let d0 = DiscreteMeasure::dirac(0.0);
        assert_eq!(d0.cdf_at(-1.0), 0.0);
        assert_eq!(d0.cdf_at(0.0), 1.0); // right continuity at the atom
        let u8 = DiscreteMeasure::uniform_on(&[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(u8.cdf_at(4.0), 0.5);
    }

    #[test]
    fn w1_examples() {
        let d0 = DiscreteMeasure::dirac(0.0);
        let d1 = DiscreteMeasure::dirac(1.0);
        assert_eq!(wasserstein1(&d0, &d1), 1.0);
        let u8 = DiscreteMeasure::uniform_on(&[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(wasserstein1(&u8, &u8), 0.0);
        // Two-atom summary of the dyadic ladder: 2^(m-n)/4 with m=3, n=1.
        let q = DiscreteMeasure::from_parts(vec![2.5, 6.5], vec![0.5, 0.5]).unwrap();
        assert_close(wasserstein1(&u8, &q), 1.0, 1e-15);
    }

    #[test]
    fn empirical_examples() {
        let m = empirical_from_samples(&[3.0]).unwrap();
        assert_eq!(m, DiscreteMeasure::dirac(3.0));
        let m = empirical_from_samples(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.atoms(), &[1.0, 2.0]);
        assert_close(m.weights()[0], 2.0 / 3.0, 1e-15);
        assert!(empirical_from_samples(&[]).is_err());
    }

    #[test]
    fn construction_merges_and_drops() {
        let m = DiscreteMeasure::from_parts(
            vec![1.0, 1.0 + 5e-13, 2.0, 3.0],
            vec![0.25, 0.25, 0.5, 0.0],
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_close(m.weights()[0], 0.5, 1e-15);
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(DiscreteMeasure::from_parts(vec![], vec![]).is_err());
        assert!(DiscreteMeasure::from_parts(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiscreteMeasure::from_parts(vec![0.0], vec![-1.0]).is_err());
        // Off by more than the 1e-9 renorm window.
        assert!(DiscreteMeasure::from_parts(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn construction_renormalizes_small_drift() {
        let m = DiscreteMeasure::from_parts(vec![0.0, 1.0], vec![0.5 + 2e-10, 0.5]).unwrap();
        assert_close(kahan_sum(m.weights().iter().copied()), 1.0, 1e-15);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = DiscreteMeasure::from_parts(
            vec![-1.5, 0.1, std::f64::consts::PI],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let text = m.to_csv(&["seed: 7".into()]);
        let back = DiscreteMeasure::from_csv(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn quantile_coupling_cross_check() {
        // For equal-count empirical measures, W1 equals the mean absolute
        // difference of sorted samples (the quantile coupling).
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..200 {
            let n = 1 + (case % 37) * 3 + 2;
            let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut ys: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = empirical_from_samples(&xs).unwrap();
            let b = empirical_from_samples(&ys).unwrap();
            xs.sort_unstable_by(f64::total_cmp);
            ys.sort_unstable_by(f64::total_cmp);
            let coupled = kahan_sum(xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()))
                / n as f64;
            assert_close(wasserstein1(&a, &b), coupled, 1e-10);
        }
    }

    prop_compose! {
        fn arb_measure()(n in 1usize..12)(
            atoms in prop::collection::vec(-100.0f64..100.0, n),
            raw in prop::collection::vec(0.01f64..1.0, n),
        ) -> DiscreteMeasure {
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            DiscreteMeasure::from_parts(atoms, weights).unwrap()
        }
    }

    proptest! {
        #[test]
        fn metric_axioms(a in arb_measure(), b in arb_measure(), c in arb_measure()) {
            let dab = wasserstein1(&a, &b);
            let dba = wasserstein1(&b, &a);
            prop_assert_eq!(dab, dba); // sweep is exactly symmetric
            prop_assert!(dab >= 0.0);
            prop_assert_eq!(wasserstein1(&a, &a), 0.0);
            let dac = wasserstein1(&a, &c);
            let dcb = wasserstein1(&c, &b);
            prop_assert!(dab <= dac + dcb + 1e-9);
        }

        #[test]
        fn construction_idempotent(m in arb_measure()) {
            let again = DiscreteMeasure::from_parts(
                m.atoms().to_vec(),
                m.weights().to_vec(),
            ).unwrap();
            prop_assert_eq!(&m, &again);
        }

        #[test]
        fn cdf_monotone_and_reaches_one(m in arb_measure()) {
            let mut prev = 0.0;
            for &x in m.atoms() {
                let f = m.cdf_at(x);
                prop_assert!(f >= prev);
                prev = f;
            }
            prop_assert!((m.cdf_at(m.max()) - 1.0).abs() <= 1e-12);
        }
    }
}
