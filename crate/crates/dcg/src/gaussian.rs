//! Closed-form standard-normal machinery.
//!
//! Everything here reduces to three primitives: the density `phi`, the upper
//! tail `tail` (evaluated through the complementary error function, never as
//! `1 - cdf`, which cancels catastrophically past `x ~ 6`), and truncated
//! first moments. On top of those sit the tail conditional mean, the omega
//! sequence of iterated tail conditional means, and the dyadic quantization
//! rate table for the standard normal.

use crate::quantize::{quantization_error, SourceSpec};
use crate::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Above this point `tail` underflows toward the subnormal range
/// (full underflow near `x ~ 37.6`), so the tail conditional mean switches to
/// the three-term asymptotic expansion
/// `tail(x) ~ phi(x) * (1/x - 1/x^3 + 3/x^5)`.
const ASYMPTOTIC_SWITCH: f64 = 34.0;

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper tail probability `P(X > x)`.
pub fn tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// CDF `P(X <= x)`.
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Probability mass of the interval `(a, b]`, stable in both tails.
///
/// Either endpoint may be infinite. The branch keeps both CDF evaluations on
/// the same side of the origin as the interval, avoiding cancellation of
/// near-one values; it also makes the computation exactly mirror-symmetric,
/// so quantizing a centered Gaussian yields bit-symmetric cells.
pub fn interval_mass(a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return 1.0;
    }
    if a + b >= 0.0 {
        tail(a) - tail(b)
    } else {
        cdf(b) - cdf(a)
    }
}

/// Truncated first moment `E[X; a < X <= b]`, equal to `phi(a) - phi(b)`.
pub fn interval_first_moment(a: f64, b: f64) -> f64 {
    let pa = if a.is_finite() { pdf(a) } else { 0.0 };
    let pb = if b.is_finite() { pdf(b) } else { 0.0 };
    pa - pb
}

/// Truncated absolute deviation `E[|X - c|; a < X <= b]` for `a <= c <= b`.
pub fn interval_abs_dev(a: f64, b: f64, c: f64) -> f64 {
    let pa = if a.is_finite() { pdf(a) } else { 0.0 };
    let pb = if b.is_finite() { pdf(b) } else { 0.0 };
    2.0 * pdf(c) - pa - pb + c * (interval_mass(a, c) - interval_mass(c, b))
}

/// Tail conditional mean `E[X | X >= x] = phi(x) / tail(x)`.
///
/// For `x` beyond the reliable range of `erfc` the three-term asymptotic
/// expansion of the tail is used instead, giving
/// `x^5 / (x^4 - x^2 + 3)` with relative error `O(x^-6)`.
pub fn conditional_mean_tail(x: f64) -> f64 {
    if x > ASYMPTOTIC_SWITCH {
        let x2 = x * x;
        return x * x2 * x2 / (x2 * x2 - x2 + 3.0);
    }
    pdf(x) / tail(x)
}

/// The sequence `omega_0 = E[X]`, `omega_{j+1} = E[X | X >= omega_j]` of
/// iterated tail conditional means; it grows like `sqrt(2 j)`.
#[derive(Debug, Clone)]
pub struct OmegaSequence {
    values: Vec<f64>,
}

impl OmegaSequence {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `omega_j`.
    pub fn get(&self, j: usize) -> f64 {
        self.values[j]
    }

    /// Number of recursion steps (values are `omega_0..=omega_steps`).
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }
}

/// Computes `omega_0..=omega_J` by iterating the tail conditional mean.
pub fn omega_sequence(j_max: usize) -> Result<OmegaSequence> {
    if j_max == 0 {
        return Err(Error::InvalidSource("omega sequence needs J >= 1".into()));
    }
    let mut values = Vec::with_capacity(j_max + 1);
    let mut w = 0.0;
    values.push(w);
    for _ in 0..j_max {
        w = conditional_mean_tail(w);
        values.push(w);
    }
    Ok(OmegaSequence { values })
}

/// Exact quantization error of the standard normal at levels `0..=n_max`,
/// one `(n, W1 error)` row per level.
///
/// Cell masses and conditional means are evaluated in closed form, so each
/// level costs `O(2^n)`. Consecutive error ratios approach 2, the optimal
/// dyadic rate. `n_max` is capped at 20; beyond that the cell count exceeds
/// desk scale.
pub fn gaussian_rate_table(n_max: u32) -> Result<Vec<(u32, f64)>> {
    if n_max == 0 || n_max > 20 {
        return Err(Error::InvalidSource(format!(
            "rate table level {n_max} outside 1..=20"
        )));
    }
    let std_normal = SourceSpec::gaussian(0.0, 1.0)?;
    (0..=n_max)
        .map(|n| Ok((n, quantization_error(&std_normal, n)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Test-only quadrature oracle: composite Simpson of `f` on `[a, b]`.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut s = f(a) + f(b);
        for i in 1..panels {
            let x = a + i as f64 * h;
            s += f(x) * if i % 2 == 0 { 2.0 } else { 4.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn conditional_mean_at_zero() {
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert_close(conditional_mean_tail(0.0), expect, 1e-15);
    }

    #[test]
    fn conditional_mean_full_line_limit() {
        // E[X | X >= -large] -> E[X] = 0.
        assert_close(conditional_mean_tail(-30.0), 0.0, 1e-15);
    }

    #[test]
    fn conditional_mean_against_quadrature() {
        // Independent oracle: integrate the tail numerically.
        let num = simpson(|t| t * pdf(t), 5.0, 45.0, 400_000);
        let den = simpson(pdf, 5.0, 45.0, 400_000);
        let oracle = num / den;
        assert_close(oracle, 5.186503967125842, 1e-10); // frozen from the oracle
        assert_close(conditional_mean_tail(5.0), oracle, 1e-9);
    }

    #[test]
    fn asymptotic_branch_is_continuous() {
        let below = pdf(ASYMPTOTIC_SWITCH) / tail(ASYMPTOTIC_SWITCH);
        let above = conditional_mean_tail(ASYMPTOTIC_SWITCH + 1e-9);
        assert!((below - above).abs() / below < 1e-7);
    }

    #[test]
    fn omega_first_values() {
        let om = omega_sequence(5).unwrap();
        assert_eq!(om.get(0), 0.0);
        assert_close(om.get(1), (2.0 / std::f64::consts::PI).sqrt(), 1e-15);
        assert!(om.values().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn omega_increments_match_inverse() {
        // omega_{j+1} - omega_j ~ 1/omega_j for large j.
        let om = omega_sequence(300).unwrap();
        for j in 100..300 {
            let inc = om.get(j + 1) - om.get(j);
            let rel = (inc * om.get(j) - 1.0).abs();
            assert!(rel < 0.05, "j={j} rel={rel}");
        }
    }

    #[test]
    fn interval_mass_symmetry_and_total() {
        assert_eq!(interval_mass(f64::NEG_INFINITY, f64::INFINITY), 1.0);
        assert_eq!(interval_mass(f64::NEG_INFINITY, 0.0), 0.5);
        assert_eq!(interval_mass(0.0, f64::INFINITY), 0.5);
        let m1 = interval_mass(-2.0, -1.0);
        let m2 = interval_mass(1.0, 2.0);
        assert_eq!(m1, m2);
        // Deep same-side interval: direct CDF difference would cancel.
        let deep = interval_mass(-10.0, -9.0);
        assert!(deep > 0.0 && deep < 1e-18);
    }

    #[test]
    fn rate_table_levels_zero_and_one() {
        let table = gaussian_rate_table(4).unwrap();
        assert_close(table[0].1, (2.0 / std::f64::consts::PI).sqrt(), 1e-14);
        // Half-normal mean absolute deviation about its mean, frozen from the
        // quadrature oracle below.
        assert_close(table[1].1, 0.4826241986859842, 1e-12);
    }

    #[test]
    fn rate_level_one_against_quadrature() {
        // Oracle: 2 * int_0^inf |x - sqrt(2/pi)| phi(x) dx.
        let m = (2.0 / std::f64::consts::PI).sqrt();
        let a = simpson(|t| (m - t) * pdf(t), 0.0, m, 200_000);
        let b = simpson(|t| (t - m) * pdf(t), m, 45.0, 400_000);
        let oracle = 2.0 * (a + b);
        assert_close(oracle, 0.4826241986859842, 1e-10);
    }

    #[test]
    fn rate_table_bounds() {
        assert!(gaussian_rate_table(0).is_err());
        assert!(gaussian_rate_table(21).is_err());
    }
}
