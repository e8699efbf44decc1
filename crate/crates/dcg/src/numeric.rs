//! Small numeric helpers shared across modules.

/// Compensated (Kahan) sum of an iterator of f64 terms.
pub(crate) fn kahan_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for t in terms {
        let y = t - c;
        let s = sum + y;
        c = (s - sum) - y;
        sum = s;
    }
    sum
}

/// Running compensated accumulator; used where a prefix has to be recorded
/// after every term.
#[derive(Clone, Copy, Default)]
pub(crate) struct KahanAcc {
    sum: f64,
    c: f64,
}

impl KahanAcc {
    pub fn add(&mut self, t: f64) {
        let y = t - self.c;
        let s = self.sum + y;
        self.c = (s - self.sum) - y;
        self.sum = s;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Ordinary least squares fit of `y = intercept + slope * x`.
/// Returns `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = kahan_sum(xs.iter().copied()) / n;
    let my = kahan_sum(ys.iter().copied()) / n;
    let sxy = kahan_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = kahan_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let syy = kahan_sum(ys.iter().map(|y| (y - my) * (y - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        // 1 + 1e-16 * 10_000 loses everything under naive summation order.
        let mut terms = vec![1.0];
        terms.extend(std::iter::repeat(1e-16).take(10_000));
        let s = kahan_sum(terms.iter().copied());
        assert!((s - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
