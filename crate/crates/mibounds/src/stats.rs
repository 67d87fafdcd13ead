//! Numerically careful reductions and per-draw summaries.

use rayon::prelude::*;

/// `log Σ exp(v)` with max subtraction. Empty input gives `-inf`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|&a| (a - m).exp()).sum();
    m + s.ln()
}

/// `log (1/n) Σ exp(v)`. Computed as `m + log mean exp(v - m)`, so equal
/// entries (and in particular a single entry) come back unchanged.
pub fn logmeanexp(v: &[f64]) -> f64 {
    if v.len() == 1 {
        return v[0];
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&a| (a - m).exp()).sum();
    m + (s / v.len() as f64).ln()
}

/// Softmax of `v` written into a new vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let l = logsumexp(v);
    v.iter().map(|&a| (a - l).exp()).collect()
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(v: &[f64]) -> Summary {
        let n = v.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std_error: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let ss: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std_error, n }
    }

    /// 95% interval, `mean ± 1.96·se`.
    pub fn ci95(&self) -> (f64, f64) {
        (self.mean - 1.96 * self.std_error, self.mean + 1.96 * self.std_error)
    }
}

/// Evaluate `f` for draws `0..n` on the current rayon pool. Results come back
/// in draw order, so every reduction over them is independent of scheduling.
pub fn per_draw<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n as u64).into_par_iter().map(f).collect()
}

/// Fallible variant of [`per_draw`]; the first error in draw order wins.
pub fn try_per_draw<T, F>(n: usize, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> crate::Result<T> + Sync + Send,
{
    let out: Vec<crate::Result<T>> = per_draw(n, f);
    out.into_iter().collect()
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_survives_large_inputs() {
        let v = [700.0, 700.0, -700.0];
        assert!((logsumexp(&v) - (700.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn logmeanexp_single_is_identity() {
        for &a in &[-3.25, 0.0, 17.5, 1e-300] {
            assert_eq!(logmeanexp(&[a]), a);
            assert_eq!(logmeanexp(&[a; 7]), a);
        }
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.std_error - sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn slope_of_exact_line() {
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 0.0, -2.0];
        assert!((ols_slope(&x, &y) + 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn logsumexp_bounds(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&v);
            prop_assert!(l >= m - 1e-12);
            prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let s: f64 = softmax(&v).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
