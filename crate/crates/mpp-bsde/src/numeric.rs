//! Numerical primitives shared across the crate: compensated summation,
//! log-domain accumulation, and Poisson probability rows.
//!
//! Exponential test functionals amplify rounding, so every expectation in the
//! crate is accumulated with Kahan compensation, and quantities that can leave
//! the f64 range (exponential moments of unbounded terminals) are carried in
//! the log domain.

use crate::{Error, Result};

/// Kahan–Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator.
pub fn ksum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// `log(Σ exp(x_i))` with the usual max shift; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // empty, all -inf, or a +inf/NaN term dominates
    }
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add((x - m).exp());
    }
    m + acc.value().ln()
}

/// Streaming log-sum-exp accumulator (two-term rescaling), for sums too long
/// to buffer.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, scaled: 0.0 }
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.scaled += (x - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

/// `e^x − 1 − x`, accurate near zero.
#[inline]
pub fn exp_m1_m_x(x: f64) -> f64 {
    x.exp_m1() - x
}

/// `φ · (e^x − 1 − x)` guarded against intermediate overflow: for large
/// positive `x` the product is formed as `e^{ln φ + x} − φ(1 + x)` so a tiny
/// weight can tame a huge exponent.
#[inline]
pub fn weighted_exp_m1_m_x(phi: f64, x: f64) -> f64 {
    if phi == 0.0 {
        return 0.0;
    }
    if x > 700.0 {
        (phi.ln() + x).exp() - phi * (1.0 + x)
    } else {
        phi * exp_m1_m_x(x)
    }
}

/// Poisson(mean) probability row `p_0..p_j`, extended until the tail mass
/// drops below `tail_tol`. Errors if that takes more than `ceiling` terms.
///
/// Probabilities are computed by the stable forward recursion
/// `p_{j+1} = p_j · mean / (j+1)`; the returned `tail` is `1 − Σ p_j`
/// evaluated with compensation.
pub fn poisson_row(mean: f64, tail_tol: f64, ceiling: usize) -> Result<(Vec<f64>, f64)> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::Validation(format!(
            "poisson_row: mean must be finite and nonnegative, got {mean}"
        )));
    }
    if !(tail_tol > 0.0) {
        return Err(Error::Validation(format!(
            "poisson_row: tail tolerance must be positive, got {tail_tol}"
        )));
    }
    let mut probs = Vec::with_capacity(8);
    let mut p = (-mean).exp();
    let mut cum = KahanSum::new();
    let mut j = 0usize;
    loop {
        probs.push(p);
        cum.add(p);
        let tail = 1.0 - cum.value();
        if tail < tail_tol {
            return Ok((probs, tail.max(0.0)));
        }
        j += 1;
        if j > ceiling {
            // Keep running the cheap recursion to name the required length.
            let mut jj = j;
            let mut pp = p;
            let mut cc = cum;
            while 1.0 - cc.value() >= tail_tol && jj < 1_000_000 {
                pp = pp * mean / jj as f64;
                cc.add(pp);
                jj += 1;
            }
            return Err(Error::TailTolerance { tail_tol, required: jj, ceiling });
        }
        // Same association as `poisson_pmf` so the two rows agree bitwise.
        p = p * mean / j as f64;
    }
}

/// Fixed-length Poisson pmf `p_j = e^{-mean}·mean^j/j!` for `j < len`.
/// Deep entries may underflow to zero; use [`poisson_log_pmf`] when the
/// terms feed exponential weights.
pub fn poisson_pmf(mean: f64, len: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(len.max(1));
    row.push((-mean).exp());
    for j in 1..len {
        let prev = row[j - 1];
        row.push(prev * mean / j as f64);
    }
    row
}

/// Fixed-length log-pmf `ln p_j` of a Poisson(`mean`) variable; `mean = 0`
/// gives `[0, −∞, −∞, …]`.
pub fn poisson_log_pmf(mean: f64, len: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(len.max(1));
    if mean == 0.0 {
        row.push(0.0);
        row.resize(len.max(1), f64::NEG_INFINITY);
        return row;
    }
    row.push(-mean);
    let lm = mean.ln();
    for j in 1..len {
        let prev = row[j - 1];
        row.push(prev + lm - (j as f64).ln());
    }
    row
}

/// Format with 17 significant digits (round-trip exact for f64), '.' decimal.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
