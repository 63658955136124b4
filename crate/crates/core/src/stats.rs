//! Small statistics helpers: binomial errors, Wilson intervals, pooled
//! comparisons and Pearson chi-square tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Standard error of a binomial proportion estimate.
pub fn binomial_stderr(successes: u64, trials: u64) -> f64 {
    if trials == 0 {
        return f64::NAN;
    }
    let p = successes as f64 / trials as f64;
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Standard error of a Bernoulli(p) mean over `n` samples, using the known `p`.
pub fn bernoulli_sigma(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Wilson score interval at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// `sqrt(a^2 + b^2)`.
pub fn pooled(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of observed counts against cell probabilities.
///
/// Cells with zero expected probability must be empty; any count there gives
/// a p-value of 0.
pub fn chi_square(observed: &[u64], probs: &[f64]) -> ChiSquare {
    assert_eq!(observed.len(), probs.len());
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0usize;
    let mut impossible = false;
    for (&o, &p) in observed.iter().zip(probs) {
        if p <= 0.0 {
            impossible |= o > 0;
            continue;
        }
        cells += 1;
        let e = p * n as f64;
        stat += (o as f64 - e).powi(2) / e;
    }
    let dof = cells.saturating_sub(1);
    let p_value = if impossible {
        0.0
    } else if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(stat)
    };
    ChiSquare { statistic: stat, dof, p_value }
}
