//! Monte Carlo estimators for `theta(p, q)`, `p_c(q)` and decay rates.
//!
//! Critical points are estimated from exact per-trial thresholds: with all
//! edge states driven by shared uniforms, each trial has a threshold `tau`
//! (the minimax edge weight on a path from the origin to the boundary) and
//! reaches at `p` iff `tau < p`. The reach fraction at any `p` is then the
//! empirical CDF of the thresholds, and bisection on it is exactly bisection
//! on the reach probability with the same trials reused at every step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::graph::{BaseGraph, Host};
use crate::lift::{build_lift, SwitchConfig};
use crate::perco::{invasion_threshold, lift_vertex_mask, reaches, sandwich_holds, threshold};
use crate::rng::{uniform_at, MasterSeed};
use crate::stats::{binomial_stderr, pooled, wilson_interval};

/// Normal quantile used for two-sided 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub p: f64,
    pub q: f64,
    pub graph: String,
    pub trials: u64,
    pub reach_count: u64,
    pub theta_hat: f64,
    pub stderr: f64,
}

/// Uniforms of trial `t`: the first `|E|` drive the switching bits
/// (`eta_e = [u < q]`), the next `2 |E|` the lifted edges.
///
/// Sharing them across `q` and `p` makes every estimate a monotone function
/// of the parameters for a fixed trial.
pub struct TrialUniforms {
    pub eta: Vec<f64>,
    pub omega: Vec<f64>,
}

pub fn trial_uniforms(g: &BaseGraph, seed: MasterSeed, label: &str, t: u64) -> TrialUniforms {
    let key = seed.key(label, t);
    let e = g.edge_count() as u64;
    TrialUniforms {
        eta: (0..e).map(|i| uniform_at(key, i)).collect(),
        omega: (e..3 * e).map(|i| uniform_at(key, i)).collect(),
    }
}

fn check_trials(trials: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    Ok(())
}

/// Fraction of trials where the cluster of `o_0` reaches the lifted boundary.
pub fn estimate_theta(g: &BaseGraph, q: f64, p: f64, trials: u64, seed: MasterSeed) -> Result<ThetaEstimate> {
    check_probability("q", q)?;
    check_probability("p", p)?;
    check_trials(trials)?;
    let boundary = lift_vertex_mask(&g.boundary());
    let origin = 2 * g.origin();
    let reach_count = (0..trials)
        .into_par_iter()
        .map(|t| {
            let u = trial_uniforms(g, seed, "theta", t);
            let lift = build_lift(g, SwitchConfig::from_uniforms(&u.eta, q)).expect("matching length");
            reaches(&lift, &threshold(&u.omega, p), origin, &boundary) as u64
        })
        .sum::<u64>();
    Ok(ThetaEstimate {
        p,
        q,
        graph: g.kind().to_string(),
        trials,
        reach_count,
        theta_hat: reach_count as f64 / trials as f64,
        stderr: binomial_stderr(reach_count, trials),
    })
}

/// Per-sample comparison of base reach under `omega_min`, lift reach, and base reach under `omega_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichStats {
    pub p: f64,
    pub q: f64,
    pub trials: u64,
    pub reach_min: u64,
    pub reach_lift: u64,
    pub reach_max: u64,
    /// Trials where `min-reach => lift-reach => max-reach` fails.
    pub violations: u64,
    /// Trials where the cluster inclusion fails.
    pub inclusion_violations: u64,
}

pub fn theta_sandwich(g: &BaseGraph, q: f64, p: f64, trials: u64, seed: MasterSeed) -> Result<SandwichStats> {
    check_probability("q", q)?;
    check_probability("p", p)?;
    check_trials(trials)?;
    let base_boundary = g.boundary();
    let boundary = lift_vertex_mask(&base_boundary);
    let o = g.origin();
    let rows: Vec<[bool; 4]> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let u = trial_uniforms(g, seed, "sandwich", t);
            let lift = build_lift(g, SwitchConfig::from_uniforms(&u.eta, q)).expect("matching length");
            let omega = threshold(&u.omega, p);
            let pair = crate::perco::project_min_max(&lift, &omega).expect("matching length");
            [
                reaches(g, &pair.omega_min, o, &base_boundary),
                reaches(&lift, &omega, 2 * o, &boundary),
                reaches(g, &pair.omega_max, o, &base_boundary),
                sandwich_holds(g, &lift, &omega, o).expect("matching length"),
            ]
        })
        .collect();
    let mut s = SandwichStats {
        p,
        q,
        trials,
        reach_min: 0,
        reach_lift: 0,
        reach_max: 0,
        violations: 0,
        inclusion_violations: 0,
    };
    for [a, b, c, inc] in rows {
        s.reach_min += a as u64;
        s.reach_lift += b as u64;
        s.reach_max += c as u64;
        s.violations += ((a && !b) || (b && !c)) as u64;
        s.inclusion_violations += !inc as u64;
    }
    Ok(s)
}

/// Per-trial reach thresholds of `o_0` in the lift `G_q`.
pub fn lift_thresholds(g: &BaseGraph, q: f64, trials: u64, seed: MasterSeed) -> Result<Vec<f64>> {
    check_probability("q", q)?;
    check_trials(trials)?;
    let boundary = lift_vertex_mask(&g.boundary());
    let origin = 2 * g.origin();
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let u = trial_uniforms(g, seed, "pc", t);
            let lift = build_lift(g, SwitchConfig::from_uniforms(&u.eta, q)).expect("matching length");
            invasion_threshold(&lift, &u.omega, origin, &boundary)
        })
        .collect())
}

/// Per-trial reach thresholds of `o` in the base graph.
pub fn base_thresholds(g: &BaseGraph, trials: u64, seed: MasterSeed) -> Result<Vec<f64>> {
    check_trials(trials)?;
    let boundary = g.boundary();
    let origin = g.origin();
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let key = seed.key("pc-base", t);
            let w: Vec<f64> = (0..g.edge_count() as u64).map(|i| uniform_at(key, i)).collect();
            invasion_threshold(g, &w, origin, &boundary)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectionStep {
    pub lo: f64,
    pub hi: f64,
    pub mid: f64,
    pub reach_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcEstimate {
    pub q: Option<f64>,
    pub graph: String,
    pub trials: u64,
    pub trace: Vec<BisectionStep>,
    pub pc_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub stderr: f64,
}

/// Default number of bisection steps (resolution `2^-30`).
pub const BISECTION_STEPS: usize = 30;

fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let k = ((level * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1].clamp(0.0, 1.0)
}

/// Bisection for the `1/2` crossing of the reach fraction `#{tau < p} / n`.
///
/// The 95% interval is the range of `p` whose reach fraction lies in the
/// binomial band `1/2 +- z / (2 sqrt n)`, i.e. the corresponding empirical
/// quantiles of `tau`; the standard error is its half-width over `z`.
pub fn pc_from_thresholds(thresholds: &[f64], steps: usize, graph: String, q: Option<f64>) -> Result<PcEstimate> {
    if thresholds.is_empty() {
        return Err(Error::InvalidParameter("no thresholds".into()));
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let frac = |p: f64| sorted.partition_point(|&t| t < p) as f64 / n as f64;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        let f = frac(mid);
        trace.push(BisectionStep { lo, hi, mid, reach_fraction: f });
        if f >= 0.5 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let pc_hat = 0.5 * (lo + hi);
    let band = Z95 * 0.5 / (n as f64).sqrt();
    let ci_low = empirical_quantile(&sorted, 0.5 - band).min(pc_hat);
    let ci_high = empirical_quantile(&sorted, 0.5 + band).max(pc_hat);
    Ok(PcEstimate {
        q,
        graph,
        trials: n as u64,
        trace,
        pc_hat,
        ci_low,
        ci_high,
        stderr: (ci_high - ci_low) / (2.0 * Z95),
    })
}

/// `p_c(q)` of the lift of `g`.
pub fn estimate_pc(g: &BaseGraph, q: f64, trials: u64, seed: MasterSeed) -> Result<PcEstimate> {
    let th = lift_thresholds(g, q, trials, seed)?;
    pc_from_thresholds(&th, BISECTION_STEPS, g.kind().to_string(), Some(q))
}

/// `p_c` of the base graph itself.
pub fn estimate_pc_base(g: &BaseGraph, trials: u64, seed: MasterSeed) -> Result<PcEstimate> {
    let th = base_thresholds(g, trials, seed)?;
    pc_from_thresholds(&th, BISECTION_STEPS, g.kind().to_string(), None)
}

/// Estimates over a schedule of graphs (typically growing boxes); the last
/// entry is the headline estimate.
pub fn estimate_pc_schedule(schedule: &[(BaseGraph, u64)], q: f64, seed: MasterSeed) -> Result<Vec<PcEstimate>> {
    if schedule.is_empty() {
        return Err(Error::InvalidParameter("empty schedule".into()));
    }
    schedule.iter().map(|(g, trials)| estimate_pc(g, q, *trials, seed)).collect()
}

pub fn pc_curve(g: &BaseGraph, qs: &[f64], trials: u64, seed: MasterSeed) -> Result<Vec<PcEstimate>> {
    for &q in qs {
        if !(0.0 < q && q < 1.0) {
            return Err(Error::InvalidParameter(format!("q = {q} must lie in (0, 1)")));
        }
    }
    qs.iter().map(|&q| estimate_pc(g, q, trials, seed)).collect()
}

/// Max over adjacent pairs of `|dp| - C sqrt(dq) - sigmas * pooled stderr`.
pub fn continuity_report(curve: &[PcEstimate], constant: f64, sigmas: f64) -> crate::holder::HolderCheck {
    let points: Vec<crate::holder::CurvePoint> = curve
        .iter()
        .map(|e| crate::holder::CurvePoint {
            q: e.q.unwrap_or(f64::NAN),
            pc: e.pc_hat,
            stderr: e.stderr,
        })
        .collect();
    crate::holder::holder_bound_check(&points, constant, sigmas)
}

/// z-score of `p_c(base) - p_c(q)` against the pooled standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub base: PcEstimate,
    pub lift: PcEstimate,
    pub difference: f64,
    pub pooled_stderr: f64,
    pub z: f64,
}

pub fn monotonicity_test(g: &BaseGraph, q: f64, trials: u64, seed: MasterSeed) -> Result<MonotonicityReport> {
    if !(0.0 < q && q < 1.0) {
        return Err(Error::InvalidParameter(format!("q = {q} must lie in (0, 1)")));
    }
    let base = estimate_pc_base(g, trials, seed)?;
    let lift = estimate_pc(g, q, trials, seed)?;
    let difference = base.pc_hat - lift.pc_hat;
    let pooled_stderr = pooled(base.stderr, lift.stderr);
    Ok(MonotonicityReport {
        z: difference / pooled_stderr,
        base,
        lift,
        difference,
        pooled_stderr,
    })
}

/// One point of an empirical tail curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub n: usize,
    /// Trials with `|C_o| >= n`.
    pub count: u64,
    /// Among those, trials whose cluster touches the boundary.
    pub touching: u64,
    pub trials: u64,
}

impl TailPoint {
    pub fn psi(&self) -> f64 {
        self.count as f64 / self.trials as f64
    }

    pub fn stderr(&self) -> f64 {
        binomial_stderr(self.count, self.trials)
    }

    pub fn wilson(&self) -> (f64, f64) {
        wilson_interval(self.count, self.trials, Z95)
    }
}

/// Range-selection rules for [`fit_decay`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Smallest `n` considered.
    pub n_min: usize,
    /// Points need at least this many trials with `|C_o| >= n`.
    pub min_count: u64,
    /// Points are dropped once this fraction of the counted clusters touch the boundary.
    pub max_touching: f64,
    /// Fits with fewer points are flagged.
    pub min_points: usize,
    /// Fits with a lower R² are flagged.
    pub min_r2: f64,
    /// Only `n >= head_cut * n_hi` enters the fit, dropping the pre-asymptotic head.
    pub head_cut: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_min: 2,
            min_count: 50,
            max_touching: 0.05,
            min_points: 5,
            min_r2: 0.99,
            head_cut: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Decay rate: `psi_n ~ C exp(-c n)`.
    pub c_hat: f64,
    pub big_c_hat: f64,
    pub n_lo: usize,
    pub n_hi: usize,
    pub points: usize,
    pub r2: f64,
    pub low_confidence: bool,
    pub degenerate: bool,
}

/// Weighted least squares of `ln psi_n` on `n` over an automatically chosen range.
///
/// Weights are inverse delta-method variances `count / (1 - psi)`. The range
/// starts at `n_min` (and after any `psi = 1` points), stops at the first `n`
/// with too few counts or too many boundary-touching clusters, and keeps the
/// upper part `n >= head_cut * n_hi` of that window: the sub-exponential
/// prefactor bends `ln psi_n` at small `n`.
pub fn fit_decay(curve: &[TailPoint], opts: &FitOptions) -> DecayFit {
    let mut chosen = Vec::new();
    for pt in curve.iter().filter(|pt| pt.n >= opts.n_min) {
        if pt.count >= pt.trials {
            continue;
        }
        if pt.count < opts.min_count.max(1) {
            break;
        }
        if pt.touching as f64 > opts.max_touching * pt.count as f64 {
            break;
        }
        chosen.push(*pt);
    }
    if let Some(last) = chosen.last() {
        let cut = opts.head_cut * last.n as f64;
        chosen.retain(|pt| pt.n as f64 >= cut);
    }
    let degenerate_fit = |points| DecayFit {
        c_hat: f64::NAN,
        big_c_hat: f64::NAN,
        n_lo: 0,
        n_hi: 0,
        points,
        r2: f64::NAN,
        low_confidence: true,
        degenerate: true,
    };
    if chosen.len() < 2 {
        return degenerate_fit(chosen.len());
    }
    let xs: Vec<f64> = chosen.iter().map(|pt| pt.n as f64).collect();
    let ys: Vec<f64> = chosen.iter().map(|pt| pt.psi().ln()).collect();
    let ws: Vec<f64> = chosen.iter().map(|pt| pt.count as f64 / (1.0 - pt.psi())).collect();
    let (slope, intercept, r2) = weighted_regression(&xs, &ys, &ws);
    DecayFit {
        c_hat: -slope,
        big_c_hat: intercept.exp(),
        n_lo: chosen[0].n,
        n_hi: chosen[chosen.len() - 1].n,
        points: chosen.len(),
        r2,
        low_confidence: chosen.len() < opts.min_points || !(r2 >= opts.min_r2),
        degenerate: false,
    }
}

/// Weighted least squares `y = slope x + intercept`, with the weighted R².
pub fn weighted_regression(xs: &[f64], ys: &[f64], ws: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
        sxx += w * (x - mx) * (x - mx);
        sxy += w * (x - mx) * (y - my);
        syy += w * (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}
