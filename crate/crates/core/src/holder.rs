//! The four-variable coupling behind the Hölder bound on `q -> p_c(q)`.
//!
//! From one uniform `eta_e` per base edge plus auxiliary bits `X_e`, `Y_e`,
//! `Z_e` we build a pair of lifted-edge bits `(omega+, omega-)`, a switching
//! bit `eta_hat` (law Bernoulli(q / (1 - r))) and a switching bit `eta_bar`
//! (law Bernoulli(a)). Whenever one of the two lifted edges is open, the two
//! switching bits agree, which yields
//! `theta(p (1 - sqrt r), q / (1 - r)) <= theta(p, a)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::graph::{BaseGraph, Host};
use crate::lift::{build_lift, lifted_edge, SwitchConfig};
use crate::oracle::{check_holder_domain, holder_cell};
use crate::perco::{lift_vertex_mask, reaches};
use crate::rng::{MasterSeed, StreamRng};
use crate::stats::pooled;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderParams {
    pub q: f64,
    pub r: f64,
    pub a: f64,
}

impl HolderParams {
    pub fn new(q: f64, r: f64, a: f64) -> Result<Self> {
        check_holder_domain(q, r, a)?;
        Ok(Self { q, r, a })
    }

    /// `A = 2 sqrt(r) (1 - sqrt(r)) / (1 - r)`.
    pub fn big_a(&self) -> f64 {
        big_a(self.r)
    }

    /// `1 - sqrt(r)`, the law of each of `omega+`, `omega-`.
    pub fn p_plus(&self) -> f64 {
        1.0 - self.r.sqrt()
    }

    /// `q / (1 - r)`, the law of `eta_hat`.
    pub fn q_hat(&self) -> f64 {
        self.q / (1.0 - self.r)
    }
}

pub fn big_a<T: num_traits::Float>(r: T) -> T {
    let one = T::one();
    let sr = r.sqrt();
    (one + one) * sr * (one - sr) / (one - r)
}

/// Raw randomness of one base edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDraw {
    pub eta_uniform: f64,
    /// `X_e = +1`.
    pub x_plus: bool,
    pub y: bool,
    pub z: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeOutcome {
    pub omega_plus: bool,
    pub omega_minus: bool,
    pub eta_hat: bool,
    pub eta_bar: bool,
}

/// The deterministic maps `f(eta, X, Y)`, `g(eta, Z)` and `1_[0,a](eta)`.
///
/// The middle interval is `(q, q + r]` for both `f` and `g`.
pub fn couple_edge(params: &HolderParams, d: &EdgeDraw) -> EdgeOutcome {
    let u = d.eta_uniform;
    let middle = params.q < u && u <= params.q + params.r;
    let (omega_plus, omega_minus) = if middle {
        (false, false)
    } else if d.y {
        (d.x_plus, !d.x_plus)
    } else {
        (true, true)
    };
    let eta_hat = if u <= params.q {
        true
    } else if middle {
        d.z
    } else {
        false
    };
    EdgeOutcome {
        omega_plus,
        omega_minus,
        eta_hat,
        eta_bar: u <= params.a,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderSample {
    pub params: HolderParams,
    pub draws: Vec<EdgeDraw>,
    pub outcomes: Vec<EdgeOutcome>,
}

impl HolderSample {
    pub fn eta_hat(&self) -> SwitchConfig {
        SwitchConfig::new(self.outcomes.iter().map(|o| o.eta_hat).collect())
    }

    pub fn eta_bar(&self) -> SwitchConfig {
        SwitchConfig::new(self.outcomes.iter().map(|o| o.eta_bar).collect())
    }

    /// Lifted-edge bits on the hat graph: `(e, 0)` carries `omega+`, `(e, 1)` carries `omega-`.
    pub fn omega_hat(&self) -> Vec<bool> {
        self.outcomes.iter().flat_map(|o| [o.omega_plus, o.omega_minus]).collect()
    }
}

pub fn draw_edge(params: &HolderParams, rng: &mut StreamRng) -> EdgeDraw {
    EdgeDraw {
        eta_uniform: rng.uniform(),
        x_plus: rng.uniform() < 0.5,
        y: rng.uniform() < params.big_a(),
        z: rng.uniform() < params.q_hat(),
    }
}

/// Independent draws for every base edge; four uniforms per edge.
pub fn sample_holder(params: &HolderParams, g: &BaseGraph, rng: &mut StreamRng) -> HolderSample {
    let draws: Vec<EdgeDraw> = (0..g.edge_count()).map(|_| draw_edge(params, rng)).collect();
    let outcomes = draws.iter().map(|d| couple_edge(params, d)).collect();
    HolderSample {
        params: *params,
        draws,
        outcomes,
    }
}

/// Number of edges with an open lift whose two switching bits disagree.
pub fn coupling_violations(sample: &HolderSample) -> usize {
    sample
        .outcomes
        .iter()
        .filter(|o| (o.omega_plus || o.omega_minus) && o.eta_hat != o.eta_bar)
        .count()
}

pub fn verify_coupling_property(sample: &HolderSample) -> bool {
    coupling_violations(sample) == 0
}

/// Per-edge Monte Carlo tally of the coupled bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLawSample {
    pub samples: u64,
    /// Indexed by [`crate::oracle::holder_cell`].
    pub cells: [u64; 16],
    /// Draws with an open lift and disagreeing switching bits.
    pub violations: u64,
}

impl EdgeLawSample {
    pub fn frequency<F: Fn(bool, bool, bool, bool) -> bool>(&self, pred: F) -> f64 {
        let hits: u64 = (0..16)
            .filter(|&c| pred(c & 8 != 0, c & 4 != 0, c & 2 != 0, c & 1 != 0))
            .map(|c| self.cells[c])
            .sum();
        hits as f64 / self.samples as f64
    }
}

const EDGE_CHUNK: u64 = 4096;

/// `samples` independent single-edge draws, in chunks of 4096 per stream.
pub fn sample_edge_law(params: &HolderParams, samples: u64, seed: MasterSeed) -> Result<EdgeLawSample> {
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be positive".into()));
    }
    let chunks = samples.div_ceil(EDGE_CHUNK);
    let (cells, violations) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.stream("holder-edge", c);
            let mut cells = [0u64; 16];
            let mut bad = 0u64;
            for _ in c * EDGE_CHUNK..((c + 1) * EDGE_CHUNK).min(samples) {
                let o = couple_edge(params, &draw_edge(params, &mut rng));
                cells[holder_cell(o.omega_plus, o.omega_minus, o.eta_hat, o.eta_bar)] += 1;
                bad += ((o.omega_plus || o.omega_minus) && o.eta_hat != o.eta_bar) as u64;
            }
            (cells, bad)
        })
        .reduce(
            || ([0u64; 16], 0u64),
            |(mut a, x), (b, y)| {
                for (u, v) in a.iter_mut().zip(b) {
                    *u += v;
                }
                (a, x + y)
            },
        );
    Ok(EdgeLawSample { samples, cells, violations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationStats {
    pub trials: u64,
    /// Trials where the hat side reaches the boundary and the bar side does not.
    pub violations: u64,
    /// Trials where an open hat edge is not an open bar edge.
    pub edge_violations: u64,
    pub reach_hat: u64,
    pub reach_bar: u64,
}

impl DominationStats {
    pub fn freq_hat(&self) -> f64 {
        self.reach_hat as f64 / self.trials as f64
    }

    pub fn freq_bar(&self) -> f64 {
        self.reach_bar as f64 / self.trials as f64
    }
}

/// Runs the two-layer coupling on a box and compares origin-to-boundary reach.
///
/// The hat graph has switching `eta_hat` and lifted bits `omega+/-`; the bar
/// graph has switching `eta_bar` with every edge present. A second layer of
/// Bernoulli(p) thinning uses one shared uniform per lifted edge, so a hat
/// edge survives only if its bar counterpart does. The hat side then has law
/// `G_{p (1 - sqrt r), q / (1 - r)}` and the bar side `G_{p, a}`.
pub fn downward_domination_check(g: &BaseGraph, p: f64, params: &HolderParams, trials: u64, seed: MasterSeed) -> Result<DominationStats> {
    check_probability("p", p)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let boundary = lift_vertex_mask(&g.boundary());
    let origin = 2 * g.origin();
    let per_trial = |t: u64| -> Result<(bool, bool, bool)> {
        let mut rng = seed.stream("holder-domination", t);
        let sample = sample_holder(params, g, &mut rng);
        let hat = build_lift(g, sample.eta_hat())?;
        let bar = build_lift(g, sample.eta_bar())?;
        let thin: Vec<bool> = (0..hat.edge_count()).map(|_| rng.uniform() < p).collect();
        let omega_bar = thin.clone();
        let omega_hat: Vec<bool> = sample.omega_hat().iter().zip(&thin).map(|(&a, &b)| a && b).collect();
        let mut edge_bad = false;
        for e in 0..g.edge_count() {
            for l in 0..2u8 {
                let le = lifted_edge(e, l);
                if omega_hat[le] && !(omega_bar[le] && hat.endpoints(le) == bar.endpoints(le)) {
                    edge_bad = true;
                }
            }
        }
        Ok((
            reaches(&hat, &omega_hat, origin, &boundary),
            reaches(&bar, &omega_bar, origin, &boundary),
            edge_bad,
        ))
    };
    let results: Vec<(bool, bool, bool)> = (0..trials).into_par_iter().map(per_trial).collect::<Result<_>>()?;
    let mut stats = DominationStats {
        trials,
        violations: 0,
        edge_violations: 0,
        reach_hat: 0,
        reach_bar: 0,
    };
    for (h, b, bad) in results {
        stats.reach_hat += h as u64;
        stats.reach_bar += b as u64;
        stats.violations += (h && !b) as u64;
        stats.edge_violations += bad as u64;
    }
    Ok(stats)
}

/// `C = max(1 / sqrt(alpha), 1 / sqrt(1 - beta))` for the interval `[alpha, beta]`.
pub fn holder_constant(alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha <= beta && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("need 0 < alpha <= beta < 1, got {alpha}, {beta}")));
    }
    Ok((1.0 / alpha.sqrt()).max(1.0 / (1.0 - beta).sqrt()))
}

/// One `(q, p_c estimate, stderr)` point of a critical curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub q: f64,
    pub pc: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderCheck {
    pub constant: f64,
    pub sigmas: f64,
    /// `|dp| - C sqrt(dq) - sigmas * pooled stderr` per adjacent pair.
    pub margins: Vec<f64>,
    pub max_violation: f64,
}

impl HolderCheck {
    pub fn passes(&self) -> bool {
        self.max_violation <= 0.0
    }
}

/// Checks `|p_c(q) - p_c(q')| <= C sqrt|q - q'|` on adjacent curve points,
/// allowing `sigmas` pooled standard errors.
pub fn holder_bound_check(curve: &[CurvePoint], constant: f64, sigmas: f64) -> HolderCheck {
    let margins: Vec<f64> = curve
        .windows(2)
        .map(|w| {
            let dp = (w[1].pc - w[0].pc).abs();
            let dq = (w[1].q - w[0].q).abs();
            dp - constant * dq.sqrt() - sigmas * pooled(w[0].stderr, w[1].stderr)
        })
        .collect();
    let max_violation = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    HolderCheck {
        constant,
        sigmas,
        margins,
        max_violation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_box;
    use crate::oracle::exact_holder_joint;
    use crate::stats::{bernoulli_sigma, chi_square};
    use proptest::prelude::*;

    fn params() -> HolderParams {
        HolderParams::new(0.4, 0.09, 0.45).unwrap()
    }

    #[test]
    fn case_analysis() {
        let pr = params();
        let mid = EdgeDraw { eta_uniform: 0.4 + 0.045, x_plus: true, y: false, z: true };
        let o = couple_edge(&pr, &mid);
        assert!(!o.omega_plus && !o.omega_minus && o.eta_hat);
        let o = couple_edge(&pr, &EdgeDraw { z: false, ..mid });
        assert!(!o.eta_hat);
        let low = EdgeDraw { eta_uniform: 0.1, x_plus: true, y: true, z: false };
        let o = couple_edge(&pr, &low);
        assert!(o.eta_hat && o.eta_bar);
        assert!(o.omega_plus && !o.omega_minus);
        let o = couple_edge(&pr, &EdgeDraw { x_plus: false, ..low });
        assert!(!o.omega_plus && o.omega_minus);
        let o = couple_edge(&pr, &EdgeDraw { y: false, ..low });
        assert!(o.omega_plus && o.omega_minus);
        let high = EdgeDraw { eta_uniform: 0.9, x_plus: true, y: true, z: true };
        let o = couple_edge(&pr, &high);
        assert!(!o.eta_hat && !o.eta_bar && o.omega_plus);
        // boundary tie at q + r counts as middle
        let o = couple_edge(&pr, &EdgeDraw { eta_uniform: 0.49, ..high });
        assert!(!o.omega_plus && !o.omega_minus);
    }

    #[test]
    fn constants() {
        assert!((holder_constant(0.5, 0.5).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((holder_constant(0.25, 0.75).unwrap() - 2.0).abs() < 1e-15);
        assert!(holder_constant(0.6, 0.5).is_err());
        for i in 1..1000 {
            let r = i as f64 / 1000.0;
            let a = big_a(r);
            assert!((0.0..1.0).contains(&a));
            assert!((a - (1.0 - (1.0 - r.sqrt()).powi(2) / (1.0 - r))).abs() < 1e-12);
        }
        assert!(big_a(1e-10) < 1e-4);
        // A = 2 sqrt(r) / (1 + sqrt(r)) tends to 1, not 0, as r -> 1
        assert!(1.0 - big_a(1.0 - 1e-10) < 1e-4);
    }

    #[test]
    fn marginals_and_independence() {
        let pr = params();
        let g = build_box(2, 200).unwrap();
        let mut counts = [0u64; 8];
        let mut bar = 0u64;
        let mut n = 0u64;
        let mut rng = MasterSeed(21).stream("holder", 0);
        for _ in 0..7 {
            let s = sample_holder(&pr, &g, &mut rng);
            assert!(verify_coupling_property(&s));
            for o in &s.outcomes {
                counts[4 * o.omega_plus as usize + 2 * o.omega_minus as usize + o.eta_hat as usize] += 1;
                bar += o.eta_bar as u64;
                n += 1;
            }
        }
        assert!(n >= 500_000);
        let joint = exact_holder_joint(pr.q, pr.r, pr.a).unwrap();
        let probs = joint.marginal_triple();
        assert!(chi_square(&counts, &probs).p_value > 0.01);
        let plus: u64 = counts[4..].iter().sum();
        assert!((plus as f64 / n as f64 - pr.p_plus()).abs() < 3.0 * bernoulli_sigma(pr.p_plus(), n));
        assert!((bar as f64 / n as f64 - pr.a).abs() < 3.0 * bernoulli_sigma(pr.a, n));
    }

    #[test]
    fn edge_law_matches_exact_table() {
        let pr = params();
        let mc = sample_edge_law(&pr, 300_000, MasterSeed(22)).unwrap();
        assert_eq!(mc.cells.iter().sum::<u64>(), 300_000);
        assert_eq!(mc.violations, 0);
        let joint = exact_holder_joint(pr.q, pr.r, pr.a).unwrap();
        assert!(chi_square(&mc.cells, &joint.cells).p_value > 0.01);
    }

    #[test]
    fn domination_extremes() {
        let g = build_box(2, 9).unwrap();
        let pr = params();
        let s = downward_domination_check(&g, 0.0, &pr, 50, MasterSeed(1)).unwrap();
        assert_eq!((s.violations, s.reach_hat, s.reach_bar), (0, 0, 0));
        let full = HolderParams::new(0.4, 0.09, 0.49).unwrap();
        let s = downward_domination_check(&g, 1.0, &full, 50, MasterSeed(1)).unwrap();
        assert_eq!((s.violations, s.edge_violations, s.reach_bar), (0, 0, 50));
    }

    #[test]
    fn bound_check() {
        let curve = [
            CurvePoint { q: 0.1, pc: 0.5, stderr: 0.01 },
            CurvePoint { q: 0.2, pc: 0.52, stderr: 0.01 },
            CurvePoint { q: 0.3, pc: 1.9, stderr: 0.01 },
        ];
        let c = holder_bound_check(&curve, 1.0, 2.0);
        assert_eq!(c.margins.len(), 2);
        assert!(c.margins[0] < 0.0 && c.margins[1] > 0.0);
        assert!(!c.passes());
    }

    proptest! {
        #[test]
        fn coupling_property_every_draw(q in 0.0f64..0.9, r in 0.01f64..0.99, t in 0.0f64..=1.0, u in 0.0f64..=1.0, x: bool, y: bool, z: bool) {
            prop_assume!(q <= 1.0 - r);
            let pr = HolderParams::new(q, r, q + t * r).unwrap();
            let o = couple_edge(&pr, &EdgeDraw { eta_uniform: u, x_plus: x, y, z });
            prop_assert!(!(o.omega_plus || o.omega_minus) || o.eta_hat == o.eta_bar);
        }

        #[test]
        fn hat_open_edges_are_bar_open(seed in any::<u64>()) {
            let g = build_box(2, 6).unwrap();
            let s = downward_domination_check(&g, 0.7, &params(), 3, MasterSeed(seed)).unwrap();
            prop_assert_eq!(s.violations, 0);
            prop_assert_eq!(s.edge_violations, 0);
        }
    }
}
