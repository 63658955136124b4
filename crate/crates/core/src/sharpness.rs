//! Sharpness machinery at `q = 1/2`: structure functions `(f, g)`, cluster
//! explorations, the ghost field, tail estimates, remaining graphs and the
//! coupling of percolation on a remaining graph with percolation on the full
//! lift.
//!
//! Abstract edges are numbered `2e + i` for the pair `(e_0, e_1)` over base
//! edge `e`. The label bit `lambda_e` says which lifted edge `e_0` is:
//! `f(2e + i)` is the lifted edge `2e + (i ^ lambda_e)`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::estimators::{fit_decay, DecayFit, FitOptions, TailPoint};
use crate::graph::{BaseGraph, EdgeId, Host, VertexId};
use crate::lift::{build_lift, level, project, sample_switch_config, twin, LiftedGraph, SwitchConfig};
use crate::perco::{components, lift_vertex_mask};
use crate::rng::{uniform_at, MasterSeed, StreamRng};
use crate::stats::binomial_stderr;

/// A realisation of the random lift as structure functions.
#[derive(Clone, Debug)]
pub struct StructureFunctions<'g> {
    lift: LiftedGraph<'g>,
    labels: Vec<bool>,
}

impl<'g> StructureFunctions<'g> {
    pub fn new(base: &'g BaseGraph, eta: SwitchConfig, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != base.edge_count() {
            return Err(Error::InvalidParameter("one label bit per base edge".into()));
        }
        Ok(Self {
            lift: build_lift(base, eta)?,
            labels,
        })
    }

    /// Switching bits first (one uniform per edge), then the label coin flips.
    pub fn sample(base: &'g BaseGraph, q: f64, rng: &mut StreamRng) -> Result<Self> {
        let eta = sample_switch_config(base, q, rng)?;
        let labels = (0..base.edge_count()).map(|_| rng.bernoulli(0.5)).collect();
        Self::new(base, eta, labels)
    }

    pub fn base(&self) -> &'g BaseGraph {
        self.lift.base()
    }

    pub fn eta(&self) -> &SwitchConfig {
        self.lift.eta()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// The lift with labels forgotten.
    pub fn lift(&self) -> &LiftedGraph<'g> {
        &self.lift
    }

    pub fn lifted_edge(&self, a: EdgeId) -> usize {
        a ^ self.labels[a >> 1] as usize
    }

    pub fn abstract_edge(&self, le: usize) -> EdgeId {
        le ^ self.labels[le >> 1] as usize
    }

    /// `f(a)` as a sorted pair.
    pub fn f(&self, a: EdgeId) -> (VertexId, VertexId) {
        let (x, y) = self.lift.endpoints(self.lifted_edge(a));
        (x.min(y), x.max(y))
    }

    /// `g(x)`, increasing.
    pub fn g(&self, x: VertexId) -> Vec<EdgeId> {
        let mut out = Vec::new();
        self.for_each_incident(x, |a, _| out.push(a));
        out
    }

    /// `a in g(x) iff x in f(a)` for every pair.
    pub fn check_consistency(&self) -> Result<()> {
        let mut seen = vec![0usize; self.edge_count()];
        for x in 0..self.vertex_count() {
            for a in self.g(x) {
                let (u, v) = self.f(a);
                if u != x && v != x {
                    return Err(Error::Invariant(format!("{a} in g({x}) but f({a}) = {{{u},{v}}}")));
                }
                seen[a] += 1;
            }
        }
        if let Some(a) = seen.iter().position(|&c| c != 2) {
            return Err(Error::Invariant(format!("abstract edge {a} appears in {} g-sets", seen[a])));
        }
        Ok(())
    }

    /// For small graphs: `f` encoded as one base-4 digit per base edge naming
    /// the pair `f(e_0)` among `{u0 w0}, {u1 w1}, {u0 w1}, {u1 w0}`.
    pub fn f_code(&self) -> usize {
        let g = self.base();
        (0..g.edge_count()).rev().fold(0, |acc, e| {
            let (u, w) = g.endpoints(e);
            let pair = self.f(2 * e);
            let digit = [(2 * u, 2 * w), (2 * u + 1, 2 * w + 1), (2 * u, 2 * w + 1), (2 * u + 1, 2 * w)]
                .iter()
                .position(|&(x, y)| (x.min(y), x.max(y)) == pair)
                .expect("f(e_0) joins lifts of the endpoints");
            4 * acc + digit
        })
    }
}

impl Host for StructureFunctions<'_> {
    fn vertex_count(&self) -> usize {
        self.lift.vertex_count()
    }

    fn edge_count(&self) -> usize {
        self.lift.edge_count()
    }

    fn endpoints(&self, a: EdgeId) -> (VertexId, VertexId) {
        self.lift.endpoints(self.lifted_edge(a))
    }

    fn for_each_incident<F: FnMut(EdgeId, VertexId)>(&self, x: VertexId, mut f: F) {
        self.lift.for_each_incident(x, |le, y| f(self.abstract_edge(le), y));
    }
}

/// Lifted edge over base edge `b` at lifted vertex `x` under switching bit `s`,
/// with its other endpoint.
fn lift_edge_at(g: &BaseGraph, b: EdgeId, s: bool, x: VertexId) -> (usize, VertexId) {
    let (u, w) = g.endpoints(b);
    let j = level(x);
    if project(x) == u {
        (2 * b + j as usize, 2 * w + (j ^ s as u8) as usize)
    } else {
        let l = j ^ s as u8;
        (2 * b + l as usize, 2 * u + l as usize)
    }
}

/// One step `(x_k, e_k)` of an exploration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub vertex: VertexId,
    /// `g(x_k)`.
    pub incident: Vec<EdgeId>,
    pub edge: EdgeId,
    pub open: bool,
    /// `f(e_k)` when revealed.
    pub ends: Option<(VertexId, VertexId)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationTrace {
    pub origin: VertexId,
    pub steps: Vec<TraceStep>,
    /// Sorted open cluster of the origin.
    pub cluster: Vec<VertexId>,
    /// Steps spent on the cluster before the remainder sweep.
    pub cluster_steps: usize,
}

impl ExplorationTrace {
    /// The revealed data `Expl_k`: the first `k` steps.
    pub fn prefix(&self, k: usize) -> &[TraceStep] {
        &self.steps[..k.min(self.steps.len())]
    }
}

/// Cluster-first exploration of `(omega, f)`.
///
/// `x_1 = o`. While the cluster is open-ended, `e_k` is the smallest
/// unexplored abstract edge in the revealed `g`-sets of cluster vertices and
/// only `omega_{e_k}` is revealed; if it is open, `f(e_k)` is revealed too and
/// `x_{k+1}` is its endpoint outside the cluster (the smaller one if both are
/// inside), otherwise `x_{k+1}` is the smallest cluster vertex. After the
/// cluster is exhausted the remaining vertices and edges are swept in
/// increasing order, revealing everything.
pub fn explore_cluster(sf: &StructureFunctions<'_>, omega: &[bool], o: VertexId) -> Result<ExplorationTrace> {
    let n = sf.vertex_count();
    let m = sf.edge_count();
    if omega.len() != m || o >= n {
        return Err(Error::InvalidParameter("omega length or origin out of range".into()));
    }
    let mut revealed = vec![false; n];
    let mut in_cluster = vec![false; n];
    let mut done = vec![false; m];
    let mut frontier = BTreeSet::new();
    let mut cluster = vec![o];
    in_cluster[o] = true;
    let mut sweep = false;
    let mut cluster_steps = 0;
    let mut next_edge = 0;
    let mut next_vertex = 0;
    let mut x = o;
    let mut steps = Vec::with_capacity(m);
    while steps.len() < m {
        let incident = sf.g(x);
        if !std::mem::replace(&mut revealed[x], true) && in_cluster[x] && !sweep {
            frontier.extend(incident.iter().copied().filter(|&a| !done[a]));
        }
        if !sweep && frontier.is_empty() {
            sweep = true;
            cluster_steps = steps.len();
        }
        let in_phase = !sweep;
        let e = if in_phase {
            frontier.pop_first().expect("non-empty frontier")
        } else {
            while done[next_edge] {
                next_edge += 1;
            }
            next_edge
        };
        done[e] = true;
        let open = omega[e];
        let ends = (open || !in_phase).then(|| sf.f(e));
        steps.push(TraceStep {
            vertex: x,
            incident,
            edge: e,
            open,
            ends,
        });
        x = if in_phase && open {
            let (a, b) = sf.f(e);
            let y = if !in_cluster[a] {
                a
            } else if !in_cluster[b] {
                b
            } else {
                a
            };
            if !in_cluster[y] {
                in_cluster[y] = true;
                cluster.push(y);
            }
            y
        } else if in_phase {
            *cluster.iter().min().expect("origin")
        } else {
            while next_vertex < n && revealed[next_vertex] {
                next_vertex += 1;
            }
            if next_vertex < n {
                next_vertex
            } else {
                0
            }
        };
    }
    if !sweep {
        cluster_steps = steps.len();
    }
    cluster.sort_unstable();
    Ok(ExplorationTrace {
        origin: o,
        steps,
        cluster,
        cluster_steps,
    })
}

/// Green vertices of the lift, each present with probability `1 - e^-h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostField {
    pub green: Vec<bool>,
    pub h: f64,
}

pub fn ghost_probability(h: f64) -> f64 {
    -(-h).exp_m1()
}

pub fn sample_ghost(vertex_count: usize, h: f64, rng: &mut StreamRng) -> Result<GhostField> {
    if !(h >= 0.0) {
        return Err(Error::InvalidParameter(format!("h must be non-negative, got {h}")));
    }
    let pg = ghost_probability(h);
    Ok(GhostField {
        green: (0..vertex_count).map(|_| rng.uniform() < pg).collect(),
        h,
    })
}

/// Percolation on the lift with random-access states: `eta_e = [u_e < q]`
/// and `omega_le = [u_(|E| + le) < p]` on the trial's key, or a fixed `eta`.
struct LazyTrial<'a> {
    g: &'a BaseGraph,
    key: u64,
    q: f64,
    p: f64,
    eta: Option<&'a SwitchConfig>,
}

impl LazyTrial<'_> {
    fn eta(&self, e: EdgeId) -> bool {
        match self.eta {
            Some(c) => c.get(e),
            None => uniform_at(self.key, e as u64) < self.q,
        }
    }

    fn open(&self, le: usize) -> bool {
        uniform_at(self.key, (self.g.edge_count() + le) as u64) < self.p
    }
}

#[derive(Default)]
struct Scratch {
    seen: Vec<bool>,
    stack: Vec<VertexId>,
    touched: Vec<VertexId>,
}

struct LazyOutcome {
    size: usize,
    touches: bool,
    green: bool,
}

/// Open cluster of `start`, stopped at `cap` vertices or at the first green vertex.
fn lazy_cluster(t: &LazyTrial<'_>, start: VertexId, cap: usize, boundary: &[bool], green: Option<(u64, f64)>, s: &mut Scratch) -> LazyOutcome {
    if s.seen.len() != 2 * t.g.vertex_count() {
        s.seen = vec![false; 2 * t.g.vertex_count()];
    }
    let is_green = |x: VertexId| green.is_some_and(|(k, pg)| uniform_at(k, x as u64) < pg);
    let mut out = LazyOutcome {
        size: 1,
        touches: boundary[start],
        green: is_green(start),
    };
    s.seen[start] = true;
    s.touched.push(start);
    s.stack.push(start);
    'grow: while let Some(x) = s.stack.pop() {
        if out.green || out.size >= cap {
            break;
        }
        let v = project(x);
        let j = level(x);
        for &(e, w) in t.g.adjacency(v) {
            let sw = t.eta(e) as u8;
            let (le, y) = if v < w {
                (2 * e + j as usize, 2 * w + (j ^ sw) as usize)
            } else {
                let l = j ^ sw;
                (2 * e + l as usize, 2 * w + l as usize)
            };
            if !s.seen[y] && t.open(le) {
                s.seen[y] = true;
                s.touched.push(y);
                s.stack.push(y);
                out.size += 1;
                out.touches |= boundary[y];
                out.green |= is_green(y);
                if out.green || out.size >= cap {
                    break 'grow;
                }
            }
        }
    }
    for &x in &s.touched {
        s.seen[x] = false;
    }
    s.touched.clear();
    s.stack.clear();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhEstimate {
    pub p: f64,
    pub q: f64,
    pub h: f64,
    pub trials: u64,
    pub hits: u64,
    pub m_hat: f64,
    pub stderr: f64,
}

/// `m_h(p)`: probability that the open cluster of `o_0` contains a green vertex.
pub fn estimate_m_h(g: &BaseGraph, p: f64, h: f64, q: f64, trials: u64, seed: MasterSeed) -> Result<MhEstimate> {
    check_probability("p", p)?;
    check_probability("q", q)?;
    if !(h > 0.0) || trials == 0 {
        return Err(Error::InvalidParameter("m_h needs h > 0 and trials > 0".into()));
    }
    let pg = ghost_probability(h);
    let boundary = lift_vertex_mask(&g.boundary());
    let o = 2 * g.origin();
    let hits = (0..trials)
        .into_par_iter()
        .map_init(Scratch::default, |s, t| {
            let trial = LazyTrial {
                g,
                key: seed.key("ghost-perc", t),
                q,
                p,
                eta: None,
            };
            lazy_cluster(&trial, o, usize::MAX, &boundary, Some((seed.key("ghost", t), pg)), s).green as u64
        })
        .sum::<u64>();
    let m_hat = hits as f64 / trials as f64;
    Ok(MhEstimate {
        p,
        q,
        h,
        trials,
        hits,
        m_hat,
        stderr: binomial_stderr(hits, trials),
    })
}

fn tail_points(sizes: &[(usize, bool)], n_max: usize) -> Vec<TailPoint> {
    let trials = sizes.len() as u64;
    let mut count = vec![0u64; n_max + 2];
    let mut touching = vec![0u64; n_max + 2];
    for &(s, t) in sizes {
        let s = s.min(n_max);
        count[s] += 1;
        touching[s] += t as u64;
    }
    let mut out = Vec::with_capacity(n_max);
    let (mut c, mut tc) = (0, 0);
    for n in (1..=n_max).rev() {
        c += count[n];
        tc += touching[n];
        out.push(TailPoint { n, count: c, touching: tc, trials });
    }
    out.reverse();
    out
}

fn tail_with(g: &BaseGraph, p: f64, q: f64, eta: Option<&SwitchConfig>, n_max: usize, trials: u64, seed: MasterSeed, label: &str) -> Result<Vec<TailPoint>> {
    check_probability("p", p)?;
    check_probability("q", q)?;
    if n_max == 0 || trials == 0 {
        return Err(Error::InvalidParameter("tail needs n_max > 0 and trials > 0".into()));
    }
    let boundary = lift_vertex_mask(&g.boundary());
    let o = 2 * g.origin();
    let sizes: Vec<(usize, bool)> = (0..trials)
        .into_par_iter()
        .map_init(Scratch::default, |s, t| {
            let trial = LazyTrial {
                g,
                key: seed.key(label, t),
                q,
                p,
                eta,
            };
            let r = lazy_cluster(&trial, o, n_max, &boundary, None, s);
            (r.size, r.touches)
        })
        .collect();
    Ok(tail_points(&sizes, n_max))
}

/// `psi_n(p) = P(|C_o| >= n)` for `n = 1..=n_max` on the annealed lift.
///
/// Clusters are explored up to `n_max` vertices, so the boundary-touch count
/// only sees the explored part.
pub fn tail_psi(g: &BaseGraph, p: f64, q: f64, n_max: usize, trials: u64, seed: MasterSeed) -> Result<Vec<TailPoint>> {
    tail_with(g, p, q, None, n_max, trials, seed, "tail")
}

/// Tail conditional on a fixed switching configuration.
pub fn quenched_tail(g: &BaseGraph, p: f64, eta: &SwitchConfig, n_max: usize, trials: u64, seed: MasterSeed) -> Result<Vec<TailPoint>> {
    if eta.len() != g.edge_count() {
        return Err(Error::InvalidParameter("eta length mismatch".into()));
    }
    tail_with(g, p, 0.5, Some(eta), n_max, trials, seed, "quenched-tail")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedFit {
    pub draw: u64,
    pub switching_edges: usize,
    pub fit: DecayFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedSummary {
    pub fits: Vec<QuenchedFit>,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub all_negative_slopes: bool,
    /// Sample std below half the mean magnitude.
    pub concentrated: bool,
}

/// Decay fits for `draws` independent switching configurations.
pub fn quenched_decay(g: &BaseGraph, p: f64, q: f64, draws: u64, n_max: usize, trials: u64, seed: MasterSeed, opts: &FitOptions) -> Result<QuenchedSummary> {
    if draws == 0 {
        return Err(Error::InvalidParameter("draws must be positive".into()));
    }
    let mut fits = Vec::new();
    for d in 0..draws {
        let eta = sample_switch_config(g, q, &mut seed.stream("quenched-eta", d))?;
        let curve = quenched_tail(g, p, &eta, n_max, trials, MasterSeed(seed.key("quenched", d)))?;
        fits.push(QuenchedFit {
            draw: d,
            switching_edges: eta.switching_count(),
            fit: fit_decay(&curve, opts),
        });
    }
    let rates: Vec<f64> = fits.iter().map(|f| f.fit.c_hat).collect();
    let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    let std_rate = if rates.len() > 1 {
        (rates.iter().map(|r| (r - mean_rate).powi(2)).sum::<f64>() / (rates.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(QuenchedSummary {
        all_negative_slopes: fits.iter().all(|f| !f.fit.degenerate && f.fit.c_hat > 0.0),
        concentrated: std_rate < 0.5 * mean_rate.abs(),
        fits,
        mean_rate,
        std_rate,
    })
}

/// One row of the decay inequality check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpRow {
    pub n: usize,
    pub psi_p: f64,
    pub psi_s: f64,
    /// `psi_n(p) e^(-h n) / (1 - m_h(p))`.
    pub bound: f64,
    /// `psi_s - bound`.
    pub margin: f64,
    /// Pooled standard error of the margin.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpReport {
    pub p: f64,
    pub h: f64,
    pub trials: u64,
    pub m_h: MhEstimate,
    /// `p (1 - 2 m_h)` before clamping.
    pub s_raw: f64,
    pub s: f64,
    pub clamped: bool,
    pub rows: Vec<ExpRow>,
    pub max_margin: f64,
    /// Largest `margin / sigma` (zero-sigma rows count as 0 when the margin is non-positive).
    pub max_margin_sigmas: f64,
}

impl ExpReport {
    pub fn passes(&self, sigmas: f64) -> bool {
        self.rows.iter().all(|r| r.margin <= sigmas * r.sigma)
    }
}

/// Finite-volume check of `psi_n(s) <= psi_n(p) e^(-h n) / (1 - m_h(p))` with
/// `s = p (1 - 2 m_h(p))`, at `q = 1/2`, for `2 <= n <= n_max`.
pub fn verify_exp_inequality(g: &BaseGraph, p: f64, h: f64, n_max: usize, trials: u64, seed: MasterSeed) -> Result<ExpReport> {
    let q = 0.5;
    let m_h = if h.is_infinite() {
        MhEstimate {
            p,
            q,
            h,
            trials,
            hits: trials,
            m_hat: 1.0,
            stderr: 0.0,
        }
    } else {
        estimate_m_h(g, p, h, q, trials, seed)?
    };
    let s_raw = p * (1.0 - 2.0 * m_h.m_hat);
    let s = s_raw.clamp(0.0, 1.0);
    let psi_p = tail_psi(g, p, q, n_max, trials, seed)?;
    let psi_s = tail_psi(g, s, q, n_max, trials, seed)?;
    let rows: Vec<ExpRow> = psi_p
        .iter()
        .zip(&psi_s)
        .filter(|(a, _)| a.n >= 2)
        .map(|(a, b)| {
            let decay = (-h * a.n as f64).exp();
            let keep = 1.0 - m_h.m_hat;
            let (bound, sigma) = if keep <= 0.0 {
                (f64::INFINITY, b.stderr())
            } else {
                let bound = a.psi() * decay / keep;
                let sigma = (b.stderr().powi(2) + (decay / keep * a.stderr()).powi(2) + (bound / keep * m_h.stderr).powi(2)).sqrt();
                (bound, sigma)
            };
            ExpRow {
                n: a.n,
                psi_p: a.psi(),
                psi_s: b.psi(),
                bound,
                margin: b.psi() - bound,
                sigma,
            }
        })
        .collect();
    let max_margin = rows.iter().map(|r| r.margin).fold(f64::NEG_INFINITY, f64::max);
    let max_margin_sigmas = rows
        .iter()
        .map(|r| {
            if r.sigma > 0.0 {
                r.margin / r.sigma
            } else if r.margin <= 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ExpReport {
        p,
        h,
        trials,
        m_h,
        s_raw,
        s,
        clamped: s != s_raw,
        rows,
        max_margin,
        max_margin_sigmas,
    })
}

/// The remaining graph after a cluster `C_o` with its `g`-sets.
#[derive(Clone, Debug)]
pub struct RemainingGraph<'a, 'g> {
    pub sf: &'a StructureFunctions<'g>,
    pub origin: VertexId,
    /// Sorted `C_o`.
    pub cluster: Vec<VertexId>,
    pub in_cluster: Vec<bool>,
    /// `C_o*`: vertices outside `C_o` whose twin is in `C_o`.
    pub shadow: Vec<bool>,
    /// `E_o`: abstract edges with an endpoint in `C_o`.
    pub deleted: Vec<bool>,
    /// Type of each surviving abstract edge (`None` on `E_o`).
    pub edge_type: Vec<Option<u8>>,
}

/// Deletes `C_o` and its incident edges and classifies the survivors by the
/// number of endpoints in `C_o*`.
pub fn build_remaining_graph<'a, 'g>(sf: &'a StructureFunctions<'g>, cluster: &[VertexId], origin: VertexId) -> Result<RemainingGraph<'a, 'g>> {
    let n = sf.vertex_count();
    let mut in_cluster = vec![false; n];
    for &x in cluster {
        if x >= n {
            return Err(Error::InvalidParameter(format!("vertex {x} out of range")));
        }
        in_cluster[x] = true;
    }
    if !in_cluster.get(origin).copied().unwrap_or(false) {
        return Err(Error::InvalidParameter("C_o must contain the origin".into()));
    }
    // connected through the edges that g_o attaches to C_o
    let mut reached = vec![false; n];
    reached[origin] = true;
    let mut stack = vec![origin];
    let mut count = 1;
    while let Some(x) = stack.pop() {
        sf.for_each_incident(x, |_, y| {
            if in_cluster[y] && !reached[y] {
                reached[y] = true;
                count += 1;
                stack.push(y);
            }
        });
    }
    let mut sorted: Vec<VertexId> = (0..n).filter(|&x| in_cluster[x]).collect();
    sorted.dedup();
    if count != sorted.len() {
        return Err(Error::InvalidParameter("C_o is not connected under g_o".into()));
    }
    let shadow: Vec<bool> = (0..n).map(|x| !in_cluster[x] && in_cluster[twin(x)]).collect();
    let mut deleted = vec![false; sf.edge_count()];
    for &x in &sorted {
        for a in sf.g(x) {
            deleted[a] = true;
        }
    }
    let edge_type = (0..sf.edge_count())
        .map(|a| {
            (!deleted[a]).then(|| {
                let (x, y) = sf.f(a);
                shadow[x] as u8 + shadow[y] as u8
            })
        })
        .collect();
    Ok(RemainingGraph {
        sf,
        origin,
        cluster: sorted,
        in_cluster,
        shadow,
        deleted,
        edge_type,
    })
}

impl RemainingGraph<'_, '_> {
    pub fn type_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for t in self.edge_type.iter().flatten() {
            c[*t as usize] += 1;
        }
        c
    }

    pub fn edges_of_type(&self, t: u8) -> Vec<EdgeId> {
        (0..self.edge_type.len()).filter(|&a| self.edge_type[a] == Some(t)).collect()
    }

    pub fn surviving_vertex(&self, x: VertexId) -> bool {
        !self.in_cluster[x]
    }

    /// `omega` with the deleted edges closed.
    pub fn mask(&self, omega: &[bool]) -> Vec<bool> {
        omega.iter().zip(&self.deleted).map(|(&w, &d)| w && !d).collect()
    }

    /// `dE C_o* = E_1`, and the twin properties of each type.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invariant(format!("remaining graph: {m}")));
        for a in 0..self.edge_type.len() {
            let Some(t) = self.edge_type[a] else { continue };
            let (x, y) = self.sf.f(a);
            if self.in_cluster[x] || self.in_cluster[y] {
                return bad(format!("surviving edge {a} touches C_o"));
            }
            let boundary = self.shadow[x] != self.shadow[y];
            if boundary != (t == 1) {
                return bad(format!("edge {a}: type {t} but boundary membership {boundary}"));
            }
            let tw = a ^ 1;
            match t {
                0 if self.edge_type[tw] != Some(0) => return bad(format!("type-0 edge {a} has twin of type {:?}", self.edge_type[tw])),
                1 | 2 if !self.deleted[tw] => return bad(format!("type-{t} edge {a} has its twin present")),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Samples structure functions from `nu(. | g = g_o on C_o)`, `g_o` taken from
/// `template`: per base edge, `(eta_e, lambda_e)` is redrawn until every
/// constraint at a lift of its endpoints in `C_o` matches.
pub fn sample_conditioned<'g>(template: &StructureFunctions<'g>, cluster: &[VertexId], q: f64, rng: &mut StreamRng) -> Result<StructureFunctions<'g>> {
    check_probability("q", q)?;
    let g = template.base();
    let mut eta = vec![false; g.edge_count()];
    let mut labels = vec![false; g.edge_count()];
    let mut constraints: Vec<Vec<(VertexId, EdgeId)>> = vec![Vec::new(); g.edge_count()];
    for &x in cluster {
        for a in template.g(x) {
            constraints[a >> 1].push((x, a));
        }
    }
    for e in 0..g.edge_count() {
        let ok = |s: bool, l: bool| {
            constraints[e].iter().all(|&(x, a)| {
                let (le, _) = lift_edge_at(g, e, s, x);
                le ^ l as usize == a
            })
        };
        if !(0..4).any(|c| ok(c & 1 == 1, c & 2 == 2) && (q > 0.0 || c & 1 == 0) && (q < 1.0 || c & 1 == 1)) {
            return Err(Error::InvalidParameter(format!("no (eta, label) on edge {e} is consistent with g_o")));
        }
        loop {
            let s = rng.bernoulli(q);
            let l = rng.bernoulli(0.5);
            if ok(s, l) {
                eta[e] = s;
                labels[e] = l;
                break;
            }
        }
    }
    StructureFunctions::new(g, SwitchConfig::new(eta), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pioneer {
    pub edge: EdgeId,
    pub from: VertexId,
    pub to: VertexId,
}

/// Height relation record of a type-1 edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeightRecord {
    pub edge: EdgeId,
    pub eta: bool,
    /// Level of the `C_o*` endpoint in the remaining graph.
    pub epsilon: u8,
    pub eta_star: bool,
    /// `H(x)`: level of its associated vertex.
    pub height: u8,
}

impl HeightRecord {
    pub fn holds(&self) -> bool {
        (self.eta as u8 ^ self.epsilon) == (self.eta_star as u8 ^ self.height)
    }
}

/// Output `(omega*, f*)` on the full lift plus the association data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainingCoupling {
    pub eta_star: SwitchConfig,
    pub labels_star: Vec<bool>,
    /// Indexed by abstract edges of `f*`.
    pub omega_star: Vec<bool>,
    /// `a` on `C_o*`.
    pub vertex_map: Vec<Option<VertexId>>,
    /// `a` on `E_1 u E_2`, as abstract edges of `f*`.
    pub edge_map: Vec<Option<EdgeId>>,
    pub pioneers: Vec<Pioneer>,
    pub roots: Vec<(VertexId, u8)>,
    pub heights: Vec<HeightRecord>,
    /// Whether the output law is claimed to be the plain lift law (`q = 1/2`).
    pub law_claim: bool,
}

impl RemainingCoupling {
    pub fn structure<'g>(&self, base: &'g BaseGraph) -> Result<StructureFunctions<'g>> {
        StructureFunctions::new(base, self.eta_star.clone(), self.labels_star.clone())
    }

    /// Transport of surviving vertices: `a` on `C_o*`, identity elsewhere.
    pub fn iota(&self, x: VertexId) -> VertexId {
        self.vertex_map[x].unwrap_or(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairKind {
    Copy,
    Shadow1(EdgeId),
    Shadow2(EdgeId),
    Hole,
}

fn pair_kind(rg: &RemainingGraph<'_, '_>, b: EdgeId) -> PairKind {
    match (rg.edge_type[2 * b], rg.edge_type[2 * b + 1]) {
        (Some(0), Some(0)) => PairKind::Copy,
        (Some(1), None) => PairKind::Shadow1(2 * b),
        (None, Some(1)) => PairKind::Shadow1(2 * b + 1),
        (Some(2), None) => PairKind::Shadow2(2 * b),
        (None, Some(2)) => PairKind::Shadow2(2 * b + 1),
        (None, None) => PairKind::Hole,
        other => unreachable!("inconsistent pair types {other:?}"),
    }
}

/// Couples percolation `omega` on the remaining graph with percolation on the
/// full lift.
///
/// Type-0 pairs are copied. Pairs with a type-2 survivor, and fully deleted
/// pairs, get fresh `f*`. Type-2 edges are then explored from the smallest
/// unexplored `C_o*` vertex, whose association is a uniformly chosen lift;
/// each edge is associated with its `f*`-lift at the association of its
/// explored endpoint, and an open edge associates its other endpoint if new
/// (a pioneer edge). Type-1 edges keep their outside endpoint, are hung from
/// the association of their `C_o*` endpoint, and get a uniform label.
/// Associated edges carry `omega`, their twins fresh fillers.
///
/// Randomness order: fresh `f*` by base edge, root levels, type-2 fillers,
/// type-1 labels and fillers, hole states.
pub fn couple_remaining_to_full(rg: &RemainingGraph<'_, '_>, omega: &[bool], q: f64, p: f64, rng: &mut StreamRng) -> Result<RemainingCoupling> {
    check_probability("q", q)?;
    check_probability("p", p)?;
    let sf = rg.sf;
    let g = sf.base();
    if omega.len() != sf.edge_count() {
        return Err(Error::InvalidParameter("omega length mismatch".into()));
    }
    rg.check_invariants()?;
    let m = g.edge_count();
    let kinds: Vec<PairKind> = (0..m).map(|b| pair_kind(rg, b)).collect();
    let mut eta_star: Vec<bool> = sf.eta().bits().to_vec();
    let mut labels_star = sf.labels().to_vec();
    for b in 0..m {
        if matches!(kinds[b], PairKind::Shadow2(_) | PairKind::Hole) {
            eta_star[b] = rng.bernoulli(q);
            labels_star[b] = rng.bernoulli(0.5);
        }
    }
    let abstract_of = |b: EdgeId, le: usize, labels: &[bool]| le ^ labels[b] as usize;
    let n = sf.vertex_count();
    let mut vertex_map: Vec<Option<VertexId>> = vec![None; n];
    let mut edge_map: Vec<Option<EdgeId>> = vec![None; sf.edge_count()];
    let mut omega_star = vec![false; sf.edge_count()];
    let mut pioneers = Vec::new();
    let mut roots = Vec::new();
    // type-2 incidence within C_o*
    let type2 = rg.edges_of_type(2);
    let mut incident2: Vec<Vec<EdgeId>> = vec![Vec::new(); n];
    for &a in &type2 {
        let (x, y) = sf.f(a);
        incident2[x].push(a);
        incident2[y].push(a);
    }
    let mut in_s = vec![false; n];
    let mut in_a = vec![false; sf.edge_count()];
    for r in (0..n).filter(|&x| rg.shadow[x]) {
        if in_s[r] {
            continue;
        }
        let delta = rng.bernoulli(0.5) as u8;
        vertex_map[r] = Some(2 * project(r) + delta as usize);
        roots.push((r, delta));
        in_s[r] = true;
        let mut candidates: BTreeSet<EdgeId> = incident2[r].iter().copied().collect();
        while let Some(a) = candidates.pop_first() {
            if in_a[a] {
                continue;
            }
            let (u, v) = sf.f(a);
            let (x, y) = if in_s[u] { (u, v) } else { (v, u) };
            let b = a >> 1;
            let ax = vertex_map[x].expect("explored vertex is associated");
            let (le, other) = lift_edge_at(g, b, eta_star[b], ax);
            edge_map[a] = Some(abstract_of(b, le, &labels_star));
            if omega[a] && vertex_map[y].is_none() {
                vertex_map[y] = Some(other);
                in_s[y] = true;
                pioneers.push(Pioneer { edge: a, from: x, to: y });
                candidates.extend(incident2[y].iter().copied().filter(|&c| !in_a[c]));
            }
            in_a[a] = true;
        }
    }
    for &a in &type2 {
        let ea = edge_map[a].expect("every type-2 edge is associated");
        omega_star[ea] = omega[a];
        omega_star[ea ^ 1] = rng.bernoulli(p);
    }
    let mut heights = Vec::new();
    for b in 0..m {
        let PairKind::Shadow1(a) = kinds[b] else { continue };
        let (u, v) = sf.f(a);
        let (x, y) = if rg.shadow[u] { (u, v) } else { (v, u) };
        let ax = vertex_map[x].expect("C_o* is fully associated");
        let height = level(ax);
        let j = level(y);
        let s = (height ^ j) == 1;
        eta_star[b] = s;
        let (le, far) = lift_edge_at(g, b, s, ax);
        debug_assert_eq!(far, y);
        let label = rng.bernoulli(0.5) as usize;
        let ea = 2 * b + label;
        labels_star[b] = (ea ^ le) & 1 == 1;
        edge_map[a] = Some(ea);
        omega_star[ea] = omega[a];
        omega_star[ea ^ 1] = rng.bernoulli(p);
        heights.push(HeightRecord {
            edge: a,
            eta: sf.eta().get(b),
            epsilon: level(x),
            eta_star: s,
            height,
        });
    }
    for b in 0..m {
        match kinds[b] {
            PairKind::Copy => {
                omega_star[2 * b] = omega[2 * b];
                omega_star[2 * b + 1] = omega[2 * b + 1];
            }
            PairKind::Hole => {
                omega_star[2 * b] = rng.bernoulli(p);
                omega_star[2 * b + 1] = rng.bernoulli(p);
            }
            _ => {}
        }
    }
    Ok(RemainingCoupling {
        eta_star: SwitchConfig::new(eta_star),
        labels_star,
        omega_star,
        vertex_map,
        edge_map,
        pioneers,
        roots,
        heights,
        law_claim: q == 0.5,
    })
}

/// Counts of failed structural checks in one coupling.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingAudit {
    pub height_violations: usize,
    pub forest_violations: usize,
    pub injectivity_violations: usize,
    pub open_map_violations: usize,
    pub copy_violations: usize,
    /// Surviving vertices whose remaining cluster is not carried into the
    /// output cluster of their image.
    pub embedding_violations: usize,
    /// Remaining cluster meets the green set, the output cluster of the image
    /// misses its image.
    pub domination_violations: usize,
    pub messages: Vec<String>,
}

impl CouplingAudit {
    pub fn clean(&self) -> bool {
        self.height_violations
            + self.forest_violations
            + self.injectivity_violations
            + self.open_map_violations
            + self.copy_violations
            + self.embedding_violations
            + self.domination_violations
            == 0
    }
}

/// Checks the height relation, the pioneer forest, injectivity of `a`, that
/// open edges stay open, and the cluster domination under the transport
/// `iota` for the green set `green`.
pub fn audit_remaining_coupling(rg: &RemainingGraph<'_, '_>, omega: &[bool], out: &RemainingCoupling, green: &[bool]) -> Result<CouplingAudit> {
    let sf = rg.sf;
    let g = sf.base();
    let star = out.structure(g)?;
    let mut audit = CouplingAudit::default();
    let note = |audit: &mut CouplingAudit, m: String| {
        if audit.messages.len() < 8 {
            audit.messages.push(m);
        }
    };
    for h in &out.heights {
        if !h.holds() {
            audit.height_violations += 1;
            note(&mut audit, format!("height relation fails on edge {}", h.edge));
        }
        let a = h.edge;
        let (u, v) = sf.f(a);
        let (x, y) = if rg.shadow[u] { (u, v) } else { (v, u) };
        let ea = out.edge_map[a].expect("type-1 edge associated");
        let want = (out.iota(x).min(y), out.iota(x).max(y));
        if star.f(ea) != want {
            audit.height_violations += 1;
            note(&mut audit, format!("f*(a({a})) = {:?}, expected {want:?}", star.f(ea)));
        }
    }
    // pioneer forest
    let n = sf.vertex_count();
    let mut indeg = vec![0usize; n];
    for pi in &out.pioneers {
        indeg[pi.to] += 1;
        let ea = out.edge_map[pi.edge].expect("pioneer associated");
        let (a, b) = (out.iota(pi.from), out.iota(pi.to));
        if star.f(ea) != (a.min(b), a.max(b)) || !out.omega_star[ea] || !omega[pi.edge] {
            audit.forest_violations += 1;
            note(&mut audit, format!("pioneer edge {} is not lifted to an open edge", pi.edge));
        }
    }
    let shadow_count = rg.shadow.iter().filter(|&&s| s).count();
    if indeg.iter().any(|&d| d > 1) || out.roots.iter().any(|&(r, _)| indeg[r] != 0) || out.pioneers.len() + out.roots.len() != shadow_count {
        audit.forest_violations += 1;
        note(&mut audit, "pioneer edges do not form a rooted forest on C_o*".into());
    }
    let open2: Vec<bool> = (0..sf.edge_count()).map(|a| rg.edge_type[a] == Some(2) && omega[a]).collect();
    let comp2 = components(sf, &open2);
    let mut root_comps: Vec<usize> = out.roots.iter().map(|&(r, _)| comp2[r]).collect();
    root_comps.sort_unstable();
    let before = root_comps.len();
    root_comps.dedup();
    let mut shadow_comps: Vec<usize> = (0..n).filter(|&x| rg.shadow[x]).map(|x| comp2[x]).collect();
    shadow_comps.sort_unstable();
    shadow_comps.dedup();
    if root_comps.len() != before || root_comps != shadow_comps {
        audit.forest_violations += 1;
        note(&mut audit, "roots are not one per open type-2 component".into());
    }
    // injectivity and open edges
    let mut images: Vec<EdgeId> = out.edge_map.iter().flatten().copied().collect();
    let total = images.len();
    images.sort_unstable();
    images.dedup();
    if images.len() != total {
        audit.injectivity_violations += 1;
        note(&mut audit, "a is not injective on edges".into());
    }
    let mut vimages: Vec<VertexId> = (0..n).filter(|&x| rg.surviving_vertex(x)).map(|x| out.iota(x)).collect();
    let vtotal = vimages.len();
    vimages.sort_unstable();
    vimages.dedup();
    if vimages.len() != vtotal {
        audit.injectivity_violations += 1;
        note(&mut audit, "iota is not injective on vertices".into());
    }
    for a in 0..sf.edge_count() {
        match rg.edge_type[a] {
            Some(0) => {
                if star.f(a) != sf.f(a) || out.omega_star[a] != omega[a] {
                    audit.copy_violations += 1;
                    note(&mut audit, format!("type-0 edge {a} not copied"));
                }
            }
            Some(_) => {
                let ea = out.edge_map[a].expect("associated");
                if ea >> 1 != a >> 1 {
                    audit.injectivity_violations += 1;
                    note(&mut audit, format!("a({a}) = {ea} lies over another base edge"));
                }
                if omega[a] && !out.omega_star[ea] {
                    audit.open_map_violations += 1;
                    note(&mut audit, format!("open edge {a} maps to a closed edge"));
                }
            }
            None => {}
        }
    }
    // domination
    let rem = components(sf, &rg.mask(omega));
    let full = components(&star, &out.omega_star);
    let mut rem_green = vec![false; n];
    let mut full_green = vec![false; n];
    let mut carried: Vec<Option<usize>> = vec![None; n];
    for x in (0..n).filter(|&x| rg.surviving_vertex(x)) {
        let img = full[out.iota(x)];
        match carried[rem[x]] {
            None => carried[rem[x]] = Some(img),
            Some(c) if c != img => {
                audit.embedding_violations += 1;
                note(&mut audit, format!("cluster of {x} splits under iota"));
            }
            _ => {}
        }
        if green[x] {
            rem_green[rem[x]] = true;
            full_green[img] = true;
        }
    }
    for x in (0..n).filter(|&x| rg.surviving_vertex(x)) {
        if rem_green[rem[x]] && !full_green[full[out.iota(x)]] {
            audit.domination_violations += 1;
        }
    }
    Ok(audit)
}

/// Sampled law check of the remaining-graph coupling on one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawCheck {
    pub graph: String,
    pub q: f64,
    pub p: f64,
    pub runs: u64,
    pub cells: usize,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub height_violations: u64,
    pub forest_violations: u64,
    pub domination_runs: u64,
    pub domination_violations: u64,
    pub other_violations: u64,
}

/// Joint cell of `(f*, omega*)`: the base-4 `f`-code times the `omega*` bits.
fn joint_cell(sf: &StructureFunctions<'_>, omega: &[bool]) -> usize {
    let w = omega.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | (b as usize) << i);
    (sf.f_code() << omega.len()) | w
}

/// Law of the plain lift for the cell encoding of [`joint_cell`].
pub fn plain_joint_law(g: &BaseGraph, q: f64, p: f64) -> Result<Vec<f64>> {
    let m = g.edge_count();
    if 2 * m + 2 * m > 24 {
        return Err(Error::SizeGuard {
            what: "joint (f, omega) cells",
            actual: 1 << (4 * m).min(63),
            limit: 1 << 24,
        });
    }
    // enumerate (eta, labels) and omega independently; f-codes are recomputed from scratch
    let mut law = vec![0.0; 1 << (4 * m)];
    for mask in 0u64..1 << (2 * m) {
        let eta = SwitchConfig::new((0..m).map(|e| mask >> e & 1 == 1).collect());
        let labels: Vec<bool> = (0..m).map(|e| mask >> (m + e) & 1 == 1).collect();
        let w_eta: f64 = eta.bits().iter().map(|&s| if s { q } else { 1.0 - q }).product::<f64>() * 0.5f64.powi(m as i32);
        let sf = StructureFunctions::new(g, eta, labels)?;
        let code = sf.f_code() << (2 * m);
        for om in 0usize..1 << (2 * m) {
            let ones = om.count_ones() as i32;
            law[code | om] += w_eta * p.powi(ones) * (1.0 - p).powi(2 * m as i32 - ones);
        }
    }
    Ok(law)
}

/// Law check on `g` with `C_o = {o_0}`: sample `(f, omega)` on the remaining
/// graph, couple, and compare the output `(f*, omega*)` with the plain law by
/// chi-square. The structural audit runs on every sample; the cluster
/// domination check (with ghost parameter `h`) on the first `domination_runs`.
pub fn remaining_law_check(g: &BaseGraph, q: f64, p: f64, h: f64, runs: u64, domination_runs: u64, seed: MasterSeed) -> Result<LawCheck> {
    if q != 0.5 {
        return Err(Error::InvalidParameter("the law equality is only claimed at q = 1/2".into()));
    }
    let law = plain_joint_law(g, q, p)?;
    let template = StructureFunctions::sample(g, q, &mut seed.stream("law-template", 0))?;
    let cluster = vec![2 * g.origin()];
    struct Tally {
        counts: Vec<u64>,
        height: u64,
        forest: u64,
        dom: u64,
        other: u64,
    }
    let empty = || Tally {
        counts: vec![0; law.len()],
        height: 0,
        forest: 0,
        dom: 0,
        other: 0,
    };
    let tally = (0..runs)
        .into_par_iter()
        .try_fold(empty, |mut acc, run| -> Result<Tally> {
            let mut rng = seed.stream("law-run", run);
            let sf = sample_conditioned(&template, &cluster, q, &mut rng)?;
            let rg = build_remaining_graph(&sf, &cluster, cluster[0])?;
            let omega: Vec<bool> = (0..sf.edge_count()).map(|a| rng.bernoulli(p) && !rg.deleted[a]).collect();
            let out = couple_remaining_to_full(&rg, &omega, q, p, &mut rng)?;
            let star = out.structure(g)?;
            acc.counts[joint_cell(&star, &out.omega_star)] += 1;
            let green = if run < domination_runs {
                sample_ghost(sf.vertex_count(), h, &mut rng)?.green
            } else {
                vec![false; sf.vertex_count()]
            };
            let audit = audit_remaining_coupling(&rg, &omega, &out, &green)?;
            acc.height += audit.height_violations as u64;
            acc.forest += audit.forest_violations as u64;
            acc.dom += (audit.domination_violations + audit.embedding_violations) as u64;
            acc.other += (audit.injectivity_violations + audit.open_map_violations + audit.copy_violations) as u64;
            Ok(acc)
        })
        .try_reduce(empty, |mut a, b| {
            for (x, y) in a.counts.iter_mut().zip(&b.counts) {
                *x += y;
            }
            a.height += b.height;
            a.forest += b.forest;
            a.dom += b.dom;
            a.other += b.other;
            Ok(a)
        })?;
    let chi = crate::stats::chi_square(&tally.counts, &law);
    Ok(LawCheck {
        graph: g.kind().to_string(),
        q,
        p,
        runs,
        cells: law.len(),
        chi_square: chi.statistic,
        dof: chi.dof,
        p_value: chi.p_value,
        height_violations: tally.height,
        forest_violations: tally.forest,
        domination_runs: domination_runs.min(runs),
        domination_violations: tally.dom,
        other_violations: tally.other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_box, build_custom, build_cycle};
    use crate::oracle::{exact_cluster_tail, exact_ghost_probability};
    use crate::perco::open_cluster;
    use crate::stats::chi_square;
    use proptest::prelude::*;

    fn sample_pair<'g>(g: &'g BaseGraph, q: f64, p: f64, seed: u64) -> (StructureFunctions<'g>, Vec<bool>) {
        let mut rng = MasterSeed(seed).stream("sf-test", 0);
        let sf = StructureFunctions::sample(g, q, &mut rng).unwrap();
        let omega = (0..sf.edge_count()).map(|_| rng.bernoulli(p)).collect();
        (sf, omega)
    }

    #[test]
    fn labels_forgotten_give_the_lift() {
        let g = build_box(2, 4).unwrap();
        let (sf, _) = sample_pair(&g, 0.5, 0.5, 1);
        sf.check_consistency().unwrap();
        let mut a: Vec<_> = (0..sf.edge_count()).map(|e| sf.f(e)).collect();
        let mut b: Vec<_> = (0..sf.lift().edge_count())
            .map(|le| {
                let (x, y) = sf.lift().endpoints(le);
                (x.min(y), x.max(y))
            })
            .collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn label_is_a_fair_coin() {
        let g = build_cycle(3).unwrap();
        let trials = 100_000u64;
        let mut hits = vec![0u64; 3];
        for t in 0..trials {
            let sf = StructureFunctions::sample(&g, 0.3, &mut MasterSeed(2).stream("coin", t)).unwrap();
            for (e, h) in hits.iter_mut().enumerate() {
                let (u, _) = g.endpoints(e);
                let (x, y) = sf.f(2 * e);
                *h += (x == 2 * u || y == 2 * u) as u64;
            }
        }
        let sigma = crate::stats::bernoulli_sigma(0.5, trials);
        for h in hits {
            assert!((h as f64 / trials as f64 - 0.5).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn structure_law_on_triangle() {
        let g = build_cycle(3).unwrap();
        // exact law of f by enumerating the 8 x 8 (eta, label) patterns
        let mut law = vec![0.0f64; 64];
        for mask in 0u64..64 {
            let eta = SwitchConfig::from_mask(mask & 7, 3);
            let labels = (0..3).map(|e| mask >> (3 + e) & 1 == 1).collect();
            let sf = StructureFunctions::new(&g, eta, labels).unwrap();
            law[sf.f_code()] += 1.0 / 64.0;
        }
        assert!(law.iter().all(|&w| (w - 1.0 / 64.0).abs() < 1e-15));
        let mut counts = vec![0u64; 64];
        for t in 0..100_000 {
            let sf = StructureFunctions::sample(&g, 0.5, &mut MasterSeed(3).stream("law", t)).unwrap();
            counts[sf.f_code()] += 1;
        }
        assert!(chi_square(&counts, &law).p_value > 0.01);
    }

    #[test]
    fn exploration_extremes() {
        let g = build_box(2, 4).unwrap();
        let (sf, _) = sample_pair(&g, 0.5, 0.5, 4);
        let o = 2 * g.origin();
        let closed = vec![false; sf.edge_count()];
        let tr = explore_cluster(&sf, &closed, o).unwrap();
        assert_eq!(tr.cluster, vec![o]);
        let deg = sf.g(o).len();
        assert_eq!(tr.cluster_steps, deg);
        assert!(tr.prefix(deg).iter().all(|s| s.vertex == o && s.ends.is_none() && s.incident == sf.g(o)));
        assert!(tr.steps[deg..].iter().all(|s| s.ends.is_some()));
        assert_eq!(tr.steps.len(), sf.edge_count());
        let mut edges: Vec<_> = tr.steps.iter().map(|s| s.edge).collect();
        edges.sort_unstable();
        assert_eq!(edges, (0..sf.edge_count()).collect::<Vec<_>>());
        let open = vec![true; sf.edge_count()];
        let tr = explore_cluster(&sf, &open, o).unwrap();
        let mut want = open_cluster(&sf, &open, o);
        want.sort_unstable();
        assert_eq!(tr.cluster, want);
    }

    fn lift_distances(sf: &StructureFunctions<'_>, o: VertexId) -> Vec<usize> {
        let mut dist = vec![usize::MAX; sf.vertex_count()];
        dist[o] = 0;
        let mut queue = std::collections::VecDeque::from([o]);
        while let Some(x) = queue.pop_front() {
            sf.for_each_incident(x, |_, y| {
                if dist[y] == usize::MAX {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
            });
        }
        dist
    }

    /// Changes everything that the first `k` steps have not revealed.
    fn perturb<'g>(sf: &StructureFunctions<'g>, omega: &[bool], tr: &ExplorationTrace, k: usize, rng: &mut StreamRng) -> (StructureFunctions<'g>, Vec<bool>) {
        let g = sf.base();
        let prefix = tr.prefix(k);
        let mut revealed_v = vec![false; sf.vertex_count()];
        let mut revealed_e = vec![false; sf.edge_count()];
        let mut f_known = vec![false; g.edge_count()];
        for s in prefix {
            revealed_v[s.vertex] = true;
            revealed_e[s.edge] = true;
            if s.ends.is_some() {
                f_known[s.edge >> 1] = true;
            }
        }
        let mut eta = sf.eta().bits().to_vec();
        let mut labels = sf.labels().to_vec();
        for e in 0..g.edge_count() {
            if f_known[e] {
                continue;
            }
            let (u, w) = g.endpoints(e);
            let u_seen = revealed_v[2 * u] || revealed_v[2 * u + 1];
            let w_seen = revealed_v[2 * w] || revealed_v[2 * w + 1];
            match (u_seen, w_seen) {
                (false, false) => {
                    eta[e] = rng.bernoulli(0.5);
                    labels[e] = rng.bernoulli(0.5);
                }
                (true, false) => eta[e] = rng.bernoulli(0.5),
                (false, true) => {
                    if rng.bernoulli(0.5) {
                        eta[e] = !eta[e];
                        labels[e] = !labels[e];
                    }
                }
                (true, true) => {}
            }
        }
        let omega2 = omega.iter().enumerate().map(|(a, &w)| if revealed_e[a] { w } else { rng.bernoulli(0.5) }).collect();
        (StructureFunctions::new(g, SwitchConfig::new(eta), labels).unwrap(), omega2)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exploration_is_adapted(seed in any::<u64>(), p in 0.2f64..0.8, frac in 0.0f64..1.0) {
            let g = build_box(2, 4).unwrap();
            let (sf, omega) = sample_pair(&g, 0.5, p, seed);
            let o = 2 * g.origin();
            let tr = explore_cluster(&sf, &omega, o).unwrap();
            // replay determinism
            let again = explore_cluster(&sf, &omega, o).unwrap();
            prop_assert_eq!(serde_json::to_string(&tr).unwrap(), serde_json::to_string(&again).unwrap());
            let k = (frac * tr.steps.len() as f64) as usize;
            let mut rng = MasterSeed(seed).stream("perturb", 0);
            for _ in 0..4 {
                let (sf2, omega2) = perturb(&sf, &omega, &tr, k, &mut rng);
                // the perturbation keeps every revealed g-set
                for s in tr.prefix(k) {
                    prop_assert_eq!(sf2.g(s.vertex), s.incident.clone());
                }
                let tr2 = explore_cluster(&sf2, &omega2, o).unwrap();
                prop_assert_eq!(tr.prefix(k), tr2.prefix(k));
                if k < tr.steps.len() {
                    prop_assert_eq!(tr.steps[k].vertex, tr2.steps[k].vertex);
                }
            }
        }

        #[test]
        fn remaining_graph_types(seed in any::<u64>(), radius in 0usize..3) {
            let g = build_box(2, 5).unwrap();
            let (sf, _) = sample_pair(&g, 0.5, 0.5, seed);
            let o = 2 * g.origin();
            let dist = lift_distances(&sf, o);
            let cluster: Vec<VertexId> = (0..sf.vertex_count()).filter(|&x| dist[x] <= radius).collect();
            let rg = build_remaining_graph(&sf, &cluster, o).unwrap();
            rg.check_invariants().unwrap();
            // independent classifier: membership of projections in pi(C_o)
            let mut base_in = vec![false; g.vertex_count()];
            for &x in &cluster {
                base_in[project(x)] = true;
            }
            let mut counts = [0usize; 3];
            for a in 0..sf.edge_count() {
                let (x, y) = sf.f(a);
                if cluster.contains(&x) || cluster.contains(&y) {
                    continue;
                }
                counts[base_in[project(x)] as usize + base_in[project(y)] as usize] += 1;
            }
            prop_assert_eq!(rg.type_counts(), counts);
        }

        #[test]
        fn coupling_invariants_on_explored_clusters(seed in any::<u64>(), p in 0.3f64..0.9) {
            let g = build_box(2, 5).unwrap();
            let (sf, omega0) = sample_pair(&g, 0.5, p, seed);
            let o = 2 * g.origin();
            let tr = explore_cluster(&sf, &omega0, o).unwrap();
            let mut rng = MasterSeed(seed).stream("couple", 0);
            let sf2 = sample_conditioned(&sf, &tr.cluster, 0.5, &mut rng).unwrap();
            for &x in &tr.cluster {
                prop_assert_eq!(sf2.g(x), sf.g(x));
            }
            let rg = build_remaining_graph(&sf2, &tr.cluster, o).unwrap();
            let omega: Vec<bool> = (0..sf2.edge_count()).map(|a| rng.bernoulli(p) && !rg.deleted[a]).collect();
            let out = couple_remaining_to_full(&rg, &omega, 0.5, p, &mut rng).unwrap();
            let green = sample_ghost(sf2.vertex_count(), 0.2, &mut rng).unwrap().green;
            let audit = audit_remaining_coupling(&rg, &omega, &out, &green).unwrap();
            prop_assert!(audit.clean(), "{:?}", audit);
        }
    }

    #[test]
    fn remaining_graph_examples() {
        let g = build_box(2, 5).unwrap();
        let (sf, _) = sample_pair(&g, 0.5, 0.5, 5);
        let o = 2 * g.origin();
        let rg = build_remaining_graph(&sf, &[o], o).unwrap();
        let e1 = rg.edges_of_type(1);
        assert_eq!(rg.type_counts()[2], 0);
        assert_eq!(e1.len(), 4);
        assert!(e1.iter().all(|&a| {
            let (x, y) = sf.f(a);
            x == twin(o) || y == twin(o)
        }));
        assert!(build_remaining_graph(&sf, &[o, o + 4], o).is_err());
        // decoupled copies: the whole level-0 copy leaves level 1 behind, all of it shadow
        let path = build_custom(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let sf = StructureFunctions::new(&path, SwitchConfig::zeros(3), vec![false; 3]).unwrap();
        let copy0: Vec<VertexId> = (0..4).map(|v| 2 * v).collect();
        let rg = build_remaining_graph(&sf, &copy0, 0).unwrap();
        assert_eq!(rg.type_counts(), [0, 0, 3]);
        rg.check_invariants().unwrap();
    }

    #[test]
    fn coupling_without_shadow_copies_input() {
        // C_o is the whole 8-cycle lift: nothing survives
        let g = build_cycle(4).unwrap();
        let sf = StructureFunctions::new(&g, SwitchConfig::from_mask(1, 4), vec![false; 4]).unwrap();
        let all: Vec<VertexId> = (0..8).collect();
        let rg = build_remaining_graph(&sf, &all, 0).unwrap();
        assert_eq!(rg.type_counts(), [0, 0, 0]);
        let mut rng = MasterSeed(6).stream("iso", 0);
        let out = couple_remaining_to_full(&rg, &vec![false; 8], 0.5, 0.5, &mut rng).unwrap();
        assert!(out.roots.is_empty() && out.pioneers.is_empty());
        // a path with C_o = {0_0}: type-0 edges are copied
        let path = build_custom(3, &[(0, 1), (1, 2)]).unwrap();
        let sf = StructureFunctions::new(&path, SwitchConfig::from_mask(0b01, 2), vec![true, false]).unwrap();
        let rg = build_remaining_graph(&sf, &[0], 0).unwrap();
        let omega: Vec<bool> = (0..4).map(|a| !rg.deleted[a]).collect();
        let out = couple_remaining_to_full(&rg, &omega, 0.5, 0.5, &mut rng).unwrap();
        for a in rg.edges_of_type(0) {
            assert_eq!(out.structure(&path).unwrap().f(a), sf.f(a));
            assert!(out.omega_star[a]);
        }
    }

    #[test]
    fn law_check_small() {
        let g = build_cycle(4).unwrap();
        let law = plain_joint_law(&g, 0.5, 0.4).unwrap();
        assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rep = remaining_law_check(&g, 0.5, 0.4, 0.3, 100_000, 20_000, MasterSeed(7)).unwrap();
        assert!(rep.p_value > 0.01, "{rep:?}");
        assert_eq!(rep.height_violations + rep.forest_violations + rep.domination_violations + rep.other_violations, 0);
        assert!(remaining_law_check(&g, 0.3, 0.4, 0.3, 10, 10, MasterSeed(7)).is_err());
    }

    #[test]
    fn ghost_and_tail_extremes() {
        let g = build_box(2, 9).unwrap();
        let m = estimate_m_h(&g, 0.0, 0.3, 0.5, 20_000, MasterSeed(8)).unwrap();
        let target = 1.0 - (-0.3f64).exp();
        assert!((m.m_hat - target).abs() < 3.0 * crate::stats::bernoulli_sigma(target, 20_000));
        let big = estimate_m_h(&g, 0.5, 50.0, 0.5, 1000, MasterSeed(8)).unwrap();
        assert_eq!(big.m_hat, 1.0);
        let tail = tail_psi(&g, 0.0, 0.5, 5, 1000, MasterSeed(8)).unwrap();
        assert_eq!(tail[0].psi(), 1.0);
        assert!(tail[1..].iter().all(|t| t.count == 0));
        let tail = tail_psi(&g, 0.4, 0.5, 10, 1000, MasterSeed(8)).unwrap();
        assert_eq!(tail[0].psi(), 1.0);
        assert!(tail.windows(2).all(|w| w[0].count >= w[1].count));
    }

    #[test]
    fn ghost_and_tail_match_enumeration() {
        let g = build_cycle(3).unwrap();
        let exact = exact_ghost_probability(&g, 0.5, 0.5, 2 * g.origin(), 0.3).unwrap();
        let m = estimate_m_h(&g, 0.5, 0.3, 0.5, 100_000, MasterSeed(9)).unwrap();
        assert!((m.m_hat - exact).abs() < 3.0 * crate::stats::bernoulli_sigma(exact, 100_000), "{} vs {exact}", m.m_hat);
        let psi2: f64 = exact_cluster_tail(&g, &0.5, &0.5, 2 * g.origin(), 2).unwrap();
        let tail = tail_psi(&g, 0.5, 0.5, 3, 100_000, MasterSeed(9)).unwrap();
        assert!((tail[1].psi() - psi2).abs() < 3.0 * crate::stats::bernoulli_sigma(psi2, 100_000));
    }

    #[test]
    fn quenched_all_zero_matches_base() {
        // eta = 0: the cluster of o_0 lives in the level-0 copy of the base graph
        let g = build_box(2, 9).unwrap();
        let zero = SwitchConfig::zeros(g.edge_count());
        let tail = quenched_tail(&g, 0.45, &zero, 12, 20_000, MasterSeed(10)).unwrap();
        let key = |t: u64| MasterSeed(10).key("quenched-tail", t);
        let mut counts = vec![0u64; 13];
        for t in 0..20_000u64 {
            let k = key(t);
            let omega: Vec<bool> = (0..g.edge_count()).map(|e| uniform_at(k, (g.edge_count() + 2 * e) as u64) < 0.45).collect();
            let size = open_cluster(&g, &omega, g.origin()).len().min(12);
            counts[size] += 1;
        }
        for pt in &tail {
            assert_eq!(pt.count, counts[pt.n..].iter().sum::<u64>());
        }
    }

    #[test]
    fn exp_inequality_trivial_cases() {
        let g = build_box(2, 9).unwrap();
        let r = verify_exp_inequality(&g, 0.0, 0.2, 10, 2000, MasterSeed(11)).unwrap();
        assert_eq!(r.s, 0.0);
        assert!(r.rows.iter().all(|row| row.psi_s == 0.0 && row.psi_p == 0.0 && row.margin <= 0.0));
        assert!(r.passes(3.0));
        let r = verify_exp_inequality(&g, 0.4, f64::INFINITY, 10, 2000, MasterSeed(11)).unwrap();
        assert!(r.clamped && r.s == 0.0);
        assert!(r.passes(3.0));
    }
}
