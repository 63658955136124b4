//! Enhanced percolation and the coupling showing that percolation on the lift
//! is dominated by enhanced percolation on the base graph.
//!
//! Pieces:
//! - cycle partitions of lattice boxes (disjoint translates of a unit square
//!   plus a cell around each of them);
//! - the beta field, iid Bernoulli(t) bits per base vertex with
//!   `beta_x = 1 => both lifts of x are joined within D steps`;
//! - the enhanced cluster of `(omega, alpha)`;
//! - the step-by-step exploration coupling a multigraph percolation on the
//!   lift with enhanced percolation on the base, audited after every action.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::estimators::{pc_from_thresholds, PcEstimate, BISECTION_STEPS};
use crate::graph::{BaseGraph, EdgeId, GraphKind, Host, VertexId};
use crate::lift::{build_lift, is_switching_cycle, project, LiftedGraph, SwitchConfig};
use crate::perco::{components, lift_vertex_mask};
use crate::rng::{child_key, uniform_at, MasterSeed, StreamRng};
use crate::scalar::{binomial, bernoulli_weight, from_u64, Weight};
use crate::stats::bernoulli_sigma;

/// Disjoint translated cycles with a cell around each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclePartition {
    /// Length `N` of the base cycle.
    pub cycle_len: usize,
    /// Vertices of each cycle in cyclic order.
    pub cycles: Vec<Vec<VertexId>>,
    /// Edges of each cycle.
    pub cycle_edges: Vec<Vec<EdgeId>>,
    /// Sorted cell members.
    pub cells: Vec<Vec<VertexId>>,
    pub cell_of: Vec<usize>,
    /// Density radius: every vertex is within `R` of some cycle.
    pub density_radius: usize,
    /// Cell size bound `L = max |B_R(C_i)|`.
    pub cell_bound: usize,
    /// `D = 2 R + N`.
    pub twin_steps: usize,
    /// `r = R + N`.
    pub radius: usize,
}

fn multi_source_bfs(g: &BaseGraph, sources: &[VertexId]) -> (Vec<usize>, Vec<VertexId>) {
    let dist = g.bfs_distances(sources);
    let mut order: Vec<VertexId> = (0..g.vertex_count()).collect();
    order.sort_by_key(|&v| (dist[v], v));
    (dist, order)
}

/// Translates of the unit square with lower corner at even coordinates
/// `(2a, 2b)`, `a + b` even, in the first two axes (any value of the others).
pub fn build_cycle_partition(g: &BaseGraph) -> Result<CyclePartition> {
    let GraphKind::Box { dim, side } = *g.kind() else {
        return Err(Error::InvalidGraph("cycle partitions are built for lattice boxes only".into()));
    };
    if dim < 2 || side < 2 {
        return Err(Error::InvalidGraph(format!("box({dim},{side}) contains no unit square")));
    }
    let square_at = |v: VertexId| -> Option<Vec<VertexId>> {
        let c = g.box_coords(v).expect("box vertex");
        if c[0] % 2 != 0 || c[1] % 2 != 0 || c[0] + 1 >= side || c[1] + 1 >= side {
            return None;
        }
        let at = |dx: usize, dy: usize| {
            let mut d = c.clone();
            d[0] += dx;
            d[1] += dy;
            g.box_vertex(&d).expect("inside box")
        };
        Some(vec![at(0, 0), at(1, 0), at(1, 1), at(0, 1)])
    };
    let even_block = |v: VertexId| {
        let c = g.box_coords(v).expect("box vertex");
        (c[0] / 2 + c[1] / 2) % 2 == 0
    };
    // checkerboard of 2x2 blocks, then fill-ins from the other colour where
    // the box edge leaves a vertex at distance > 1
    let mut cycles: Vec<Vec<VertexId>> = (0..g.vertex_count()).filter(|&v| even_block(v)).filter_map(square_at).collect();
    let mut sources: Vec<VertexId> = cycles.iter().flatten().copied().collect();
    let mut dist = g.bfs_distances(&sources);
    for v in (0..g.vertex_count()).filter(|&v| !even_block(v)) {
        let Some(square) = square_at(v) else { continue };
        let needed = square
            .iter()
            .flat_map(|&w| std::iter::once(w).chain(g.adjacency(w).iter().map(|&(_, y)| y)))
            .any(|w| dist[w] > 1);
        if needed {
            sources.extend(&square);
            cycles.push(square);
            dist = g.bfs_distances(&sources);
        }
    }
    let cycle_edges: Vec<Vec<EdgeId>> = cycles
        .iter()
        .map(|cy| (0..4).map(|i| g.edge_between(cy[i], cy[(i + 1) % 4]).expect("square edge")).collect())
        .collect();
    let mut cell_of = vec![usize::MAX; g.vertex_count()];
    let mut sources = Vec::new();
    for (i, cy) in cycles.iter().enumerate() {
        for &v in cy {
            cell_of[v] = i;
            sources.push(v);
        }
    }
    let (dist, order) = multi_source_bfs(g, &sources);
    for &v in &order {
        if dist[v] == 0 {
            continue;
        }
        let parent = g
            .adjacency(v)
            .iter()
            .map(|&(_, w)| w)
            .filter(|&w| dist[w] + 1 == dist[v])
            .min()
            .expect("BFS parent");
        cell_of[v] = cell_of[parent];
    }
    let mut cells = vec![Vec::new(); cycles.len()];
    for v in 0..g.vertex_count() {
        cells[cell_of[v]].push(v);
    }
    let density_radius = dist.iter().copied().max().unwrap_or(0);
    let cell_bound = cycles
        .iter()
        .map(|cy| g.bfs_distances(cy).iter().filter(|&&d| d <= density_radius).count())
        .max()
        .unwrap_or(0);
    let n = 4;
    let part = CyclePartition {
        cycle_len: n,
        cycles,
        cycle_edges,
        cells,
        cell_of,
        density_radius,
        cell_bound,
        twin_steps: 2 * density_radius + n,
        radius: density_radius + n,
    };
    part.validate(g)?;
    Ok(part)
}

impl CyclePartition {
    /// Checks disjointness, density, cell connectivity and the size bound.
    pub fn validate(&self, g: &BaseGraph) -> Result<()> {
        let bad = |m: String| Err(Error::Invariant(format!("cycle partition: {m}")));
        let mut used = vec![false; g.vertex_count()];
        for (i, (cy, edges)) in self.cycles.iter().zip(&self.cycle_edges).enumerate() {
            if cy.len() != self.cycle_len {
                return bad(format!("cycle {i} has length {}", cy.len()));
            }
            crate::lift::validate_cycle(g, edges)?;
            for &v in cy {
                if std::mem::replace(&mut used[v], true) {
                    return bad(format!("cycles overlap at {v}"));
                }
                if self.cell_of[v] != i {
                    return bad(format!("cycle {i} not inside its cell"));
                }
            }
        }
        let all: Vec<VertexId> = self.cycles.iter().flatten().copied().collect();
        let dist = g.bfs_distances(&all);
        if dist.iter().any(|&d| d > self.density_radius) {
            return bad("cycles are not R-dense".into());
        }
        let mut seen = vec![false; g.vertex_count()];
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.len() > self.cell_bound {
                return bad(format!("cell {i} has {} > L = {} vertices", cell.len(), self.cell_bound));
            }
            for &v in cell {
                if std::mem::replace(&mut seen[v], true) {
                    return bad(format!("vertex {v} in two cells"));
                }
            }
            let inside: Vec<bool> = (0..g.vertex_count()).map(|v| self.cell_of[v] == i).collect();
            let mut reached = vec![false; g.vertex_count()];
            let mut stack = vec![cell[0]];
            reached[cell[0]] = true;
            let mut count = 1;
            while let Some(x) = stack.pop() {
                for &(_, y) in g.adjacency(x) {
                    if inside[y] && !reached[y] {
                        reached[y] = true;
                        count += 1;
                        stack.push(y);
                    }
                }
            }
            if count != cell.len() {
                return bad(format!("cell {i} is disconnected"));
            }
        }
        if seen.iter().any(|&s| !s) {
            return bad("cells do not cover every vertex".into());
        }
        Ok(())
    }
}

/// `c = sum over odd k of C(N, k) q^k (1 - q)^(N - k)`.
pub fn switching_cycle_probability<T: Weight>(n: usize, q: &T) -> T {
    (1..=n)
        .step_by(2)
        .fold(T::zero(), |acc, k| acc + from_u64::<T>(binomial(n as u64, k as u64)) * bernoulli_weight(q, k, n))
}

/// Closed form `(1 - (1 - 2q)^N) / 2`.
pub fn switching_cycle_closed_form<T: Weight>(n: usize, q: &T) -> T {
    let one = T::one();
    let two = one.clone() + one.clone();
    (one.clone() - crate::scalar::powi(&(one - two.clone() * q.clone()), n)) / two
}

/// `1 - (1 - p)^(1/n)`: the parameter whose `n`-fold maximum is Bernoulli(p).
pub fn splitting_parameter(p: f64, n: usize) -> f64 {
    if n == 1 {
        return p;
    }
    1.0 - (1.0 - p).powf(1.0 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCheck {
    pub p: f64,
    pub n: usize,
    pub trials: u64,
    pub successes: u64,
    pub frequency: f64,
    pub sigma: f64,
    /// `(frequency - p) / sigma`.
    pub z: f64,
}

/// Empirical law of the maximum of `n` iid Bernoulli(`1 - (1-p)^(1/n)`) bits.
pub fn split_bernoulli_check(p: f64, n: usize, trials: u64, seed: MasterSeed) -> Result<SplitCheck> {
    check_probability("p", p)?;
    if n == 0 || trials == 0 {
        return Err(Error::InvalidParameter("n and trials must be positive".into()));
    }
    let a = splitting_parameter(p, n);
    let key = seed.key(&format!("split:{n}"), 0);
    let successes = (0..trials)
        .into_par_iter()
        .map(|t| (0..n as u64).any(|i| uniform_at(key, t * n as u64 + i) < a) as u64)
        .sum::<u64>();
    let frequency = successes as f64 / trials as f64;
    let sigma = bernoulli_sigma(p, trials);
    let z = if sigma > 0.0 { (frequency - p) / sigma } else if frequency == p { 0.0 } else { f64::INFINITY };
    Ok(SplitCheck { p, n, trials, successes, frequency, sigma, z })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaField {
    pub beta: Vec<bool>,
    /// Whether the lift of each partition cycle is connected.
    pub cycle_open: Vec<bool>,
    pub c: f64,
    pub t: f64,
}

/// The beta field of a switching configuration.
///
/// Each cell's indicator `O_i` is split exactly into `|P_i|` iid
/// Bernoulli(`a_i`) bits dominated by it (sampled sequentially given
/// `O_i = 1`), then each bit is thinned by an independent Bernoulli(`t / a_i`).
/// Every vertex consumes two uniforms.
pub fn sample_beta_field(part: &CyclePartition, g: &BaseGraph, eta: &SwitchConfig, q: f64, rng: &mut StreamRng) -> Result<BetaField> {
    check_probability("q", q)?;
    let c = switching_cycle_closed_form(part.cycle_len, &q);
    let t = 1.0 - (1.0 - c).powf(1.0 / part.cell_bound as f64);
    let mut beta = vec![false; g.vertex_count()];
    let mut cycle_open = Vec::with_capacity(part.cycles.len());
    for (cell, edges) in part.cells.iter().zip(&part.cycle_edges) {
        let open = is_switching_cycle(g, eta, edges)?;
        cycle_open.push(open);
        let n = cell.len();
        let a = 1.0 - (1.0 - c).powf(1.0 / n as f64);
        let mut found = false;
        for (j, &x) in cell.iter().enumerate() {
            let u_split = rng.uniform();
            let u_thin = rng.uniform();
            let v = open && {
                let prob = if found { a } else { a / (1.0 - (1.0 - a).powi((n - j) as i32)) };
                u_split < prob
            };
            found |= v;
            beta[x] = v && a > 0.0 && u_thin < t / a;
        }
    }
    Ok(BetaField { beta, cycle_open, c, t })
}

/// Whether `x_0` and `x_1` are joined by a path of length at most `max_steps`
/// inside `Z(x, radius) = pi^-1(B_radius(x))`.
pub fn twins_joined_within(lift: &LiftedGraph<'_>, x: VertexId, radius: usize, max_steps: usize) -> bool {
    let g = lift.base();
    let base_dist = g.bfs_distances(&[x]);
    let mut dist = vec![usize::MAX; lift.vertex_count()];
    let mut queue = std::collections::VecDeque::from([2 * x]);
    dist[2 * x] = 0;
    while let Some(y) = queue.pop_front() {
        if dist[y] >= max_steps {
            continue;
        }
        lift.for_each_incident(y, |_, z| {
            if base_dist[project(z)] <= radius && dist[z] == usize::MAX {
                dist[z] = dist[y] + 1;
                queue.push_back(z);
            }
        });
    }
    dist[2 * x + 1] <= max_steps
}

/// Per-vertex balls used by enhanced percolation with radius `r`.
#[derive(Clone, Debug)]
pub struct EnhancedContext {
    pub radius: usize,
    /// `B_r(u)`, sorted.
    pub balls: Vec<Vec<VertexId>>,
    /// Edges with both endpoints in `B_r(u)`.
    pub ball_edges: Vec<Vec<EdgeId>>,
    /// `S_{r+1}(u)`.
    pub spheres: Vec<Vec<VertexId>>,
    /// `S_{r+1/2}(u)`.
    pub sphere_edges: Vec<Vec<EdgeId>>,
}

impl EnhancedContext {
    pub fn new(g: &BaseGraph, radius: usize) -> Self {
        let n = g.vertex_count();
        let mut ctx = Self {
            radius,
            balls: Vec::with_capacity(n),
            ball_edges: Vec::with_capacity(n),
            spheres: Vec::with_capacity(n),
            sphere_edges: Vec::with_capacity(n),
        };
        let mut dist = vec![usize::MAX; n];
        for u in 0..n {
            let mut order = vec![u];
            dist[u] = 0;
            let mut head = 0;
            while head < order.len() {
                let x = order[head];
                head += 1;
                if dist[x] > radius {
                    continue;
                }
                for &(_, y) in g.adjacency(x) {
                    if dist[y] == usize::MAX {
                        dist[y] = dist[x] + 1;
                        order.push(y);
                    }
                }
            }
            let mut ball: Vec<VertexId> = order.iter().copied().filter(|&v| dist[v] <= radius).collect();
            let mut sphere: Vec<VertexId> = order.iter().copied().filter(|&v| dist[v] == radius + 1).collect();
            ball.sort_unstable();
            sphere.sort_unstable();
            let mut inner = BTreeSet::new();
            let mut outer = BTreeSet::new();
            for &x in &ball {
                for &(e, y) in g.adjacency(x) {
                    if dist[y] <= radius {
                        inner.insert(e);
                    } else if dist[x] == radius && dist[y] == radius + 1 {
                        outer.insert(e);
                    }
                }
            }
            for &v in &order {
                dist[v] = usize::MAX;
            }
            ctx.balls.push(ball);
            ctx.spheres.push(sphere);
            ctx.ball_edges.push(inner.into_iter().collect());
            ctx.sphere_edges.push(outer.into_iter().collect());
        }
        ctx
    }
}

/// Enhanced cluster of `o` by alternating closure steps.
///
/// Odd steps take the union of the `omega`-clusters of the current set; even
/// steps add `S_{r+1}(u)` for each `u` of the set whose closed `r`-ball lies
/// in the set, has all internal edges open, and has `alpha_u = 1`. Stops at
/// the first even step that adds nothing, or as soon as a vertex of `stop`
/// is reached. Returns the membership mask and whether `stop` was hit.
pub fn enhanced_cluster_mask(
    g: &BaseGraph,
    ctx: &EnhancedContext,
    omega: &[bool],
    alpha: &[bool],
    o: VertexId,
    stop: Option<&[bool]>,
) -> (Vec<bool>, Vec<VertexId>, bool) {
    let n = g.vertex_count();
    let mut in_c = vec![false; n];
    let mut fired = vec![false; n];
    let mut members = vec![o];
    in_c[o] = true;
    let hit = |v: VertexId| stop.is_some_and(|s| s[v]);
    if hit(o) {
        return (in_c, members, true);
    }
    let mut stack = vec![o];
    for _round in 0..=n {
        while let Some(x) = stack.pop() {
            for &(e, y) in g.adjacency(x) {
                if omega[e] && !in_c[y] {
                    in_c[y] = true;
                    members.push(y);
                    if hit(y) {
                        return (in_c, members, true);
                    }
                    stack.push(y);
                }
            }
        }
        let snapshot = members.len();
        let mut grew = false;
        for i in 0..snapshot {
            let u = members[i];
            if fired[u] || !alpha[u] {
                continue;
            }
            if ctx.balls[u].iter().all(|&v| in_c[v]) && ctx.ball_edges[u].iter().all(|&e| omega[e]) {
                fired[u] = true;
                for &v in &ctx.spheres[u] {
                    if !in_c[v] {
                        in_c[v] = true;
                        members.push(v);
                        grew = true;
                        if hit(v) {
                            return (in_c, members, true);
                        }
                        stack.push(v);
                    }
                }
            }
        }
        if !grew {
            break;
        }
    }
    (in_c, members, false)
}

/// Sorted enhanced cluster of `o`.
pub fn sample_enhanced_cluster(g: &BaseGraph, omega: &[bool], alpha: &[bool], o: VertexId, radius: usize) -> Result<Vec<VertexId>> {
    if omega.len() != g.edge_count() || alpha.len() != g.vertex_count() {
        return Err(Error::InvalidParameter("omega/alpha length mismatch".into()));
    }
    let ctx = EnhancedContext::new(g, radius);
    let (_, mut members, _) = enhanced_cluster_mask(g, &ctx, omega, alpha, o, None);
    members.sort_unstable();
    Ok(members)
}

/// Per-trial enhanced reach thresholds: the smallest edge weight `w` such that
/// opening every edge of weight `<= w` lets the enhanced cluster of the
/// origin reach the boundary. `alpha_u = [v_u < s]` with shared uniforms.
pub fn enhanced_thresholds(g: &BaseGraph, radius: usize, s: f64, trials: u64, seed: MasterSeed) -> Result<Vec<f64>> {
    check_probability("s", s)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let ctx = EnhancedContext::new(g, radius);
    let boundary = g.boundary();
    let o = g.origin();
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            // same edge weights as the plain base estimate
            let key = seed.key("pc-base", t);
            let akey = seed.key("pc-alpha", t);
            let w: Vec<f64> = (0..g.edge_count() as u64).map(|i| uniform_at(key, i)).collect();
            let alpha: Vec<bool> = (0..g.vertex_count() as u64).map(|i| uniform_at(akey, i) < s).collect();
            let mut sorted = w.clone();
            sorted.sort_by(f64::total_cmp);
            let reach_at = |i: usize| {
                let cut = sorted[i];
                let omega: Vec<bool> = w.iter().map(|&x| x <= cut).collect();
                enhanced_cluster_mask(g, &ctx, &omega, &alpha, o, Some(&boundary)).2
            };
            if boundary[o] {
                return f64::NEG_INFINITY;
            }
            if sorted.is_empty() || !reach_at(sorted.len() - 1) {
                return f64::INFINITY;
            }
            let (mut lo, mut hi) = (0usize, sorted.len() - 1);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if reach_at(mid) {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            sorted[lo]
        })
        .collect())
}

/// `p_c(G, s)` for enhancement radius `r`, by bisection on enhanced reach.
pub fn estimate_enhanced_pc(g: &BaseGraph, radius: usize, s: f64, trials: u64, seed: MasterSeed) -> Result<PcEstimate> {
    let th = enhanced_thresholds(g, radius, s, trials, seed)?;
    pc_from_thresholds(&th, BISECTION_STEPS, g.kind().to_string(), None)
}

/// Fixed data of the exploration coupling on one base graph.
#[derive(Clone, Debug)]
pub struct MonoContext<'g> {
    pub graph: &'g BaseGraph,
    pub partition: CyclePartition,
    pub enhanced: EnhancedContext,
    /// Copies per lifted edge, `M = max |B_{r+2}(u)| + 1`.
    pub multiplicity: usize,
    /// Per base edge: number of vertices within `r + 1` of an endpoint.
    pub s_bound: Vec<usize>,
    /// Lift-side edge and vertex counts entering the nominal `s`.
    pub interior_counts: (usize, usize),
}

impl<'g> MonoContext<'g> {
    pub fn new(g: &'g BaseGraph, partition: CyclePartition) -> Self {
        let r = partition.radius;
        let enhanced = EnhancedContext::new(g, r);
        let big = EnhancedContext::new(g, r + 1);
        let multiplicity = (0..g.vertex_count()).map(|u| big.balls[u].len() + big.spheres[u].len()).max().unwrap_or(0) + 1;
        let s_bound = g
            .edges()
            .iter()
            .map(|&(a, b)| {
                let mut set: BTreeSet<VertexId> = big.balls[a].iter().copied().collect();
                set.extend(big.balls[b].iter().copied());
                set.len()
            })
            .collect();
        let widest = (0..g.vertex_count()).max_by_key(|&u| (enhanced.balls[u].len(), std::cmp::Reverse(u))).unwrap_or(0);
        let interior_counts = (enhanced.ball_edges[widest].len(), enhanced.sphere_edges[widest].len());
        Self {
            graph: g,
            partition,
            enhanced,
            multiplicity,
            s_bound,
            interior_counts,
        }
    }

    /// `p_hat = 1 - (1 - p)^(1/M)`.
    pub fn p_hat(&self, p: f64) -> f64 {
        splitting_parameter(p, self.multiplicity)
    }

    /// `t * p_hat^(n3 + n4)` for the largest ball.
    pub fn nominal_s(&self, p: f64, t: f64) -> f64 {
        let (n3, n4) = self.interior_counts;
        t * self.p_hat(p).powi((n3 + n4) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum CopyState {
    Unexplored = 0,
    P = 1,
    S = 2,
}

/// Full record of one run of the exploration coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTranscript {
    pub q: f64,
    pub p: f64,
    pub run: u64,
    pub radius: usize,
    pub multiplicity: usize,
    pub p_hat: f64,
    pub t: f64,
    pub s_nominal: f64,
    pub eta_hex: String,
    pub steps: usize,
    pub actions: usize,
    /// Sorted `C_inf`.
    pub c_final: Vec<VertexId>,
    /// Sorted `C'_inf`.
    pub c_prime_final: Vec<VertexId>,
    /// Final alpha after the fill.
    pub alpha: Vec<bool>,
    /// `OR_k kappa_(e,k)` after the fill.
    pub kappa_open: Vec<bool>,
    pub enhancement_attempts: u64,
    pub enhancement_successes: u64,
    pub p_explored_copies: usize,
    pub s_explored_copies: usize,
    pub base_reaches: bool,
    pub lift_reaches: bool,
    /// `C_inf` equals the enhanced cluster of `(OR_k kappa, alpha)`.
    pub enhanced_matches: bool,
    /// `C'_inf` lies in the open cluster of `o'` in the lift.
    pub within_lift_cluster: bool,
    pub violations: Vec<String>,
}

impl CouplingTranscript {
    pub fn ok(&self) -> bool {
        self.violations.is_empty() && self.enhanced_matches && self.within_lift_cluster && self.base_reaches == self.lift_reaches
    }
}

struct Explorer<'a, 'g> {
    ctx: &'a MonoContext<'g>,
    lift: LiftedGraph<'g>,
    m: usize,
    omega_key: u64,
    p_hat: f64,
    omega_or: Vec<bool>,
    base_p: Vec<Option<u8>>,
    copy: Vec<CopyState>,
    p_count: Vec<usize>,
    s_count: Vec<usize>,
    kappa: Vec<Option<bool>>,
    in_c: Vec<bool>,
    in_cp: Vec<bool>,
    s_vertex: Vec<bool>,
    alpha: Vec<Option<bool>>,
    actions: usize,
    origin: VertexId,
    violations: Vec<String>,
}

impl<'a, 'g> Explorer<'a, 'g> {
    fn omega(&self, le: usize, k: usize) -> bool {
        uniform_at(self.omega_key, (le * self.m + k) as u64) < self.p_hat
    }

    fn add_base(&mut self, v: VertexId) -> bool {
        !std::mem::replace(&mut self.in_c[v], true)
    }

    /// Properties (A)-(E) of the exploration.
    fn audit(&mut self, what: &str) -> bool {
        let g = self.ctx.graph;
        let m = self.m;
        let mut fail = |msg: String| {
            self.violations.push(format!("after action {} ({what}): {msg}", self.actions));
        };
        for e in 0..g.edge_count() {
            let (c0, c1) = (self.p_count[2 * e], self.p_count[2 * e + 1]);
            match self.base_p[e] {
                Some(l) => {
                    let (own, other) = if l == 0 { (c0, c1) } else { (c1, c0) };
                    if own != m || other != 0 {
                        fail(format!("(A) base edge {e}: p-explored copies {c0}/{c1}"));
                    }
                    if self.s_count[2 * e + l as usize] != 0 {
                        fail(format!("(A) base edge {e}: p-explored lift also has s-explored copies"));
                    }
                }
                None => {
                    if c0 + c1 + self.s_count[2 * e] + self.s_count[2 * e + 1] != 0 {
                        fail(format!("(B) base edge {e} is p-unexplored but a lift is explored"));
                    }
                }
            }
            for l in 0..2 {
                let s = self.s_count[2 * e + l];
                if s > self.ctx.s_bound[e] || s >= m {
                    fail(format!("(D) lift {} has {s} s-explored copies (bound {}, M = {m})", 2 * e + l, self.ctx.s_bound[e]));
                }
            }
        }
        // (C)
        let reach = open_reach(&self.lift, &self.omega_or, 2 * self.origin);
        if let Some(x) = (0..self.in_cp.len()).find(|&x| self.in_cp[x] && !reach[x]) {
            fail(format!("(C) lifted vertex {x} of C' is not joined to o'"));
        }
        // (E)
        if let Some(x) = (0..self.in_cp.len()).find(|&x| self.in_cp[x] && !self.in_c[project(x)]) {
            fail(format!("(E) lifted vertex {x} projects outside C"));
        }
        if let Some(v) = (0..self.in_c.len()).find(|&v| self.in_c[v] && !self.in_cp[2 * v] && !self.in_cp[2 * v + 1]) {
            fail(format!("(E) base vertex {v} has no lift in C'"));
        }
        self.violations.is_empty()
    }

    fn odd_step(&mut self) -> bool {
        let g = self.ctx.graph;
        let mut candidates: BTreeSet<EdgeId> = BTreeSet::new();
        for v in 0..g.vertex_count() {
            if self.in_c[v] {
                candidates.extend(g.adjacency(v).iter().map(|&(e, _)| e).filter(|&e| self.base_p[e].is_none()));
            }
        }
        while let Some(e) = candidates.pop_first() {
            if self.base_p[e].is_some() {
                continue;
            }
            let Some(le) = [2 * e, 2 * e + 1].into_iter().find(|&le| {
                let (a, b) = self.lift.endpoints(le);
                self.in_cp[a] || self.in_cp[b]
            }) else {
                self.violations.push(format!("(E) no lift of edge {e} meets C'"));
                return false;
            };
            let mut any_open = false;
            for k in 0..self.m {
                let idx = le * self.m + k;
                if self.copy[idx] != CopyState::Unexplored {
                    self.violations.push(format!("copy ({le},{k}) explored twice"));
                    return false;
                }
                self.copy[idx] = CopyState::P;
                let w = self.omega(le, k);
                self.kappa[e * self.m + k] = Some(w);
                any_open |= w;
            }
            self.p_count[le] = self.m;
            self.base_p[e] = Some((le & 1) as u8);
            if any_open {
                let (a, b) = self.lift.endpoints(le);
                self.in_cp[a] = true;
                self.in_cp[b] = true;
                for v in [project(a), project(b)] {
                    if self.add_base(v) {
                        candidates.extend(g.adjacency(v).iter().map(|&(f, _)| f).filter(|&f| self.base_p[f].is_none()));
                    }
                }
            }
            self.actions += 1;
            if !self.audit("p-exploration") {
                return false;
            }
        }
        true
    }

    fn kappa_open(&self, e: EdgeId) -> Option<bool> {
        self.base_p[e]?;
        Some((0..self.m).any(|k| self.kappa[e * self.m + k] == Some(true)))
    }

    fn s_explore(&mut self, le: usize) -> Option<bool> {
        let k = (0..self.m).find(|&k| self.copy[le * self.m + k] == CopyState::Unexplored)?;
        self.copy[le * self.m + k] = CopyState::S;
        self.s_count[le] += 1;
        Some(self.omega(le, k))
    }

    /// Returns `None` on an invariant failure, otherwise whether `C` grew.
    fn even_step(&mut self, beta: &[bool], stats: &mut (u64, u64)) -> Option<bool> {
        let g = self.ctx.graph;
        let snapshot: Vec<bool> = self.in_c.clone();
        let mut grew = false;
        for u in 0..g.vertex_count() {
            if !snapshot[u] || self.s_vertex[u] {
                continue;
            }
            let ball = &self.ctx.enhanced.balls[u];
            let edges = &self.ctx.enhanced.ball_edges[u];
            if !ball.iter().all(|&v| snapshot[v]) || !edges.iter().all(|&e| self.kappa_open(e) == Some(true)) {
                continue;
            }
            self.s_vertex[u] = true;
            stats.0 += 1;
            if !self.in_cp[2 * u] && !self.in_cp[2 * u + 1] {
                self.violations.push(format!("(E) vertex {u} has no lift in C'"));
                return None;
            }
            // substep 3: the p-unexplored lift of every edge inside the ball
            let mut interior_open = true;
            for &e in edges {
                for le in [2 * e, 2 * e + 1] {
                    if self.p_count[le] == 0 {
                        match self.s_explore(le) {
                            Some(w) => interior_open &= w,
                            None => {
                                self.violations.push(format!("(D) no s-unexplored copy left on lift {le}"));
                                return None;
                            }
                        }
                    }
                }
            }
            self.actions += 1;
            if !self.audit("enhancement interior") {
                return None;
            }
            // substep 4: one copy of the p-unexplored lift of each S_{r+1/2} edge
            let mut chosen = Vec::new();
            let mut boundary_open = interior_open;
            if interior_open {
                for &e in &self.ctx.enhanced.sphere_edges[u] {
                    let Some(l) = self.base_p[e] else {
                        self.violations.push(format!("sphere edge {e} of {u} is p-unexplored after an odd step"));
                        return None;
                    };
                    let le = 2 * e + (1 - l as usize);
                    match self.s_explore(le) {
                        Some(w) => boundary_open &= w,
                        None => {
                            self.violations.push(format!("(D) no s-unexplored copy left on lift {le}"));
                            return None;
                        }
                    }
                    chosen.push(le);
                }
                self.actions += 1;
                if !self.audit("enhancement boundary") {
                    return None;
                }
            }
            // substep 5
            let a = interior_open && boundary_open && beta[u];
            self.alpha[u] = Some(a);
            if a {
                stats.1 += 1;
                for &v in &self.ctx.enhanced.spheres[u] {
                    grew |= self.add_base(v);
                }
                for &v in ball {
                    self.in_cp[2 * v] = true;
                    self.in_cp[2 * v + 1] = true;
                }
                for le in chosen {
                    let (a, b) = self.lift.endpoints(le);
                    self.in_cp[a] = true;
                    self.in_cp[b] = true;
                }
            }
            self.actions += 1;
            if !self.audit("enhancement") {
                return None;
            }
        }
        Some(grew)
    }
}

/// Vertices joined to `x` by open edges.
fn open_reach(lift: &LiftedGraph<'_>, omega: &[bool], x: VertexId) -> Vec<bool> {
    let mut seen = vec![false; lift.vertex_count()];
    seen[x] = true;
    let mut stack = vec![x];
    while let Some(y) = stack.pop() {
        lift.for_each_incident(y, |e, z| {
            if omega[e] && !seen[z] {
                seen[z] = true;
                stack.push(z);
            }
        });
    }
    seen
}

/// One run of the exploration coupling between percolation on the lift
/// (multigraph with `M` copies per edge at parameter `p_hat`) and enhanced
/// percolation on the base graph.
///
/// Randomness: the run's key drives `eta`, the beta field, every copy bit of
/// the lifted multigraph (random access), and the final fill of `kappa` and
/// `alpha`.
pub fn run_monotonicity_coupling(ctx: &MonoContext<'_>, q: f64, p: f64, seed: MasterSeed, run: u64) -> Result<CouplingTranscript> {
    check_probability("q", q)?;
    check_probability("p", p)?;
    let g = ctx.graph;
    let key = seed.key("mono-coupling", run);
    let mut rng = StreamRng::new(child_key(key, 0));
    let eta = crate::lift::sample_switch_config(g, q, &mut rng)?;
    let beta = sample_beta_field(&ctx.partition, g, &eta, q, &mut rng)?;
    let lift = build_lift(g, eta.clone())?;
    let m = ctx.multiplicity;
    let p_hat = ctx.p_hat(p);
    let omega_key = child_key(key, 1);
    let omega_or: Vec<bool> = (0..lift.edge_count())
        .map(|le| (0..m).any(|k| uniform_at(omega_key, (le * m + k) as u64) < p_hat))
        .collect();
    let o = g.origin();
    let mut ex = Explorer {
        ctx,
        lift,
        m,
        omega_key,
        p_hat,
        omega_or,
        base_p: vec![None; g.edge_count()],
        copy: vec![CopyState::Unexplored; 2 * g.edge_count() * m],
        p_count: vec![0; 2 * g.edge_count()],
        s_count: vec![0; 2 * g.edge_count()],
        kappa: vec![None; g.edge_count() * m],
        in_c: vec![false; g.vertex_count()],
        in_cp: vec![false; 2 * g.vertex_count()],
        s_vertex: vec![false; g.vertex_count()],
        alpha: vec![None; g.vertex_count()],
        actions: 0,
        origin: o,
        violations: Vec::new(),
    };
    ex.in_c[o] = true;
    ex.in_cp[2 * o] = true;
    ex.audit("step 0");
    let mut steps = 0;
    let mut stats = (0u64, 0u64);
    while ex.violations.is_empty() {
        steps += 1;
        if !ex.odd_step() {
            break;
        }
        steps += 1;
        match ex.even_step(&beta.beta, &mut stats) {
            Some(true) => continue,
            _ => break,
        }
    }
    // step infinity
    let s_nominal = ctx.nominal_s(p, beta.t);
    let fill_key = child_key(key, 2);
    let kappa_open: Vec<bool> = (0..g.edge_count())
        .map(|e| {
            (0..m).any(|k| match ex.kappa[e * m + k] {
                Some(b) => b,
                None => uniform_at(fill_key, (e * m + k) as u64) < p_hat,
            })
        })
        .collect();
    let alpha_key = child_key(key, 3);
    let alpha: Vec<bool> = (0..g.vertex_count())
        .map(|u| ex.alpha[u].unwrap_or_else(|| uniform_at(alpha_key, u as u64) < s_nominal))
        .collect();
    let c_final: Vec<VertexId> = (0..g.vertex_count()).filter(|&v| ex.in_c[v]).collect();
    let c_prime_final: Vec<VertexId> = (0..2 * g.vertex_count()).filter(|&x| ex.in_cp[x]).collect();
    let (_, mut enhanced, _) = enhanced_cluster_mask(g, &ctx.enhanced, &kappa_open, &alpha, o, None);
    enhanced.sort_unstable();
    let reach = open_reach(&ex.lift, &ex.omega_or, 2 * o);
    let base_boundary = g.boundary();
    let lift_boundary = lift_vertex_mask(&base_boundary);
    Ok(CouplingTranscript {
        q,
        p,
        run,
        radius: ctx.partition.radius,
        multiplicity: m,
        p_hat,
        t: beta.t,
        s_nominal,
        eta_hex: eta.to_hex(),
        steps,
        actions: ex.actions,
        base_reaches: c_final.iter().any(|&v| base_boundary[v]),
        lift_reaches: c_prime_final.iter().any(|&x| lift_boundary[x]),
        enhanced_matches: ex.violations.is_empty() && enhanced == c_final,
        within_lift_cluster: c_prime_final.iter().all(|&x| reach[x]),
        c_final,
        c_prime_final,
        alpha,
        kappa_open,
        enhancement_attempts: stats.0,
        enhancement_successes: stats.1,
        p_explored_copies: ex.p_count.iter().sum(),
        s_explored_copies: ex.s_count.iter().sum(),
        violations: ex.violations,
    })
}

/// Aggregate of many coupling runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub runs: u64,
    pub invariant_violations: u64,
    pub enhanced_mismatches: u64,
    pub lift_cluster_escapes: u64,
    /// Runs where `C'_inf` reaches the lifted boundary but `C_inf` does not.
    pub reach_violations: u64,
    pub lift_reaching_runs: u64,
    pub base_reaching_runs: u64,
    pub enhancement_attempts: u64,
    pub enhancement_successes: u64,
    pub first_failure: Option<String>,
}

pub fn audit_monotonicity_coupling(g: &BaseGraph, q: f64, p: f64, runs: u64, seed: MasterSeed) -> Result<AuditSummary> {
    let ctx = MonoContext::new(g, build_cycle_partition(g)?);
    let transcripts: Vec<CouplingTranscript> = (0..runs)
        .into_par_iter()
        .map(|run| run_monotonicity_coupling(&ctx, q, p, seed, run))
        .collect::<Result<_>>()?;
    let mut s = AuditSummary {
        runs,
        invariant_violations: 0,
        enhanced_mismatches: 0,
        lift_cluster_escapes: 0,
        reach_violations: 0,
        lift_reaching_runs: 0,
        base_reaching_runs: 0,
        enhancement_attempts: 0,
        enhancement_successes: 0,
        first_failure: None,
    };
    for t in &transcripts {
        s.invariant_violations += !t.violations.is_empty() as u64;
        s.enhanced_mismatches += !t.enhanced_matches as u64;
        s.lift_cluster_escapes += !t.within_lift_cluster as u64;
        s.reach_violations += (t.lift_reaches && !t.base_reaches) as u64;
        s.lift_reaching_runs += t.lift_reaches as u64;
        s.base_reaching_runs += t.base_reaches as u64;
        s.enhancement_attempts += t.enhancement_attempts;
        s.enhancement_successes += t.enhancement_successes;
        if s.first_failure.is_none() && !t.ok() {
            s.first_failure = Some(format!("run {}: {:?}", t.run, t.violations));
        }
    }
    Ok(s)
}

/// Components of the lift restricted to `pi^-1(cell)`, with every edge present.
pub fn lifted_cell_components(lift: &LiftedGraph<'_>, cell: &[VertexId]) -> usize {
    let inside: Vec<bool> = {
        let mut m = vec![false; lift.base().vertex_count()];
        for &v in cell {
            m[v] = true;
        }
        m
    };
    let omega: Vec<bool> = (0..lift.edge_count())
        .map(|le| {
            let (a, b) = lift.endpoints(le);
            inside[project(a)] && inside[project(b)]
        })
        .collect();
    let labels = components(lift, &omega);
    let mut roots: Vec<usize> = cell.iter().flat_map(|&v| [labels[2 * v], labels[2 * v + 1]]).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_box, build_cycle};
    use crate::scalar::ratio;
    use crate::stats::chi_square;
    use num_rational::BigRational;
    use num_traits::Zero;
    use proptest::prelude::*;

    #[test]
    fn partition_examples() {
        let g8 = build_box(2, 8).unwrap();
        let p8 = build_cycle_partition(&g8).unwrap();
        assert_eq!(p8.density_radius, 1);
        // checkerboard of eight squares plus the two corner fill-ins
        assert_eq!(p8.cycles.len(), 10);
        assert_eq!(p8.cell_bound, 12);
        assert_eq!(p8.twin_steps, 6);
        assert_eq!(p8.radius, 5);
        let g4 = build_box(2, 4).unwrap();
        let p4 = build_cycle_partition(&g4).unwrap();
        assert_eq!(p4.cells.iter().map(|c| c.len()).sum::<usize>(), 16);
        let g10 = build_box(2, 10).unwrap();
        assert_eq!(build_cycle_partition(&g10).unwrap().density_radius, 1);
        let g3 = build_box(3, 4).unwrap();
        build_cycle_partition(&g3).unwrap();
        assert!(build_cycle_partition(&build_box(2, 1).unwrap()).is_err());
        assert!(build_cycle_partition(&build_cycle(5).unwrap()).is_err());
    }

    #[test]
    fn density_radius_by_exhaustive_distance() {
        let g = build_box(2, 8).unwrap();
        let part = build_cycle_partition(&g).unwrap();
        // independent recomputation: distance from each vertex to each translate
        let mut worst = 0;
        for v in 0..g.vertex_count() {
            let d = g.bfs_distances(&[v]);
            let best = part.cycles.iter().map(|cy| cy.iter().map(|&w| d[w]).min().unwrap()).min().unwrap();
            worst = worst.max(best);
        }
        assert_eq!(worst, 1);
    }

    #[test]
    fn switching_cycle_probability_examples() {
        let half = ratio(1, 2);
        for n in 3..10 {
            assert_eq!(switching_cycle_probability(n, &half), half);
        }
        assert_eq!(switching_cycle_probability(3, &ratio(1, 3)), ratio(13, 27));
        assert_eq!(switching_cycle_probability(5, &BigRational::zero()), BigRational::zero());
        // enumeration of the 8 patterns on three edges
        let q = ratio(1, 3);
        let mut total = BigRational::zero();
        for mask in 0u32..8 {
            if mask.count_ones() % 2 == 1 {
                total += bernoulli_weight(&q, mask.count_ones() as usize, 3);
            }
        }
        assert_eq!(total, ratio(13, 27));
    }

    proptest! {
        #[test]
        fn closed_form_matches_sum(n in 3usize..20, num in 0i64..=60) {
            let q = ratio(num, 60);
            prop_assert_eq!(switching_cycle_probability(n, &q), switching_cycle_closed_form(n, &q));
        }

        #[test]
        fn enhanced_cluster_monotone(seed in any::<u64>(), p in 0.2f64..0.8, s in 0.0f64..1.0) {
            let g = build_box(2, 7).unwrap();
            let mut rng = MasterSeed(seed).stream("enh", 0);
            let w: Vec<f64> = (0..g.edge_count()).map(|_| rng.uniform()).collect();
            let v: Vec<f64> = (0..g.vertex_count()).map(|_| rng.uniform()).collect();
            let omega: Vec<bool> = w.iter().map(|&x| x < p).collect();
            let omega2: Vec<bool> = w.iter().map(|&x| x < p + 0.1).collect();
            let alpha: Vec<bool> = v.iter().map(|&x| x < s).collect();
            let alpha2: Vec<bool> = v.iter().map(|&x| x < s + 0.3).collect();
            let none = vec![false; g.vertex_count()];
            let o = g.origin();
            let base = sample_enhanced_cluster(&g, &omega, &alpha, o, 1).unwrap();
            let plain = sample_enhanced_cluster(&g, &omega, &none, o, 1).unwrap();
            let more_w = sample_enhanced_cluster(&g, &omega2, &alpha, o, 1).unwrap();
            let more_a = sample_enhanced_cluster(&g, &omega, &alpha2, o, 1).unwrap();
            let sub = |a: &[usize], b: &[usize]| a.iter().all(|x| b.binary_search(x).is_ok());
            prop_assert!(sub(&plain, &base));
            prop_assert!(sub(&base, &more_w));
            prop_assert!(sub(&base, &more_a));
            prop_assert_eq!(base, naive_enhanced(&g, &omega, &alpha, o, 1));
        }
    }

    /// Brute-force least fixpoint of the two closure rules.
    fn naive_enhanced(g: &BaseGraph, omega: &[bool], alpha: &[bool], o: VertexId, r: usize) -> Vec<VertexId> {
        let mut in_c = vec![false; g.vertex_count()];
        in_c[o] = true;
        loop {
            let mut changed = false;
            for (e, &(a, b)) in g.edges().iter().enumerate() {
                if omega[e] && in_c[a] != in_c[b] {
                    in_c[a] = true;
                    in_c[b] = true;
                    changed = true;
                }
            }
            for u in 0..g.vertex_count() {
                if !in_c[u] || !alpha[u] {
                    continue;
                }
                let d = g.bfs_distances(&[u]);
                let ball_in = (0..g.vertex_count()).all(|v| d[v] > r || in_c[v]);
                let open = g.edges().iter().enumerate().all(|(e, &(a, b))| d[a] > r || d[b] > r || omega[e]);
                if ball_in && open {
                    for v in 0..g.vertex_count() {
                        if d[v] == r + 1 && !in_c[v] {
                            in_c[v] = true;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (0..g.vertex_count()).filter(|&v| in_c[v]).collect()
    }

    #[test]
    fn enhanced_cluster_examples() {
        let g = build_box(2, 7).unwrap();
        let o = g.origin();
        let closed = vec![false; g.edge_count()];
        let open = vec![true; g.edge_count()];
        let none = vec![false; g.vertex_count()];
        let all = vec![true; g.vertex_count()];
        assert_eq!(sample_enhanced_cluster(&g, &closed, &none, o, 1).unwrap(), vec![o]);
        assert_eq!(sample_enhanced_cluster(&g, &open, &none, o, 1).unwrap().len(), 49);
        assert_eq!(sample_enhanced_cluster(&g, &open, &all, o, 1).unwrap().len(), 49);
        // crafted: only the four edges at the center are open
        let mut omega = closed.clone();
        for &(e, _) in g.adjacency(o) {
            omega[e] = true;
        }
        let mut alpha = none.clone();
        alpha[o] = true;
        let got = sample_enhanced_cluster(&g, &omega, &alpha, o, 1).unwrap();
        let s2 = crate::graph::sphere(&g, o, 2).unwrap();
        assert_eq!(got.len(), 5 + 8);
        assert!(s2.iter().all(|v| got.binary_search(v).is_ok()));
        assert_eq!(got, naive_enhanced(&g, &omega, &alpha, o, 1));
        // without alpha: just the star
        assert_eq!(sample_enhanced_cluster(&g, &omega, &none, o, 1).unwrap().len(), 5);
    }

    #[test]
    fn split_bernoulli() {
        assert_eq!(splitting_parameter(0.3, 1), 0.3);
        let c = split_bernoulli_check(0.0, 4, 1000, MasterSeed(1)).unwrap();
        assert_eq!(c.successes, 0);
        let c = split_bernoulli_check(0.3, 4, 200_000, MasterSeed(1)).unwrap();
        assert!(c.z.abs() < 3.0, "z {}", c.z);
    }

    #[test]
    fn beta_field_law_and_implication() {
        let g = build_box(2, 8).unwrap();
        let part = build_cycle_partition(&g).unwrap();
        let t_expect = 1.0 - 0.5f64.powf(1.0 / 12.0);
        let mut ones = 0u64;
        let mut total = 0u64;
        for run in 0..1600 {
            let mut rng = MasterSeed(9).stream("beta", run);
            let eta = crate::lift::sample_switch_config(&g, 0.5, &mut rng).unwrap();
            let field = sample_beta_field(&part, &g, &eta, 0.5, &mut rng).unwrap();
            assert!((field.t - t_expect).abs() < 1e-15);
            let lift = build_lift(&g, eta).unwrap();
            for x in 0..g.vertex_count() {
                if field.beta[x] {
                    assert!(field.cycle_open[part.cell_of[x]]);
                    assert!(twins_joined_within(&lift, x, part.radius, part.twin_steps));
                }
                ones += field.beta[x] as u64;
                total += 1;
            }
            for (i, &open) in field.cycle_open.iter().enumerate() {
                assert_eq!(open, lifted_cell_components(&lift, &part.cycles[i]) == 1);
            }
        }
        assert!(total >= 100_000);
        let freq = ones as f64 / total as f64;
        // cells are internally correlated, so allow the per-cell variance inflation
        let sigma = bernoulli_sigma(t_expect, total) * (12f64).sqrt();
        assert!((freq - t_expect).abs() < 3.0 * sigma, "{freq} vs {t_expect}");
    }

    #[test]
    fn beta_cell_law_is_product() {
        // within one cell the split bits are iid: check the joint law of two members
        let g = build_box(2, 4).unwrap();
        let part = build_cycle_partition(&g).unwrap();
        let cell = part.cells[0].clone();
        let (x, y) = (cell[0], cell[cell.len() - 1]);
        let mut counts = [0u64; 4];
        for run in 0..200_000 {
            let mut rng = MasterSeed(10).stream("beta-cell", run);
            let eta = crate::lift::sample_switch_config(&g, 0.5, &mut rng).unwrap();
            let f = sample_beta_field(&part, &g, &eta, 0.5, &mut rng).unwrap();
            counts[2 * f.beta[x] as usize + f.beta[y] as usize] += 1;
        }
        let t = 1.0 - 0.5f64.powf(1.0 / part.cell_bound as f64);
        let probs = [(1.0 - t) * (1.0 - t), (1.0 - t) * t, t * (1.0 - t), t * t];
        assert!(chi_square(&counts, &probs).p_value > 0.01, "{counts:?}");
    }

    #[test]
    fn coupling_extremes() {
        let g = build_box(2, 8).unwrap();
        let ctx = MonoContext::new(&g, build_cycle_partition(&g).unwrap());
        let t0 = run_monotonicity_coupling(&ctx, 0.5, 0.0, MasterSeed(1), 0).unwrap();
        assert!(t0.ok(), "{:?}", t0.violations);
        assert_eq!(t0.c_final, vec![g.origin()]);
        assert_eq!(t0.c_prime_final, vec![2 * g.origin()]);
        let t1 = run_monotonicity_coupling(&ctx, 0.5, 1.0, MasterSeed(1), 0).unwrap();
        assert!(t1.ok(), "{:?}", t1.violations);
        assert_eq!(t1.c_final.len(), 64);
        assert!(t1.base_reaches && t1.lift_reaches);
    }

    #[test]
    fn coupling_runs_are_clean() {
        let g = build_box(2, 10).unwrap();
        let s = audit_monotonicity_coupling(&g, 0.5, 0.5, 60, MasterSeed(2)).unwrap();
        assert_eq!(s.invariant_violations, 0, "{:?}", s.first_failure);
        assert_eq!(s.enhanced_mismatches, 0);
        assert_eq!(s.lift_cluster_escapes, 0);
        assert_eq!(s.reach_violations, 0);
    }

    #[test]
    fn coupling_exercises_enhancements() {
        // p_hat^(n3 + n4) is tiny below p = 1, so only p = 1 makes even steps succeed
        let g = build_box(2, 8).unwrap();
        let s = audit_monotonicity_coupling(&g, 0.5, 1.0, 40, MasterSeed(3)).unwrap();
        assert_eq!(s.invariant_violations, 0, "{:?}", s.first_failure);
        assert_eq!(s.enhanced_mismatches, 0);
        assert!(s.enhancement_attempts > 0);
        assert!(s.enhancement_successes > 0);
    }

    #[test]
    fn multigraph_copies_reproduce_p() {
        let g = build_box(2, 8).unwrap();
        let ctx = MonoContext::new(&g, build_cycle_partition(&g).unwrap());
        let p = 0.4;
        let p_hat = ctx.p_hat(p);
        assert!((1.0 - (1.0 - p_hat).powi(ctx.multiplicity as i32) - p).abs() < 1e-12);
        // kappa after the fill: OR over copies is Bernoulli(p) per base edge, jointly on the edges at the origin
        let star: Vec<EdgeId> = g.adjacency(g.origin()).iter().map(|&(e, _)| e).collect();
        let mut counts = vec![0u64; 1 << star.len()];
        let runs = 3000;
        for run in 0..runs {
            let t = run_monotonicity_coupling(&ctx, 0.5, p, MasterSeed(4), run).unwrap();
            let idx = star.iter().enumerate().fold(0, |acc, (i, &e)| acc | (t.kappa_open[e] as usize) << i);
            counts[idx] += 1;
        }
        let probs: Vec<f64> = (0..counts.len())
            .map(|m| (0..star.len()).map(|i| if m >> i & 1 == 1 { p } else { 1.0 - p }).product())
            .collect();
        assert!(chi_square(&counts, &probs).p_value > 0.01, "{counts:?}");
    }

    #[test]
    fn enhanced_pc_reduces_to_plain_and_drops_with_s() {
        let g = build_box(2, 15).unwrap();
        let seed = MasterSeed(5);
        let plain = crate::estimators::base_thresholds(&g, 300, seed).unwrap();
        let zero = enhanced_thresholds(&g, 1, 0.0, 300, seed).unwrap();
        assert_eq!(plain, zero);
        let half = enhanced_thresholds(&g, 1, 0.5, 300, seed).unwrap();
        let full = enhanced_thresholds(&g, 1, 1.0, 300, seed).unwrap();
        for i in 0..300 {
            assert!(half[i] <= zero[i] && full[i] <= half[i]);
        }
        let a = estimate_enhanced_pc(&g, 1, 1.0, 2000, seed).unwrap();
        let b = crate::estimators::estimate_pc_base(&g, 2000, seed).unwrap();
        assert!(a.pc_hat < b.pc_hat);
    }
}
