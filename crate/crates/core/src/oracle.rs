//! Exact enumeration oracles for tiny instances.
//!
//! Joint quantities are computed by enumerating every switching configuration
//! and every percolation configuration, bucketing by `(|eta|, |omega|)` and an
//! event category. The buckets are plain integer counts, so the final weight
//! `sum N q^j (1-q)^(E-j) p^k (1-p)^(2E-k)` can be evaluated in any
//! [`Weight`] scalar, exact rationals included.

use num_rational::BigRational;
use num_traits::Float;
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BaseGraph, Host, VertexId};
use crate::lift::{build_lift, gauge_switch_config, GaugeSet, LiftedGraph, SwitchConfig};
use crate::perco::open_cluster;
use crate::scalar::{bernoulli_weight, from_u64, pow2, Weight};

/// Largest edge count accepted by [`exact_disconnection_probability`].
pub const MAX_EDGES_DISCONNECT: usize = 24;
/// Largest edge count accepted by the joint `(eta, omega)` enumeration.
pub const MAX_EDGES_JOINT: usize = 9;
/// Largest vertex count accepted by [`gauge_orbit_kernel`].
pub const MAX_VERTICES_KERNEL: usize = 20;

fn guard(what: &'static str, actual: usize, limit: usize) -> Result<()> {
    if actual > limit {
        return Err(Error::SizeGuard { what, actual, limit });
    }
    Ok(())
}

fn lift_is_connected(g: &BaseGraph, mask: u64) -> bool {
    let n = 2 * g.vertex_count();
    let mut uf = UnionFind::<usize>::new(n);
    let mut merges = 0;
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let s = (mask >> e & 1) as usize;
        merges += uf.union(2 * u, 2 * v + s) as usize;
        merges += uf.union(2 * u + 1, 2 * v + (1 - s)) as usize;
    }
    merges == n - 1
}

/// Number of switching configurations whose lift is disconnected.
pub fn count_disconnected(g: &BaseGraph) -> Result<u64> {
    guard("edge count", g.edge_count(), MAX_EDGES_DISCONNECT)?;
    let total = 1u64 << g.edge_count();
    Ok((0..total).into_par_iter().filter(|&m| !lift_is_connected(g, m)).count() as u64)
}

/// `P(G_{1/2} is disconnected)` by enumeration of all `2^|E|` switching configurations.
pub fn exact_disconnection_probability(g: &BaseGraph) -> Result<BigRational> {
    let bad = count_disconnected(g)?;
    Ok(BigRational::from_integer(bad.into()) * pow2(-(g.edge_count() as i64)))
}

/// Closed form `2^(|V| - |E| - 1)` for connected `G`.
pub fn disconnection_formula(g: &BaseGraph) -> BigRational {
    pow2(g.vertex_count() as i64 - g.edge_count() as i64 - 1)
}

/// All gauge sets `S` whose action fixes every switching configuration.
///
/// The action is `eta -> eta xor 1_{boundary(S)}`, so `S` fixes every `eta`
/// iff it fixes the all-zero configuration.
pub fn gauge_orbit_kernel(g: &BaseGraph) -> Result<Vec<GaugeSet>> {
    guard("vertex count", g.vertex_count(), MAX_VERTICES_KERNEL)?;
    let n = g.vertex_count();
    let zero = SwitchConfig::zeros(g.edge_count());
    let mut out = Vec::new();
    for mask in 0..(1u64 << n) {
        let s = GaugeSet::from_mask(mask, n);
        if gauge_switch_config(g, &zero, &s)? == zero {
            out.push(s);
        }
    }
    Ok(out)
}

/// Integer counts `N[j][k][c]`: configurations with `j` switching edges, `k`
/// open lifted edges and event category `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointCounts {
    pub edges: usize,
    pub categories: usize,
    counts: Vec<u64>,
}

impl JointCounts {
    fn new(edges: usize, categories: usize) -> Self {
        Self {
            edges,
            categories,
            counts: vec![0; (edges + 1) * (2 * edges + 1) * categories],
        }
    }

    fn index(&self, j: usize, k: usize, c: usize) -> usize {
        (j * (2 * self.edges + 1) + k) * self.categories + c
    }

    pub fn get(&self, j: usize, k: usize, c: usize) -> u64 {
        self.counts[self.index(j, k, c)]
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self
    }

    /// `P(category = c)` under `G_{p,q}`.
    pub fn probability<T: Weight>(&self, q: &T, p: &T, c: usize) -> T {
        let e = self.edges;
        let mut total = T::zero();
        for j in 0..=e {
            let wq = bernoulli_weight(q, j, e);
            for k in 0..=2 * e {
                let n = self.get(j, k, c);
                if n > 0 {
                    total = total + wq.clone() * bernoulli_weight(p, k, 2 * e) * from_u64::<T>(n);
                }
            }
        }
        total
    }

    /// Law of the category as a vector.
    pub fn distribution<T: Weight>(&self, q: &T, p: &T) -> Vec<T> {
        (0..self.categories).map(|c| self.probability(q, p, c)).collect()
    }
}

/// Enumerates every `(eta, omega)` and classifies it with `event`.
pub fn joint_counts<F>(g: &BaseGraph, categories: usize, event: F) -> Result<JointCounts>
where
    F: Fn(&LiftedGraph<'_>, &[bool]) -> usize + Sync,
{
    let e = g.edge_count();
    guard("edge count", e, MAX_EDGES_JOINT)?;
    let result = (0..1u64 << e)
        .into_par_iter()
        .map(|eta_mask| {
            let mut counts = JointCounts::new(e, categories);
            let lift = build_lift(g, SwitchConfig::from_mask(eta_mask, e)).expect("matching length");
            let j = eta_mask.count_ones() as usize;
            let mut omega = vec![false; 2 * e];
            for w in 0..1u64 << (2 * e) {
                for (i, b) in omega.iter_mut().enumerate() {
                    *b = w >> i & 1 == 1;
                }
                let c = event(&lift, &omega);
                assert!(c < categories, "event returned category {c} of {categories}");
                let idx = counts.index(j, w.count_ones() as usize, c);
                counts.counts[idx] += 1;
            }
            counts
        })
        .reduce(|| JointCounts::new(e, categories), JointCounts::merge);
    Ok(result)
}

fn check_lifted_vertex(g: &BaseGraph, x: VertexId) -> Result<()> {
    if x >= 2 * g.vertex_count() {
        return Err(Error::InvalidParameter(format!("lifted vertex {x} out of range")));
    }
    Ok(())
}

/// Counts for the event `x <-> y` in the lift (category 1 when connected).
pub fn two_point_counts(g: &BaseGraph, x: VertexId, y: VertexId) -> Result<JointCounts> {
    check_lifted_vertex(g, x)?;
    check_lifted_vertex(g, y)?;
    joint_counts(g, 2, |lift, omega| open_cluster(lift, omega, x).contains(&y) as usize)
}

/// `P(x <-> y)` in `G_{p,q}`, `x` and `y` being lifted vertex ids `2 v + level`.
pub fn exact_two_point<T: Weight>(g: &BaseGraph, q: &T, p: &T, x: VertexId, y: VertexId) -> Result<T> {
    Ok(two_point_counts(g, x, y)?.probability(q, p, 1))
}

/// Counts bucketed by the size of the open cluster of the lifted vertex `o`.
pub fn cluster_size_counts(g: &BaseGraph, o: VertexId) -> Result<JointCounts> {
    check_lifted_vertex(g, o)?;
    joint_counts(g, 2 * g.vertex_count() + 1, |lift, omega| open_cluster(lift, omega, o).len())
}

/// Law of `|C_o|`, indexed by size (index 0 has probability 0).
pub fn exact_cluster_size_distribution<T: Weight>(g: &BaseGraph, q: &T, p: &T, o: VertexId) -> Result<Vec<T>> {
    Ok(cluster_size_counts(g, o)?.distribution(q, p))
}

/// `psi_n = P(|C_o| >= n)`.
pub fn exact_cluster_tail<T: Weight>(g: &BaseGraph, q: &T, p: &T, o: VertexId, n: usize) -> Result<T> {
    let dist = exact_cluster_size_distribution(g, q, p, o)?;
    Ok(dist.iter().skip(n.max(1)).fold(T::zero(), |acc, x| acc + x.clone()))
}

/// `m_h = P(C_o meets the ghost field) = 1 - E[exp(-h |C_o|)]`.
pub fn exact_ghost_probability(g: &BaseGraph, q: f64, p: f64, o: VertexId, h: f64) -> Result<f64> {
    let dist: Vec<f64> = exact_cluster_size_distribution(g, &q, &p, o)?;
    Ok(1.0 - dist.iter().enumerate().map(|(s, w)| w * (-h * s as f64).exp()).sum::<f64>())
}

/// Exact joint law of `(omega+, omega-, eta_hat, eta_bar)` for one base edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderJoint<T> {
    pub q: T,
    pub r: T,
    pub a: T,
    /// Indexed by `8 omega+ + 4 omega- + 2 eta_hat + eta_bar`.
    pub cells: [T; 16],
}

pub fn holder_cell(omega_plus: bool, omega_minus: bool, eta_hat: bool, eta_bar: bool) -> usize {
    8 * omega_plus as usize + 4 * omega_minus as usize + 2 * eta_hat as usize + eta_bar as usize
}

/// Checks `0 < r < 1`, `0 <= q <= 1 - r` and `q <= a <= q + r`.
pub fn check_holder_domain<T: Float>(q: T, r: T, a: T) -> Result<()> {
    let ok = r > T::zero() && r < T::one() && q >= T::zero() && q <= T::one() - r && a >= q && a <= q + r;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "holder parameters need 0<r<1, 0<=q<=1-r, q<=a<=q+r (q={:?}, r={:?}, a={:?})",
            q.to_f64(),
            r.to_f64(),
            a.to_f64()
        )))
    }
}

/// Sums the interval masses of the uniform `eta_e` against the `X, Y, Z` weights.
///
/// The uniform is split into `[0,q]`, `(q,a]`, `(a,q+r]` and `(q+r,1]`.
/// Outside `(q, q+r]`, `Y=1` opens exactly one of the pair (chosen by `X`)
/// and `Y=0` opens both; `eta_hat` is 1 on the first piece and 0 on the
/// last. Inside, both are closed and `eta_hat = Z`. `eta_bar = [u <= a]`.
pub fn exact_holder_joint<T: Float>(q: T, r: T, a: T) -> Result<HolderJoint<T>> {
    check_holder_domain(q, r, a)?;
    let one = T::one();
    let two = one + one;
    let sr = r.sqrt();
    let big_a = two * sr * (one - sr) / (one - r);
    let z = q / (one - r);
    let mut cells = [T::zero(); 16];
    let outer = [(q, true), (one - q - r, false)];
    for (mass, level) in outer {
        let pairs = [
            (true, false, big_a / two),
            (false, true, big_a / two),
            (true, true, one - big_a),
        ];
        for (wp, wm, w) in pairs {
            cells[holder_cell(wp, wm, level, level)] = cells[holder_cell(wp, wm, level, level)] + mass * w;
        }
    }
    for (mass, bar) in [(a - q, true), (q + r - a, false)] {
        cells[holder_cell(false, false, true, bar)] = cells[holder_cell(false, false, true, bar)] + mass * z;
        cells[holder_cell(false, false, false, bar)] = cells[holder_cell(false, false, false, bar)] + mass * (one - z);
    }
    Ok(HolderJoint { q, r, a, cells })
}

impl<T: Float> HolderJoint<T> {
    /// Probability of the set of cells accepted by `pred(omega+, omega-, eta_hat, eta_bar)`.
    pub fn prob<F: Fn(bool, bool, bool, bool) -> bool>(&self, pred: F) -> T {
        let mut total = T::zero();
        for c in 0..16 {
            if pred(c & 8 != 0, c & 4 != 0, c & 2 != 0, c & 1 != 0) {
                total = total + self.cells[c];
            }
        }
        total
    }

    /// Law of `(omega+, omega-, eta_hat)` with `eta_bar` summed out, indexed `4 w+ + 2 w- + eta_hat`.
    pub fn marginal_triple(&self) -> [T; 8] {
        let mut out = [T::zero(); 8];
        for (c, &w) in self.cells.iter().enumerate() {
            out[c >> 1] = out[c >> 1] + w;
        }
        out
    }
}

/// Exportable oracle result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub graph: String,
    pub q: String,
    pub p: String,
    pub quantity: String,
    pub value_num: String,
    pub value_den: String,
}

impl OracleRecord {
    pub fn new(graph: &BaseGraph, q: &BigRational, p: &BigRational, quantity: &str, value: &BigRational) -> Self {
        Self {
            graph: graph.kind().to_string(),
            q: q.to_string(),
            p: p.to_string(),
            quantity: quantity.to_string(),
            value_num: value.numer().to_string(),
            value_den: value.denom().to_string(),
        }
    }
}

/// Every connected labelled simple graph on `1..=max_vertices` vertices.
pub fn connected_graph_corpus(max_vertices: usize) -> Vec<BaseGraph> {
    let mut out = Vec::new();
    for n in 1..=max_vertices {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        for mask in 0u64..(1 << pairs.len()) {
            let edges: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &e)| e).collect();
            if let Ok(g) = crate::graph::build_custom(n, &edges) {
                out.push(g);
            }
        }
    }
    out
}
