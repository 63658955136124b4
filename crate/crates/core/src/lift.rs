//! Random 2-lifts: switching configurations, the lifted graph, the covering
//! map, the twin involution and gauge transformations.
//!
//! Lifted vertex `(v, level)` has dense id `2 v + level`. Lifted edge
//! `(e, level)` has dense id `2 e + level` and is the lift of `e = {u, v}`
//! (with `u < v`) incident to `u_level`; its other endpoint is
//! `v_{level xor eta_e}`.

use crate::error::{check_probability, Error, Result};
use crate::graph::{BaseGraph, EdgeId, Host, VertexId};
use crate::rng::StreamRng;

#[inline]
pub fn lifted_vertex(v: VertexId, level: u8) -> usize {
    2 * v + level as usize
}

#[inline]
pub fn lifted_edge(e: EdgeId, level: u8) -> usize {
    2 * e + level as usize
}

/// The other lift of the same base vertex (or base edge: ids share the parity trick).
#[inline]
pub fn twin(x: usize) -> usize {
    x ^ 1
}

/// Covering map on vertex or edge ids.
#[inline]
pub fn project(x: usize) -> usize {
    x >> 1
}

#[inline]
pub fn level(x: usize) -> u8 {
    (x & 1) as u8
}

/// One switching bit per base edge.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SwitchConfig {
    eta: Vec<bool>,
}

impl SwitchConfig {
    pub fn new(eta: Vec<bool>) -> Self {
        Self { eta }
    }

    pub fn zeros(n: usize) -> Self {
        Self { eta: vec![false; n] }
    }

    /// Bits of the integer `mask`, edge `i` being bit `i`.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self {
            eta: (0..n).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    /// Threshold shared uniforms: `eta_e = [u_e < q]`.
    pub fn from_uniforms(uniforms: &[f64], q: f64) -> Self {
        Self {
            eta: uniforms.iter().map(|&u| u < q).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.eta
    }

    #[inline]
    pub fn get(&self, e: EdgeId) -> bool {
        self.eta[e]
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn switching_count(&self) -> usize {
        self.eta.iter().filter(|&&b| b).count()
    }

    /// Hex encoding, edge `i` stored in byte `i / 8` at bit `i % 8` (LSB first).
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.eta.len().div_ceil(8)];
        for (i, &b) in self.eta.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        hex::encode(bytes)
    }

    pub fn from_hex(text: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(text).map_err(|e| Error::Parse(format!("switch config hex: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Parse(format!("hex encodes {} bytes, {len} edges need {}", bytes.len(), len.div_ceil(8))));
        }
        Ok(Self {
            eta: (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect(),
        })
    }
}

/// Independent Bernoulli(q) switching bits.
///
/// Always consumes exactly one uniform per base edge, whatever `q` is, so that
/// streams stay aligned across parameter values (and `q = 0`, `q = 1` give the
/// constant configurations).
pub fn sample_switch_config(g: &BaseGraph, q: f64, rng: &mut StreamRng) -> Result<SwitchConfig> {
    check_probability("q", q)?;
    Ok(SwitchConfig {
        eta: (0..g.edge_count()).map(|_| rng.uniform() < q).collect(),
    })
}

/// The 2-lift `(V x {0,1}, E(eta))` of a base graph.
#[derive(Clone, Debug)]
pub struct LiftedGraph<'g> {
    base: &'g BaseGraph,
    eta: SwitchConfig,
}

pub fn build_lift<'g>(base: &'g BaseGraph, eta: SwitchConfig) -> Result<LiftedGraph<'g>> {
    if eta.len() != base.edge_count() {
        return Err(Error::InvalidParameter(format!(
            "switch config has {} bits, base graph has {} edges",
            eta.len(),
            base.edge_count()
        )));
    }
    Ok(LiftedGraph { base, eta })
}

impl<'g> LiftedGraph<'g> {
    pub fn base(&self) -> &'g BaseGraph {
        self.base
    }

    pub fn eta(&self) -> &SwitchConfig {
        &self.eta
    }

    /// Lifted edge incident to `x` over base edge `e` (which must be incident to `project(x)`).
    pub fn lift_at(&self, e: EdgeId, x: usize) -> usize {
        let (u, _) = self.base.endpoints(e);
        if project(x) == u {
            lifted_edge(e, level(x))
        } else {
            lifted_edge(e, level(x) ^ self.eta.get(e) as u8)
        }
    }

    /// Image of the lifted vertex `x` under the gauge map `phi_S`.
    pub fn gauge_vertex(x: usize, s: &GaugeSet) -> usize {
        if s.contains(project(x)) {
            twin(x)
        } else {
            x
        }
    }
}

impl Host for LiftedGraph<'_> {
    fn vertex_count(&self) -> usize {
        2 * self.base.vertex_count()
    }

    fn edge_count(&self) -> usize {
        2 * self.base.edge_count()
    }

    #[inline]
    fn endpoints(&self, le: usize) -> (usize, usize) {
        let e = project(le);
        let l = level(le);
        let (u, v) = self.base.endpoints(e);
        (lifted_vertex(u, l), lifted_vertex(v, l ^ self.eta.get(e) as u8))
    }

    #[inline]
    fn for_each_incident<F: FnMut(usize, usize)>(&self, x: usize, mut f: F) {
        let v = project(x);
        let j = level(x);
        for &(e, w) in self.base.adjacency(v) {
            let s = self.eta.get(e) as u8;
            if v < w {
                f(lifted_edge(e, j), lifted_vertex(w, j ^ s));
            } else {
                let l = j ^ s;
                f(lifted_edge(e, l), lifted_vertex(w, l));
            }
        }
    }
}

/// Subset `S` of base vertices for the gauge map `phi_S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GaugeSet {
    members: Vec<bool>,
}

impl GaugeSet {
    pub fn new(members: Vec<bool>) -> Self {
        Self { members }
    }

    pub fn empty(n: usize) -> Self {
        Self { members: vec![false; n] }
    }

    pub fn full(n: usize) -> Self {
        Self { members: vec![true; n] }
    }

    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self {
            members: (0..n).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    #[inline]
    pub fn contains(&self, v: VertexId) -> bool {
        self.members[v]
    }

    pub fn bits(&self) -> &[bool] {
        &self.members
    }
}

fn check_gauge(g: &BaseGraph, s: &GaugeSet) -> Result<()> {
    if s.members.len() != g.vertex_count() {
        return Err(Error::InvalidParameter(format!(
            "gauge set covers {} vertices, graph has {}",
            s.members.len(),
            g.vertex_count()
        )));
    }
    Ok(())
}

/// `eta'_e = eta_e xor [exactly one endpoint of e in S]`.
pub fn gauge_switch_config(g: &BaseGraph, eta: &SwitchConfig, s: &GaugeSet) -> Result<SwitchConfig> {
    check_gauge(g, s)?;
    Ok(SwitchConfig {
        eta: g
            .edges()
            .iter()
            .zip(eta.bits())
            .map(|(&(u, v), &b)| b ^ (s.contains(u) != s.contains(v)))
            .collect(),
    })
}

/// The lift obtained by relabelling levels over `S`; isomorphic to the input via `phi_S`.
pub fn apply_gauge<'g>(lift: &LiftedGraph<'g>, s: &GaugeSet) -> Result<LiftedGraph<'g>> {
    let eta = gauge_switch_config(lift.base, &lift.eta, s)?;
    build_lift(lift.base, eta)
}

/// Image of a lifted edge under `phi_S`, as an edge of the gauged lift.
pub fn gauge_edge(g: &BaseGraph, le: usize, s: &GaugeSet) -> usize {
    let e = project(le);
    let (u, _) = g.endpoints(e);
    lifted_edge(e, level(le) ^ s.contains(u) as u8)
}

/// Carries a per-lifted-edge configuration along the edge bijection induced by `phi_S`.
pub fn transport_edge_bits(g: &BaseGraph, bits: &[bool], s: &GaugeSet) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    for (le, &b) in bits.iter().enumerate() {
        out[gauge_edge(g, le, s)] = b;
    }
    out
}

/// Whether `cycle` (a list of base edges forming one simple cycle) carries an
/// odd number of switching edges.
pub fn is_switching_cycle(g: &BaseGraph, eta: &SwitchConfig, cycle: &[EdgeId]) -> Result<bool> {
    validate_cycle(g, cycle)?;
    Ok(cycle.iter().filter(|&&e| eta.get(e)).count() % 2 == 1)
}

/// Checks that the edges form a single simple cycle.
pub fn validate_cycle(g: &BaseGraph, cycle: &[EdgeId]) -> Result<()> {
    let bad = |msg: &str| Err(Error::InvalidParameter(format!("not a cycle: {msg}")));
    if cycle.len() < 3 {
        return bad("fewer than 3 edges");
    }
    if cycle.iter().any(|&e| e >= g.edge_count()) {
        return bad("edge id out of range");
    }
    let mut sorted = cycle.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != cycle.len() {
        return bad("repeated edge");
    }
    let mut degree = std::collections::HashMap::new();
    for &e in cycle {
        let (u, v) = g.endpoints(e);
        *degree.entry(u).or_insert(0) += 1;
        *degree.entry(v).or_insert(0) += 1;
    }
    if degree.values().any(|&d| d != 2) {
        return bad("a vertex does not have degree 2");
    }
    if degree.len() != cycle.len() {
        return bad("edge count differs from vertex count");
    }
    // connectivity: walk the cycle
    let start = g.endpoints(cycle[0]).0;
    let mut visited = 0;
    let mut prev_edge = usize::MAX;
    let mut at = start;
    loop {
        let next = cycle
            .iter()
            .copied()
            .find(|&e| e != prev_edge && {
                let (u, v) = g.endpoints(e);
                u == at || v == at
            });
        let Some(e) = next else { return bad("broken walk") };
        let (u, v) = g.endpoints(e);
        at = if u == at { v } else { u };
        prev_edge = e;
        visited += 1;
        if at == start {
            break;
        }
        if visited > cycle.len() {
            return bad("walk does not close");
        }
    }
    if visited != cycle.len() {
        return bad("edges form several cycles");
    }
    Ok(())
}
