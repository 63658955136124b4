//! Bond percolation on base and lifted graphs.
//!
//! Edges are sampled from shared uniforms: edge `e` is open at parameter `p`
//! iff `u_e < p`. Reusing the same uniforms across `p` gives the standard
//! monotone coupling for free.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use petgraph::unionfind::UnionFind;

use crate::error::{check_probability, Error, Result};
use crate::graph::{BaseGraph, Host, VertexId};
use crate::lift::{project, LiftedGraph};
use crate::rng::StreamRng;

/// One open/closed bit per host edge, with the nominal parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PercolationConfig {
    pub omega: Vec<bool>,
    pub p: f64,
}

impl PercolationConfig {
    pub fn from_uniforms(uniforms: &[f64], p: f64) -> Self {
        Self {
            omega: threshold(uniforms, p),
            p,
        }
    }

    pub fn open_count(&self) -> usize {
        self.omega.iter().filter(|&&b| b).count()
    }
}

/// `n` fresh uniforms from the stream.
pub fn draw_uniforms(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

pub fn threshold(uniforms: &[f64], p: f64) -> Vec<bool> {
    uniforms.iter().map(|&u| u < p).collect()
}

/// iid Bernoulli(p) edges; consumes exactly one uniform per edge.
pub fn sample_percolation<H: Host>(host: &H, p: f64, rng: &mut StreamRng) -> Result<PercolationConfig> {
    check_probability("p", p)?;
    Ok(PercolationConfig::from_uniforms(&draw_uniforms(host.edge_count(), rng), p))
}

fn check_len<H: Host>(host: &H, omega: &[bool]) -> Result<()> {
    if omega.len() != host.edge_count() {
        return Err(Error::InvalidParameter(format!(
            "configuration has {} bits, host has {} edges",
            omega.len(),
            host.edge_count()
        )));
    }
    Ok(())
}

/// Component label of every vertex, the label being the smallest vertex id
/// in the component.
pub fn components<H: Host>(host: &H, omega: &[bool]) -> Vec<VertexId> {
    let n = host.vertex_count();
    let mut uf = UnionFind::<usize>::new(n);
    for (e, &open) in omega.iter().enumerate() {
        if open {
            let (a, b) = host.endpoints(e);
            uf.union(a, b);
        }
    }
    let mut smallest = vec![usize::MAX; n];
    let roots: Vec<usize> = (0..n).map(|v| uf.find_mut(v)).collect();
    for v in 0..n {
        let r = roots[v];
        if smallest[r] == usize::MAX {
            smallest[r] = v;
        }
    }
    roots.iter().map(|&r| smallest[r]).collect()
}

/// Breadth-first reference for [`components`].
pub fn components_bfs<H: Host>(host: &H, omega: &[bool]) -> Vec<VertexId> {
    let n = host.vertex_count();
    let mut label = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = s;
        queue.push_back(s);
        while let Some(x) = queue.pop_front() {
            host.for_each_incident(x, |e, y| {
                if omega[e] && label[y] == usize::MAX {
                    label[y] = s;
                    queue.push_back(y);
                }
            });
        }
    }
    label
}

/// The partition induced by [`components`], as sorted member lists.
pub fn clusters<H: Host>(host: &H, omega: &[bool]) -> Result<Vec<Vec<VertexId>>> {
    check_len(host, omega)?;
    let labels = components(host, omega);
    let mut index = vec![usize::MAX; labels.len()];
    let mut out: Vec<Vec<VertexId>> = Vec::new();
    for (v, &l) in labels.iter().enumerate() {
        if index[l] == usize::MAX {
            index[l] = out.len();
            out.push(Vec::new());
        }
        out[index[l]].push(v);
    }
    Ok(out)
}

/// Sorted cluster sizes.
pub fn cluster_size_multiset<H: Host>(host: &H, omega: &[bool]) -> Vec<usize> {
    let labels = components(host, omega);
    let mut count = vec![0usize; labels.len()];
    for &l in &labels {
        count[l] += 1;
    }
    let mut sizes: Vec<usize> = count.into_iter().filter(|&c| c > 0).collect();
    sizes.sort_unstable();
    sizes
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub root: VertexId,
    /// Sorted.
    pub members: Vec<VertexId>,
    pub size: usize,
    pub touches_boundary: bool,
}

/// Open cluster of `v`; `boundary` flags the vertices counted as boundary.
pub fn cluster_of<H: Host>(host: &H, omega: &[bool], v: VertexId, boundary: Option<&[bool]>) -> Result<Cluster> {
    check_len(host, omega)?;
    if v >= host.vertex_count() {
        return Err(Error::InvalidParameter(format!("vertex {v} out of range")));
    }
    let mut members = open_cluster(host, omega, v);
    members.sort_unstable();
    let touches_boundary = boundary.is_some_and(|b| members.iter().any(|&x| b[x]));
    Ok(Cluster {
        root: v,
        size: members.len(),
        members,
        touches_boundary,
    })
}

/// Unsorted vertex list of the open cluster of `v`, in BFS order.
pub fn open_cluster<H: Host>(host: &H, omega: &[bool], v: VertexId) -> Vec<VertexId> {
    let mut seen = vec![false; host.vertex_count()];
    seen[v] = true;
    let mut order = vec![v];
    let mut head = 0;
    while head < order.len() {
        let x = order[head];
        head += 1;
        host.for_each_incident(x, |e, y| {
            if omega[e] && !seen[y] {
                seen[y] = true;
                order.push(y);
            }
        });
    }
    order
}

/// Size of the open cluster of `v`, stopping the search once `cap` vertices are found.
pub fn cluster_size_capped<H: Host>(host: &H, omega: &[bool], v: VertexId, cap: usize, seen: &mut Vec<bool>) -> usize {
    seen.clear();
    seen.resize(host.vertex_count(), false);
    seen[v] = true;
    let mut stack = vec![v];
    let mut size = 1;
    while let Some(x) = stack.pop() {
        if size >= cap {
            break;
        }
        host.for_each_incident(x, |e, y| {
            if omega[e] && !seen[y] {
                seen[y] = true;
                size += 1;
                stack.push(y);
            }
        });
    }
    size
}

/// Whether the open cluster of `origin` meets the boundary set.
pub fn reaches<H: Host>(host: &H, omega: &[bool], origin: VertexId, boundary: &[bool]) -> bool {
    if boundary[origin] {
        return true;
    }
    let mut seen = vec![false; host.vertex_count()];
    seen[origin] = true;
    let mut stack = vec![origin];
    while let Some(x) = stack.pop() {
        let mut hit = false;
        host.for_each_incident(x, |e, y| {
            if omega[e] && !seen[y] {
                seen[y] = true;
                hit |= boundary[y];
                stack.push(y);
            }
        });
        if hit {
            return true;
        }
    }
    false
}

/// Smallest `t` such that `origin` is joined to the boundary using only edges
/// with weight at most `t` (minimax path weight, computed by invasion).
///
/// With edges open iff `w_e < p`, the origin reaches the boundary at `p` iff
/// the returned value is `< p`. Returns `-inf` if the origin is on the
/// boundary and `+inf` if the boundary is unreachable.
pub fn invasion_threshold<H: Host>(host: &H, weights: &[f64], origin: VertexId, boundary: &[bool]) -> f64 {
    if boundary[origin] {
        return f64::NEG_INFINITY;
    }
    let mut done = vec![false; host.vertex_count()];
    let mut heap = BinaryHeap::new();
    let mut level = f64::NEG_INFINITY;
    done[origin] = true;
    host.for_each_incident(origin, |e, y| heap.push(Reverse((weights[e].to_bits(), y))));
    while let Some(Reverse((bits, y))) = heap.pop() {
        if done[y] {
            continue;
        }
        level = level.max(f64::from_bits(bits));
        if boundary[y] {
            return level;
        }
        done[y] = true;
        host.for_each_incident(y, |e, z| {
            if !done[z] {
                heap.push(Reverse((weights[e].to_bits(), z)));
            }
        });
    }
    f64::INFINITY
}

/// Per-base-edge AND / OR of the two lifts' bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectedPair {
    pub omega_min: Vec<bool>,
    pub omega_max: Vec<bool>,
}

pub fn project_min_max(lift: &LiftedGraph<'_>, omega: &[bool]) -> Result<ProjectedPair> {
    check_len(lift, omega)?;
    let (omega_min, omega_max) = omega.chunks_exact(2).map(|c| (c[0] && c[1], c[0] || c[1])).unzip();
    Ok(ProjectedPair { omega_min, omega_max })
}

/// Boundary of a lift: lifted vertices whose projection is on the base boundary.
pub fn lift_vertex_mask(base_mask: &[bool]) -> Vec<bool> {
    base_mask.iter().flat_map(|&b| [b, b]).collect()
}

/// `pi` of a lifted vertex set, sorted and deduplicated.
pub fn project_set(lifted: &[VertexId]) -> Vec<VertexId> {
    let mut out: Vec<VertexId> = lifted.iter().map(|&x| project(x)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Checks `C(o; omega_min) ⊆ pi(C(o_0; omega)) ⊆ C(o; omega_max)`.
pub fn sandwich_holds(base: &BaseGraph, lift: &LiftedGraph<'_>, omega: &[bool], origin: VertexId) -> Result<bool> {
    let pair = project_min_max(lift, omega)?;
    let inner = cluster_of(base, &pair.omega_min, origin, None)?.members;
    let middle = project_set(&open_cluster(lift, omega, 2 * origin));
    let outer = cluster_of(base, &pair.omega_max, origin, None)?.members;
    let subset = |a: &[usize], b: &[usize]| a.iter().all(|x| b.binary_search(x).is_ok());
    Ok(subset(&inner, &middle) && subset(&middle, &outer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_box, build_complete, build_custom, build_cycle};
    use crate::lift::{build_lift, sample_switch_config, SwitchConfig};
    use crate::rng::MasterSeed;
    use proptest::prelude::*;

    #[test]
    fn extreme_parameters() {
        let g = build_box(2, 5).unwrap();
        let mut rng = MasterSeed(3).stream("w", 0);
        assert_eq!(sample_percolation(&g, 0.0, &mut rng).unwrap().open_count(), 0);
        assert_eq!(sample_percolation(&g, 1.0, &mut rng).unwrap().open_count(), g.edge_count());
        assert!(sample_percolation(&g, -0.1, &mut rng).is_err());
    }

    #[test]
    fn open_fraction() {
        let g = build_box(2, 230).unwrap();
        let mut rng = MasterSeed(4).stream("w", 0);
        let cfg = sample_percolation(&g, 0.3, &mut rng).unwrap();
        let n = g.edge_count() as f64;
        let frac = cfg.open_count() as f64 / n;
        assert!(n >= 1e5);
        assert!((frac - 0.3).abs() < 3.0 * (0.21 / n).sqrt(), "{frac}");
    }

    #[test]
    fn cluster_extremes() {
        let g = build_box(2, 4).unwrap();
        let closed = vec![false; g.edge_count()];
        assert_eq!(clusters(&g, &closed).unwrap().len(), 16);
        let open = vec![true; g.edge_count()];
        assert_eq!(clusters(&g, &open).unwrap().len(), 1);
    }

    #[test]
    fn union_find_matches_bfs_exhaustively() {
        // every graph here has at most 12 vertices; enumerate all omega
        let k4 = build_complete(4).unwrap();
        let c6 = build_cycle(6).unwrap();
        let b23 = build_custom(6, &[(0, 1), (1, 2), (3, 4), (4, 5), (0, 3), (1, 4), (2, 5)]).unwrap();
        let graphs = [k4, c6, b23];
        for g in &graphs {
            for mask in 0u64..(1 << g.edge_count()) {
                let omega: Vec<bool> = (0..g.edge_count()).map(|i| mask >> i & 1 == 1).collect();
                assert_eq!(components(g, &omega), components_bfs(g, &omega));
            }
        }
        // lifts with 12 vertices (cycle(6)), 12 edges
        let l = build_lift(&graphs[1], SwitchConfig::from_mask(0b100100, 6)).unwrap();
        for mask in 0u64..(1 << 12) {
            let omega: Vec<bool> = (0..12).map(|i| mask >> i & 1 == 1).collect();
            assert_eq!(components(&l, &omega), components_bfs(&l, &omega));
        }
    }

    #[test]
    fn random_ten_vertex_partition_and_cluster_of() {
        let g = build_custom(10, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 9), (0, 5), (2, 7), (4, 9), (1, 8)]).unwrap();
        for t in 0..200 {
            let mut rng = MasterSeed(11).stream("w", t);
            let omega = sample_percolation(&g, 0.5, &mut rng).unwrap().omega;
            let labels = components(&g, &omega);
            assert_eq!(labels, components_bfs(&g, &omega));
            for v in 0..10 {
                let c = cluster_of(&g, &omega, v, None).unwrap();
                let expect: Vec<usize> = (0..10).filter(|&x| labels[x] == labels[v]).collect();
                assert_eq!(c.members, expect);
            }
        }
    }

    #[test]
    fn project_min_max_cases() {
        let g = build_cycle(3).unwrap();
        let l = build_lift(&g, SwitchConfig::zeros(3)).unwrap();
        let pair = project_min_max(&l, &[true, true, true, false, false, false]).unwrap();
        assert_eq!(pair.omega_min, vec![true, false, false]);
        assert_eq!(pair.omega_max, vec![true, true, false]);
    }

    #[test]
    fn projected_marginals() {
        let g = build_box(2, 10).unwrap();
        let l = build_lift(&g, SwitchConfig::zeros(g.edge_count())).unwrap();
        let mut min_open = 0usize;
        let mut max_open = 0usize;
        let mut total = 0usize;
        for t in 0..600 {
            let mut rng = MasterSeed(8).stream("w", t);
            let omega = sample_percolation(&l, 0.5, &mut rng).unwrap().omega;
            let pair = project_min_max(&l, &omega).unwrap();
            min_open += pair.omega_min.iter().filter(|&&b| b).count();
            max_open += pair.omega_max.iter().filter(|&&b| b).count();
            total += g.edge_count();
        }
        let n = total as f64;
        let sd = (0.25 * 0.75 / n).sqrt();
        assert!(n >= 1e5);
        assert!((min_open as f64 / n - 0.25).abs() < 3.0 * sd);
        assert!((max_open as f64 / n - 0.75).abs() < 3.0 * sd);
    }

    #[test]
    fn reaches_basics() {
        let g = build_box(2, 5).unwrap();
        let closed = vec![false; g.edge_count()];
        let mut only_origin = vec![false; 25];
        only_origin[g.origin()] = true;
        assert!(reaches(&g, &closed, g.origin(), &only_origin));
        let open = vec![true; g.edge_count()];
        assert!(reaches(&g, &open, g.origin(), &g.boundary()));
        assert!(!reaches(&g, &closed, g.origin(), &g.boundary()));
    }

    #[test]
    fn invasion_threshold_matches_reach() {
        let g = build_box(2, 9).unwrap();
        let boundary = g.boundary();
        for t in 0..50 {
            let mut rng = MasterSeed(12).stream("w", t);
            let eta = sample_switch_config(&g, 0.5, &mut rng).unwrap();
            let l = build_lift(&g, eta).unwrap();
            let us = draw_uniforms(l.edge_count(), &mut rng);
            let lb = lift_vertex_mask(&boundary);
            let th = invasion_threshold(&l, &us, 2 * g.origin(), &lb);
            for p in [0.2, 0.4, 0.5, 0.6, 0.8, th, th + 1e-12] {
                let omega = threshold(&us, p);
                assert_eq!(reaches(&l, &omega, 2 * g.origin(), &lb), th < p, "p {p} th {th}");
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_p(seed in any::<u64>(), p in 0.0f64..1.0, dp in 0.0f64..0.5) {
            let g = build_box(2, 7).unwrap();
            let mut rng = MasterSeed(seed).stream("w", 0);
            let eta = sample_switch_config(&g, 0.5, &mut rng).unwrap();
            let l = build_lift(&g, eta).unwrap();
            let us = draw_uniforms(l.edge_count(), &mut rng);
            let p2 = (p + dp).min(1.0);
            let small = cluster_of(&l, &threshold(&us, p), 2 * g.origin(), None).unwrap().members;
            let big = cluster_of(&l, &threshold(&us, p2), 2 * g.origin(), None).unwrap().members;
            prop_assert!(small.iter().all(|x| big.binary_search(x).is_ok()));
        }

        #[test]
        fn sandwich_every_sample(seed in any::<u64>(), p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let g = build_box(2, 6).unwrap();
            let mut rng = MasterSeed(seed).stream("w", 0);
            let eta = sample_switch_config(&g, q, &mut rng).unwrap();
            let l = build_lift(&g, eta).unwrap();
            let omega = sample_percolation(&l, p, &mut rng).unwrap().omega;
            prop_assert!(sandwich_holds(&g, &l, &omega, g.origin()).unwrap());
        }
    }
}
