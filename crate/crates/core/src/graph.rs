//! Finite deterministic base graphs, BFS metric sets and the canonical
//! vertex/edge orders every exploration relies on.
//!
//! Vertex and edge ids are dense and follow generator order; "the smallest
//! vertex (edge) such that ..." always means the smallest id.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;

pub type VertexId = usize;
pub type EdgeId = usize;

/// Anything percolation can run on: a finite graph with dense vertex and edge ids.
pub trait Host {
    fn vertex_count(&self) -> usize;
    fn edge_count(&self) -> usize;
    fn endpoints(&self, e: EdgeId) -> (VertexId, VertexId);
    /// Calls `f(edge, neighbor)` for every edge incident to `v`, in increasing edge order.
    fn for_each_incident<F: FnMut(EdgeId, VertexId)>(&self, v: VertexId, f: F);
}

/// How a base graph was generated; doubles as its textual descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphKind {
    Box { dim: usize, side: usize },
    Cycle { len: usize },
    Tree { branching: usize, depth: usize },
    Complete { n: usize },
    Custom,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Box { dim, side } => write!(f, "box:{dim}:{side}"),
            GraphKind::Cycle { len } => write!(f, "cycle:{len}"),
            GraphKind::Tree { branching, depth } => write!(f, "tree:{branching}:{depth}"),
            GraphKind::Complete { n } => write!(f, "complete:{n}"),
            GraphKind::Custom => write!(f, "custom"),
        }
    }
}

/// A finite, simple, connected graph.
#[derive(Clone, Debug)]
pub struct BaseGraph {
    vertex_count: usize,
    edges: Vec<(VertexId, VertexId)>,
    adjacency: Vec<Vec<(EdgeId, VertexId)>>,
    kind: GraphKind,
    bipartition: Option<Vec<bool>>,
}

impl BaseGraph {
    /// Validates simplicity and connectivity, normalizes every edge to
    /// `(min, max)` and keeps the given edge order.
    pub fn from_edges(vertex_count: usize, edges: &[(VertexId, VertexId)], kind: GraphKind) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::InvalidGraph("graph has no vertices".into()));
        }
        let mut norm = Vec::with_capacity(edges.len());
        let mut adjacency = vec![Vec::new(); vertex_count];
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (id, &(a, b)) in edges.iter().enumerate() {
            if a >= vertex_count || b >= vertex_count {
                return Err(Error::InvalidGraph(format!("edge {id} = ({a}, {b}) has an endpoint out of range")));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("edge {id} is a loop at {a}")));
            }
            let (u, v) = (a.min(b), a.max(b));
            if !seen.insert((u, v)) {
                return Err(Error::InvalidGraph(format!("edge {id} = ({u}, {v}) is a parallel edge")));
            }
            norm.push((u, v));
            adjacency[u].push((id, v));
            adjacency[v].push((id, u));
        }
        let mut g = BaseGraph {
            vertex_count,
            edges: norm,
            adjacency,
            kind,
            bipartition: None,
        };
        if !g.is_connected() {
            return Err(Error::InvalidGraph("graph is not connected".into()));
        }
        g.bipartition = g.two_coloring();
        Ok(g)
    }

    pub fn kind(&self) -> &GraphKind {
        &self.kind
    }

    pub fn edges(&self) -> &[(VertexId, VertexId)] {
        &self.edges
    }

    pub fn adjacency(&self, v: VertexId) -> &[(EdgeId, VertexId)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: VertexId) -> usize {
        self.adjacency[v].len()
    }

    /// `Some(class)` per vertex when the graph is bipartite; vertex 0 is in class `false`.
    pub fn bipartition(&self) -> Option<&[bool]> {
        self.bipartition.as_deref()
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.vertex_count
    }

    pub fn edge_between(&self, a: VertexId, b: VertexId) -> Option<EdgeId> {
        self.adjacency[a].iter().find(|&&(_, w)| w == b).map(|&(e, _)| e)
    }

    fn check_vertex(&self, v: VertexId) -> Result<()> {
        if v < self.vertex_count {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("vertex {v} out of range (|V| = {})", self.vertex_count)))
        }
    }

    fn is_connected(&self) -> bool {
        self.bfs_distances(&[0]).iter().all(|&d| d != usize::MAX)
    }

    fn two_coloring(&self) -> Option<Vec<bool>> {
        let dist = self.bfs_distances(&[0]);
        let color: Vec<bool> = dist.iter().map(|d| d % 2 == 1).collect();
        self.edges
            .iter()
            .all(|&(u, v)| color[u] != color[v])
            .then_some(color)
    }

    /// Multi-source BFS; `usize::MAX` marks unreachable vertices.
    pub fn bfs_distances(&self, sources: &[VertexId]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.vertex_count];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(v) = queue.pop_front() {
            for &(_, w) in &self.adjacency[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Coordinates of a box vertex (first coordinate most significant).
    pub fn box_coords(&self, v: VertexId) -> Option<Vec<usize>> {
        match self.kind {
            GraphKind::Box { dim, side } => {
                let mut c = vec![0; dim];
                let mut rest = v;
                for k in (0..dim).rev() {
                    c[k] = rest % side;
                    rest /= side;
                }
                Some(c)
            }
            _ => None,
        }
    }

    pub fn box_vertex(&self, coords: &[usize]) -> Option<VertexId> {
        match self.kind {
            GraphKind::Box { dim, side } if coords.len() == dim && coords.iter().all(|&x| x < side) => {
                Some(coords.iter().fold(0, |acc, &x| acc * side + x))
            }
            _ => None,
        }
    }

    /// Distinguished origin: the center of a box, vertex 0 otherwise.
    pub fn origin(&self) -> VertexId {
        match self.kind {
            GraphKind::Box { dim, side } => self.box_vertex(&vec![(side - 1) / 2; dim]).unwrap_or(0),
            _ => 0,
        }
    }

    /// Boundary used as the finite-volume stand-in for "infinity": the outer
    /// faces of a box, otherwise the sphere of maximal radius around the origin.
    pub fn boundary(&self) -> Vec<bool> {
        match self.kind {
            GraphKind::Box { side, .. } => (0..self.vertex_count)
                .map(|v| {
                    self.box_coords(v)
                        .unwrap()
                        .iter()
                        .any(|&x| x == 0 || x + 1 == side)
                })
                .collect(),
            _ => {
                let dist = self.bfs_distances(&[self.origin()]);
                let far = dist.iter().copied().max().unwrap_or(0);
                dist.iter().map(|&d| d == far).collect()
            }
        }
    }

    /// Length of a shortest cycle, `None` for forests.
    pub fn girth(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for s in 0..self.vertex_count {
            let mut dist = vec![usize::MAX; self.vertex_count];
            let mut parent_edge = vec![usize::MAX; self.vertex_count];
            let mut queue = VecDeque::from([s]);
            dist[s] = 0;
            while let Some(v) = queue.pop_front() {
                for &(e, w) in &self.adjacency[v] {
                    if e == parent_edge[v] {
                        continue;
                    }
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        parent_edge[w] = e;
                        queue.push_back(w);
                    } else {
                        let len = dist[v] + dist[w] + 1;
                        best = Some(best.map_or(len, |b| b.min(len)));
                    }
                }
            }
        }
        best
    }
}

impl Host for BaseGraph {
    fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    fn edge_count(&self) -> usize {
        self.edges.len()
    }

    fn endpoints(&self, e: EdgeId) -> (VertexId, VertexId) {
        self.edges[e]
    }

    #[inline]
    fn for_each_incident<F: FnMut(EdgeId, VertexId)>(&self, v: VertexId, mut f: F) {
        for &(e, w) in &self.adjacency[v] {
            f(e, w);
        }
    }
}

/// Grid graph on `{0..side-1}^dim` with nearest-neighbour edges and free boundary.
pub fn build_box(dim: usize, side: usize) -> Result<BaseGraph> {
    if dim == 0 || side == 0 {
        return Err(Error::InvalidParameter(format!("box needs dim >= 1 and side >= 1, got {dim}, {side}")));
    }
    let n = side
        .checked_pow(dim as u32)
        .filter(|&n| n <= 1 << 26)
        .ok_or(Error::SizeGuard {
            what: "box vertex count",
            actual: usize::MAX,
            limit: 1 << 26,
        })?;
    let strides: Vec<usize> = (0..dim).map(|k| side.pow((dim - 1 - k) as u32)).collect();
    let mut edges = Vec::with_capacity(dim * n);
    for v in 0..n {
        for &stride in &strides {
            if (v / stride) % side + 1 < side {
                edges.push((v, v + stride));
            }
        }
    }
    BaseGraph::from_edges(n, &edges, GraphKind::Box { dim, side })
}

pub fn build_cycle(len: usize) -> Result<BaseGraph> {
    if len < 3 {
        return Err(Error::InvalidParameter(format!("cycle needs at least 3 vertices, got {len}")));
    }
    let edges: Vec<_> = (0..len).map(|i| (i, (i + 1) % len)).collect();
    BaseGraph::from_edges(len, &edges, GraphKind::Cycle { len })
}

/// Complete `branching`-ary tree of the given depth, vertices in BFS order.
pub fn build_tree(branching: usize, depth: usize) -> Result<BaseGraph> {
    if branching == 0 {
        return Err(Error::InvalidParameter("tree branching must be positive".into()));
    }
    let mut edges = Vec::new();
    let mut level_start = 0;
    let mut level_len = 1;
    let mut next = 1;
    for _ in 0..depth {
        for parent in level_start..level_start + level_len {
            for _ in 0..branching {
                edges.push((parent, next));
                next += 1;
            }
        }
        level_start += level_len;
        level_len *= branching;
    }
    BaseGraph::from_edges(next, &edges, GraphKind::Tree { branching, depth })
}

pub fn build_complete(n: usize) -> Result<BaseGraph> {
    if n == 0 {
        return Err(Error::InvalidParameter("complete graph needs n >= 1".into()));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    BaseGraph::from_edges(n, &edges, GraphKind::Complete { n })
}

pub fn build_custom(vertex_count: usize, edges: &[(VertexId, VertexId)]) -> Result<BaseGraph> {
    BaseGraph::from_edges(vertex_count, edges, GraphKind::Custom)
}

/// Parses the plain-text edge-list format: a `V E` header, then `E` lines `u v`.
pub fn parse_edge_list(text: &str) -> Result<BaseGraph> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Parse("empty edge list".into()))?;
    let nums = |line: &str| -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("{line:?}: {e}"))))
            .collect()
    };
    let head = nums(header)?;
    if head.len() != 2 {
        return Err(Error::Parse(format!("header must be `V E`, got {header:?}")));
    }
    let (v, e) = (head[0], head[1]);
    let mut edges = Vec::with_capacity(e);
    for line in lines.by_ref().take(e) {
        let pair = nums(line)?;
        if pair.len() != 2 {
            return Err(Error::Parse(format!("edge line must be `u v`, got {line:?}")));
        }
        edges.push((pair[0], pair[1]));
    }
    if edges.len() != e {
        return Err(Error::Parse(format!("header announces {e} edges, found {}", edges.len())));
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing lines after the announced edges".into()));
    }
    build_custom(v, &edges)
}

/// Builds a graph from its descriptor: `box:d:L`, `cycle:N`, `tree:b:depth`,
/// `complete:n`, or `file:PATH` for an edge-list file.
pub fn parse_graph(desc: &str) -> Result<BaseGraph> {
    if let Some(path) = desc.strip_prefix("file:") {
        return parse_edge_list(&std::fs::read_to_string(path)?);
    }
    let mut parts = desc.split(':');
    let name = parts.next().unwrap_or_default();
    let args: Vec<usize> = parts
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("graph descriptor {desc:?}: {e}"))))
        .collect::<Result<_>>()?;
    match (name, args.as_slice()) {
        ("box", &[d, l]) => build_box(d, l),
        ("cycle", &[n]) => build_cycle(n),
        ("tree", &[b, depth]) => build_tree(b, depth),
        ("complete", &[n]) => build_complete(n),
        _ => Err(Error::Parse(format!("unknown graph descriptor {desc:?}"))),
    }
}

/// Renders a graph in the edge-list format accepted by [`parse_edge_list`].
pub fn write_edge_list(g: &BaseGraph) -> String {
    let mut out = format!("{} {}\n", g.vertex_count(), g.edge_count());
    for &(u, v) in g.edges() {
        out.push_str(&format!("{u} {v}\n"));
    }
    out
}

/// Closed ball `B_R(x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ball {
    pub center: VertexId,
    pub radius: usize,
    /// Sorted vertex ids.
    pub members: Vec<VertexId>,
}

pub fn ball(g: &BaseGraph, x: VertexId, radius: usize) -> Result<Ball> {
    g.check_vertex(x)?;
    let dist = g.bfs_distances(&[x]);
    let members = (0..g.vertex_count()).filter(|&v| dist[v] <= radius).collect();
    Ok(Ball { center: x, radius, members })
}

/// Vertex sphere `S_R(x)`, sorted.
pub fn sphere(g: &BaseGraph, x: VertexId, radius: usize) -> Result<Vec<VertexId>> {
    g.check_vertex(x)?;
    let dist = g.bfs_distances(&[x]);
    Ok((0..g.vertex_count()).filter(|&v| dist[v] == radius).collect())
}

/// Edge sphere `S_{R+1/2}(x)`: edges joining `S_R(x)` to `S_{R+1}(x)`, sorted.
pub fn sphere_edges(g: &BaseGraph, x: VertexId, radius: usize) -> Result<Vec<EdgeId>> {
    g.check_vertex(x)?;
    let dist = g.bfs_distances(&[x]);
    Ok(sphere_edges_from(g, &dist, radius))
}

pub(crate) fn sphere_edges_from(g: &BaseGraph, dist: &[usize], radius: usize) -> Vec<EdgeId> {
    g.edges()
        .iter()
        .enumerate()
        .filter(|&(_, &(u, v))| {
            let (a, b) = (dist[u].min(dist[v]), dist[u].max(dist[v]));
            a == radius && b == radius + 1
        })
        .map(|(e, _)| e)
        .collect()
}

pub fn distance(g: &BaseGraph, x: VertexId, y: VertexId) -> Result<usize> {
    g.check_vertex(x)?;
    g.check_vertex(y)?;
    Ok(g.bfs_distances(&[x])[y])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip_consistent(g: &BaseGraph) {
        let mut incidences = 0;
        for v in 0..g.vertex_count() {
            let mut last = None;
            for &(e, w) in g.adjacency(v) {
                let (a, b) = g.endpoints(e);
                assert!((a, b) == (v.min(w), v.max(w)));
                assert!(last.map_or(true, |l| l < e), "adjacency not in edge order");
                last = Some(e);
                incidences += 1;
            }
        }
        assert_eq!(incidences, 2 * g.edge_count());
        if let Some(colors) = g.bipartition() {
            for &(u, v) in g.edges() {
                assert_ne!(colors[u], colors[v]);
            }
        }
    }

    #[test]
    fn box_sizes() {
        let path = build_box(1, 3).unwrap();
        assert_eq!((path.vertex_count(), path.edge_count()), (3, 2));
        let square = build_box(2, 2).unwrap();
        assert_eq!((square.vertex_count(), square.edge_count()), (4, 4));
        let b = build_box(2, 5).unwrap();
        // 2 L (L-1) by direct count
        let mut count = 0;
        for x in 0..5 {
            for y in 0..5 {
                count += usize::from(x + 1 < 5) + usize::from(y + 1 < 5);
            }
        }
        assert_eq!(b.vertex_count(), 25);
        assert_eq!(b.edge_count(), count);
        assert_eq!(count, 40);
        for g in [&path, &square, &b, &build_box(3, 3).unwrap()] {
            roundtrip_consistent(g);
        }
    }

    #[test]
    fn box_bipartition_is_coordinate_parity() {
        let b = build_box(3, 4).unwrap();
        let colors = b.bipartition().unwrap();
        for v in 0..b.vertex_count() {
            let s: usize = b.box_coords(v).unwrap().iter().sum();
            assert_eq!(colors[v], s % 2 == 1);
        }
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!(build_box(0, 3).is_err());
        assert!(build_box(2, 0).is_err());
    }

    #[test]
    fn cycles() {
        let c3 = build_cycle(3).unwrap();
        assert_eq!((c3.vertex_count(), c3.edge_count()), (3, 3));
        assert!(c3.bipartition().is_none());
        let c4 = build_cycle(4).unwrap();
        assert_eq!(c4.bipartition().unwrap(), &[false, true, false, true]);
        assert_eq!(build_cycle(6).unwrap().girth(), Some(6));
        assert!(build_cycle(2).is_err());
        roundtrip_consistent(&c3);
    }

    #[test]
    fn trees_complete_custom() {
        let t = build_tree(2, 2).unwrap();
        assert_eq!((t.vertex_count(), t.edge_count()), (7, 6));
        assert!(t.is_tree());
        assert_eq!(t.girth(), None);
        let k4 = build_complete(4).unwrap();
        assert_eq!((k4.vertex_count(), k4.edge_count()), (4, 6));
        assert_eq!(k4.girth(), Some(3));
        let pendant = build_custom(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]).unwrap();
        assert_eq!((pendant.vertex_count(), pendant.edge_count()), (4, 4));
        roundtrip_consistent(&t);
        roundtrip_consistent(&k4);
    }

    #[test]
    fn custom_rejects_bad_input() {
        assert!(build_custom(3, &[(0, 1)]).is_err()); // disconnected
        assert!(build_custom(2, &[(0, 1), (1, 0)]).is_err()); // parallel
        assert!(build_custom(2, &[(0, 0), (0, 1)]).is_err()); // loop
        assert!(build_custom(2, &[(0, 2)]).is_err()); // out of range
    }

    #[test]
    fn edge_list_format() {
        let g = parse_edge_list("4 4\n0 1\n1 2\n2 0\n2 3\n").unwrap();
        assert_eq!(g.edge_count(), 4);
        assert_eq!(write_edge_list(&g), "4 4\n0 1\n1 2\n0 2\n2 3\n");
        assert!(parse_edge_list("3 2\n0 1\n").is_err());
        assert!(parse_edge_list("3 1\n0 x\n").is_err());
    }

    #[test]
    fn balls_and_spheres() {
        let b = build_box(2, 5).unwrap();
        let center = b.origin();
        assert_eq!(b.box_coords(center).unwrap(), vec![2, 2]);
        assert_eq!(ball(&b, center, 0).unwrap().members, vec![center]);
        assert_eq!(ball(&b, 0, 1).unwrap().members.len(), 3);
        // |{(x,y) in 5x5 : |x-2|+|y-2| <= 2}| by enumeration
        let mut expected = 0;
        for x in 0..5i64 {
            for y in 0..5i64 {
                if (x - 2).abs() + (y - 2).abs() <= 2 {
                    expected += 1;
                }
            }
        }
        assert_eq!(ball(&b, center, 2).unwrap().members.len(), expected);
        assert_eq!(expected, 13);
        for r in 0..4 {
            let inner = ball(&b, center, r).unwrap().members;
            let union: usize = (0..=r).map(|k| sphere(&b, center, k).unwrap().len()).sum();
            assert_eq!(inner.len(), union);
            for e in sphere_edges(&b, center, r).unwrap() {
                let (u, v) = b.endpoints(e);
                let (du, dv) = (distance(&b, center, u).unwrap(), distance(&b, center, v).unwrap());
                assert_eq!((du.min(dv), du.max(dv)), (r, r + 1));
            }
        }
        assert!(ball(&b, 99, 1).is_err());
    }

    #[test]
    fn descriptors_round_trip() {
        for desc in ["box:2:5", "cycle:7", "tree:2:3", "complete:4"] {
            assert_eq!(parse_graph(desc).unwrap().kind().to_string(), desc);
        }
        for bad in ["box:2", "ring:3", "cycle:x", ""] {
            assert!(parse_graph(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn boundary_of_box_is_outer_face() {
        let b = build_box(2, 5).unwrap();
        let boundary = b.boundary();
        assert_eq!(boundary.iter().filter(|&&x| x).count(), 16);
        assert!(!boundary[b.origin()]);
    }

    #[test]
    fn distance_is_metric_on_random_triples() {
        use rand::Rng;
        let g = build_box(2, 6).unwrap();
        let mut rng = crate::rng::StreamRng::new(3);
        for _ in 0..200 {
            let (x, y, z) = (rng.gen_range(0..36), rng.gen_range(0..36), rng.gen_range(0..36));
            let d = |a, b| distance(&g, a, b).unwrap();
            assert_eq!(d(x, y), d(y, x));
            assert_eq!(d(x, x), 0);
            assert!(d(x, z) <= d(x, y) + d(y, z));
            if x != y {
                assert!(d(x, y) > 0);
            }
        }
    }
}
