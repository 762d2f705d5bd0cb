//! Directed graphs, random DAG generation and exact reachability.
//!
//! Nodes are identified by their index. In a [`DirectedGraph`] every edge
//! `(i, k)` satisfies `i < k`, so index order is a topological order and the
//! graph is acyclic by construction. [`Digraph`] drops that requirement and
//! is used for state graphs such as Blocksworld.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::BinaryMatrix;
use crate::rng::rng_from_seed;

/// A simple directed graph: no self-loops, no multi-edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    succ: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl Digraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
        edges.sort_unstable();
        for w in edges.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidArgument(format!("duplicate edge {:?}", w[0])));
            }
        }
        let mut succ = vec![Vec::new(); n];
        for &(i, k) in &edges {
            if i >= n || k >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {k}) out of range for {n} nodes"
                )));
            }
            if i == k {
                return Err(Error::InvalidArgument(format!("self-loop at {i}")));
            }
            succ[i].push(k);
        }
        Ok(Self { n, edges, succ })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Out-neighbours of `u` in ascending order.
    pub fn successors(&self, u: usize) -> &[usize] {
        &self.succ[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.succ[u].binary_search(&v).is_ok()
    }

    pub fn adjacency(&self) -> BinaryMatrix {
        let mut a = BinaryMatrix::zeros(self.n);
        for &(i, k) in &self.edges {
            a.set(i, k, true);
        }
        a
    }

    /// `R[(t, k)] = 1` iff `t` is reachable from `k` through at least one edge.
    ///
    /// One breadth-first search per source node.
    pub fn reachability(&self) -> BinaryMatrix {
        let mut r = BinaryMatrix::zeros(self.n);
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::new();
        for k in 0..self.n {
            seen.iter_mut().for_each(|s| *s = false);
            queue.clear();
            for &v in self.successors(k) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
            while let Some(u) = queue.pop_front() {
                r.set(u, k, true);
                for &v in self.successors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        r
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            n: self.n,
            edges: self.edges.iter().map(|&(i, k)| [i, k]).collect(),
        };
        serde_json::to_string(&file).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(s)?;
        Digraph::new(file.n, file.edges.into_iter().map(|[i, k]| (i, k)))
    }
}

/// Anything paths can be sampled from and validated against.
pub trait PathGraph {
    fn node_count(&self) -> usize;
    fn has_edge(&self, u: usize, v: usize) -> bool;
    fn successors(&self, u: usize) -> &[usize];
}

impl PathGraph for Digraph {
    fn node_count(&self) -> usize {
        self.n
    }
    fn has_edge(&self, u: usize, v: usize) -> bool {
        Digraph::has_edge(self, u, v)
    }
    fn successors(&self, u: usize) -> &[usize] {
        Digraph::successors(self, u)
    }
}

/// Directed acyclic graph with topologically ordered node indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedGraph(Digraph);

impl DirectedGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("a DAG needs n >= 2, got {n}")));
        }
        let g = Digraph::new(n, edges)?;
        if let Some(&(i, k)) = g.edges.iter().find(|(i, k)| i >= k) {
            return Err(Error::InvalidArgument(format!("edge ({i}, {k}) violates i < k")));
        }
        Ok(Self(g))
    }

    pub fn as_digraph(&self) -> &Digraph {
        &self.0
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g = Digraph::from_json(s)?;
        DirectedGraph::new(g.n, g.edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

impl std::ops::Deref for DirectedGraph {
    type Target = Digraph;
    fn deref(&self) -> &Digraph {
        &self.0
    }
}

impl PathGraph for DirectedGraph {
    fn node_count(&self) -> usize {
        self.0.n
    }
    fn has_edge(&self, u: usize, v: usize) -> bool {
        self.0.has_edge(u, v)
    }
    fn successors(&self, u: usize) -> &[usize] {
        self.0.successors(u)
    }
}

/// Include each pair `(i, k)`, `i < k`, independently with probability `p`.
///
/// Pairs are visited in lexicographic order and consume one uniform draw each.
pub fn generate_random_dag(n: usize, p: f64, seed: u64) -> Result<DirectedGraph> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("n must be >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "edge probability must lie in [0, 1], got {p}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for k in i + 1..n {
            let u: f64 = rng.random();
            if u < p {
                edges.push((i, k));
            }
        }
    }
    DirectedGraph::new(n, edges)
}

pub fn compute_reachability(g: &Digraph) -> BinaryMatrix {
    g.reachability()
}

/// All `(s, t)` with `t` reachable from `s`, ascending.
pub fn reachable_pairs(g: &Digraph) -> Vec<(usize, usize)> {
    pairs_from_reachability(&g.reachability())
}

pub fn pairs_from_reachability(r: &BinaryMatrix) -> Vec<(usize, usize)> {
    let n = r.size();
    let mut out = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if r.get(t, s) {
                out.push((s, t));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> DirectedGraph {
        DirectedGraph::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn complete_when_p_is_one() {
        let g = generate_random_dag(3, 1.0, 99).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn empty_when_p_is_zero() {
        let g = generate_random_dag(100, 0.0, 3).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_random_dag(1, 0.5, 0).is_err());
        assert!(generate_random_dag(10, -0.1, 0).is_err());
        assert!(generate_random_dag(10, 1.5, 0).is_err());
        assert!(DirectedGraph::new(3, [(1, 0)]).is_err());
        assert!(DirectedGraph::new(3, [(0, 1), (0, 1)]).is_err());
    }

    #[test]
    fn seeded_edge_count_regression() {
        let g = generate_random_dag(100, 0.1, 7).unwrap();
        let m = g.edge_count();
        assert!((396..=594).contains(&m), "edge count {m}");
        assert_eq!(m, SEED7_EDGES);
    }

    // Pinned from the first seeded run of the generator.
    const SEED7_EDGES: usize = 468;

    #[test]
    fn chain_reachability() {
        let r = compute_reachability(&chain3());
        let ones: Vec<_> = r.ones().collect();
        assert_eq!(ones, vec![(1, 0), (2, 0), (2, 1)]);
        assert_eq!(reachable_pairs(&chain3()), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn empty_graph_has_no_pairs() {
        let g = DirectedGraph::new(5, []).unwrap();
        assert_eq!(compute_reachability(&g).count_ones(), 0);
        assert!(reachable_pairs(&g).is_empty());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let g = generate_random_dag(12, 0.4, 5).unwrap();
        let s = g.to_json();
        let back = DirectedGraph::from_json(&s).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), s);
        assert!(s.starts_with("{\"n\":12,\"edges\":[["));
    }
}
