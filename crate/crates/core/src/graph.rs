//! Undirected graphs and the matrices built from them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng;

/// Simple undirected graph with optional node features and scalar targets.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Option<DenseMatrix>,
    targets: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianNorm {
    /// `L = D − A`
    #[default]
    Unnormalized,
    /// `I − D^{-1/2} A D^{-1/2}`, with `D^{-1/2}` taken as 0 on isolated nodes.
    Symmetric,
}

impl Graph {
    /// Validates and normalizes an edge list. Edges may be given in either
    /// orientation; self-loops, duplicates and out-of-range endpoints are
    /// rejected.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidGraph("num_nodes must be positive".into()));
        }
        let mut normalized = Vec::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {num_nodes})"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            normalized.push((u.min(v), u.max(v)));
        }
        normalized.sort_unstable();
        if let Some(w) = normalized.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph(format!("duplicate edge ({}, {})", w[0].0, w[0].1)));
        }
        Ok(Self {
            num_nodes,
            edges: normalized,
            node_features: None,
            targets: BTreeMap::new(),
        })
    }

    pub fn with_features(mut self, features: DenseMatrix) -> Result<Self> {
        self.set_features(Some(features))?;
        Ok(self)
    }

    pub fn set_features(&mut self, features: Option<DenseMatrix>) -> Result<()> {
        if let Some(f) = &features {
            if f.rows() != self.num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "node_features has {} rows for {} nodes",
                    f.rows(),
                    self.num_nodes
                )));
            }
        }
        self.node_features = features;
        Ok(())
    }

    pub fn with_target(mut self, name: impl Into<String>, value: f64) -> Self {
        self.targets.insert(name.into(), value);
        self
    }

    pub fn set_target(&mut self, name: impl Into<String>, value: f64) {
        self.targets.insert(name.into(), value);
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> Option<&DenseMatrix> {
        self.node_features.as_ref()
    }

    pub fn targets(&self) -> &BTreeMap<String, f64> {
        &self.targets
    }

    pub fn target(&self, name: &str) -> Result<f64> {
        self.targets
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTarget(name.into()))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn first_isolated_node(&self) -> Option<usize> {
        self.degrees().iter().position(|&d| d == 0)
    }

    /// Connected component count via union-find.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.num_nodes;
        for &(u, v) in &self.edges {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru] = rv;
                components -= 1;
            }
        }
        components
    }

    /// Relabels node `i` as `perm[i]`. Features and targets follow.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParams("not a permutation of the node set".into()));
        }
        let mut g = Self::new(n, self.edges.iter().map(|&(u, v)| (perm[u], perm[v])))?;
        g.node_features = self.node_features.as_ref().map(|f| f.permute_rows(perm));
        g.targets = self.targets.clone();
        Ok(g)
    }
}

/// Symmetric 0/1 adjacency matrix.
pub fn build_adjacency(g: &Graph) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(g.num_nodes, g.num_nodes);
    for &(u, v) in &g.edges {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    a
}

pub fn build_laplacian(g: &Graph, norm: LaplacianNorm) -> DenseMatrix {
    let n = g.num_nodes;
    let deg = g.degrees();
    let mut l = DenseMatrix::zeros(n, n);
    match norm {
        LaplacianNorm::Unnormalized => {
            for (i, &d) in deg.iter().enumerate() {
                l[(i, i)] = d as f64;
            }
            for &(u, v) in &g.edges {
                l[(u, v)] = -1.0;
                l[(v, u)] = -1.0;
            }
        }
        LaplacianNorm::Symmetric => {
            let inv_sqrt: Vec<f64> = deg
                .iter()
                .map(|&d| if d == 0 { 0.0 } else { 1.0 / libm::sqrt(d as f64) })
                .collect();
            for i in 0..n {
                l[(i, i)] = 1.0;
            }
            for &(u, v) in &g.edges {
                let w = -inv_sqrt[u] * inv_sqrt[v];
                l[(u, v)] = w;
                l[(v, u)] = w;
            }
        }
    }
    l
}

/// Random-walk diffusion operator `P = D⁻¹A`.
pub fn build_diffusion(g: &Graph) -> Result<DenseMatrix> {
    let deg = g.degrees();
    if let Some(i) = deg.iter().position(|&d| d == 0) {
        return Err(Error::IsolatedNode(i));
    }
    let mut p = DenseMatrix::zeros(g.num_nodes, g.num_nodes);
    for &(u, v) in &g.edges {
        p[(u, v)] = 1.0 / deg[u] as f64;
        p[(v, u)] = 1.0 / deg[v] as f64;
    }
    Ok(p)
}

/// Synthetic graph families used for fixtures and demo datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    Path {
        n: usize,
    },
    Cycle {
        n: usize,
    },
    Complete {
        n: usize,
    },
    /// Node 0 is the hub; `n` counts the hub.
    Star {
        n: usize,
    },
    Grid {
        rows: usize,
        cols: usize,
    },
    ErdosRenyi {
        n: usize,
        p: f64,
    },
}

const ER_MAX_ATTEMPTS: usize = 1000;

/// Deterministic graph generator. Erdős–Rényi graphs are resampled until no
/// node is isolated.
pub fn generate_graph(spec: &GraphSpec, seed: u64) -> Result<Graph> {
    match *spec {
        GraphSpec::Path { n } => {
            positive(n)?;
            Graph::new(n, (1..n).map(|i| (i - 1, i)))
        }
        GraphSpec::Cycle { n } => {
            if n < 3 {
                return Err(Error::InvalidParams(format!("cycle needs n >= 3, got {n}")));
            }
            Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
        }
        GraphSpec::Complete { n } => {
            positive(n)?;
            Graph::new(n, (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))))
        }
        GraphSpec::Star { n } => {
            positive(n)?;
            Graph::new(n, (1..n).map(|i| (0, i)))
        }
        GraphSpec::Grid { rows, cols } => {
            positive(rows)?;
            positive(cols)?;
            let id = |r: usize, c: usize| r * cols + c;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        edges.push((id(r, c), id(r, c + 1)));
                    }
                    if r + 1 < rows {
                        edges.push((id(r, c), id(r + 1, c)));
                    }
                }
            }
            Graph::new(rows * cols, edges)
        }
        GraphSpec::ErdosRenyi { n, p } => {
            if n < 2 || !(0.0..=1.0).contains(&p) || p == 0.0 {
                return Err(Error::InvalidParams(format!(
                    "erdos_renyi needs n >= 2 and p in (0, 1], got n={n}, p={p}"
                )));
            }
            let mut rng = rng::seeded(seed, 0x0067_7261_7068);
            for _ in 0..ER_MAX_ATTEMPTS {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if rng.gen::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                let g = Graph::new(n, edges)?;
                if g.first_isolated_node().is_none() {
                    return Ok(g);
                }
            }
            Err(Error::InvalidParams(format!(
                "no isolated-node-free erdos_renyi(n={n}, p={p}) sample in {ER_MAX_ATTEMPTS} attempts"
            )))
        }
    }
}

fn positive(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidParams("graph size must be positive".into()))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p3() -> Graph {
        Graph::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn adjacency_examples() {
        assert_eq!(
            build_adjacency(&p3()).to_rows(),
            vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]
        );
        let empty = Graph::new(3, []).unwrap();
        assert_eq!(build_adjacency(&empty), DenseMatrix::zeros(3, 3));
        let k3 = generate_graph(&GraphSpec::Complete { n: 3 }, 0).unwrap();
        let expected = DenseMatrix::filled(3, 3, 1.0).sub(&DenseMatrix::identity(3));
        assert_eq!(build_adjacency(&k3), expected);
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(
            build_laplacian(&p3(), LaplacianNorm::Unnormalized).to_rows(),
            vec![vec![1.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 1.0]]
        );
        let single = Graph::new(1, []).unwrap();
        assert_eq!(
            build_laplacian(&single, LaplacianNorm::Unnormalized).to_rows(),
            vec![vec![0.0]]
        );
        let s = build_laplacian(&p3(), LaplacianNorm::Symmetric);
        let h = -1.0 / 2f64.sqrt();
        let expected = DenseMatrix::from_rows(&[[1.0, h, 0.0], [h, 1.0, h], [0.0, h, 1.0]]).unwrap();
        assert!(s.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn symmetric_laplacian_isolated_node_convention() {
        let g = Graph::new(3, [(0, 1)]).unwrap();
        let s = build_laplacian(&g, LaplacianNorm::Symmetric);
        assert_eq!(s.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn diffusion_examples() {
        assert_eq!(
            build_diffusion(&p3()).unwrap().to_rows(),
            vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 1.0, 0.0]]
        );
        let k2 = Graph::new(2, [(0, 1)]).unwrap();
        assert_eq!(
            build_diffusion(&k2).unwrap().to_rows(),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]]
        );
        let isolated = Graph::new(3, [(0, 1)]).unwrap();
        assert_eq!(build_diffusion(&isolated), Err(Error::IsolatedNode(2)));
    }

    #[test]
    fn graph_validation() {
        assert!(Graph::new(0, []).is_err());
        assert!(Graph::new(2, [(0, 2)]).is_err());
        assert!(Graph::new(2, [(1, 1)]).is_err());
        assert!(Graph::new(3, [(0, 1), (1, 0)]).is_err());
        let g = Graph::new(3, [(2, 1)]).unwrap();
        assert_eq!(g.edges(), &[(1, 2)]);
        assert!(g.clone().with_features(DenseMatrix::zeros(2, 4)).is_err());
        assert!(g.with_features(DenseMatrix::zeros(3, 4)).is_ok());
    }

    #[test]
    fn generator_examples() {
        let path = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        assert_eq!(path.edges(), &[(0, 1), (1, 2)]);
        let k4 = generate_graph(&GraphSpec::Complete { n: 4 }, 0).unwrap();
        assert_eq!(k4.edges().len(), 6);
        let spec = GraphSpec::ErdosRenyi { n: 10, p: 0.4 };
        let a = generate_graph(&spec, 7).unwrap();
        let b = generate_graph(&spec, 7).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert!(a.first_isolated_node().is_none());
        let grid = generate_graph(&GraphSpec::Grid { rows: 2, cols: 3 }, 0).unwrap();
        assert_eq!(grid.edges().len(), 7);
        assert_eq!(grid.component_count(), 1);
        assert!(generate_graph(&GraphSpec::ErdosRenyi { n: 5, p: 1.5 }, 0).is_err());
        assert!(generate_graph(&GraphSpec::Cycle { n: 2 }, 0).is_err());
    }

    #[test]
    fn components_and_permutation() {
        let g = Graph::new(5, [(0, 1), (3, 4)]).unwrap();
        assert_eq!(g.component_count(), 3);
        let p = g.permuted(&[4, 3, 2, 1, 0]).unwrap();
        assert_eq!(p.edges(), &[(0, 1), (3, 4)]);
        assert!(g.permuted(&[0, 0, 1, 2, 3]).is_err());
    }
}
