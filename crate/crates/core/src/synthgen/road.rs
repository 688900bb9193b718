use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Road network: links as nodes, directed edges, and the row-normalised
/// adjacency with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    pub n_links: usize,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Tensor,
}

impl RoadGraph {
    /// Builds the graph from directed edges; self-loops are added before
    /// row normalisation.
    pub fn from_edges(n_links: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_links == 0 {
            return Err(Error::Param("graph needs at least one link".into()));
        }
        let mut set = BTreeSet::new();
        for &(s, d) in edges {
            if s >= n_links || d >= n_links {
                return Err(Error::Index(format!("edge ({s},{d}) outside {n_links} links")));
            }
            if s != d {
                set.insert((s, d));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adj = vec![0.0; n_links * n_links];
        for i in 0..n_links {
            adj[i * n_links + i] = 1.0;
        }
        for &(s, d) in &edges {
            adj[s * n_links + d] = 1.0;
        }
        for row in adj.chunks_mut(n_links) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(Self {
            n_links,
            edges,
            adjacency: Tensor::new(&[n_links, n_links], adj)?,
        })
    }

    /// Links `m != n` with an edge `(n, m)`.
    pub fn neighbors(&self, n: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(s, _)| s == n)
            .map(|&(_, d)| d)
            .collect()
    }

    /// Number of connected components, ignoring edge direction.
    pub fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n_links).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut c = x;
            while p[c] != r {
                let next = p[c];
                p[c] = r;
                c = next;
            }
            r
        }
        for &(s, d) in &self.edges {
            let (a, b) = (find(&mut parent, s), find(&mut parent, d));
            if a != b {
                parent[a] = b;
            }
        }
        (0..self.n_links).filter(|&i| find(&mut parent, i) == i).count()
    }
}

/// Random connected road graph: a chain backbone plus random undirected
/// shortcuts until the mean degree reaches `avg_degree`.
pub fn gen_graph(n_links: usize, avg_degree: f64, seed: u64) -> Result<RoadGraph> {
    if n_links == 0 {
        return Err(Error::Param("n_links must be at least 1".into()));
    }
    if !(avg_degree >= 0.0) || avg_degree >= n_links as f64 {
        return Err(Error::Param(format!(
            "avg_degree {avg_degree} must be in [0, n_links = {n_links})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut undirected = BTreeSet::new();
    for i in 1..n_links {
        undirected.insert((i - 1, i));
    }
    let max_pairs = n_links * (n_links - 1) / 2;
    let target = ((n_links as f64 * avg_degree / 2.0).round() as usize).min(max_pairs);
    while undirected.len() < target {
        let a = rng.random_range(0..n_links);
        let b = rng.random_range(0..n_links);
        if a != b {
            undirected.insert((a.min(b), a.max(b)));
        }
    }
    let edges: Vec<_> = undirected
        .iter()
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .collect();
    RoadGraph::from_edges(n_links, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_link_is_self_loop() {
        let g = gen_graph(1, 0.0, 3).unwrap();
        assert_eq!(g.adjacency.data(), &[1.0]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_graph(5, 2.0, 11).unwrap();
        let b = gen_graph(5, 2.0, 11).unwrap();
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn fifty_links_connected() {
        let g = gen_graph(50, 3.0, 5).unwrap();
        assert_eq!(g.components(), 1);
    }

    #[test]
    fn degree_too_large_is_rejected() {
        assert!(matches!(gen_graph(4, 4.0, 0), Err(Error::Param(_))));
        assert!(matches!(gen_graph(0, 0.5, 0), Err(Error::Param(_))));
    }

    #[test]
    fn adjacency_invariants() {
        let g = gen_graph(12, 3.0, 2).unwrap();
        let n = g.n_links;
        let a = g.adjacency.data();
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..n {
                let linked = i == j || g.edges.contains(&(i, j));
                assert_eq!(row[j] > 0.0, linked, "({i},{j})");
            }
        }
    }
}
