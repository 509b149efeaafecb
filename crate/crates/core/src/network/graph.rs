use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Breadth-first distances from `source`; `None` marks unreachable vertices.
pub fn bfs_distances(adjacency: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adjacency.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued vertices have a distance");
        for &v in &adjacency[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Undirected connected communication graph between monitors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitorGraph {
    adjacency: Vec<Vec<usize>>,
    diameter: usize,
}

impl MonitorGraph {
    pub fn new(monitor_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if monitor_count == 0 {
            return Err(Error::Model(
                "a monitor graph needs at least one monitor".into(),
            ));
        }
        let mut adj = vec![BTreeSet::new(); monitor_count];
        for &(a, b) in edges {
            if a >= monitor_count || b >= monitor_count {
                return Err(Error::Model(format!(
                    "edge ({a}, {b}) references a monitor outside 0..{monitor_count}"
                )));
            }
            if a == b {
                return Err(Error::Model(format!("self-loop at monitor {a}")));
            }
            adj[a].insert(b);
            adj[b].insert(a);
        }
        let adjacency: Vec<Vec<usize>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();
        let mut diameter = 0;
        for source in 0..monitor_count {
            for (target, d) in bfs_distances(&adjacency, source).into_iter().enumerate() {
                match d {
                    Some(d) => diameter = diameter.max(d),
                    None => {
                        return Err(Error::Model(format!(
                            "monitor graph is disconnected: no path from {source} to {target}"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            adjacency,
            diameter,
        })
    }

    pub fn path(m: usize) -> Result<Self> {
        let edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
        Self::new(m, &edges)
    }

    pub fn complete(m: usize) -> Result<Self> {
        let edges: Vec<_> = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .collect();
        Self::new(m, &edges)
    }

    /// `side x side` grid, monitor `r * side + c` at row `r`, column `c`.
    pub fn lattice(side: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                if c + 1 < side {
                    edges.push((i, i + 1));
                }
                if r + 1 < side {
                    edges.push((i, i + side));
                }
            }
        }
        Self::new(side * side, &edges)
    }

    /// Random spanning tree plus each remaining pair with probability
    /// `extra_edge_probability`.
    pub fn random_connected(m: usize, extra_edge_probability: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut edges = BTreeSet::new();
        for k in 1..m {
            let parent = order[rng.random_range(0..k)];
            edges.insert((order[k].min(parent), order[k].max(parent)));
        }
        for i in 0..m {
            for j in i + 1..m {
                if rng.random_range(0.0..1.0) < extra_edge_probability {
                    edges.insert((i, j));
                }
            }
        }
        Self::new(m, &edges.into_iter().collect::<Vec<_>>())
    }

    pub fn monitor_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn distances_from(&self, i: usize) -> Vec<usize> {
        bfs_distances(&self.adjacency, i)
            .into_iter()
            .map(|d| d.expect("graph is connected"))
            .collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> usize {
        self.distances_from(i)[j]
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    pub fn eccentricity(&self, i: usize) -> usize {
        self.distances_from(i).into_iter().max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_shapes() {
        assert_eq!(MonitorGraph::path(1).unwrap().diameter(), 0);
        assert_eq!(MonitorGraph::path(5).unwrap().diameter(), 4);
        assert_eq!(MonitorGraph::complete(6).unwrap().diameter(), 1);
        let l = MonitorGraph::lattice(4).unwrap();
        assert_eq!(l.diameter(), 6);
        assert_eq!(l.neighbors(5), &[1, 4, 6, 9]);
        assert_eq!(l.eccentricity(5), 4);
        assert_eq!(l.edges().len(), 24);
    }

    #[test]
    fn disconnected_and_invalid_graphs_are_rejected() {
        assert!(matches!(
            MonitorGraph::new(3, &[(0, 1)]),
            Err(Error::Model(_))
        ));
        assert!(MonitorGraph::new(2, &[(0, 2)]).is_err());
        assert!(MonitorGraph::new(2, &[(1, 1), (0, 1)]).is_err());
        assert!(MonitorGraph::new(0, &[]).is_err());
    }

    #[test]
    fn random_connected_is_connected_and_seeded() {
        for seed in 0..20 {
            let g = MonitorGraph::random_connected(2 + (seed as usize % 11), 0.2, seed).unwrap();
            assert_eq!(
                g,
                MonitorGraph::random_connected(g.monitor_count(), 0.2, seed).unwrap()
            );
            let brute = (0..g.monitor_count())
                .map(|i| g.eccentricity(i))
                .max()
                .unwrap();
            assert_eq!(g.diameter(), brute);
        }
    }
}
