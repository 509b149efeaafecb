//! Measurement models: power grids, monitor partitions and communication
//! graphs, and seeded measurement generation.

mod graph;
mod grid;
mod system;

use std::ops::Range;

use nalgebra::DMatrix;

pub use graph::{bfs_distances, MonitorGraph};
pub use grid::{dc_measurement_matrix, lattice_grid, synthetic_grid, Branch, PowerGrid};
pub(crate) use system::check_blocks;
pub use system::{
    generate_measurements, generate_noise, generate_snapshots, inject_false_data, inject_fixed,
    nominal_injection, random_consistent_system, random_estimation_system, MeasurementSystem,
    NoiseMode,
};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Threshold above which a block entry counts as a coupling between monitors.
pub const COUPLING_THRESHOLD: f64 = 1e-12;

/// Assignment of state indices and contiguous measurement rows to monitors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    state_sets: Vec<Vec<usize>>,
    row_blocks: Vec<Range<usize>>,
}

impl RegionPartition {
    pub fn new(state_sets: Vec<Vec<usize>>, row_blocks: Vec<Range<usize>>) -> Result<Self> {
        if state_sets.len() != row_blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} state sets for {} row blocks",
                state_sets.len(),
                row_blocks.len()
            )));
        }
        let mut next = 0;
        for (i, r) in row_blocks.iter().enumerate() {
            if r.start != next || r.end < r.start {
                return Err(Error::ContractViolation(format!(
                    "row block {i} ({r:?}) does not continue the partition at row {next}"
                )));
            }
            next = r.end;
        }
        Ok(Self {
            state_sets,
            row_blocks,
        })
    }

    /// Partition induced by bus areas of a grid grounded at bus 0: each area
    /// measures the injection at each of its non-reference buses `copies`
    /// times, and owns the angles of those buses.
    pub fn from_bus_areas(areas: &[Vec<usize>], copies: usize) -> Self {
        let mut state_sets = Vec::with_capacity(areas.len());
        let mut row_blocks = Vec::with_capacity(areas.len());
        let mut start = 0;
        for area in areas {
            let states: Vec<usize> = area.iter().filter(|&&b| b != 0).map(|&b| b - 1).collect();
            let len = states.len() * copies;
            row_blocks.push(start..start + len);
            start += len;
            state_sets.push(states);
        }
        Self {
            state_sets,
            row_blocks,
        }
    }

    pub fn monitor_count(&self) -> usize {
        self.row_blocks.len()
    }

    pub fn state_set(&self, i: usize) -> &[usize] {
        &self.state_sets[i]
    }

    pub fn state_sets(&self) -> &[Vec<usize>] {
        &self.state_sets
    }

    pub fn row_block(&self, i: usize) -> Range<usize> {
        self.row_blocks[i].clone()
    }

    pub fn row_blocks(&self) -> &[Range<usize>] {
        &self.row_blocks
    }

    pub fn row_count(&self) -> usize {
        self.row_blocks.last().map_or(0, |r| r.end)
    }

    pub fn covers_states(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for s in self.state_sets.iter().flatten() {
            if *s < n {
                seen[*s] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// The block `H_ij`: rows of monitor `i`, state columns of monitor `j`.
    pub fn block(&self, h: &DenseMatrix, i: usize, j: usize) -> DenseMatrix {
        let rows = self.row_block(i);
        let cols = &self.state_sets[j];
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| h[(rows.start + r, cols[c])])
    }

    fn coupled(&self, h: &DenseMatrix, i: usize, j: usize) -> bool {
        self.block(h, i, j)
            .iter()
            .any(|x| x.abs() > COUPLING_THRESHOLD)
    }

    /// Monitor adjacency under the rule `H_ij ≠ 0 or H_ji ≠ 0`.
    pub fn block_adjacency(&self, h: &DenseMatrix) -> Vec<Vec<usize>> {
        let m = self.monitor_count();
        let mut adj = vec![Vec::new(); m];
        for i in 0..m {
            for j in i + 1..m {
                if self.coupled(h, i, j) || self.coupled(h, j, i) {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        adj
    }
}

/// Rows of the reduced nodal matrix for every measurement of the partition:
/// row block `i` repeats the injection rows of its states `copies` times.
pub fn injection_matrix(
    grid: &PowerGrid,
    partition: &RegionPartition,
    copies: usize,
) -> Result<DenseMatrix> {
    let reduced = dc_measurement_matrix(grid)?;
    let n = reduced.nrows();
    let mut h = DMatrix::zeros(partition.row_count(), n);
    for i in 0..partition.monitor_count() {
        let states = partition.state_set(i);
        let rows = partition.row_block(i);
        if rows.len() != states.len() * copies {
            return Err(Error::DimensionMismatch(format!(
                "monitor {i} has {} rows for {} states measured {copies} times",
                rows.len(),
                states.len()
            )));
        }
        for (k, r) in rows.enumerate() {
            h.row_mut(r)
                .copy_from(&reduced.row(states[k % states.len()]));
        }
    }
    Ok(h)
}

/// Communication graph implied by the block structure of `h`.
pub fn monitor_graph_from_blocks(
    h: &DenseMatrix,
    partition: &RegionPartition,
) -> Result<MonitorGraph> {
    let adj = partition.block_adjacency(h);
    let edges: Vec<(usize, usize)> = adj
        .iter()
        .enumerate()
        .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
        .collect();
    MonitorGraph::new(partition.monitor_count(), &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contiguous(sizes: &[usize]) -> RegionPartition {
        let mut start = 0;
        let mut sets = Vec::new();
        let mut rows = Vec::new();
        for &s in sizes {
            sets.push((start..start + s).collect());
            rows.push(start..start + s);
            start += s;
        }
        RegionPartition::new(sets, rows).unwrap()
    }

    #[test]
    fn block_diagonal_is_disconnected() {
        let h = DMatrix::<f64>::identity(6, 6);
        let p = contiguous(&[2, 2, 2]);
        assert!(matches!(
            monitor_graph_from_blocks(&h, &p),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn block_tridiagonal_gives_a_path() {
        let n = 8;
        let h = DMatrix::from_fn(n, n, |r, c| if r.abs_diff(c) <= 1 { 1.0 } else { 0.0 });
        let p = contiguous(&[2, 2, 2, 2]);
        let g = monitor_graph_from_blocks(&h, &p).unwrap();
        assert_eq!(g, MonitorGraph::path(4).unwrap());
        assert_eq!(g.diameter(), 3);
    }

    #[test]
    fn one_sided_coupling_still_links() {
        let mut h = DMatrix::<f64>::identity(4, 4);
        h[(0, 3)] = 0.5;
        let g = monitor_graph_from_blocks(&h, &contiguous(&[2, 2])).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn lattice_block_graph_matches_construction() {
        let (grid, part, graph) = lattice_grid(3, 3).unwrap();
        let h = injection_matrix(&grid, &part, 1).unwrap();
        assert_eq!(h, dc_measurement_matrix(&grid).unwrap());
        assert_eq!(monitor_graph_from_blocks(&h, &part).unwrap(), graph);
        assert!(part.covers_states(h.ncols()));
    }

    #[test]
    fn partition_must_be_contiguous() {
        assert!(RegionPartition::new(vec![vec![], vec![]], vec![0..2, 3..4]).is_err());
        assert!(RegionPartition::new(vec![vec![]], vec![0..2, 2..4]).is_err());
    }
}
