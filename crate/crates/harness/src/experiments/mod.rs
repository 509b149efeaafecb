//! The experiment runners.

mod complexity;
mod detect;
mod epsilon;
mod lattice;
mod measurements;
mod solve;

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use gridest::network::{
    injection_matrix, monitor_graph_from_blocks, synthetic_grid, MonitorGraph, RegionPartition,
};
use gridest::DenseMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use complexity::run_complexity_counts;
pub use detect::run_detection_experiment;
pub use epsilon::run_epsilon_sweep;
pub use lattice::run_lattice_decay;
pub use measurements::run_measurement_sweep;
pub use solve::run_solve;

use crate::config::{Config, Experiment};
use crate::{Result, RunArtifact};

/// Runs the experiment named by `config`. Relative input paths are resolved
/// against `base_dir`.
pub fn run(config: &Config, base_dir: &Path) -> Result<RunArtifact> {
    let start = Instant::now();
    let mut artifact = match config.experiment() {
        Experiment::Solve => run_solve(config, base_dir)?,
        Experiment::SweepEpsilon => run_epsilon_sweep(config)?,
        Experiment::SweepMeasurements => run_measurement_sweep(config)?,
        Experiment::Detect => run_detection_experiment(config)?,
        Experiment::LatticeDecay => run_lattice_decay(config)?,
        Experiment::Complexity => run_complexity_counts(config)?,
    };
    artifact.elapsed = start.elapsed();
    Ok(artifact)
}

/// Seed of the generator stream for trial `index` of a run seeded by `seed`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bus angles uniform in `[-0.5, 0.5]` radians.
pub(crate) fn random_angles(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5))
}

/// A synthetic grid measured by bus injections, `copies` per bus, with
/// independent noise of standard deviation `sigma` on every row.
pub(crate) struct SyntheticInstance {
    pub partition: RegionPartition,
    pub graph: MonitorGraph,
    pub h: DenseMatrix,
    pub sigma: DenseMatrix,
    pub b: DenseMatrix,
}

impl SyntheticInstance {
    pub fn from_config(config: &Config, copies: usize) -> Result<Self> {
        let (grid, areas) = synthetic_grid(
            config.count("buses")?,
            config.count("branches")?,
            config.count("areas")?,
            config.seed()?,
        )?;
        let sd = config.positive("sigma")?;
        let partition = RegionPartition::from_bus_areas(&areas, copies);
        let h = injection_matrix(&grid, &partition, copies)?;
        let graph = monitor_graph_from_blocks(&h, &partition)?;
        let p = h.nrows();
        Ok(Self {
            partition,
            graph,
            sigma: DMatrix::identity(p, p) * (sd * sd),
            b: DMatrix::identity(p, p) * sd,
            h,
        })
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        self.partition.row_blocks()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }
}

/// Least-squares slope of `log10 y` against `log10 x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| (x.log10(), y.log10()))
        .collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_seeds_differ_by_index_and_seed() {
        let a: Vec<u64> = (0..100).map(|t| stream_seed(1, t)).collect();
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_ne!(stream_seed(1, 0), stream_seed(2, 0));
        assert_eq!(stream_seed(7, 3), stream_seed(7, 3));
    }

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|k| {
                let x = 10f64.powi(-k);
                (x, 3.0 * x * x)
            })
            .collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }
}
