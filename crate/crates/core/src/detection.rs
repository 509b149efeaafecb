//! False-data detection by residual thresholding.
//!
//! At every time step the monitors estimate the state from the current
//! snapshot and compare their own measurements against the estimate. A
//! monitor raises an alarm when `‖z_i − H_i x̂‖_∞ > Γ`.

use std::collections::BTreeSet;
use std::io::{self, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::diffusive::{embedded_nodes, run_synchronous, SyncOptions};
use crate::error::{Error, Result};
use crate::incremental::{wls_gain, wls_incremental_snapshots};
use crate::linalg::{induced_norm, DenseMatrix, MatrixNorm};
use crate::network::{check_blocks, MonitorGraph};

/// `I − H W` with `W` the weighted-least-squares gain.
pub fn residual_operator(h: &DenseMatrix, sigma: &DenseMatrix) -> Result<DenseMatrix> {
    let w = wls_gain(h, sigma)?;
    Ok(DMatrix::identity(h.nrows(), h.nrows()) - h * w)
}

/// `Γ = γ ‖I − H W‖_∞` for noise bounded by `|v_k| ≤ γ`.
pub fn gamma_for_noise_bound(
    h: &DenseMatrix,
    sigma: &DenseMatrix,
    noise_bound: f64,
) -> Result<f64> {
    if noise_bound.is_nan() || noise_bound < 0.0 {
        return Err(Error::ContractViolation(format!(
            "noise bound must be nonnegative, got {noise_bound}"
        )));
    }
    Ok(noise_bound * induced_norm(&residual_operator(h, sigma)?, MatrixNorm::Infinity)?)
}

/// `Γ = 2σ ‖I − H W‖_∞`.
pub fn threshold_gamma(h: &DenseMatrix, sigma: &DenseMatrix, s: f64) -> Result<f64> {
    if s.is_nan() || s <= 0.0 {
        return Err(Error::ContractViolation(format!(
            "sigma must be positive, got {s}"
        )));
    }
    gamma_for_noise_bound(h, sigma, 2.0 * s)
}

/// How the monitors obtain `x̂(t)`.
#[derive(Clone, Debug, Default)]
pub enum Estimator {
    /// Sequential pass over the monitors.
    Incremental,
    /// Diffusion over the monitor graph.
    #[default]
    Diffusive,
}

/// Residuals and alarms for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    pub time: usize,
    pub gamma: f64,
    pub residuals: Vec<f64>,
    pub alarms: BTreeSet<usize>,
    /// Set when any monitor alarms; every control center is then notified.
    pub alarm_raised: bool,
}

impl DetectionReport {
    fn new(time: usize, gamma: f64, residuals: Vec<f64>) -> Self {
        let alarms: BTreeSet<usize> = residuals
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > gamma)
            .map(|(i, _)| i)
            .collect();
        Self {
            time,
            gamma,
            alarm_raised: !alarms.is_empty(),
            residuals,
            alarms,
        }
    }
}

/// Monitors whose residual crossed the threshold. This is a hint about where
/// the corrupted data sits, not an identification.
pub fn regional_hint(report: &DetectionReport) -> BTreeSet<usize> {
    report.alarms.clone()
}

/// The monitors of a detection scheme together with their shared `ε` and `Γ`.
#[derive(Clone, Debug)]
pub struct DetectionNetwork {
    h: DenseMatrix,
    b: DenseMatrix,
    blocks: Vec<Range<usize>>,
    graph: MonitorGraph,
    epsilon: f64,
    gamma: f64,
    estimator: Estimator,
}

impl DetectionNetwork {
    pub fn new(
        h: DenseMatrix,
        b: DenseMatrix,
        blocks: Vec<Range<usize>>,
        graph: MonitorGraph,
        epsilon: f64,
        gamma: f64,
    ) -> Result<Self> {
        check_blocks(&blocks, h.nrows())?;
        if b.nrows() != h.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "H has {} rows, B has {}",
                h.nrows(),
                b.nrows()
            )));
        }
        if graph.monitor_count() != blocks.len() {
            return Err(Error::ContractViolation(format!(
                "{} row blocks on a graph of {} monitors",
                blocks.len(),
                graph.monitor_count()
            )));
        }
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::ContractViolation(format!(
                "threshold must be nonnegative, got {gamma}"
            )));
        }
        Ok(Self {
            h,
            b,
            blocks,
            graph,
            epsilon,
            gamma,
            estimator: Estimator::default(),
        })
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn monitor_count(&self) -> usize {
        self.blocks.len()
    }

    /// Each monitor's state estimate for every column of `z`.
    fn estimates(&self, z: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        match self.estimator {
            Estimator::Incremental => {
                let x = wls_incremental_snapshots(&self.h, &self.b, z, &self.blocks, self.epsilon)?;
                Ok(vec![x; self.blocks.len()])
            }
            Estimator::Diffusive => {
                let mut nodes = embedded_nodes(&self.h, &self.b, z, &self.blocks, self.epsilon)?;
                run_synchronous(&mut nodes, &self.graph, &SyncOptions::default())?;
                Ok(nodes.iter().map(|n| n.state_estimate()).collect())
            }
        }
    }

    fn check_snapshots(&self, z: &DenseMatrix) -> Result<()> {
        if z.nrows() != self.h.nrows() {
            return Err(Error::ContractViolation(format!(
                "snapshot has {} measurements, expected {}",
                z.nrows(),
                self.h.nrows()
            )));
        }
        Ok(())
    }

    pub fn detect_step(&self, z: &DVector<f64>, time: usize) -> Result<DetectionReport> {
        let zm = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        Ok(self.detect_stream(&zm, time)?.remove(0))
    }

    /// One report per column of `z`, numbered from `first_time`. The columns
    /// are estimated together but checked independently.
    pub fn detect_stream(
        &self,
        z: &DenseMatrix,
        first_time: usize,
    ) -> Result<Vec<DetectionReport>> {
        self.check_snapshots(z)?;
        if z.ncols() == 0 {
            return Ok(Vec::new());
        }
        let estimates = self.estimates(z)?;
        let mut per_monitor = Vec::with_capacity(self.blocks.len());
        for (r, x) in self.blocks.iter().zip(&estimates) {
            let res = z.rows_range(r.clone()) - self.h.rows_range(r.clone()) * x;
            per_monitor.push(res);
        }
        Ok((0..z.ncols())
            .map(|t| {
                let residuals = per_monitor.iter().map(|res| res.column(t).amax()).collect();
                DetectionReport::new(first_time + t, self.gamma, residuals)
            })
            .collect())
    }

    /// `‖z − H x̂‖_∞ > Γ` evaluated on the stacked system.
    pub fn central_alarm(&self, z: &DVector<f64>, x: &DVector<f64>) -> bool {
        (z - &self.h * x).amax() > self.gamma
    }
}

/// Writes `t,monitor,residual,gamma,alarm` rows.
pub fn write_detection_csv<W: Write>(mut out: W, reports: &[DetectionReport]) -> io::Result<()> {
    writeln!(out, "t,monitor,residual,gamma,alarm")?;
    for r in reports {
        for (i, res) in r.residuals.iter().enumerate() {
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{}",
                r.time,
                i,
                res,
                r.gamma,
                u8::from(r.alarms.contains(&i))
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incremental::default_epsilon;
    use crate::linalg::noise_factor;
    use crate::network::{generate_snapshots, inject_fixed, NoiseMode};
    use crate::testutil::random_matrix;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_invertible_h_has_zero_threshold() {
        let h = dmatrix![2.0, 1.0; 0.0, 1.0];
        let g = threshold_gamma(&h, &DMatrix::identity(2, 2), 1.0).unwrap();
        assert!(g.abs() < 1e-14);
    }

    #[test]
    fn threshold_scales_with_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_matrix(&mut rng, 6, 3);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5, 1.0, 3.0, 1.0]));
        let a = threshold_gamma(&h, &s, 1.0).unwrap();
        let b = threshold_gamma(&h, &s, 3.5).unwrap();
        assert!((b - 3.5 * a).abs() <= 1e-14 * b);
    }

    #[test]
    fn two_equal_measurements() {
        let h = dmatrix![1.0; 1.0];
        let g = threshold_gamma(&h, &DMatrix::identity(2, 2), 1.0).unwrap();
        assert!((g - 2.0).abs() < 1e-14);
    }

    fn network(
        seed: u64,
        estimator: Estimator,
    ) -> (DetectionNetwork, DenseMatrix, DVector<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (4, 12);
        let h = random_matrix(&mut rng, p, n);
        let b = DMatrix::<f64>::identity(p, p) * 0.5;
        let sigma = &b * b.transpose();
        let x = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        let gamma = threshold_gamma(&h, &sigma, 0.5).unwrap();
        let eps = default_epsilon(&h, &b).unwrap();
        let net = DetectionNetwork::new(
            h,
            b,
            vec![0..3, 3..6, 6..9, 9..12],
            MonitorGraph::path(4).unwrap(),
            eps,
            gamma,
        )
        .unwrap()
        .with_estimator(estimator);
        (net, sigma, x, gamma)
    }

    #[test]
    fn bounded_noise_never_alarms() {
        for estimator in [Estimator::Incremental, Estimator::Diffusive] {
            let (net, sigma, x, _) = network(2, estimator);
            let b = noise_factor(&sigma).unwrap();
            let z = generate_snapshots(&net.h, &x, &b, 200, NoiseMode::Truncated, 3).unwrap();
            let reports = net.detect_stream(&z, 0).unwrap();
            assert_eq!(reports.len(), 200);
            assert!(reports.iter().all(|r| !r.alarm_raised));
        }
    }

    #[test]
    fn noise_free_data_never_alarms() {
        let (net, _, x, _) = network(4, Estimator::Diffusive);
        let r = net.detect_step(&(&net.h * &x), 0).unwrap();
        assert!(!r.alarm_raised);
        assert!(regional_hint(&r).is_empty());
    }

    #[test]
    fn large_injection_is_caught_in_its_region() {
        let (net, sigma, x, gamma) = network(5, Estimator::Diffusive);
        let b = noise_factor(&sigma).unwrap();
        let z = generate_snapshots(&net.h, &x, &b, 20, NoiseMode::Truncated, 6).unwrap();
        let mut caught = 0;
        for t in 0..20 {
            let zc = inject_fixed(&z.column(t).into_owned(), &(0..3), 1, 50.0 * gamma).unwrap();
            let r = net.detect_step(&zc, t).unwrap();
            if r.alarms.contains(&0) {
                caught += 1;
            }
        }
        assert_eq!(caught, 20);
    }

    #[test]
    fn attacks_inside_the_image_are_invisible() {
        let (net, _, x, _) = network(7, Estimator::Incremental);
        let z = &net.h * &x;
        let delta = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let clean = net.detect_step(&z, 0).unwrap();
        let hit = net.detect_step(&(&z + &net.h * delta), 0).unwrap();
        for (a, b) in clean.residuals.iter().zip(&hit.residuals) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_threshold_never_shrinks_alarms() {
        let (net, sigma, x, gamma) = network(8, Estimator::Incremental);
        let b = noise_factor(&sigma).unwrap();
        let z = generate_snapshots(&net.h, &x, &b, 10, NoiseMode::Gaussian, 9).unwrap();
        let mut previous: Option<Vec<DetectionReport>> = None;
        for k in (0..=10).rev() {
            let reports = net
                .clone()
                .with_gamma(gamma * k as f64 / 10.0)
                .detect_stream(&z, 0)
                .unwrap();
            if let Some(prev) = &previous {
                for (hi, lo) in prev.iter().zip(&reports) {
                    assert!(hi.alarms.is_subset(&lo.alarms));
                }
            }
            previous = Some(reports);
        }
    }

    #[test]
    fn distributed_alarm_matches_central_check() {
        let (net, sigma, x, gamma) = network(10, Estimator::Diffusive);
        let b = noise_factor(&sigma).unwrap();
        let z = generate_snapshots(&net.h, &x, &b, 30, NoiseMode::Gaussian, 11).unwrap();
        let net = net.with_gamma(gamma * 0.3);
        let xs = wls_incremental_snapshots(&net.h, &net.b, &z, &net.blocks, net.epsilon).unwrap();
        let reports = net.detect_stream(&z, 0).unwrap();
        let mut both = [0; 2];
        for (t, r) in reports.iter().enumerate() {
            let zt = z.column(t).into_owned();
            let xt = xs.column(t).into_owned();
            let central = net.central_alarm(&zt, &xt);
            assert_eq!(r.alarm_raised, central);
            both[usize::from(central)] += 1;
        }
        assert!(both[0] > 0 && both[1] > 0);
    }

    #[test]
    fn empty_stream() {
        let (net, _, _, _) = network(12, Estimator::Diffusive);
        assert!(net
            .detect_stream(&DMatrix::zeros(12, 0), 0)
            .unwrap()
            .is_empty());
        assert!(matches!(
            net.detect_stream(&DMatrix::zeros(11, 1), 0),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn csv_rows() {
        let r = DetectionReport::new(3, 1.0, vec![0.5, 2.0]);
        let mut out = Vec::new();
        write_detection_csv(&mut out, &[r]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,monitor,residual,gamma,alarm");
        assert_eq!(lines[2], "3,1,2.0000000000000000e0,1.0000000000000000e0,1");
        assert_eq!(
            lines[1].split(',').nth(2).unwrap().parse::<f64>().unwrap(),
            0.5
        );
    }
}
