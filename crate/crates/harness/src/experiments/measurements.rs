//! Estimation error as every monitor measures its buses more times.

use gridest::incremental::{default_epsilon, wls_incremental_snapshots};
use gridest::DenseMatrix;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{random_angles, stream_seed, SyntheticInstance};
use crate::artifact::real;
use crate::config::{Config, ConfigError};
use crate::{Result, RunArtifact};

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Standard normal draws `g[(s, c)]` for copy `c` of the measurement of
/// state `s`, shared by every budget of one trial.
fn copy_noise(states: usize, copies: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(states, copies, |_, _| StandardNormal.sample(&mut rng))
}

/// Budget `k` measures every bus injection `k` times, so the total grows
/// from `N̄` to `k N̄` rows. Trial `t` draws its state and one noise value
/// per (bus, copy) from its own stream, and every budget reuses the draws
/// of the copies it contains. All trials of a budget are estimated together
/// as snapshots.
///
/// Writes `budget,measurements,mean_error,std_error` with the error
/// `‖x̂ − x‖` against the true state.
pub fn run_measurement_sweep(config: &Config) -> Result<RunArtifact> {
    let budgets: Vec<usize> = config.list("budgets")?;
    if budgets.contains(&0) {
        return Err(ConfigError::Value {
            key: "budgets".into(),
            value: config.raw("budgets").into(),
            reason: "budgets must be positive".into(),
        }
        .into());
    }
    let trials = config.count("trials")?;
    let seed = config.seed()?;
    let fixed_eps = config.auto_or_positive("epsilon")?;
    let sd = config.positive("sigma")?;
    let max_copies = budgets.iter().copied().max().unwrap_or(1);

    let base = SyntheticInstance::from_config(config, 1)?;
    let n = base.state_dim();
    let mut truth = DMatrix::zeros(n, trials);
    let mut draws = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_seed = stream_seed(seed, t as u64);
        truth.set_column(t, &random_angles(n, trial_seed));
        draws.push(copy_noise(n, max_copies, stream_seed(trial_seed, 0)));
    }

    let mut csv = String::from("budget,measurements,mean_error,std_error\n");
    let mut means = Vec::with_capacity(budgets.len());
    for &k in &budgets {
        let inst = SyntheticInstance::from_config(config, k)?;
        let p = inst.h.nrows();
        // Global index of the state measured by each row, and its copy.
        let mut row_source = Vec::with_capacity(p);
        let mut offset = 0;
        for i in 0..inst.partition.monitor_count() {
            let len = inst.partition.state_set(i).len();
            for r in 0..inst.partition.row_block(i).len() {
                row_source.push((offset + r % len, r / len));
            }
            offset += len;
        }
        let clean = &inst.h * &truth;
        let z = DMatrix::from_fn(p, trials, |r, t| {
            let (s, c) = row_source[r];
            clean[(r, t)] + sd * draws[t][(s, c)]
        });
        let eps = match fixed_eps {
            Some(e) => e,
            None => default_epsilon(&inst.h, &inst.b)?,
        };
        let x_hat = wls_incremental_snapshots(&inst.h, &inst.b, &z, inst.blocks(), eps)?;
        let errors: Vec<f64> = (0..trials)
            .map(|t| (x_hat.column(t) - truth.column(t)).norm())
            .collect();
        let (mean, std) = mean_std(&errors);
        csv.push_str(&format!("{k},{p},{},{}\n", real(mean), real(std)));
        means.push(mean);
    }
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);

    let mut art = RunArtifact::new(config);
    art.table("measurement_sweep.csv", csv);
    art.note("base_measurements", n);
    art.note("trials", trials);
    art.note("strictly_decreasing", decreasing);
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_spread() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
