//! Error of `x̂(ε)` against the WLS estimate as `ε` shrinks.

use gridest::incremental::{approximation_error_exact, wls_incremental, wls_oracle};
use gridest::linalg::spectral_norm;
use gridest::network::{generate_noise, NoiseMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{log_log_slope, random_angles, stream_seed, SyntheticInstance};
use crate::artifact::real;
use crate::config::{Config, ConfigError};
use crate::{Result, RunArtifact};

/// Checks that the grid has at least four points spanning three decades.
fn epsilon_grid(config: &Config) -> Result<Vec<f64>> {
    let grid: Vec<f64> = config.list("epsilon_grid")?;
    let bad = |reason: &str| ConfigError::Value {
        key: "epsilon_grid".into(),
        value: config.raw("epsilon_grid").into(),
        reason: reason.into(),
    };
    if grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(bad("entries must be positive").into());
    }
    let hi = grid.iter().cloned().fold(f64::MIN, f64::max);
    let lo = grid.iter().cloned().fold(f64::MAX, f64::min);
    if grid.len() < 4 || hi / lo < 1e3 * (1.0 - 1e-12) {
        return Err(bad("need at least 4 points spanning 3 decades").into());
    }
    Ok(grid)
}

/// Writes `epsilon,relative_error,predicted` where `predicted` is the norm of
/// the closed-form bias `ε H† B D z`, both relative to `‖x_wls‖`. The grid is
/// given in multiples of `epsilon_scale`, which defaults to
/// `s_max(H) / s_max(B)`.
pub fn run_epsilon_sweep(config: &Config) -> Result<RunArtifact> {
    let grid = epsilon_grid(config)?;
    let inst = SyntheticInstance::from_config(config, 1)?;
    let seed = config.seed()?;
    let scale = match config.auto_or_positive("epsilon_scale")? {
        Some(s) => s,
        None => spectral_norm(&inst.h)? / spectral_norm(&inst.b)?,
    };
    let x = random_angles(inst.state_dim(), stream_seed(seed, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let z = &inst.h * &x + generate_noise(&inst.b, NoiseMode::Gaussian, &mut rng);
    let x_wls = wls_oracle(&inst.h, &inst.sigma, &z)?.estimate;
    let norm = x_wls.norm();

    let mut csv = String::from("epsilon,relative_error,predicted\n");
    let mut points = Vec::with_capacity(grid.len());
    for &factor in &grid {
        let eps = factor * scale;
        let x_hat = wls_incremental(&inst.h, &inst.b, &z, inst.blocks(), eps)?;
        let err = (&x_hat - &x_wls).norm() / norm;
        let predicted = approximation_error_exact(&inst.h, &inst.b, &z, eps)?.norm() / norm;
        csv.push_str(&format!(
            "{},{},{}\n",
            real(eps),
            real(err),
            real(predicted)
        ));
        points.push((eps, err));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = points.windows(2).all(|w| w[0].1 <= w[1].1);

    let mut art = RunArtifact::new(config);
    art.table("epsilon_sweep.csv", csv);
    art.note("states", inst.state_dim());
    art.note("measurements", inst.h.nrows());
    art.note("epsilon_scale", real(scale));
    art.note("slope", real(log_log_slope(&points)));
    art.note("error_at_smallest_epsilon", real(points[0].1));
    art.note("monotone", monotone);
    Ok(art)
}
