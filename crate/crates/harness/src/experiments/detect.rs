//! Residual-based detection on a clean stream and on a stream with one
//! corrupted measurement per snapshot.

use gridest::detection::{
    residual_operator, threshold_gamma, write_detection_csv, DetectionNetwork, DetectionReport,
    Estimator,
};
use gridest::incremental::default_epsilon;
use gridest::linalg::{induced_norm, MatrixNorm};
use gridest::network::{
    generate_snapshots, inject_false_data, inject_fixed, nominal_injection, NoiseMode,
};
use nalgebra::DVector;

use super::{random_angles, stream_seed, SyntheticInstance};
use crate::artifact::real;
use crate::config::{Config, ConfigError};
use crate::{Result, RunArtifact};

fn csv(reports: &[DetectionReport]) -> String {
    let mut out = Vec::new();
    write_detection_csv(&mut out, reports).expect("writing to memory");
    String::from_utf8(out).expect("ascii output")
}

fn bad(config: &Config, key: &str, reason: String) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: config.raw(key).into(),
        reason,
    }
}

/// Writes `clean.csv` and, unless `attack_monitor = none`, `attacked.csv`,
/// both as `t,monitor,residual,gamma,alarm`.
///
/// `w_max` is `w_max_factor` times either the mean absolute injection of the
/// noise-free measurements (`w_max_basis = nominal`) or `σ ‖I − H W‖_∞`
/// (`w_max_basis = residual`). Each corrupted snapshot adds a uniform draw
/// from `[0, w_max]` to one measurement (`attack_draw = uniform`), or
/// exactly `w_max` (`attack_draw = fixed`).
pub fn run_detection_experiment(config: &Config) -> Result<RunArtifact> {
    let copies = config.count("copies")?;
    let sd = config.positive("sigma")?;
    let snapshots = config.count("snapshots")?;
    let noise = match config.choice("noise", &["truncated", "gaussian"])? {
        "truncated" => NoiseMode::Truncated,
        _ => NoiseMode::Gaussian,
    };
    let estimator = match config.choice("estimator", &["diffusive", "incremental"])? {
        "diffusive" => Estimator::Diffusive,
        _ => Estimator::Incremental,
    };
    let gamma_override = config.auto_or_nonnegative("gamma")?;
    let basis = config.choice("w_max_basis", &["nominal", "residual"])?;
    let factor = config.positive("w_max_factor")?;
    let fixed = config.choice("attack_draw", &["uniform", "fixed"])? == "fixed";
    let attack_row: usize = config.get("attack_row")?;
    let attack_monitor: Option<usize> = match config.raw("attack_monitor") {
        "none" => None,
        _ => Some(config.get("attack_monitor")?),
    };
    let seed = config.seed()?;

    let inst = SyntheticInstance::from_config(config, copies)?;
    let blocks = inst.blocks().to_vec();
    if let Some(m) = attack_monitor {
        if m >= blocks.len() {
            return Err(bad(
                config,
                "attack_monitor",
                format!("only {} monitors", blocks.len()),
            )
            .into());
        }
        if attack_row >= blocks[m].len() {
            return Err(bad(
                config,
                "attack_row",
                format!("monitor {m} has {} measurements", blocks[m].len()),
            )
            .into());
        }
    }
    let epsilon = match config.auto_or_positive("epsilon")? {
        Some(e) => e,
        None => default_epsilon(&inst.h, &inst.b)?,
    };
    let gamma = match gamma_override {
        Some(g) => g,
        None => threshold_gamma(&inst.h, &inst.sigma, sd)?,
    };
    let x = random_angles(inst.state_dim(), stream_seed(seed, 0));
    let z = generate_snapshots(&inst.h, &x, &inst.b, snapshots, noise, stream_seed(seed, 1))?;
    let net = DetectionNetwork::new(
        inst.h.clone(),
        inst.b.clone(),
        blocks.clone(),
        inst.graph.clone(),
        epsilon,
        gamma,
    )?
    .with_estimator(estimator);

    let clean = net.detect_stream(&z, 0)?;
    let false_alarms = clean.iter().filter(|r| r.alarm_raised).count();
    let mut art = RunArtifact::new(config);
    art.table("clean.csv", csv(&clean));
    art.note("epsilon", real(epsilon));
    art.note("gamma", real(gamma));
    art.note("clean_snapshots_with_alarm", false_alarms);
    art.alarm = false_alarms > 0;

    if let Some(monitor) = attack_monitor {
        let w_max = factor
            * match basis {
                "nominal" => nominal_injection(&(&inst.h * &x)),
                _ => {
                    sd * induced_norm(
                        &residual_operator(&inst.h, &inst.sigma)?,
                        MatrixNorm::Infinity,
                    )?
                }
            };
        let mut corrupted = z.clone();
        for t in 0..snapshots {
            let col: DVector<f64> = z.column(t).into_owned();
            let block = &blocks[monitor];
            let bad_col = if fixed {
                inject_fixed(&col, block, attack_row, w_max)?
            } else {
                inject_false_data(
                    &col,
                    block,
                    attack_row,
                    w_max,
                    stream_seed(seed, 2 + t as u64),
                )?
                .0
            };
            corrupted.set_column(t, &bad_col);
        }
        let attacked = net.detect_stream(&corrupted, 0)?;
        let detected = attacked.iter().filter(|r| r.alarm_raised).count();
        let localized = attacked
            .iter()
            .filter(|r| r.alarms.contains(&monitor))
            .count();
        let others = attacked
            .iter()
            .filter(|r| r.alarms.iter().any(|&i| i != monitor))
            .count();
        art.table("attacked.csv", csv(&attacked));
        art.note("w_max", real(w_max));
        art.note("attacked_snapshots_with_alarm", detected);
        art.note("attacked_monitor_alarms", localized);
        art.note("snapshots_with_other_alarms", others);
        art.note("detection_rate", real(detected as f64 / snapshots as f64));
        art.alarm |= detected > 0;
    }
    art.note("alarm", art.alarm);
    Ok(art)
}
