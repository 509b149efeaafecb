//! One-shot estimate for a grid file and a measurement file.
//!
//! A measurement file holds lines `measurement <monitor> <bus> <value>
//! <sigma>`: monitor `<monitor>` observes the power injection at `<bus>`
//! with standard deviation `<sigma>`. Monitors are numbered from 0 without
//! gaps. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gridest::diffusive::{embedded_nodes, run_synchronous, SyncOptions};
use gridest::incremental::{approximation_error_exact, default_epsilon, wls_incremental};
use gridest::linalg::svd;
use gridest::network::{MonitorGraph, PowerGrid, COUPLING_THRESHOLD};
use gridest::{DenseMatrix, Error};
use nalgebra::{DMatrix, DVector};

use crate::artifact::real;
use crate::config::{Config, ConfigError};
use crate::{HarnessError, Result, RunArtifact};

/// One parsed measurement line.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub line: usize,
    pub monitor: usize,
    pub bus: usize,
    pub value: f64,
    pub sigma: f64,
}

pub fn parse_measurements(text: &str) -> gridest::Result<Vec<Measurement>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line, message };
        let fields: Vec<&str> = content.split_whitespace().collect();
        let ["measurement", monitor, bus, value, sigma] = fields.as_slice() else {
            return Err(err(format!(
                "expected `measurement <monitor> <bus> <value> <sigma>`, found `{content}`"
            )));
        };
        let monitor = monitor
            .parse()
            .map_err(|_| err(format!("invalid monitor `{monitor}`")))?;
        let bus = bus
            .parse()
            .map_err(|_| err(format!("invalid bus `{bus}`")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| err(format!("invalid value `{value}`")))?;
        let sigma: f64 = sigma
            .parse()
            .map_err(|_| err(format!("invalid sigma `{sigma}`")))?;
        if !value.is_finite() {
            return Err(err(format!("value must be finite, got {value}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(err(format!("sigma must be positive, got {sigma}")));
        }
        out.push(Measurement {
            line,
            monitor,
            bus,
            value,
            sigma,
        });
    }
    Ok(out)
}

fn resolve(base_dir: &Path, config: &Config, key: &str) -> Result<PathBuf> {
    let raw = config.raw(key);
    if raw.is_empty() {
        return Err(ConfigError::Value {
            key: key.into(),
            value: String::new(),
            reason: "a file path is required".into(),
        }
        .into());
    }
    Ok(base_dir.join(raw))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| HarnessError::Input {
        path: path.display().to_string(),
        source,
    })
}

fn parse_failure(path: &Path) -> impl FnOnce(Error) -> HarnessError + '_ {
    move |source| HarnessError::InputFormat {
        path: path.display().to_string(),
        source,
    }
}

/// The stacked model of a measurement list: rows ordered by monitor and
/// then by file order.
struct Model {
    h: DenseMatrix,
    b: DenseMatrix,
    z: DVector<f64>,
    blocks: Vec<std::ops::Range<usize>>,
}

fn build_model(grid: &PowerGrid, list: &[Measurement], path: &Path) -> Result<Model> {
    let fail = |e: Error| parse_failure(path)(e);
    let mut by_monitor: BTreeMap<usize, Vec<&Measurement>> = BTreeMap::new();
    for m in list {
        if m.bus >= grid.bus_count() {
            return Err(fail(Error::Parse {
                line: m.line,
                message: format!("bus {} is outside the {}-bus grid", m.bus, grid.bus_count()),
            }));
        }
        by_monitor.entry(m.monitor).or_default().push(m);
    }
    if by_monitor.is_empty() {
        return Err(fail(Error::Model("no measurements".into())));
    }
    if let Some((k, _)) = by_monitor.keys().enumerate().find(|(k, id)| k != *id) {
        return Err(fail(Error::Model(format!(
            "monitor {k} has no measurements"
        ))));
    }
    let l = grid.laplacian();
    let n = grid.bus_count() - 1;
    let ordered: Vec<&Measurement> = by_monitor.values().flatten().copied().collect();
    let p = ordered.len();
    let h = DMatrix::from_fn(p, n, |r, c| l[(ordered[r].bus, c + 1)]);
    let b = DMatrix::from_diagonal(&DVector::from_fn(p, |r, _| ordered[r].sigma));
    let z = DVector::from_fn(p, |r, _| ordered[r].value);
    let mut blocks = Vec::new();
    let mut start = 0;
    for rows in by_monitor.values() {
        blocks.push(start..start + rows.len());
        start += rows.len();
    }
    Ok(Model { h, b, z, blocks })
}

/// Monitors are neighbors when their measurement rows touch a common state.
fn overlap_graph(
    h: &DenseMatrix,
    blocks: &[std::ops::Range<usize>],
) -> gridest::Result<MonitorGraph> {
    let touches = |r: &std::ops::Range<usize>, c: usize| {
        r.clone().any(|row| h[(row, c)].abs() > COUPLING_THRESHOLD)
    };
    let mut edges = Vec::new();
    for i in 0..blocks.len() {
        for j in i + 1..blocks.len() {
            if (0..h.ncols()).any(|c| touches(&blocks[i], c) && touches(&blocks[j], c)) {
                edges.push((i, j));
            }
        }
    }
    MonitorGraph::new(blocks.len(), &edges)
}

/// Writes `estimate.csv` (`bus,angle`, the reference bus at 0) and
/// `residuals.csv` (`monitor,residual`, the largest absolute residual of the
/// monitor's own measurements).
pub fn run_solve(config: &Config, base_dir: &Path) -> Result<RunArtifact> {
    let grid_path = resolve(base_dir, config, "grid_file")?;
    let meas_path = resolve(base_dir, config, "measurement_file")?;
    let diffusive = config.choice("estimator", &["incremental", "diffusive"])? == "diffusive";
    let fixed_eps = config.auto_or_positive("epsilon")?;
    let grid = PowerGrid::from_text(&read(&grid_path)?).map_err(parse_failure(&grid_path))?;
    let list = parse_measurements(&read(&meas_path)?).map_err(parse_failure(&meas_path))?;
    let model = build_model(&grid, &list, &meas_path)?;

    let epsilon = match fixed_eps {
        Some(e) => e,
        None => default_epsilon(&model.h, &model.b)?,
    };
    let x_hat = if diffusive {
        let graph = overlap_graph(&model.h, &model.blocks)?;
        let z = DMatrix::from_column_slice(model.z.len(), 1, model.z.as_slice());
        let mut nodes = embedded_nodes(&model.h, &model.b, &z, &model.blocks, epsilon)?;
        run_synchronous(&mut nodes, &graph, &SyncOptions::default())?;
        nodes[0].state_estimate().column(0).into_owned()
    } else {
        wls_incremental(&model.h, &model.b, &model.z, &model.blocks, epsilon)?
    };
    let bias = approximation_error_exact(&model.h, &model.b, &model.z, epsilon)?.norm();
    let rank = svd(&model.h)?.rank;

    let mut estimate = String::from("bus,angle\n");
    estimate.push_str(&format!("0,{}\n", real(0.0)));
    for (k, v) in x_hat.iter().enumerate() {
        let _ = writeln!(estimate, "{},{}", k + 1, real(*v));
    }
    let mut residuals = String::from("monitor,residual\n");
    for (i, r) in model.blocks.iter().enumerate() {
        let res = model.z.rows_range(r.clone()) - model.h.rows_range(r.clone()) * &x_hat;
        let _ = writeln!(residuals, "{i},{}", real(res.amax()));
    }

    let mut art = RunArtifact::new(config);
    art.note("epsilon", real(epsilon));
    art.note("bias_norm", real(bias));
    art.note("measurements", model.h.nrows());
    art.note("monitors", model.blocks.len());
    art.note("rank", rank);
    art.report = format!("{}{estimate}{residuals}", art.summary_text());
    art.table("estimate.csv", estimate);
    art.table("residuals.csv", residuals);
    Ok(art)
}
