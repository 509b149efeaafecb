//! Local error of truncated diffusive runs on the square lattice.

use gridest::diffusive::plain_nodes;
use gridest::finite_memory::{
    column, decay_fit, error_table, truncated_history, verify_pinv_decay, write_error_csv,
    write_pinv_decay_csv, BlockLayout, DecayFit,
};
use gridest::linalg::pseudoinverse;
use gridest::network::{injection_matrix, lattice_grid};

use super::{random_angles, stream_seed};
use crate::artifact::real;
use crate::config::{Config, ConfigError};
use crate::{Result, RunArtifact};

/// Fit of one monitor's error curve, over the rounds before it terminated.
#[derive(Clone, Debug)]
pub struct MonitorDecay {
    /// `errors[h]` for `h = 0..=diameter`.
    pub errors: Vec<f64>,
    pub termination_round: Option<usize>,
    pub fit: Option<DecayFit>,
}

fn utf8(out: Vec<u8>) -> String {
    String::from_utf8(out).expect("ascii output")
}

/// Noise-free measurements `z = H x` of a random state, solved by the
/// diffusive algorithm truncated at every `h` up to the graph diameter.
///
/// Writes `decay.csv` (`monitor,h,error` for every monitor), `fits.csv`
/// (`monitor,termination_round,c,q,residual_of_fit,envelope_c`) and
/// `pinv_decay.csv` (largest entry of each block of `H†` against the
/// distance between the blocks).
pub fn run_lattice_decay(config: &Config) -> Result<RunArtifact> {
    let a = config.count("lattice_a")?;
    let b = config.count("lattice_b")?;
    let tracked: Vec<usize> = config.list("monitors")?;
    if let Some(&m) = tracked.iter().find(|&&m| m >= b * b) {
        return Err(ConfigError::Value {
            key: "monitors".into(),
            value: config.raw("monitors").into(),
            reason: format!("monitor {m} does not exist on a {b}x{b} lattice"),
        }
        .into());
    }
    let (grid, partition, graph) = lattice_grid(a, b)?;
    let h = injection_matrix(&grid, &partition, 1)?;
    let x = random_angles(h.ncols(), stream_seed(config.seed()?, 0));
    let z = column(&(&h * &x));
    let full = pseudoinverse(&h)? * &z;
    let nodes = plain_nodes(&h, &z, partition.row_blocks())?;
    let diameter = graph.diameter();
    let history = truncated_history(&nodes, &graph, &partition, diameter)?;
    let errors = error_table(&history.blocks, &partition, &full);

    let mut decay = Vec::new();
    write_error_csv(&mut decay, &errors).expect("writing to memory");
    let mut fits = String::from("monitor,termination_round,c,q,residual_of_fit,envelope_c\n");
    let mut art = RunArtifact::new(config);
    for &m in &tracked {
        let curve = monitor_decay(
            m,
            &errors,
            history.termination_round(m, nodes[m].terminal_dim()),
        );
        let term = curve
            .termination_round
            .map_or_else(|| "none".into(), |r| r.to_string());
        match &curve.fit {
            Some(f) => fits.push_str(&format!(
                "{m},{term},{},{},{},{}\n",
                real(f.c),
                real(f.q),
                real(f.residual_of_fit),
                real(f.envelope_c)
            )),
            None => fits.push_str(&format!("{m},{term},nan,nan,nan,nan\n")),
        }
        art.note(
            &format!("error_at_diameter_{m}"),
            real(curve.errors[diameter]),
        );
    }

    let layout = BlockLayout::new(&h, partition)?;
    let table = verify_pinv_decay(&h, &layout)?;
    let mut pinv = Vec::new();
    write_pinv_decay_csv(&mut pinv, &table).expect("writing to memory");

    art.table("decay.csv", utf8(decay));
    art.table("fits.csv", fits);
    art.table("pinv_decay.csv", utf8(pinv));
    art.note("buses", grid.bus_count());
    art.note("monitors", graph.monitor_count());
    art.note("diameter", diameter);
    if let Some(f) = table.fit {
        art.note("pinv_decay_q", real(f.q));
    }
    Ok(art)
}

/// Error curve of monitor `m` and its fit on the rounds `h < termination`.
pub fn monitor_decay(
    m: usize,
    errors: &[Vec<f64>],
    termination_round: Option<usize>,
) -> MonitorDecay {
    let curve: Vec<f64> = errors.iter().map(|row| row[m]).collect();
    let end = termination_round.unwrap_or(curve.len());
    let points: Vec<(f64, f64)> = curve[..end]
        .iter()
        .enumerate()
        .map(|(h, &e)| (h as f64, e))
        .collect();
    MonitorDecay {
        errors: curve,
        termination_round,
        fit: decay_fit(&points).ok(),
    }
}
