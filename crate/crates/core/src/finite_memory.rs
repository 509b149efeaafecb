//! Truncated diffusion and the locality of the pseudoinverse.
//!
//! After `h` rounds a monitor has only heard from monitors within distance
//! `h`, yet its estimate of its own states is already close to the final
//! one. The error decays geometrically in `h`. Behind this sits the decay of
//! the entries of `H†` away from the block diagonal.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::diffusive::{run_rounds, MonitorNode, SyncOptions};
use crate::error::{Error, Result};
use crate::linalg::{pseudoinverse, svd, DenseMatrix};
use crate::network::{bfs_distances, MonitorGraph, RegionPartition, COUPLING_THRESHOLD};

/// Per-monitor state and row blocks of `H` with the block graph they induce.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    partition: RegionPartition,
    adjacency: Vec<Vec<usize>>,
    distances: Vec<Vec<Option<usize>>>,
}

impl BlockLayout {
    /// The state sets must split `0..n` and the row blocks `0..p`.
    pub fn new(h: &DenseMatrix, partition: RegionPartition) -> Result<Self> {
        let (p, n) = h.shape();
        if partition.row_count() != p {
            return Err(Error::DimensionMismatch(format!(
                "row blocks cover {} of {p} rows",
                partition.row_count()
            )));
        }
        let mut owner = vec![None; n];
        for (i, set) in partition.state_sets().iter().enumerate() {
            for &s in set {
                match owner.get(s) {
                    Some(None) => owner[s] = Some(i),
                    Some(Some(other)) => {
                        return Err(Error::ContractViolation(format!(
                            "state {s} belongs to monitors {other} and {i}"
                        )))
                    }
                    None => {
                        return Err(Error::DimensionMismatch(format!(
                            "state {s} outside 0..{n}"
                        )))
                    }
                }
            }
        }
        if let Some(s) = owner.iter().position(Option::is_none) {
            return Err(Error::ContractViolation(format!(
                "state {s} has no monitor"
            )));
        }
        let adjacency = partition.block_adjacency(h);
        let distances = (0..adjacency.len())
            .map(|i| bfs_distances(&adjacency, i))
            .collect();
        Ok(Self {
            partition,
            adjacency,
            distances,
        })
    }

    pub fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    pub fn monitor_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    /// Graph distance between two monitors; `None` if unreachable.
    pub fn distance(&self, i: usize, j: usize) -> Option<usize> {
        self.distances[i][j]
    }
}

/// Each monitor's estimate of its own states, one column per snapshot.
pub fn own_blocks(nodes: &[MonitorNode], partition: &RegionPartition) -> Vec<DenseMatrix> {
    nodes
        .iter()
        .enumerate()
        .map(|(i, node)| restrict(node.estimate(), partition.state_set(i)))
        .collect()
}

fn restrict(x: &DenseMatrix, states: &[usize]) -> DenseMatrix {
    DMatrix::from_fn(states.len(), x.ncols(), |r, c| x[(states[r], c)])
}

/// Runs exactly `h` synchronous rounds on copies of `nodes` and returns each
/// monitor's estimate of its own states.
pub fn run_truncated(
    nodes: &[MonitorNode],
    graph: &MonitorGraph,
    partition: &RegionPartition,
    h: usize,
) -> Result<Vec<DenseMatrix>> {
    let mut nodes = nodes.to_vec();
    run_rounds(&mut nodes, graph, h, &SyncOptions::default())?;
    Ok(own_blocks(&nodes, partition))
}

/// Own-block estimates and kernel dimensions after each round.
#[derive(Clone, Debug)]
pub struct TruncatedHistory {
    /// `blocks[h][i]`: monitor `i`'s own block after `h` rounds.
    pub blocks: Vec<Vec<DenseMatrix>>,
    /// `kernel_dims[h][i]`.
    pub kernel_dims: Vec<Vec<usize>>,
}

impl TruncatedHistory {
    /// First round after which monitor `i` had nothing left to learn.
    pub fn termination_round(&self, i: usize, terminal_dim: usize) -> Option<usize> {
        self.kernel_dims
            .iter()
            .position(|dims| dims[i] <= terminal_dim)
    }
}

/// `run_truncated` for every `h` in `0..=max_h`, sharing the rounds.
pub fn truncated_history(
    nodes: &[MonitorNode],
    graph: &MonitorGraph,
    partition: &RegionPartition,
    max_h: usize,
) -> Result<TruncatedHistory> {
    let mut nodes = nodes.to_vec();
    let dims = |nodes: &[MonitorNode]| nodes.iter().map(MonitorNode::kernel_dim).collect();
    let mut history = TruncatedHistory {
        blocks: vec![own_blocks(&nodes, partition)],
        kernel_dims: vec![dims(&nodes)],
    };
    for _ in 0..max_h {
        run_rounds(&mut nodes, graph, 1, &SyncOptions::default())?;
        history.blocks.push(own_blocks(&nodes, partition));
        history.kernel_dims.push(dims(&nodes));
    }
    Ok(history)
}

/// Euclidean (Frobenius over snapshots) distance between monitor `i`'s block
/// of `full` and its partial estimate.
pub fn local_error(
    i: usize,
    partition: &RegionPartition,
    full: &DenseMatrix,
    partial: &DenseMatrix,
) -> f64 {
    (restrict(full, partition.state_set(i)) - partial).norm()
}

/// `e ≈ C q^{h/2+1}` fitted by least squares on `log e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub c: f64,
    pub q: f64,
    /// Root-mean-square residual of the fit in decades (base-10 log units).
    pub residual_of_fit: f64,
    /// Smallest `C` for which `C q^{h/2+1}` bounds every fitted point.
    pub envelope_c: f64,
}

impl DecayFit {
    pub fn model(&self, h: f64) -> f64 {
        self.c * self.q.powf(h / 2.0 + 1.0)
    }

    pub fn envelope(&self, h: f64) -> f64 {
        self.envelope_c * self.q.powf(h / 2.0 + 1.0)
    }

    pub fn is_decaying(&self) -> bool {
        self.q > 0.0 && self.q < 1.0
    }
}

/// Fits `e_h = C q^{h/2+1}` on the points with `e_h > 0`.
pub fn decay_fit(points: &[(f64, f64)]) -> Result<DecayFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(h, e)| h.is_finite() && e.is_finite() && *e > 0.0)
        .map(|&(h, e)| (h / 2.0 + 1.0, e.ln()))
        .collect();
    if used.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs 3 positive errors, got {}",
            used.len()
        )));
    }
    let k = used.len() as f64;
    let mean_t = used.iter().map(|p| p.0).sum::<f64>() / k;
    let mean_y = used.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = used.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData(
            "decay fit needs distinct h values".into(),
        ));
    }
    let sxy: f64 = used.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let log_q = sxy / sxx;
    let log_c = mean_y - log_q * mean_t;
    let residual_of_fit = (used
        .iter()
        .map(|p| (p.1 - log_c - log_q * p.0).powi(2))
        .sum::<f64>()
        / k)
        .sqrt()
        / std::f64::consts::LN_10;
    let envelope_log_c = used
        .iter()
        .map(|p| p.1 - log_q * p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DecayFit {
        c: log_c.exp(),
        q: log_q.exp(),
        residual_of_fit,
        envelope_c: envelope_log_c.exp(),
    })
}

/// Boolean nonzero pattern of a matrix.
pub type Pattern = DMatrix<bool>;

fn pattern(m: &DenseMatrix) -> Pattern {
    m.map(|x| x.abs() > COUPLING_THRESHOLD)
}

fn boolean_product(a: &Pattern, b: &Pattern) -> Pattern {
    DMatrix::from_fn(a.nrows(), b.ncols(), |i, j| {
        (0..a.ncols()).any(|k| a[(i, k)] && b[(k, j)])
    })
}

/// The support set `S_h(M)`, the union of the patterns of `M^0, …, M^h`,
/// and the decay set `D_h(M)`, its complement.
pub fn support_decay_sets(m: &DenseMatrix, h: usize) -> Result<(Pattern, Pattern)> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "support sets need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    let step = pattern(m);
    let mut power = Pattern::from_fn(n, n, |i, j| i == j);
    let mut support = power.clone();
    for _ in 0..h {
        power = boolean_product(&power, &step);
        support.zip_apply(&power, |s, p| *s |= p);
    }
    let decay = support.map(|s| !s);
    Ok((support, decay))
}

/// Monitor pairs whose row blocks meet in the support set `S_k(H Hᵀ)`
/// although they are more than `2k` apart. Empty on every input: each factor
/// of `H Hᵀ` moves at most two steps in the block graph.
pub fn zero_structure_violations(
    h: &DenseMatrix,
    layout: &BlockLayout,
    k: usize,
) -> Result<Vec<(usize, usize)>> {
    let (support, _) = support_decay_sets(&(h * h.transpose()), k)?;
    let part = layout.partition();
    let m = layout.monitor_count();
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if layout.distance(i, j).is_some_and(|d| d <= 2 * k) {
                continue;
            }
            let hit = part
                .row_block(i)
                .any(|r| part.row_block(j).any(|c| support[(r, c)]));
            if hit {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// Largest entry of one block of `H†`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDecay {
    pub i: usize,
    pub j: usize,
    pub distance: Option<usize>,
    pub max_abs_entry: f64,
}

#[derive(Clone, Debug)]
pub struct PinvDecayTable {
    pub blocks: Vec<BlockDecay>,
    /// Fit of the largest entry at each finite distance `d` against `d`.
    pub fit: Option<DecayFit>,
}

impl PinvDecayTable {
    /// `(d, max entry over block pairs at distance d)` for finite distances.
    pub fn envelope_points(&self) -> Vec<(usize, f64)> {
        let max_d = self
            .blocks
            .iter()
            .filter_map(|b| b.distance)
            .max()
            .unwrap_or(0);
        let mut best = vec![None::<f64>; max_d + 1];
        for b in &self.blocks {
            if let Some(d) = b.distance {
                let e = best[d].get_or_insert(0.0);
                *e = e.max(b.max_abs_entry);
            }
        }
        best.into_iter()
            .enumerate()
            .filter_map(|(d, e)| e.map(|e| (d, e)))
            .collect()
    }
}

/// Tabulates the blocks of `H†` (rows: a monitor's states, columns: a
/// monitor's measurements) against the distance between the two monitors.
pub fn verify_pinv_decay(h: &DenseMatrix, layout: &BlockLayout) -> Result<PinvDecayTable> {
    let rank = svd(h)?.rank;
    if rank < h.nrows().min(h.ncols()) {
        return Err(Error::ContractViolation(format!(
            "H is rank deficient ({rank} < {})",
            h.nrows().min(h.ncols())
        )));
    }
    let pinv = pseudoinverse(h)?;
    let part = layout.partition();
    let m = layout.monitor_count();
    let mut blocks = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let states = part.state_set(i);
            let max_abs_entry = part
                .row_block(j)
                .flat_map(|c| states.iter().map(move |&r| (r, c)))
                .map(|(r, c)| pinv[(r, c)].abs())
                .fold(0.0, f64::max);
            blocks.push(BlockDecay {
                i,
                j,
                distance: layout.distance(i, j),
                max_abs_entry,
            });
        }
    }
    let mut table = PinvDecayTable { blocks, fit: None };
    let points: Vec<(f64, f64)> = table
        .envelope_points()
        .into_iter()
        .map(|(d, e)| (d as f64, e))
        .collect();
    table.fit = decay_fit(&points).ok();
    Ok(table)
}

/// Writes `monitor,h,error` rows from `errors[h][i]`.
pub fn write_error_csv<W: Write>(mut out: W, errors: &[Vec<f64>]) -> io::Result<()> {
    writeln!(out, "monitor,h,error")?;
    if let Some(first) = errors.first() {
        for i in 0..first.len() {
            for (h, row) in errors.iter().enumerate() {
                writeln!(out, "{i},{h},{:.16e}", row[i])?;
            }
        }
    }
    Ok(())
}

/// Writes `blockpair_i,blockpair_j,distance,max_abs_entry` rows; unreachable
/// pairs have distance `inf`.
pub fn write_pinv_decay_csv<W: Write>(mut out: W, table: &PinvDecayTable) -> io::Result<()> {
    writeln!(out, "blockpair_i,blockpair_j,distance,max_abs_entry")?;
    for b in &table.blocks {
        let d = b
            .distance
            .map_or_else(|| "inf".to_string(), |d| d.to_string());
        writeln!(out, "{},{},{d},{:.16e}", b.i, b.j, b.max_abs_entry)?;
    }
    Ok(())
}

/// Local errors `[h][i]` of a truncated history against converged estimates.
pub fn error_table(
    history: &[Vec<DenseMatrix>],
    partition: &RegionPartition,
    full: &DenseMatrix,
) -> Vec<Vec<f64>> {
    history
        .iter()
        .map(|blocks| {
            blocks
                .iter()
                .enumerate()
                .map(|(i, b)| local_error(i, partition, full, b))
                .collect()
        })
        .collect()
}

/// Column vector helper for single-snapshot runs.
pub fn column(x: &DVector<f64>) -> DenseMatrix {
    DMatrix::from_column_slice(x.len(), 1, x.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusive::{plain_nodes, run_synchronous};
    use crate::network::{dc_measurement_matrix, lattice_grid, monitor_graph_from_blocks};
    use nalgebra::dmatrix;

    fn path_instance(monitors: usize, per: usize) -> (DenseMatrix, RegionPartition, MonitorGraph) {
        let n = monitors * per;
        let h = DMatrix::from_fn(n, n, |r, c| match r.abs_diff(c) {
            0 => 4.0,
            1 => -1.0,
            _ => 0.0,
        });
        let sets = (0..monitors)
            .map(|i| (i * per..(i + 1) * per).collect())
            .collect();
        let rows = (0..monitors).map(|i| i * per..(i + 1) * per).collect();
        let part = RegionPartition::new(sets, rows).unwrap();
        let g = monitor_graph_from_blocks(&h, &part).unwrap();
        (h, part, g)
    }

    #[test]
    fn exact_model_is_recovered() {
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|h| (h as f64, 2.0 * 0.5f64.powf(h as f64 / 2.0 + 1.0)))
            .collect();
        let fit = decay_fit(&pts).unwrap();
        assert!((fit.c - 2.0).abs() < 1e-10);
        assert!((fit.q - 0.5).abs() < 1e-10);
        assert!(fit.residual_of_fit < 1e-12);
        assert!((fit.envelope_c - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_errors_cannot_be_fitted() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 1e-3)];
        assert!(matches!(decay_fit(&pts), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn envelope_dominates_points() {
        let pts = [(0.0, 1.0), (1.0, 0.9), (2.0, 0.2), (3.0, 0.15), (4.0, 0.01)];
        let fit = decay_fit(&pts).unwrap();
        assert!(fit.is_decaying());
        for (h, e) in pts {
            assert!(fit.envelope(h) >= e * (1.0 - 1e-12));
        }
    }

    #[test]
    fn support_sets_of_small_powers() {
        let m = DMatrix::from_fn(6, 6, |r, c| if r.abs_diff(c) <= 1 { 1.0 } else { 0.0 });
        let (s0, d0) = support_decay_sets(&m, 0).unwrap();
        assert_eq!(s0, Pattern::from_fn(6, 6, |i, j| i == j));
        assert_eq!(d0, s0.map(|s| !s));
        let (s1, _) = support_decay_sets(&m, 1).unwrap();
        assert_eq!(s1, Pattern::from_fn(6, 6, |i, j| i.abs_diff(j) <= 1));
    }

    #[test]
    fn path_laplacian_bands_grow_by_one() {
        let n = 9;
        let l = DMatrix::from_fn(n, n, |r, c| match r.abs_diff(c) {
            0 => 2.0,
            1 => -1.0,
            _ => 0.0,
        });
        for k in 0..5 {
            let (s, _) = support_decay_sets(&l, k).unwrap();
            assert_eq!(
                s,
                Pattern::from_fn(n, n, |i, j| i.abs_diff(j) <= k),
                "k = {k}"
            );
        }
        assert!(support_decay_sets(&DMatrix::zeros(2, 3), 1).is_err());
    }

    #[test]
    fn zero_structure_on_path_and_lattice() {
        let (h, part, _) = path_instance(6, 2);
        let layout = BlockLayout::new(&h, part).unwrap();
        for k in 0..4 {
            assert!(zero_structure_violations(&h, &layout, k)
                .unwrap()
                .is_empty());
        }
        let (grid, part, _) = lattice_grid(3, 3).unwrap();
        let h = dc_measurement_matrix(&grid).unwrap();
        let layout = BlockLayout::new(&h, part).unwrap();
        for k in 0..3 {
            assert!(zero_structure_violations(&h, &layout, k)
                .unwrap()
                .is_empty());
        }
    }

    #[test]
    fn truncation_at_zero_is_local_init() {
        let (h, part, g) = path_instance(3, 2);
        let z = column(&DVector::from_fn(6, |i, _| i as f64 + 1.0));
        let nodes = plain_nodes(&h, &z, part.row_blocks()).unwrap();
        let own = run_truncated(&nodes, &g, &part, 0).unwrap();
        for (i, b) in own.iter().enumerate() {
            assert_eq!(b, &restrict(nodes[i].estimate(), part.state_set(i)));
        }
    }

    #[test]
    fn truncation_at_diameter_is_exact() {
        let (h, part, g) = path_instance(5, 3);
        let z = column(&DVector::from_fn(15, |i, _| (i as f64).cos()));
        let full = h.clone().lu().solve(&z).unwrap();
        let nodes = plain_nodes(&h, &z, part.row_blocks()).unwrap();
        let history = truncated_history(&nodes, &g, &part, g.diameter()).unwrap();
        let errors = error_table(&history.blocks, &part, &full);
        for i in 0..5 {
            assert_eq!(history.termination_round(i, 0), Some(g.eccentricity(i)));
        }
        for e in &errors[g.diameter()] {
            assert!(*e < 1e-10);
        }
        for e in errors[0].iter().take(5) {
            assert!(*e > 1e-6);
        }
    }

    #[test]
    fn one_round_on_a_path_of_three() {
        let (h, part, g) = path_instance(3, 2);
        let z = column(&DVector::from_fn(6, |i, _| 1.0 + i as f64));
        let nodes = plain_nodes(&h, &z, part.row_blocks()).unwrap();
        let own = run_truncated(&nodes, &g, &part, 1).unwrap();
        let mut full_nodes = nodes.clone();
        run_synchronous(&mut full_nodes, &g, &SyncOptions::default()).unwrap();
        // The middle monitor has heard from everyone after one round.
        assert!((restrict(full_nodes[1].estimate(), part.state_set(1)) - &own[1]).amax() < 1e-12);
        assert!((restrict(full_nodes[0].estimate(), part.state_set(0)) - &own[0]).amax() > 1e-6);
    }

    #[test]
    fn local_information_gives_local_exactness() {
        // Monitors 0 and 1 form a closed subsystem; the others hang off it
        // through one-sided couplings.
        let mut h = DMatrix::<f64>::identity(8, 8) * 3.0;
        h[(0, 2)] = 1.0;
        h[(3, 1)] = -1.0;
        for k in 4..8 {
            h[(k, k - 2)] = 1.0;
        }
        let sets = (0..4).map(|i| vec![2 * i, 2 * i + 1]).collect();
        let part = RegionPartition::new(sets, (0..4).map(|i| 2 * i..2 * i + 2).collect()).unwrap();
        let g = monitor_graph_from_blocks(&h, &part).unwrap();
        assert_eq!(g.eccentricity(0), 3);
        let z = column(&DVector::from_fn(8, |i, _| i as f64 - 2.5));
        let full = h.clone().lu().solve(&z).unwrap();
        let nodes = plain_nodes(&h, &z, part.row_blocks()).unwrap();
        let own = run_truncated(&nodes, &g, &part, 1).unwrap();
        assert!(local_error(0, &part, &full, &own[0]) <= 1e-8);
        assert!(local_error(3, &part, &full, &own[3]) > 1e-6);
    }

    #[test]
    fn pinv_of_block_diagonal_is_block_diagonal() {
        let h = dmatrix![2.0, 1.0, 0.0, 0.0; 1.0, 3.0, 0.0, 0.0; 0.0, 0.0, 1.0, 0.5; 0.0, 0.0, 0.0, 2.0];
        let part = RegionPartition::new(vec![vec![0, 1], vec![2, 3]], vec![0..2, 2..4]).unwrap();
        let layout = BlockLayout::new(&h, part).unwrap();
        let table = verify_pinv_decay(&h, &layout).unwrap();
        for b in &table.blocks {
            if b.i == b.j {
                assert_eq!(b.distance, Some(0));
            } else {
                assert_eq!(b.distance, None);
                assert_eq!(b.max_abs_entry, 0.0);
            }
        }
        let mut out = Vec::new();
        write_pinv_decay_csv(&mut out, &table).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .contains("0,1,inf,0.0000000000000000e0"));
    }

    #[test]
    fn banded_pinv_decays_with_distance() {
        let (h, part, _) = path_instance(8, 2);
        let layout = BlockLayout::new(&h, part).unwrap();
        let table = verify_pinv_decay(&h, &layout).unwrap();
        let env = table.envelope_points();
        assert_eq!(env.len(), 8);
        assert!(env.windows(2).all(|w| w[1].1 < w[0].1));
        let fit = table.fit.unwrap();
        assert!(fit.is_decaying());
        for (d, e) in env {
            assert!(fit.envelope(d as f64) >= e * (1.0 - 1e-12));
        }
    }

    #[test]
    fn rank_deficient_h_is_rejected() {
        let h = dmatrix![1.0, 1.0; 1.0, 1.0];
        let part = RegionPartition::new(vec![vec![0], vec![1]], vec![0..1, 1..2]).unwrap();
        let layout = BlockLayout::new(&h, part).unwrap();
        assert!(matches!(
            verify_pinv_decay(&h, &layout),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn layout_requires_a_state_split() {
        let h = DMatrix::<f64>::identity(2, 2);
        let overlap = RegionPartition::new(vec![vec![0], vec![0]], vec![0..1, 1..2]).unwrap();
        assert!(BlockLayout::new(&h, overlap).is_err());
        let missing = RegionPartition::new(vec![vec![0], vec![]], vec![0..1, 1..2]).unwrap();
        assert!(BlockLayout::new(&h, missing).is_err());
    }

    #[test]
    fn error_csv_layout() {
        let mut out = Vec::new();
        write_error_csv(&mut out, &[vec![1.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "0,1,5.0000000000000000e-1");
    }
}
