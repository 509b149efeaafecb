//! Diffusive estimation over a monitor graph.
//!
//! Every monitor starts from the minimum-norm solution of its own equations
//! and the kernel of its block. Neighbors then repeatedly exchange `(x̂, K)`
//! and fuse: the receiver moves to the point closest to both estimates that
//! satisfies both sets of equations, and its kernel shrinks to the
//! intersection of the two. On a connected graph every monitor holds the
//! global minimum-norm solution after at most `diameter` synchronous rounds.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::incremental::{EpsilonEmbedding, EquationBlock, IncrementalState};
use crate::linalg::{factor_at, orthonormal_span, svd, DenseMatrix};
use crate::network::{check_blocks, MonitorGraph};
use crate::subspace::{BasisTransmission, Repr, Subspace};

/// Sine of the smallest principal angle treated as a genuine new constraint
/// when two kernels are intersected.
pub const FUSION_TOLERANCE: f64 = 1e-8;

/// One monitor: its equations, current estimate and kernel.
#[derive(Clone, Debug)]
pub struct MonitorNode {
    id: usize,
    block: EquationBlock,
    state_dim: usize,
    terminal_dim: usize,
    x: DenseMatrix,
    kernel: Subspace,
}

/// Immutable copy of a monitor's state as put on a link.
#[derive(Clone, Debug)]
pub struct EstimateMessage {
    pub sender: usize,
    pub x: DenseMatrix,
    pub kernel: Subspace,
    pub stamp: usize,
}

impl EstimateMessage {
    pub fn wire_words(&self, mode: BasisTransmission) -> usize {
        self.x.len() + self.kernel.wire_words(mode)
    }
}

impl MonitorNode {
    /// A node that has not run [`MonitorNode::local_init`] yet: `x̂ = 0` and
    /// `K` is the whole space. `terminal_dim` is the dimension of the kernel
    /// of the stacked global system, reached once the node knows everything.
    pub fn new(
        id: usize,
        block: EquationBlock,
        state_dim: usize,
        terminal_dim: usize,
    ) -> Result<Self> {
        let n = block.ambient_dim();
        if state_dim > n || terminal_dim > n {
            return Err(Error::DimensionMismatch(format!(
                "state dimension {state_dim} and terminal kernel {terminal_dim} in ambient {n}"
            )));
        }
        Ok(Self {
            id,
            x: DMatrix::zeros(n, block.snapshots()),
            kernel: Subspace::full(n),
            block,
            state_dim,
            terminal_dim,
        })
    }

    /// `x̂ := A† z` and `K := Ker(A)` for the node's own block `A`.
    pub fn local_init(&mut self) -> Result<()> {
        let mut state = IncrementalState::new(self.block.ambient_dim(), self.block.snapshots());
        state.absorb(&self.block.matrix, &self.block.rhs)?;
        state.kernel.compact()?;
        (self.x, self.kernel) = state.into_parts();
        Ok(())
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn block(&self) -> &EquationBlock {
        &self.block
    }

    pub fn ambient_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Full estimate in the ambient space, one column per snapshot.
    pub fn estimate(&self) -> &DenseMatrix {
        &self.x
    }

    /// The state coordinates of the estimate.
    pub fn state_estimate(&self) -> DenseMatrix {
        self.x.rows(0, self.state_dim).into_owned()
    }

    pub fn kernel(&self) -> &Subspace {
        &self.kernel
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn terminal_dim(&self) -> usize {
        self.terminal_dim
    }

    pub fn is_terminal(&self) -> bool {
        self.kernel.dim() <= self.terminal_dim
    }

    /// `max |z_i − A_i x̂|` over rows and snapshots.
    pub fn local_residual(&self) -> f64 {
        self.block.residual(&self.x).amax()
    }

    pub fn message(&self, stamp: usize) -> EstimateMessage {
        EstimateMessage {
            sender: self.id,
            x: self.x.clone(),
            kernel: self.kernel.clone(),
            stamp,
        }
    }

    /// Fuse a neighbor's state into this node.
    pub fn fuse(&mut self, msg: &EstimateMessage) -> Result<()> {
        if msg.x.shape() != self.x.shape() || msg.kernel.ambient_dim() != self.ambient_dim() {
            return Err(Error::ContractViolation(format!(
                "monitor {} cannot fuse a {}x{} estimate from monitor {} into a {}x{} one",
                self.id,
                msg.x.nrows(),
                msg.x.ncols(),
                msg.sender,
                self.x.nrows(),
                self.x.ncols()
            )));
        }
        if self.kernel.is_zero() {
            return Ok(());
        }
        let (x, kernel) = fuse_states(&self.x, &self.kernel, &msg.x, &msg.kernel)?;
        self.x = x;
        self.kernel = kernel;
        Ok(())
    }
}

/// The point of `{x_i + K_i a} ∩ {x_j + K_j b}` orthogonal to the
/// intersection of the kernels, together with that intersection.
fn fuse_states(
    xi: &DenseMatrix,
    ki: &Subspace,
    xj: &DenseMatrix,
    kj: &Subspace,
) -> Result<(DenseMatrix, Subspace)> {
    let n = xi.nrows();
    let d = xi - xj;
    let (x, mut kernel) = match (&ki.repr, &kj.repr) {
        (Repr::Complement(ri), Repr::Complement(rj)) => {
            let mid = (xi + xj) * 0.5;
            let a = ri.transpose() * &d * 0.5;
            let g = rj - ri * (ri.transpose() * rj);
            let f = factor_at(&g, FUSION_TOLERANCE, false)?;
            let q = &f.u - ri * (ri.transpose() * &f.u);
            let q = orthonormal_span(&q, 0.5)?;
            let base = &mid + ri * &a;
            let m = rj.transpose() * &q;
            let rhs = rj.transpose() * (xj - &base);
            let b = factor_at(&m, FUSION_TOLERANCE, false)?.solve(&rhs);
            let x = base + &q * b;
            let mut grown = DMatrix::zeros(n, ri.ncols() + q.ncols());
            grown.columns_mut(0, ri.ncols()).copy_from(ri);
            grown.columns_mut(ri.ncols(), q.ncols()).copy_from(&q);
            (x, Subspace::complement(grown))
        }
        (Repr::Explicit(k), Repr::Complement(r)) => {
            let a = r.transpose() * k;
            let f = factor_at(&a, FUSION_TOLERANCE, true)?;
            let w = f.solve(&(r.transpose() * &d * -1.0));
            let x = xi + k * w;
            (
                x,
                Subspace::explicit(k * f.kernel.as_ref().expect("kernel requested")),
            )
        }
        (Repr::Complement(r), Repr::Explicit(k)) => {
            let a = r.transpose() * k;
            let f = factor_at(&a, FUSION_TOLERANCE, true)?;
            let w = f.solve(&(r.transpose() * &d));
            let x = xj + k * w;
            (
                x,
                Subspace::explicit(k * f.kernel.as_ref().expect("kernel requested")),
            )
        }
        (Repr::Explicit(ki), Repr::Explicit(kj)) => {
            let (p, q) = (ki.ncols(), kj.ncols());
            let mut s = DMatrix::zeros(n, p + q);
            s.columns_mut(0, p).copy_from(&(ki * -1.0));
            s.columns_mut(p, q).copy_from(kj);
            let f = factor_at(&s, FUSION_TOLERANCE, true)?;
            let c = f.solve(&d);
            let x = xi + ki * c.rows(0, p);
            let w = f.kernel.as_ref().expect("kernel requested");
            let both = ki * w.rows(0, p) + kj * w.rows(p, q);
            (x, Subspace::explicit(orthonormal_span(&both, 0.5)?))
        }
    };
    kernel.compact()?;
    // Exactly zero in theory; removes the rounding left along the new kernel.
    let x = &x - kernel.project(&x);
    Ok((x, kernel))
}

/// Nodes for the embedded system `z = [H εB](x, v̄)`; each is initialized.
pub fn embedded_nodes(
    h: &DenseMatrix,
    b: &DenseMatrix,
    z: &DenseMatrix,
    row_blocks: &[Range<usize>],
    epsilon: f64,
) -> Result<Vec<MonitorNode>> {
    let emb = EpsilonEmbedding::new(h, b, row_blocks, epsilon)?;
    let rank = svd(b)?.rank;
    if rank < b.nrows() {
        return Err(Error::ContractViolation(format!(
            "noise factor has rank {rank} < {}",
            b.nrows()
        )));
    }
    let terminal = emb.ambient_dim() - b.nrows();
    emb.equation_blocks(row_blocks, z)?
        .into_iter()
        .enumerate()
        .map(|(i, blk)| init_node(i, blk, h.ncols(), terminal))
        .collect()
}

/// Nodes for the noise-free system `z = H x`.
pub fn plain_nodes(
    h: &DenseMatrix,
    z: &DenseMatrix,
    row_blocks: &[Range<usize>],
) -> Result<Vec<MonitorNode>> {
    check_blocks(row_blocks, h.nrows())?;
    if z.nrows() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurement rows for {} equations",
            z.nrows(),
            h.nrows()
        )));
    }
    let terminal = h.ncols() - svd(h)?.rank;
    row_blocks
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let blk = EquationBlock::with_snapshots(
                h.rows_range(r.clone()).into_owned(),
                z.rows_range(r.clone()).into_owned(),
            )?;
            init_node(i, blk, h.ncols(), terminal)
        })
        .collect()
}

fn init_node(
    id: usize,
    block: EquationBlock,
    state_dim: usize,
    terminal: usize,
) -> Result<MonitorNode> {
    let mut node = MonitorNode::new(id, block, state_dim, terminal)?;
    node.local_init()?;
    Ok(node)
}

/// Order in which a monitor processes its neighbors' messages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeighborOrder {
    #[default]
    Ascending,
    /// A fresh random order per monitor and round.
    Shuffled(u64),
}

/// Which neighbor states a monitor sees during a synchronous round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RoundSemantics {
    /// Every message carries the sender's state from the start of the round.
    #[default]
    Snapshot,
    /// Monitors update in id order and read the latest neighbor states.
    GaussSeidel,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SyncOptions {
    pub order: NeighborOrder,
    pub semantics: RoundSemantics,
    pub transmission: BasisTransmission,
    pub trace: bool,
}

/// Per-monitor status after a round or slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub round: usize,
    pub monitor: usize,
    pub kernel_dim: usize,
    pub residual: f64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round={} monitor={} dimK={} residual={:e}",
            self.round, self.monitor, self.kernel_dim, self.residual
        )
    }
}

/// Communication spent by a run.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    /// Synchronous rounds, or schedule slots for asynchronous runs.
    pub steps: usize,
    pub messages: usize,
    pub words: usize,
    pub trace: Vec<TraceEntry>,
}

impl RunReport {
    fn record(&mut self, round: usize, nodes: &[MonitorNode]) {
        self.trace.extend(nodes.iter().map(|n| TraceEntry {
            round,
            monitor: n.id,
            kernel_dim: n.kernel_dim(),
            residual: n.local_residual(),
        }));
    }
}

fn check_network(nodes: &[MonitorNode], graph: &MonitorGraph) -> Result<()> {
    if nodes.len() != graph.monitor_count() {
        return Err(Error::ContractViolation(format!(
            "{} nodes on a graph of {} monitors",
            nodes.len(),
            graph.monitor_count()
        )));
    }
    if let Some(first) = nodes.first() {
        if nodes.iter().any(|n| n.x.shape() != first.x.shape()) {
            return Err(Error::DimensionMismatch(
                "nodes disagree on ambient dimension or snapshot count".into(),
            ));
        }
    }
    Ok(())
}

/// Sends `from`'s message to `to` if the link is used, returning whether it was.
fn deliver(
    nodes: &mut [MonitorNode],
    msg: &EstimateMessage,
    sender_terminal: bool,
    to: usize,
    report: &mut RunReport,
    mode: BasisTransmission,
) -> Result<()> {
    if nodes[to].is_terminal() {
        // Terminal nodes keep answering, but only peers that still need it.
        if sender_terminal {
            return Ok(());
        }
        report.messages += 1;
        report.words += msg.wire_words(mode);
        return Ok(());
    }
    report.messages += 1;
    report.words += msg.wire_words(mode);
    nodes[to].fuse(msg)
}

fn neighbor_order(
    graph: &MonitorGraph,
    i: usize,
    order: NeighborOrder,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut ns = graph.neighbors(i).to_vec();
    ns.sort_unstable();
    if let NeighborOrder::Shuffled(_) = order {
        ns.shuffle(rng);
    }
    ns
}

fn seed_of(order: NeighborOrder) -> u64 {
    match order {
        NeighborOrder::Ascending => 0,
        NeighborOrder::Shuffled(seed) => seed,
    }
}

fn one_round(
    nodes: &mut [MonitorNode],
    graph: &MonitorGraph,
    round: usize,
    opts: &SyncOptions,
    rng: &mut ChaCha8Rng,
    report: &mut RunReport,
) -> Result<()> {
    let m = nodes.len();
    match opts.semantics {
        RoundSemantics::Snapshot => {
            let outbox: Vec<(EstimateMessage, bool)> = nodes
                .iter()
                .map(|n| (n.message(round), n.is_terminal()))
                .collect();
            let receiving: Vec<bool> = nodes.iter().map(|n| !n.is_terminal()).collect();
            for i in 0..m {
                for j in neighbor_order(graph, i, opts.order, rng) {
                    let (msg, sender_terminal) = &outbox[j];
                    if receiving[i] {
                        report.messages += 1;
                        report.words += msg.wire_words(opts.transmission);
                        nodes[i].fuse(msg)?;
                    } else if !sender_terminal {
                        report.messages += 1;
                        report.words += msg.wire_words(opts.transmission);
                    }
                }
            }
        }
        RoundSemantics::GaussSeidel => {
            for i in 0..m {
                for j in neighbor_order(graph, i, opts.order, rng) {
                    let msg = nodes[j].message(round);
                    let sender_terminal = nodes[j].is_terminal();
                    deliver(nodes, &msg, sender_terminal, i, report, opts.transmission)?;
                }
            }
        }
    }
    Ok(())
}

/// Runs exactly `rounds` synchronous rounds.
pub fn run_rounds(
    nodes: &mut [MonitorNode],
    graph: &MonitorGraph,
    rounds: usize,
    opts: &SyncOptions,
) -> Result<RunReport> {
    check_network(nodes, graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(opts.order));
    let mut report = RunReport::default();
    if opts.trace {
        report.record(0, nodes);
    }
    for round in 1..=rounds {
        one_round(nodes, graph, round, opts, &mut rng, &mut report)?;
        report.steps = round;
        if opts.trace {
            report.record(round, nodes);
        }
    }
    Ok(report)
}

/// Runs synchronous rounds until every kernel has reached its terminal
/// dimension.
pub fn run_synchronous(
    nodes: &mut [MonitorNode],
    graph: &MonitorGraph,
    opts: &SyncOptions,
) -> Result<RunReport> {
    check_network(nodes, graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(opts.order));
    let mut report = RunReport::default();
    if opts.trace {
        report.record(0, nodes);
    }
    let mut round = 0;
    while !nodes.iter().all(MonitorNode::is_terminal) {
        if round == graph.diameter() {
            return Err(not_terminated(nodes, round, "rounds"));
        }
        round += 1;
        one_round(nodes, graph, round, opts, &mut rng, &mut report)?;
        report.steps = round;
        if opts.trace {
            report.record(round, nodes);
        }
    }
    Ok(report)
}

fn not_terminated(nodes: &[MonitorNode], steps: usize, unit: &str) -> Error {
    let worst = nodes
        .iter()
        .max_by_key(|n| n.kernel_dim() - n.terminal_dim.min(n.kernel_dim()))
        .expect("at least one node");
    Error::AlgorithmFailure(format!(
        "no termination after {steps} {unit}: monitor {} still has a kernel of dimension {} (terminal {})",
        worst.id,
        worst.kernel_dim(),
        worst.terminal_dim
    ))
}

/// Activation sequence for asynchronous runs: in slot `t` monitor
/// `activations[t]` sends its state to all neighbors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    period: usize,
    activations: Vec<usize>,
}

impl Schedule {
    pub fn new(period: usize, activations: Vec<usize>) -> Self {
        Self {
            period,
            activations,
        }
    }

    /// `0, 1, …, m−1` repeated `cycles` times, with period `m`.
    pub fn round_robin(monitors: usize, cycles: usize) -> Self {
        Self::new(monitors, (0..cycles).flat_map(|_| 0..monitors).collect())
    }

    /// Random sequence of `len` slots in which every monitor appears in each
    /// window of `period` consecutive slots. Requires `period >= monitors`.
    pub fn random_fair(monitors: usize, period: usize, len: usize, seed: u64) -> Result<Self> {
        if monitors == 0 || period < monitors {
            return Err(Error::ContractViolation(format!(
                "no fair schedule of period {period} for {monitors} monitors"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Slot by which each monitor must appear next.
        let mut deadline: Vec<usize> = vec![period - 1; monitors];
        let mut activations = Vec::with_capacity(len);
        for t in 0..len {
            let pick = rng.random_range(0..monitors);
            let chosen = if feasible_after(&deadline, pick, t, period) {
                pick
            } else {
                (0..monitors)
                    .min_by_key(|&k| deadline[k])
                    .expect("monitors > 0")
            };
            deadline[chosen] = t + period;
            activations.push(chosen);
        }
        Ok(Self::new(period, activations))
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn activations(&self) -> &[usize] {
        &self.activations
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    /// Checks that every window of `period` consecutive slots contains every
    /// monitor.
    pub fn validate(&self, monitors: usize) -> Result<()> {
        if let Some(&bad) = self.activations.iter().find(|&&a| a >= monitors) {
            return Err(Error::ContractViolation(format!(
                "schedule activates monitor {bad} of {monitors}"
            )));
        }
        if self.period == 0 || self.activations.len() < self.period {
            return Err(Error::ContractViolation(format!(
                "schedule of {} slots cannot be fair with period {}",
                self.activations.len(),
                self.period
            )));
        }
        let mut last = vec![None; monitors];
        for (t, &a) in self.activations.iter().enumerate() {
            last[a] = Some(t);
            if t + 1 >= self.period {
                let start = t + 1 - self.period;
                if let Some(k) = (0..monitors).find(|&k| last[k].is_none_or(|s| s < start)) {
                    return Err(Error::ContractViolation(format!(
                        "monitor {k} is absent from slots {start}..={t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Whether activating `pick` at slot `t` still lets every deadline be met.
fn feasible_after(deadline: &[usize], pick: usize, t: usize, period: usize) -> bool {
    let mut rest: Vec<usize> = deadline
        .iter()
        .enumerate()
        .map(|(k, &d)| if k == pick { t + period } else { d })
        .collect();
    rest.sort_unstable();
    rest.iter().enumerate().all(|(r, &d)| d > t + r)
}

/// Replays `schedule` until every kernel has reached its terminal dimension.
pub fn run_asynchronous(
    nodes: &mut [MonitorNode],
    graph: &MonitorGraph,
    schedule: &Schedule,
    opts: &SyncOptions,
) -> Result<RunReport> {
    check_network(nodes, graph)?;
    schedule.validate(nodes.len())?;
    let bound = graph.diameter() * schedule.period();
    let mut report = RunReport::default();
    if opts.trace {
        report.record(0, nodes);
    }
    let mut slot = 0;
    while !nodes.iter().all(MonitorNode::is_terminal) {
        if slot == bound || slot == schedule.len() {
            return Err(not_terminated(nodes, slot, "slots"));
        }
        let j = schedule.activations[slot];
        slot += 1;
        let msg = nodes[j].message(slot);
        let sender_terminal = nodes[j].is_terminal();
        for &i in graph.neighbors(j) {
            deliver(
                nodes,
                &msg,
                sender_terminal,
                i,
                &mut report,
                opts.transmission,
            )?;
        }
        report.steps = slot;
        if opts.trace {
            report.record(slot, nodes);
        }
    }
    Ok(report)
}

/// The state part of every monitor's estimate.
pub fn state_estimates(nodes: &[MonitorNode]) -> Vec<DenseMatrix> {
    nodes.iter().map(MonitorNode::state_estimate).collect()
}

/// Largest entrywise difference between any monitor's state estimate and
/// `reference`.
pub fn max_disagreement(nodes: &[MonitorNode], reference: &DenseMatrix) -> f64 {
    nodes
        .iter()
        .map(|n| (n.state_estimate() - reference).amax())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incremental::{default_epsilon, wls_incremental_snapshots};
    use crate::linalg::SubspaceBasis;
    use crate::network::{
        dc_measurement_matrix, generate_snapshots, lattice_grid, random_consistent_system,
        random_estimation_system, NoiseMode,
    };
    use crate::testutil::random_matrix;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn node(h: DenseMatrix, z: DenseMatrix) -> MonitorNode {
        let n = h.ncols();
        let mut node =
            MonitorNode::new(0, EquationBlock::with_snapshots(h, z).unwrap(), n, 0).unwrap();
        node.local_init().unwrap();
        node
    }

    fn embedded_instance(
        n: usize,
        p: usize,
        m: usize,
        seed: u64,
    ) -> (Vec<MonitorNode>, DenseMatrix) {
        let sys = random_estimation_system(n, p, m, seed).unwrap();
        let z = DMatrix::from_column_slice(p, 1, sys.z().as_slice());
        let eps = default_epsilon(sys.h(), sys.b()).unwrap();
        let nodes = embedded_nodes(sys.h(), sys.b(), &z, sys.blocks(), eps).unwrap();
        let reference = wls_incremental_snapshots(sys.h(), sys.b(), &z, sys.blocks(), eps).unwrap();
        (nodes, reference)
    }

    #[test]
    fn local_init_single_row() {
        let n = node(dmatrix![1.0, 0.0], dmatrix![3.0]);
        assert_eq!(n.estimate(), &dmatrix![3.0; 0.0]);
        let k = n.kernel().to_basis().unwrap();
        assert!(k.same_subspace(&SubspaceBasis::span_of(&dmatrix![0.0; 1.0]).unwrap(), 1e-12));
    }

    #[test]
    fn local_init_zero_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 3, 7);
        let n = node(h.clone(), DMatrix::zeros(3, 1));
        assert_eq!(n.estimate().amax(), 0.0);
        assert_eq!(n.kernel_dim(), 4);
        assert!((h * n.kernel().to_basis().unwrap().basis()).amax() < 1e-12);
    }

    #[test]
    fn local_init_satisfies_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_matrix(&mut rng, 4, 9);
        let z = random_matrix(&mut rng, 4, 2);
        let n = node(h, z);
        assert!(n.local_residual() < 1e-9);
    }

    #[test]
    fn hand_worked_fusion() {
        let mut a = node(dmatrix![1.0, 0.0], dmatrix![3.0]);
        let b = node(dmatrix![0.0, 1.0], dmatrix![5.0]);
        a.fuse(&b.message(0)).unwrap();
        assert!((a.estimate() - dmatrix![3.0; 5.0]).amax() < 1e-14);
        assert!(a.kernel().is_zero());
    }

    #[test]
    fn fusion_with_itself_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rows in [2, 7] {
            let h = random_matrix(&mut rng, rows, 10);
            let mut a = node(h, random_matrix(&mut rng, rows, 1));
            let before = a.clone();
            a.fuse(&before.message(0)).unwrap();
            assert!((a.estimate() - before.estimate()).amax() < 1e-10);
            assert!(a.kernel().same_subspace(before.kernel(), 1e-10).unwrap());
        }
    }

    #[test]
    fn fusion_covers_all_representation_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 12;
        let x = random_matrix(&mut rng, n, 2);
        for (ri, rj) in [(3, 4), (9, 4), (3, 8), (8, 9)] {
            let hi = random_matrix(&mut rng, ri, n);
            let hj = random_matrix(&mut rng, rj, n);
            let mut a = node(hi.clone(), &hi * &x);
            let b = node(hj.clone(), &hj * &x);
            assert_eq!(a.kernel().is_complement_form(), 2 * ri <= n);
            assert_eq!(b.kernel().is_complement_form(), 2 * rj <= n);
            a.fuse(&b.message(0)).unwrap();
            assert!((&hi * a.estimate() - &hi * &x).amax() < 1e-10);
            assert!((&hj * a.estimate() - &hj * &x).amax() < 1e-10);
            assert_eq!(a.kernel_dim(), n.saturating_sub(ri + rj));
            let oracle =
                crate::linalg::pseudoinverse(&stack(&hi, &hj)).unwrap() * stack(&hi, &hj) * &x;
            assert!((a.estimate() - oracle).amax() < 1e-9, "{ri} {rj}");
        }
    }

    fn stack(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut s = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
        s.rows_mut(0, a.nrows()).copy_from(a);
        s.rows_mut(a.nrows(), b.nrows()).copy_from(b);
        s
    }

    #[test]
    fn fusion_rejects_other_dimensions() {
        let mut a = node(dmatrix![1.0, 0.0], dmatrix![3.0]);
        let b = node(dmatrix![1.0, 0.0, 0.0], dmatrix![3.0]);
        assert!(matches!(
            a.fuse(&b.message(0)),
            Err(Error::ContractViolation(_))
        ));
    }

    fn decoupled_path() -> (Vec<MonitorNode>, MonitorGraph) {
        let h = DMatrix::<f64>::identity(3, 3);
        let z = dmatrix![1.0; 2.0; 3.0];
        (
            plain_nodes(&h, &z, &[0..1, 1..2, 2..3]).unwrap(),
            MonitorGraph::path(3).unwrap(),
        )
    }

    #[test]
    fn path_needs_diameter_rounds() {
        let (mut nodes, g) = decoupled_path();
        let report = run_synchronous(&mut nodes, &g, &SyncOptions::default()).unwrap();
        assert_eq!(report.steps, 2);
        assert!(max_disagreement(&nodes, &dmatrix![1.0; 2.0; 3.0]) < 1e-14);
    }

    #[test]
    fn complete_graph_needs_one_round() {
        let (mut nodes, _) = decoupled_path();
        let report = run_synchronous(
            &mut nodes,
            &MonitorGraph::complete(3).unwrap(),
            &SyncOptions::default(),
        )
        .unwrap();
        assert_eq!(report.steps, 1);
        assert_eq!(report.messages, 6);
    }

    #[test]
    fn round_robin_on_a_path() {
        let (mut nodes, g) = decoupled_path();
        let report = run_asynchronous(
            &mut nodes,
            &g,
            &Schedule::round_robin(3, 4),
            &SyncOptions::default(),
        )
        .unwrap();
        assert!(report.steps <= 6);
        assert!(max_disagreement(&nodes, &dmatrix![1.0; 2.0; 3.0]) < 1e-14);
    }

    #[test]
    fn trace_lines() {
        let (mut nodes, g) = decoupled_path();
        let opts = SyncOptions {
            trace: true,
            ..Default::default()
        };
        let report = run_synchronous(&mut nodes, &g, &opts).unwrap();
        assert_eq!(report.trace.len(), 9);
        assert_eq!(
            report.trace[1].to_string(),
            "round=0 monitor=1 dimK=2 residual=0e0"
        );
        assert_eq!(report.trace[8].kernel_dim, 0);
    }

    #[test]
    fn lattice_agrees_with_incremental() {
        let (grid, part, graph) = lattice_grid(3, 3).unwrap();
        let h = dc_measurement_matrix(&grid).unwrap();
        let n = h.ncols();
        let p = h.nrows();
        let b = DMatrix::identity(p, p);
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin());
        let z = &h * &x
            + generate_snapshots(&h, &x.column(0).into_owned(), &b, 1, NoiseMode::Gaussian, 4)
                .unwrap()
            - &h * &x;
        let eps = default_epsilon(&h, &b).unwrap();
        let reference = wls_incremental_snapshots(&h, &b, &z, part.row_blocks(), eps).unwrap();
        let mut nodes = embedded_nodes(&h, &b, &z, part.row_blocks(), eps).unwrap();
        let report = run_synchronous(&mut nodes, &graph, &SyncOptions::default()).unwrap();
        assert!(report.steps <= graph.diameter());
        assert!(max_disagreement(&nodes, &reference) < 1e-8);
    }

    #[test]
    fn random_graphs_match_incremental() {
        for seed in 0..20 {
            let m = 2 + (seed as usize % 7);
            let (mut nodes, reference) = embedded_instance(5, 3 * m + 2, m, seed);
            let g = MonitorGraph::random_connected(m, 0.2, seed).unwrap();
            let report = run_synchronous(&mut nodes, &g, &SyncOptions::default()).unwrap();
            assert!(report.steps <= g.diameter());
            assert!(max_disagreement(&nodes, &reference) < 1e-8, "seed {seed}");
            for node in &nodes {
                assert!(node.local_residual() < 1e-8);
            }
        }
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (nodes, _) = embedded_instance(6, 20, 6, 9);
        let g = MonitorGraph::random_connected(6, 0.4, 9).unwrap();
        let mut base = nodes.clone();
        run_synchronous(&mut base, &g, &SyncOptions::default()).unwrap();
        for seed in 0..5 {
            let mut shuffled = nodes.clone();
            let opts = SyncOptions {
                order: NeighborOrder::Shuffled(seed),
                ..Default::default()
            };
            run_synchronous(&mut shuffled, &g, &opts).unwrap();
            for (a, b) in base.iter().zip(&shuffled) {
                assert!((a.state_estimate() - b.state_estimate()).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn gauss_seidel_reaches_the_same_point() {
        let (nodes, reference) = embedded_instance(4, 16, 5, 11);
        let g = MonitorGraph::path(5).unwrap();
        let mut gs = nodes.clone();
        let opts = SyncOptions {
            semantics: RoundSemantics::GaussSeidel,
            ..Default::default()
        };
        run_synchronous(&mut gs, &g, &opts).unwrap();
        assert!(max_disagreement(&gs, &reference) < 1e-8);
    }

    #[test]
    fn plain_rank_deficient_system() {
        let sys = random_consistent_system(8, 12, 4, 21).unwrap();
        let z = DMatrix::from_column_slice(12, 1, sys.z().as_slice());
        let mut nodes = plain_nodes(sys.h(), &z, sys.blocks()).unwrap();
        let g = MonitorGraph::path(4).unwrap();
        run_synchronous(&mut nodes, &g, &SyncOptions::default()).unwrap();
        let oracle = crate::linalg::pseudoinverse(sys.h()).unwrap() * &z;
        assert!(max_disagreement(&nodes, &oracle) < 1e-9);
    }

    #[test]
    fn run_rounds_zero_keeps_initial_state() {
        let (nodes, _) = embedded_instance(4, 12, 3, 12);
        let g = MonitorGraph::path(3).unwrap();
        let mut ran = nodes.clone();
        let report = run_rounds(&mut ran, &g, 0, &SyncOptions::default()).unwrap();
        assert_eq!(report.steps, 0);
        for (a, b) in nodes.iter().zip(&ran) {
            assert_eq!(a.estimate(), b.estimate());
        }
    }

    #[test]
    fn smaller_basis_costs_fewer_words() {
        let (nodes, _) = embedded_instance(4, 12, 3, 13);
        let g = MonitorGraph::path(3).unwrap();
        let mut full = nodes.clone();
        let mut small = nodes;
        let a = run_synchronous(&mut full, &g, &SyncOptions::default()).unwrap();
        let opts = SyncOptions {
            transmission: BasisTransmission::Smaller,
            ..Default::default()
        };
        let b = run_synchronous(&mut small, &g, &opts).unwrap();
        assert_eq!(a.messages, b.messages);
        assert!(b.words < a.words);
    }

    #[test]
    fn unfair_schedules_are_rejected() {
        assert!(Schedule::new(3, vec![0, 1, 0, 2]).validate(3).is_err());
        assert!(Schedule::new(3, vec![0, 1, 2, 0, 1]).validate(3).is_ok());
        assert!(Schedule::new(3, vec![0, 1]).validate(3).is_err());
        assert!(Schedule::new(2, vec![0, 3]).validate(2).is_err());
        let (mut nodes, g) = decoupled_path();
        let err = run_asynchronous(
            &mut nodes,
            &g,
            &Schedule::new(2, vec![0, 1, 0, 1]),
            &SyncOptions::default(),
        );
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn random_fair_schedules_are_fair() {
        for seed in 0..30 {
            let m = 2 + seed as usize % 6;
            let period = m + seed as usize % 3;
            let s = Schedule::random_fair(m, period, 40, seed).unwrap();
            s.validate(m).unwrap();
        }
        assert!(Schedule::random_fair(4, 3, 10, 0).is_err());
    }

    #[test]
    fn asynchronous_matches_synchronous() {
        let (nodes, reference) = embedded_instance(5, 18, 6, 14);
        let g = MonitorGraph::random_connected(6, 0.1, 14).unwrap();
        let mut sync = nodes.clone();
        run_synchronous(&mut sync, &g, &SyncOptions::default()).unwrap();
        for seed in 0..5 {
            let schedule = Schedule::random_fair(6, 8, 8 * g.diameter(), seed).unwrap();
            let mut run = nodes.clone();
            let report =
                run_asynchronous(&mut run, &g, &schedule, &SyncOptions::default()).unwrap();
            assert!(report.steps <= g.diameter() * 8);
            assert!(max_disagreement(&run, &reference) < 1e-8);
            for (a, b) in run.iter().zip(&sync) {
                assert!((a.state_estimate() - b.state_estimate()).amax() < 1e-8);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fusion_shrinks_kernels_and_keeps_equations(seed in 0u64..10_000, ri in 1usize..6, rj in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let x = random_matrix(&mut rng, n, 1);
            let hi = random_matrix(&mut rng, ri, n);
            let hj = random_matrix(&mut rng, rj, n);
            let mut a = node(hi.clone(), &hi * &x);
            let b = node(hj.clone(), &hj * &x);
            let before = a.kernel().clone();
            a.fuse(&b.message(0)).unwrap();
            prop_assert!(a.kernel_dim() <= before.dim());
            prop_assert!(before.contains(a.kernel(), 1e-9).unwrap());
            prop_assert!((&hi * a.estimate() - &hi * &x).amax() < 1e-9);
            prop_assert!((&hj * a.estimate() - &hj * &x).amax() < 1e-9);
            prop_assert!(a.kernel().project(a.estimate()).amax() < 1e-9);
        }
    }
}
