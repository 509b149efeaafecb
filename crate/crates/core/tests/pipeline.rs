use gridest::diffusive::{embedded_nodes, run_synchronous, SyncOptions};
use gridest::incremental::{default_epsilon, wls_incremental};
use gridest::network::{random_estimation_system, MonitorGraph};
use gridest::DenseMatrix;
use nalgebra::DVector;
use proptest::prelude::*;

/// `(Hᵀ Σ⁻¹ H)⁻¹ Hᵀ Σ⁻¹ z` through the normal equations.
fn normal_equations(h: &DenseMatrix, sigma: &DenseMatrix, z: &DVector<f64>) -> DVector<f64> {
    let si = sigma.clone().try_inverse().unwrap();
    let lhs = h.transpose() * &si * h;
    lhs.cholesky().unwrap().solve(&(h.transpose() * si * z))
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn chain_and_graph_agree_with_weighted_least_squares() {
    let sys = random_estimation_system(6, 18, 4, 11).unwrap();
    let eps = default_epsilon(sys.h(), sys.b()).unwrap();
    let oracle = normal_equations(sys.h(), sys.sigma(), sys.z());

    let chain = wls_incremental(sys.h(), sys.b(), sys.z(), sys.blocks(), eps).unwrap();
    assert!(
        relative(&chain, &oracle) < 1e-6,
        "{}",
        relative(&chain, &oracle)
    );

    let z = DenseMatrix::from_column_slice(sys.z().len(), 1, sys.z().as_slice());
    let mut nodes = embedded_nodes(sys.h(), sys.b(), &z, sys.blocks(), eps).unwrap();
    let graph = MonitorGraph::path(4).unwrap();
    let report = run_synchronous(&mut nodes, &graph, &SyncOptions::default()).unwrap();
    assert!(report.steps <= graph.diameter());
    for node in &nodes {
        let x = node.state_estimate().column(0).into_owned();
        assert!(relative(&x, &chain) < 1e-8, "monitor {}", node.id());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_monitor_reaches_the_chain_estimate(
        n in 2usize..6,
        extra in 0usize..8,
        m in 1usize..5,
        seed in 0u64..1000,
    ) {
        let p = 2 * n + extra + m;
        let sys = random_estimation_system(n, p, m, seed).unwrap();
        let eps = default_epsilon(sys.h(), sys.b()).unwrap();
        let chain = wls_incremental(sys.h(), sys.b(), sys.z(), sys.blocks(), eps).unwrap();
        let z = DenseMatrix::from_column_slice(p, 1, sys.z().as_slice());
        let mut nodes = embedded_nodes(sys.h(), sys.b(), &z, sys.blocks(), eps).unwrap();
        let graph = MonitorGraph::random_connected(m, 0.3, seed).unwrap();
        run_synchronous(&mut nodes, &graph, &SyncOptions::default()).unwrap();
        for node in &nodes {
            let x = node.state_estimate().column(0).into_owned();
            prop_assert!(relative(&x, &chain) < 1e-7);
        }
    }
}
