//! Communication counts of the sequential algorithm against block size.

use gridest::incremental::{run_incremental, EquationBlock, KernelForm};
use gridest::network::random_consistent_system;
use gridest::Error;

use crate::config::{Config, ConfigError};
use crate::{Result, RunArtifact};

/// `⌈rows / k⌉ − 1`.
pub fn expected_communications(rows: usize, k: usize) -> usize {
    rows.div_ceil(k) - 1
}

/// Splits `rows` consecutive rows into blocks of `k`, the last one shorter
/// when `k` does not divide `rows`.
fn uniform_blocks(rows: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    (0..rows).step_by(k).map(|s| s..(s + k).min(rows)).collect()
}

/// Writes `block_size,blocks,communications,expected,svd_cost`, where
/// `svd_cost` sums `min(a b², a² b)` over the decomposed `a x b` matrices.
/// Fails if a measured count differs from `⌈rows / k⌉ − 1`.
pub fn run_complexity_counts(config: &Config) -> Result<RunArtifact> {
    let rows = config.count("rows")?;
    let n = config.count("state_dim")?;
    let sizes: Vec<usize> = config.list("block_sizes")?;
    if sizes.iter().any(|&k| k == 0 || k > rows) {
        return Err(ConfigError::Value {
            key: "block_sizes".into(),
            value: config.raw("block_sizes").into(),
            reason: format!("block sizes must lie in 1..={rows}"),
        }
        .into());
    }
    let system = random_consistent_system(n, rows, 1, config.seed()?)?;
    let mut csv = String::from("block_size,blocks,communications,expected,svd_cost\n");
    for &k in &sizes {
        let ranges = uniform_blocks(rows, k);
        let blocks: Vec<EquationBlock> = ranges
            .iter()
            .map(|r| {
                EquationBlock::new(
                    system.h().rows_range(r.clone()).into_owned(),
                    system.z().rows_range(r.clone()).into_owned(),
                )
            })
            .collect::<gridest::Result<_>>()?;
        let run = run_incremental(&blocks, KernelForm::Auto)?;
        let expected = expected_communications(rows, k);
        let cost: usize = run.steps.iter().map(|s| s.svd_cost).sum();
        csv.push_str(&format!(
            "{k},{},{},{expected},{cost}\n",
            blocks.len(),
            run.transmissions
        ));
        if run.transmissions != expected {
            return Err(Error::AlgorithmFailure(format!(
                "block size {k}: {} communications, expected {expected}",
                run.transmissions
            ))
            .into());
        }
    }
    let mut art = RunArtifact::new(config);
    art.table("complexity.csv", csv);
    art.note("rows", rows);
    art.note("counts_match", true);
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_cover_rows() {
        assert_eq!(uniform_blocks(5, 2), vec![0..2, 2..4, 4..5]);
        assert_eq!(expected_communications(12, 3), 3);
        assert_eq!(expected_communications(12, 12), 0);
        assert_eq!(expected_communications(12, 1), 11);
        assert_eq!(expected_communications(5, 2), 2);
    }
}
