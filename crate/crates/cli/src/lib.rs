//! Command implementations for the `dabformer` binary: training,
//! evaluation, inference, the numerical self-check matrix, and the
//! attention scaling benchmark.

pub mod bench;
pub mod config;
pub mod eval;
pub mod infer;
pub mod train;

use anyhow::Result;

/// Runs every self-check suite, prints one line per suite, and reports
/// whether all passed.
pub fn cmd_verify(work_dir: &std::path::Path) -> Result<bool> {
    let results = dabformer_core::verify::run_all(work_dir);
    let mut all = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<24} {}", r.name, r.detail);
        all &= r.passed;
    }
    println!(
        "{} of {} suites passed",
        results.iter().filter(|r| r.passed).count(),
        results.len()
    );
    Ok(all)
}
