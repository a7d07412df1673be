//! Runs the finite-difference suite and prints the per-check table.
//!
//! cargo run --release --example gradient_check

use std::time::Instant;

use ctcloud::gradcheck::{run_suite, GradcheckConfig};

fn main() -> ctcloud::Result<()> {
    let start = Instant::now();
    let report = run_suite(&GradcheckConfig::default())?;
    print!("{}", report.to_table());
    println!("{} in {:.1}s", if report.passed() { "all checks passed" } else { "FAILED" }, start.elapsed().as_secs_f64());
    Ok(())
}
