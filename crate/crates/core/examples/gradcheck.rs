//! Finite-difference check of every layer, both losses and the whole
//! network.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use ssgnet::gradcheck::{run_suite, SuiteOptions};

fn run() -> ssgnet::Result<bool> {
    let report = run_suite(&SuiteOptions::default())?;
    for c in &report.checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{status:<5} {:<4} {:<24} {:.2e}", c.precision, c.name, c.rel_error);
    }
    println!("{} checks in {:.1}s", report.checks.len(), report.seconds);
    Ok(report.passed())
}

fn main() -> ssgnet::Result<()> {
    if !run()? {
        std::process::exit(1);
    }
    Ok(())
}
