//! Runs every acceptance criterion at full size and prints one line each.
//!
//! `SMPDEFAULT_SEED` overrides the seed.

use std::process::ExitCode;
use std::time::Instant;

use smpdefault::acceptance::{c14_reproducibility, run_criterion, SuiteConfig};

fn main() -> ExitCode {
    let seed = std::env::var("SMPDEFAULT_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(20240611);
    let cfg = SuiteConfig::new(seed);
    let start = Instant::now();
    let mut results = Vec::new();
    for id in 1..=13 {
        let t = Instant::now();
        let r = run_criterion(id, &cfg);
        println!("{} ({:.1}s)", r.line(), t.elapsed().as_secs_f64());
        results.push(r);
    }
    let t = Instant::now();
    let c14 = c14_reproducibility(&cfg, &results);
    println!("{} ({:.1}s)", c14.line(), t.elapsed().as_secs_f64());
    results.push(c14);
    let failed: Vec<u32> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
