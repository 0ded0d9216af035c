//! Acceptance gate. Runs without the libtest harness so the per-criterion
//! lines are printed whether or not output capture is on.

use std::process::ExitCode;

use ncindex_core::acceptance::{run_criterion, CRITERIA, SEED};

fn main() -> ExitCode {
    let mut failed = Vec::new();
    for (id, _) in CRITERIA {
        let r = run_criterion(id, SEED).expect("known criterion");
        println!("{}", r.line());
        for f in r.failures.iter().skip(1).take(5) {
            println!("    {f}");
        }
        if !r.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria pass", CRITERIA.len(), CRITERIA.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
