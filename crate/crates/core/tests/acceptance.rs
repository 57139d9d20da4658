//! Acceptance suite: one line per criterion. `HOMCORR_PROFILE=smoke` shrinks the statistical runs.

use std::process::ExitCode;
use std::time::Instant;

use homcorr::experiments::criteria::{evaluate, Profile, CRITERIA};

fn main() -> ExitCode {
    let profile = Profile::from_env();
    println!("acceptance ({profile:?} profile)");
    let mut failed = 0;
    for id in CRITERIA {
        let start = Instant::now();
        let outcome = evaluate(id, profile, 1);
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag} {:02} {} [{:.1}s]: {}",
            outcome.id,
            outcome.name,
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        failed += usize::from(!outcome.passed);
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
