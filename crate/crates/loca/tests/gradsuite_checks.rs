//! The full finite-difference verification suite: every primitive, every
//! model stage, and the end-to-end toy model, in f64 shadow mode.

use std::time::Instant;

use loca::gradsuite;

#[test]
fn full_suite_passes_within_budget() {
    let t0 = Instant::now();
    let rows = gradsuite::run_full_suite().unwrap();
    let elapsed = t0.elapsed();
    let mut failed = Vec::new();
    for (name, report, pass) in &rows {
        println!(
            "{:<38} checked={:<6} max_rel={:.3e} {}",
            name,
            report.checked,
            report.max_rel_err,
            if *pass { "ok" } else { "FAIL" }
        );
        if !pass {
            failed.push(format!("{name}: {:?}", report.worst));
        }
    }
    assert!(failed.is_empty(), "failing checks:\n{}", failed.join("\n"));
    assert!(rows.len() >= 20, "suite unexpectedly small: {} rows", rows.len());
    println!("suite wall time: {:.1?}", elapsed);
}

#[test]
fn zero_shot_gradient_reaches_objectness_queries() {
    assert!(gradsuite::check_zero_shot_reachability().unwrap());
}
