//! Audit every analytic gradient against the central finite-difference
//! oracle. The same suite backs the `hpcr gradcheck` verb.

use std::time::Instant;

use hpcr::gradients::run_gradcheck;

fn main() -> hpcr::Result<()> {
    let instances = 50;
    let t0 = Instant::now();
    let report = run_gradcheck(instances, 7)?;
    println!("{:<22} {:>14}", "loss", "max rel error");
    for row in &report.rows {
        println!("{:<22} {:>14.3e}", row.name, row.max_error);
    }
    println!(
        "{} losses and closed forms x {instances} instances in {:.1}s; tolerance {:.0e}: {}",
        report.rows.len(),
        t0.elapsed().as_secs_f64(),
        report.tolerance,
        if report.passed() {
            "all good"
        } else {
            "FAILED"
        }
    );
    Ok(())
}
