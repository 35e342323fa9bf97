//! The cyclic temperature schedule and how it rescales proxy gradients.

use hpcr::losses::{temperature, TemperatureSchedule};

fn main() -> hpcr::Result<()> {
    let sched = TemperatureSchedule::new(0.16, 0.05, 500, 0.09)?;
    println!(
        "tau_max = {}, tau_min = {}, cycle S = {}",
        sched.tau_max, sched.tau_min, sched.cycle
    );
    println!("{:>6} {:>10} {:>12}", "step", "tau(s)", "tau/tau(s)");
    for s in (0..=500).step_by(50) {
        let tau_s = temperature(&sched, s);
        println!("{s:>6} {tau_s:>10.5} {:>12.4}", sched.static_tau / tau_s);
    }
    println!();
    println!(
        "endpoints: tau(0) = {}, tau(S/2) = {}",
        sched.tau_at(0),
        sched.tau_at(250)
    );
    println!(
        "periodicity: tau(137) == tau(637) is {}",
        sched.tau_at(137) == sched.tau_at(637)
    );
    Ok(())
}
