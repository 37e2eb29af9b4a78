//! 45 h batch run from the reference start; prints the current density
//! every 5 h and writes the trajectory to stdout as CSV when asked.

use mec_dae::scenario;
use mec_dae::{io, ParameterSet};

fn main() -> mec_dae::Result<()> {
    let p = ParameterSet::reference();
    let x0 = scenario::reference_batch(&p)?;
    let tr = scenario::simulate(&p, &x0, &scenario::hour_grid(45.0, 9), &scenario::mec_config(1e-8))?;

    println!("{:>6} {:>10} {:>10} {:>12}", "t [h]", "S", "X_e", "I [A/m^3]");
    for (t, x) in tr.times.iter().zip(&tr.states) {
        println!("{:>6.1} {:>10.3} {:>10.3} {:>12.4}", t * 24.0, x[0], x[2], p.current_density(x[5]));
    }
    println!("{} steps, {} rejected", tr.stats.steps, tr.stats.rejected_steps);

    if std::env::args().any(|a| a == "--csv") {
        io::write_trajectory_csv(&tr, &p, std::io::stdout().lock())?;
    }
    Ok(())
}
