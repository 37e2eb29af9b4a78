//! Stable-equilibrium current density over flow rate and reactor volume.
//! Prints one row per volume with the regime boundaries in flow rate.

use mec_dae::continuation::{self, StepPolicy};
use mec_dae::ParameterSet;

fn main() -> mec_dae::Result<()> {
    let p = ParameterSet::reference();
    let flows: Vec<f64> = (0..=40).map(|k| 0.5 * k as f64).collect();
    let volumes = [0.05, 0.1, 0.15];
    let samples = continuation::bifurcation_surface(&p, &flows, &volumes, &StepPolicy::default())?;

    for v in volumes {
        let row: Vec<_> = samples.iter().filter(|s| s.v == v).collect();
        let best = row.iter().max_by(|a, b| a.i_density.total_cmp(&b.i_density)).unwrap();
        let switches: Vec<String> = row
            .windows(2)
            .filter(|w| w[0].regime != w[1].regime)
            .map(|w| format!("{} -> {} near F_in {:.1}", w[0].regime.label(), w[1].regime.label(), w[1].f_in))
            .collect();
        println!("V = {v} L: peak {:.3} A/m^3 at F_in {:.1} mL/day", best.i_density, best.f_in);
        for s in switches {
            println!("    {s}");
        }
    }

    if let Some(path) = std::env::args().nth(1) {
        let file = std::fs::File::create(&path)?;
        continuation::write_surface_csv(&samples, std::io::BufWriter::new(file))?;
    }
    Ok(())
}
