//! Branches of equilibria over the dilution rate and the transcritical points
//! where they exchange stability. Writes `branches.csv` to the given path.

use mec_dae::continuation::{self, StepPolicy};
use mec_dae::ParameterSet;

fn main() -> mec_dae::Result<()> {
    let p = ParameterSet::reference();
    let dg = continuation::analyze(&p, 0.10, 0.14, &StepPolicy::default())?;

    for b in &dg.branches {
        let (lo, hi) = b.d_range();
        let stable = b.points.iter().filter(|e| e.is_stable()).count();
        println!("{:<28} D in [{lo:.5}, {hi:.5}], {} points, {stable} stable", b.regime.label(), b.points.len());
    }
    for r in &dg.bifurcations {
        let (a, b) = r.branches_exchanging;
        println!(
            "D* = {:.8}: {} <-> {}, conditions ({:.2e}, {:.5e}, {:.5e}), I = {:.4} A/m^3",
            r.d_star,
            a.label(),
            b.label(),
            r.cond1,
            r.cond2,
            r.cond3,
            r.equilibrium.params.current_density(r.equilibrium.state.i_mec)
        );
    }

    if let Some(path) = std::env::args().nth(1) {
        let file = std::fs::File::create(&path)?;
        continuation::write_branches_csv(&dg.branches, std::io::BufWriter::new(file))?;
        println!("wrote {path}");
    }
    Ok(())
}
