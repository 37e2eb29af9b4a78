//! The batch washout point {S, 0, 0, 0, M*, 0}: a long run from the washout
//! start, then the mediator gap, the spectrum of the Schur complement and of
//! the pencil, and the stability verdict at the substrate left over.

use mec_dae::{equilibria, scenario};
use mec_dae::ParameterSet;

fn main() -> mec_dae::Result<()> {
    let p = ParameterSet::reference();
    let x0 = scenario::washout_start(&p)?;
    let tr = scenario::simulate(&p, &x0, &[0.0, 500.0], &scenario::mec_config(1e-8))?;
    let end = tr.states.last().unwrap();
    println!("after 500 days: X = ({:.2e}, {:.2e}, {:.2e})", end[1], end[2], end[3]);
    let s = end[0].max(0.0);
    let e = equilibria::washout_equilibrium(&p, s)?;
    println!("S = {s:.4}, M_total - M_ox = {:.6e}, |f| = {:.1e}, |g| = {:.1e}", e.gap, e.residual_f, e.residual_g);

    let schur = equilibria::schur_spectrum(&e)?;
    let mut a = schur.eigenvalues.clone();
    let mut b = equilibria::pencil_spectrum(&e)?;
    a.sort_by(|x, y| x.re.total_cmp(&y.re));
    b.sort_by(|x, y| x.re.total_cmp(&y.re));
    println!("{:>28} {:>28}", "Schur complement", "pencil (finite)");
    for (a, b) in a.iter().zip(&b) {
        println!("{:>28} {:>28}", format!("{:.6e}", a.re), format!("{:.6e}", b.re));
    }
    // the zero mode points along the substrate axis: the line of equilibria
    if let Some(v) = schur.v {
        println!("zero-mode eigenvector {v:.3?}");
    }
    println!("classification: {:?} ({})", e.classification, e.regime.label());
    Ok(())
}
