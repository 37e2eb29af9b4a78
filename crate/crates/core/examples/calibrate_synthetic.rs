//! Fits mu_max_e, q_max_e and Y_M to a noisy synthetic batch, starting 30%
//! off, then screens a poorly identifiable subset.

use mec_dae::calibrate::{self, Dataset, FitOptions};
use mec_dae::{ParamId, ParameterSet};

fn main() -> mec_dae::Result<()> {
    let p = ParameterSet::reference();
    let data = Dataset::synthetic(&p, 45.0, 30, Some((2.0, 7)))?;
    let ids = [ParamId::MuMaxE, ParamId::QMaxE, ParamId::YM];
    let theta0: Vec<f64> = ids.iter().map(|id| 1.3 * p.get(*id)).collect();

    let fit = calibrate::fit(&data, &ids, &theta0, &p, &FitOptions::default())?;
    println!("{:?} after {} iterations, cost {:.4}", fit.reason, fit.iterations, fit.cost);
    for (k, id) in ids.iter().enumerate() {
        let sd = fit.covariance.get(k).map_or(f64::NAN, |row| row[k].sqrt());
        println!("{:<10} true {:>9.4}  fitted {:>9.4} +- {:.4}", id.key(), p.get(*id), fit.theta[k], sd);
    }

    let screen = calibrate::identifiability_screen(&[ParamId::KSE, ParamId::KSM, ParamId::KR], &data, &p, 1e6)?;
    let flagged: Vec<&str> = screen.flagged.iter().map(|id| id.key()).collect();
    println!("condition number {:.3e}, flagged {:?}", screen.condition_number, flagged);
    Ok(())
}
