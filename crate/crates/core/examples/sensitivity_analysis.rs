//! Semi-relative current-density sensitivities `p dI/dp` for the batch run,
//! with the time each one changes sign and a ranking by peak magnitude.

use mec_dae::scenario::{self, Closure};
use mec_dae::{sensitivity, ParamId, ParameterSet};

fn main() -> mec_dae::Result<()> {
    let p = ParameterSet::reference();
    let x0 = scenario::reference_batch(&p)?;
    let grid = scenario::hour_grid(45.0, 180);
    let run = sensitivity::solve_sharded(&p, &x0, Closure::default(), ParamId::KINETIC, &grid, &scenario::mec_config(1e-8))?;

    let mut rows: Vec<(f64, &str, Option<f64>)> = run
        .blocks
        .iter()
        .map(|b| {
            let peak = b.semi_relative.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let flip = (1..grid.len())
                .find(|&k| b.semi_relative[k - 1] != 0.0 && b.semi_relative[k].signum() != b.semi_relative[k - 1].signum())
                .map(|k| grid[k] * 24.0);
            (peak, b.param.key(), flip)
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));

    println!("{:<10} {:>14} {:>16}", "param", "peak [A/m^3]", "sign change [h]");
    for (peak, key, flip) in rows {
        let flip = flip.map_or("-".to_string(), |t| format!("{t:.1}"));
        println!("{key:<10} {peak:>14.4} {flip:>16}");
    }
    Ok(())
}
