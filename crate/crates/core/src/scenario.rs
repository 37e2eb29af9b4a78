//! Initial conditions of the acetate-fed batch experiment and helpers that
//! run the MEC model on an hour-based output grid.

use serde::{Deserialize, Serialize};

use crate::dae::{self, consistent_initialize, InitOptions, IntegratorConfig, Trajectory};
use crate::error::Result;
use crate::model::{self, LogGapMec, MecModel, StateVector, IDX_I, IDX_MOX, IDX_XE};
use crate::params::ParameterSet;

pub const HOURS_PER_DAY: f64 = 24.0;

/// Initial substrate, the two methanogen populations and the mediator, as
/// fixed by the batch experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStart {
    pub s: f64,
    pub x_m1: f64,
    pub x_m2: f64,
    pub m_ox: f64,
}

impl Default for BatchStart {
    fn default() -> Self {
        BatchStart {
            s: 956.0,
            x_m1: 10.0,
            x_m2: 10.0,
            m_ox: 25.6,
        }
    }
}

/// How the remaining unknown is closed at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Closure {
    /// X_e(0) given; the current follows from the constraint.
    Exoelectrogens(f64),
    /// I_density(0) measured (A/m^3); X_e(0) follows from the constraint.
    CurrentDensity(f64),
}

impl Default for Closure {
    fn default() -> Self {
        Closure::Exoelectrogens(250.0)
    }
}

/// Default absolute tolerances: 1e-10 on the concentrations and on the
/// mediator log-gap, 1e-12 A on the current.
pub fn mec_config(rtol: f64) -> IntegratorConfig {
    IntegratorConfig::with_tolerances(rtol, vec![1e-10, 1e-10, 1e-10, 1e-10, 1e-10, 1e-12])
}

pub fn batch_initial_state(p: &ParameterSet, start: &BatchStart, closure: Closure) -> Result<StateVector> {
    let sys = MecModel::new(p.clone());
    let opts = InitOptions::default();
    let x = match closure {
        Closure::Exoelectrogens(xe) => {
            let fixed = [(0, start.s), (1, start.x_m1), (IDX_XE, xe), (3, start.x_m2), (IDX_MOX, start.m_ox)];
            let guess = [start.s, start.x_m1, xe, start.x_m2, start.m_ox, 0.0];
            consistent_initialize(&sys, 0.0, &fixed, &guess, &opts)?
        }
        Closure::CurrentDensity(density) => {
            let i = p.current_from_density(density);
            let fixed = [(0, start.s), (1, start.x_m1), (3, start.x_m2), (IDX_MOX, start.m_ox), (IDX_I, i)];
            let guess = [start.s, start.x_m1, 250.0, start.x_m2, start.m_ox, i];
            consistent_initialize(&sys, 0.0, &fixed, &guess, &opts)?
        }
    };
    Ok(StateVector::from_slice(&x))
}

/// The reference batch start: X_e(0) = 250 mg/L with the current solved.
pub fn reference_batch(p: &ParameterSet) -> Result<StateVector> {
    batch_initial_state(p, &BatchStart::default(), Closure::default())
}

/// Start of the long washout run: {956, 10, 250, 10, 5} with the current
/// solved from the constraint (about 0.01026 A).
pub fn washout_start(p: &ParameterSet) -> Result<StateVector> {
    let start = BatchStart {
        m_ox: 5.0,
        ..BatchStart::default()
    };
    batch_initial_state(p, &start, Closure::Exoelectrogens(250.0))
}

/// `n + 1` equally spaced times over `[0, hours]`, in days.
pub fn hour_grid(hours: f64, n: usize) -> Vec<f64> {
    if hours == 0.0 || n == 0 {
        return vec![0.0];
    }
    (0..=n).map(|k| hours * k as f64 / n as f64 / HOURS_PER_DAY).collect()
}

/// Integrates in log-gap coordinates and reports physical states.
pub fn simulate(
    p: &ParameterSet,
    x0: &StateVector,
    times_days: &[f64],
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    let sys = LogGapMec::new(p.clone());
    let xw = model::to_log_gap(p, &x0.to_array())?;
    let mut tr = dae::integrate(&sys, &xw, config, times_days)?;
    for x in &mut tr.states {
        *x = model::from_log_gap(p, x).to_vec();
    }
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_start_is_consistent() {
        let p = ParameterSet::reference();
        let x0 = reference_batch(&p).unwrap();
        assert_eq!(x0.x_e, 250.0);
        let g = crate::model::constraint_residual(&x0, &p).unwrap();
        assert!(g.abs() < 1e-12);
        assert!((x0.i_density(&p) - 75.78).abs() < 0.05, "{}", x0.i_density(&p));
    }

    #[test]
    fn washout_start_current() {
        let p = ParameterSet::reference();
        let x0 = washout_start(&p).unwrap();
        // bisection on the constraint in I
        let g = |i: f64| crate::model::rhs(&p, &[956.0, 10.0, 250.0, 10.0, 5.0, i]).unwrap().1;
        let (mut lo, mut hi) = (0.0, 0.1);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 { lo = mid } else { hi = mid }
        }
        assert!((x0.i_mec - lo).abs() < 1e-15, "{} vs {lo}", x0.i_mec);
        assert!((x0.i_mec - 0.0102618).abs() < 1e-7);
    }

    #[test]
    fn grid_in_days() {
        assert_eq!(hour_grid(0.0, 10), vec![0.0]);
        let g = hour_grid(48.0, 4);
        assert_eq!(g.len(), 5);
        assert_eq!(g[4], 2.0);
    }
}
