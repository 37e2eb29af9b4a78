use nalgebra::{DMatrix, DVector};

use super::DaeSystem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Target for the largest constraint residual, in the constraint's units.
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings allowed when an iterate leaves the admissible set.
    pub max_halvings: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            tol: 1e-12,
            max_iter: 200,
            max_halvings: 60,
        }
    }
}

/// Solves `g = 0` for the components of `guess` not listed in `fixed`.
/// There must be exactly as many free components as constraints. A
/// one-dimensional solve keeps a sign-change bracket once it has seen one
/// and bisects whenever Newton would leave it.
pub fn consistent_initialize<S: DaeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    fixed: &[(usize, f64)],
    guess: &[f64],
    opts: &InitOptions,
) -> Result<Vec<f64>> {
    let nd = sys.n_diff();
    let na = sys.n_alg();
    let bd = nd + na;
    if sys.blocks() != 1 || guess.len() != bd {
        return Err(Error::Invalid("consistent_initialize expects a single-block system".into()));
    }
    let mut x = guess.to_vec();
    for &(i, v) in fixed {
        if i >= bd {
            return Err(Error::Invalid(format!("fixed component {i} out of range")));
        }
        x[i] = v;
    }
    let free: Vec<usize> = (0..bd).filter(|i| !fixed.iter().any(|(j, _)| j == i)).collect();
    if free.len() != na {
        return Err(Error::Invalid(format!(
            "{} free components for {na} constraints",
            free.len()
        )));
    }
    if na == 0 {
        return Ok(x);
    }
    let slack = vec![0.0; bd];
    if !sys.admissible(&x, &slack) {
        return Err(Error::DomainExit("initial guess".into()));
    }

    let mut out = vec![0.0; bd];
    let mut jac = DMatrix::zeros(bd, bd);
    // (low, high) free values with residuals of opposite sign, 1-D only
    let mut bracket: Option<(f64, f64, f64, f64)> = None;
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iter {
        sys.rhs(t0, &x, &mut out)?;
        let g: Vec<f64> = out[nd..].to_vec();
        residual = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if residual <= opts.tol {
            return Ok(x);
        }
        sys.jacobian(t0, &x, &mut jac)?;
        let a = DMatrix::from_fn(na, na, |r, c| jac[(nd + r, free[c])]);
        let mut step = DVector::from_column_slice(&g);
        if !a.lu().solve_mut(&mut step) {
            return Err(Error::Singular("constraint Jacobian in the free components".into()));
        }
        step.neg_mut();

        if na == 1 {
            let xi = x[free[0]];
            let target = xi + step[0];
            if let Some((lo, _, hi, _)) = bracket {
                let (l, h) = (lo.min(hi), lo.max(hi));
                if !(target > l && target < h) {
                    step[0] = 0.5 * (lo + hi) - xi;
                }
            }
        }

        let mut trial = x.clone();
        let mut halvings = 0;
        loop {
            for (k, &i) in free.iter().enumerate() {
                trial[i] = x[i] + step[k];
            }
            if sys.admissible(&trial, &slack) && {
                let mut o = vec![0.0; bd];
                sys.rhs(t0, &trial, &mut o).is_ok()
            } {
                break;
            }
            if halvings == opts.max_halvings {
                return Err(Error::DomainExit(format!(
                    "Newton iterate for components {free:?} after {halvings} halvings"
                )));
            }
            halvings += 1;
            step *= 0.5;
        }

        if na == 1 {
            // Record a bracket when this step crosses the root.
            let i = free[0];
            let mut o = vec![0.0; bd];
            sys.rhs(t0, &trial, &mut o)?;
            let (g_old, g_new) = (g[0], o[nd]);
            if bracket.is_none() && g_old.signum() != g_new.signum() {
                bracket = Some((x[i], g_old, trial[i], g_new));
            } else if let Some((a, ga, b, gb)) = bracket {
                bracket = Some(if g_new.signum() == ga.signum() {
                    (trial[i], g_new, b, gb)
                } else {
                    (a, ga, trial[i], g_new)
                });
            }
        }

        let stagnant = free
            .iter()
            .enumerate()
            .all(|(k, &i)| step[k].abs() <= 4.0 * f64::EPSILON * x[i].abs().max(f64::MIN_POSITIVE));
        x = trial;
        if stagnant {
            // No representable improvement left.
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        what: "consistent initialization",
        iterations: opts.max_iter,
        residual,
    })
}
