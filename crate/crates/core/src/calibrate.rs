//! Least-squares calibration of kinetic parameters against a batch
//! current-density series, with gradients from the forward sensitivities.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StateVector, IDX_I};
use crate::params::{ParamId, ParameterSet};
use crate::scenario::{self, BatchStart, Closure, HOURS_PER_DAY};
use crate::sensitivity;

/// Residual assigned to every observation when the model cannot be run.
pub const FAILURE_RESIDUAL: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub times_hours: Vec<f64>,
    /// A/m^3.
    pub density: Vec<f64>,
    pub sigma: Vec<f64>,
    pub start: BatchStart,
    pub closure: Closure,
}

#[derive(Debug, Deserialize)]
struct Row {
    t_hours: f64,
    #[serde(rename = "I_density")]
    density: f64,
    sigma: Option<f64>,
}

impl Dataset {
    pub fn new(times_hours: Vec<f64>, density: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let d = Dataset {
            times_hours,
            density,
            sigma,
            start: BatchStart::default(),
            closure: Closure::default(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times_hours.len();
        if n == 0 || self.density.len() != n || self.sigma.len() != n {
            return Err(Error::Invalid("dataset columns must be non-empty and of equal length".into()));
        }
        if self.times_hours[0] < 0.0 || self.times_hours.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("observation times must be >= 0 and strictly increasing".into()));
        }
        if self.density.iter().any(|d| !d.is_finite()) {
            return Err(Error::Invalid("observed densities must be finite".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid("measurement errors must be positive".into()));
        }
        Ok(())
    }

    /// CSV with columns `t_hours,I_density,sigma`; `#` lines are comments and
    /// a missing sigma defaults to 2 A/m^3.
    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
        let (mut t, mut d, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for row in rd.deserialize() {
            let row: Row = row?;
            t.push(row.t_hours);
            d.push(row.density);
            s.push(row.sigma.unwrap_or(2.0));
        }
        Dataset::new(t, d, s)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_hours", "I_density", "sigma"])?;
        for k in 0..self.times_hours.len() {
            w.write_record([
                format!("{}", self.times_hours[k]),
                format!("{}", self.density[k]),
                format!("{}", self.sigma[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Model output at `n` uniform times over `(0, hours]` from the reference
    /// batch start, with optional uniform noise `±amplitude` drawn from a
    /// seeded generator.
    pub fn synthetic(p: &ParameterSet, hours: f64, n: usize, noise: Option<(f64, u64)>) -> Result<Self> {
        let times_hours: Vec<f64> = (1..=n).map(|k| hours * k as f64 / n as f64).collect();
        let mut data = Dataset {
            density: vec![0.0; n],
            sigma: vec![noise.map_or(2.0, |(a, _)| a); n],
            times_hours,
            start: BatchStart::default(),
            closure: Closure::default(),
        };
        let x0 = scenario::batch_initial_state(p, &data.start, data.closure)?;
        let tr = scenario::simulate(p, &x0, &data.grid_days(), &scenario::mec_config(1e-10))?;
        let mut rng = noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        for (k, x) in tr.states[1..].iter().enumerate() {
            let e = match (&mut rng, noise) {
                (Some(r), Some((a, _))) => r.random_range(-a..=a),
                _ => 0.0,
            };
            data.density[k] = p.current_density(x[IDX_I]) + e;
        }
        Ok(data)
    }

    /// Integration grid in days: t = 0 followed by the observation times.
    fn grid_days(&self) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(self.times_hours.iter().skip_while(|t| **t == 0.0).map(|t| t / HOURS_PER_DAY))
            .collect()
    }

    fn initial_state(&self, p: &ParameterSet) -> Result<StateVector> {
        scenario::batch_initial_state(p, &self.start, self.closure)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub r: DVector<f64>,
    /// `dr/dtheta`.
    pub jacobian: DMatrix<f64>,
    /// The simulation failed and `r` is the fixed penalty.
    pub failed: bool,
}

impl Residuals {
    pub fn cost(&self) -> f64 {
        0.5 * self.r.norm_squared()
    }
}

fn with_theta(base: &ParameterSet, ids: &[ParamId], theta: &[f64]) -> ParameterSet {
    let mut p = base.clone();
    for (&id, &v) in ids.iter().zip(theta) {
        p.set(id, v);
    }
    p
}

/// `r_k = I_density(t_k; theta) - obs_k` (divided by sigma_k when
/// `weighted`) and its Jacobian from the sensitivity equations.
pub fn residuals(
    theta: &[f64],
    ids: &[ParamId],
    data: &Dataset,
    base: &ParameterSet,
    rtol: f64,
    weighted: bool,
) -> Result<Residuals> {
    if theta.len() != ids.len() {
        return Err(Error::Invalid("one value per fitted parameter is required".into()));
    }
    let n = data.times_hours.len();
    let p = with_theta(base, ids, theta);
    let penalty = || Residuals {
        r: DVector::from_element(n, FAILURE_RESIDUAL),
        jacobian: DMatrix::zeros(n, ids.len()),
        failed: true,
    };
    if p.validate().is_err() {
        return Ok(penalty());
    }
    let run = data.initial_state(&p).and_then(|x0| {
        sensitivity::solve_sharded(&p, &x0, data.closure, ids, &data.grid_days(), &scenario::mec_config(rtol))
    });
    let run = match run {
        Ok(r) => r,
        Err(Error::Io(e)) => return Err(Error::Io(e)),
        Err(_) => return Ok(penalty()),
    };
    // drop the t = 0 row unless it was observed
    let skip = run.trajectory.times.len() - n;
    let k = 1000.0 / p.v;
    let mut r = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, ids.len());
    for i in 0..n {
        let w = if weighted { 1.0 / data.sigma[i] } else { 1.0 };
        r[i] = w * (k * run.trajectory.states[i + skip][IDX_I] - data.density[i]);
        for (j, b) in run.blocks.iter().enumerate() {
            jac[(i, j)] = w * b.semi_relative[i + skip] / b.value;
        }
    }
    Ok(Residuals {
        r,
        jacobian: jac,
        failed: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when the gradient norm falls below this fraction of its initial value.
    pub grad_tol: f64,
    /// Stop when a step changes theta by less than this relative amount.
    pub step_tol: f64,
    /// Relative tolerance of the simulations.
    pub rtol: f64,
    /// Per-parameter bounds; `(0, 10 x initial]` when absent.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Divide residuals by the measurement error.
    pub weighted: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            rtol: 1e-8,
            bounds: None,
            weighted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Gradient,
    Step,
    MaxIterations,
    /// Damping grew without bound; no downhill step exists at machine precision.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub cost: f64,
    pub gradient_norm: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<ParamId>,
    pub theta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub cost: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub reason: StopReason,
    pub trace: Vec<Iterate>,
    /// `s^2 (J^T J)^{-1}` with `s^2 = 2 cost / (n - p)`; empty when singular.
    pub covariance: Vec<Vec<f64>>,
}

impl FitResult {
    pub fn fitted_params(&self, base: &ParameterSet) -> ParameterSet {
        with_theta(base, &self.params, &self.theta)
    }
}

fn default_bounds(theta0: &[f64]) -> Vec<(f64, f64)> {
    theta0.iter().map(|t| (0.0, 10.0 * t.abs())).collect()
}

/// Keeps theta strictly inside an open lower bound.
fn project(theta: &mut [f64], bounds: &[(f64, f64)], from: &[f64]) {
    for (k, t) in theta.iter_mut().enumerate() {
        let (lo, hi) = bounds[k];
        if *t <= lo {
            *t = lo + 0.5 * (from[k] - lo);
        }
        if *t > hi {
            *t = hi;
        }
    }
}

/// Levenberg-Marquardt with Marquardt scaling, Nielsen's damping update and
/// projection onto the bounds.
pub fn fit(data: &Dataset, ids: &[ParamId], theta0: &[f64], base: &ParameterSet, opts: &FitOptions) -> Result<FitResult> {
    data.validate()?;
    let np = ids.len();
    if np == 0 || theta0.len() != np {
        return Err(Error::Invalid("one starting value per fitted parameter is required".into()));
    }
    let bounds = opts.bounds.clone().unwrap_or_else(|| default_bounds(theta0));
    if bounds.len() != np || theta0.iter().zip(&bounds).any(|(t, (lo, hi))| !(*t > *lo && *t <= *hi)) {
        return Err(Error::Invalid("starting values must lie inside the bounds".into()));
    }
    let eval = |th: &[f64]| residuals(th, ids, data, base, opts.rtol, opts.weighted);
    let mut theta = theta0.to_vec();
    let mut cur = eval(&theta)?;
    if cur.failed {
        return Err(Error::Invalid("the model cannot be run at the starting values".into()));
    }
    let grad = |r: &Residuals| r.jacobian.transpose() * &r.r;
    let mut g = grad(&cur);
    let g0 = g.amax();
    let mut jtj = cur.jacobian.transpose() * &cur.jacobian;
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut trace = vec![Iterate {
        iteration: 0,
        theta: theta.clone(),
        cost: cur.cost(),
        gradient_norm: g.norm(),
        damping: mu,
        accepted: true,
    }];
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if g.amax() <= opts.grad_tol * g0 {
            reason = StopReason::Gradient;
            break;
        }
        iterations += 1;
        let mut a = jtj.clone();
        for k in 0..np {
            a[(k, k)] += mu * jtj[(k, k)].max(1e-300);
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
        };
        let mut trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
        project(&mut trial, &bounds, &theta);
        let d = DVector::from_iterator(np, trial.iter().zip(&theta).map(|(a, b)| a - b));
        let small = d.iter().zip(&theta).all(|(s, t)| s.abs() <= opts.step_tol * t.abs().max(opts.step_tol));
        if small {
            reason = StopReason::Step;
            break;
        }
        let pred = -(g.dot(&d) + 0.5 * (&cur.jacobian * &d).norm_squared());
        let next = eval(&trial)?;
        let rho = if next.failed || pred <= 0.0 {
            -1.0
        } else {
            (cur.cost() - next.cost()) / pred
        };
        let accepted = rho > 0.0;
        if accepted {
            theta = trial;
            cur = next;
            g = grad(&cur);
            jtj = cur.jacobian.transpose() * &cur.jacobian;
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
        } else {
            mu *= nu;
            nu *= 2.0;
        }
        trace.push(Iterate {
            iteration: iterations,
            theta: theta.clone(),
            cost: cur.cost(),
            gradient_norm: g.norm(),
            damping: mu,
            accepted,
        });
        if !mu.is_finite() || mu > 1e30 {
            reason = StopReason::Stalled;
            break;
        }
    }
    let n = cur.r.len();
    let covariance = if n > np {
        let s2 = 2.0 * cur.cost() / (n - np) as f64;
        jtj.clone()
            .try_inverse()
            .map(|inv| (0..np).map(|i| (0..np).map(|j| s2 * inv[(i, j)]).collect()).collect())
            .unwrap_or_default()
    } else {
        Vec::new()
    };
    Ok(FitResult {
        params: ids.to_vec(),
        theta,
        residuals: cur.r.iter().copied().collect(),
        cost: cur.cost(),
        gradient_norm: g.norm(),
        iterations,
        reason,
        trace,
        covariance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub params: Vec<ParamId>,
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    pub threshold: f64,
    pub identifiable: bool,
    /// Removed one at a time, each removal lowering the condition number the
    /// most, until the rest passes the threshold.
    pub flagged: Vec<ParamId>,
}

fn scaled_jacobian(ids: &[ParamId], data: &Dataset, base: &ParameterSet) -> Result<DMatrix<f64>> {
    let x0 = data.initial_state(base)?;
    let run = sensitivity::solve_sharded(base, &x0, data.closure, ids, &data.grid_days(), &scenario::mec_config(1e-8))?;
    let n = data.times_hours.len();
    let skip = run.trajectory.times.len() - n;
    Ok(DMatrix::from_fn(n, ids.len(), |i, j| run.blocks[j].semi_relative[i + skip] / data.sigma[i]))
}

fn condition(m: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let c = match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    };
    (sv, c)
}

fn columns(m: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), keep.len(), |i, j| m[(i, keep[j])])
}

/// Practical identifiability from the semi-relative sensitivity matrix over
/// the dataset times: the set passes when its condition number stays below
/// `threshold`.
pub fn identifiability_screen(ids: &[ParamId], data: &Dataset, base: &ParameterSet, threshold: f64) -> Result<IdentifiabilityReport> {
    if ids.is_empty() {
        return Err(Error::Invalid("no parameters to screen".into()));
    }
    let jac = scaled_jacobian(ids, data, base)?;
    let (singular_values, condition_number) = condition(&jac);
    let mut keep: Vec<usize> = (0..ids.len()).collect();
    let mut flagged = Vec::new();
    let mut c = condition_number;
    while c > threshold && !keep.is_empty() {
        if keep.len() == 1 {
            flagged.push(ids[keep[0]]);
            break;
        }
        let (pos, best) = (0..keep.len())
            .map(|k| {
                let mut rest = keep.clone();
                rest.remove(k);
                (k, condition(&columns(&jac, &rest)).1)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        flagged.push(ids[keep.remove(pos)]);
        c = best;
    }
    Ok(IdentifiabilityReport {
        params: ids.to_vec(),
        singular_values,
        condition_number,
        threshold,
        identifiable: condition_number <= threshold,
        flagged,
    })
}
