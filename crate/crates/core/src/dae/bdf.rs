// Variable-order BDF in the Nordsieck-like difference form of Shampine's
// ode15s/scipy BDF (kappa = 0, i.e. plain BDF), extended to semi-explicit
// index-1 DAEs: the iteration matrix is M - cJ with M = diag(1 for y, 0 for
// z), the error test skips algebraic components, and accepted steps are
// projected back onto g = 0.

use nalgebra::{DMatrix, DVector, LU, Dyn};

use super::{DaeSystem, IntegratorConfig, MeshStep, SolverStats, Trajectory};
use crate::error::{Error, Result};

const MAX_ORDER: usize = 5;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MAX_DAMPING: usize = 10;
const NEWTON_DIVERGENCE: f64 = 2.0;
const NEWTON_RATE_DECAY: f64 = 0.3;
const REPLAY_NEWTON_ITER: usize = 30;
const REPLAY_NEWTON_TOL: f64 = 1e-9;

fn compute_r(order: usize, factor: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(order + 1, order + 1);
    for j in 0..=order {
        m[(0, j)] = 1.0;
    }
    for i in 1..=order {
        for j in 1..=order {
            m[(i, j)] = (i as f64 - 1.0 - factor * j as f64) / i as f64;
        }
    }
    for i in 1..=order {
        for j in 0..=order {
            m[(i, j)] *= m[(i - 1, j)];
        }
    }
    m
}

fn change_d(d: &mut [Vec<f64>], order: usize, factor: f64) {
    let ru = compute_r(order, factor) * compute_r(order, 1.0);
    let n = d[0].len();
    let old: Vec<Vec<f64>> = d[..=order].to_vec();
    for i in 0..=order {
        for c in 0..n {
            let mut acc = 0.0;
            for (k, row) in old.iter().enumerate() {
                acc += ru[(k, i)] * row[c];
            }
            d[i][c] = acc;
        }
    }
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn min_step(t: f64) -> f64 {
    10.0 * (t.next_up() - t).abs()
}

struct Bdf<'a, S: DaeSystem + ?Sized> {
    sys: &'a S,
    rtol: f64,
    atol: Vec<f64>,
    alg: Vec<bool>,
    max_order: usize,
    max_step: f64,
    newton_maxiter: usize,
    newton_tol: f64,

    t: f64,
    x: Vec<f64>,
    h_abs: f64,
    order: usize,
    n_equal_steps: usize,
    d: Vec<Vec<f64>>,
    jac: DMatrix<f64>,
    jac_current: bool,
    lu: Option<(f64, LU<f64, Dyn, Dyn>)>,

    gamma: [f64; MAX_ORDER + 1],
    alpha: [f64; MAX_ORDER + 1],
    error_const: [f64; MAX_ORDER + 2],
    stats: SolverStats,
    mesh: Option<Vec<MeshStep>>,
}

impl<'a, S: DaeSystem + ?Sized> Bdf<'a, S> {
    fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.stats.rhs_evaluations += 1;
        self.sys.rhs(t, x, out)?;
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain("non-finite residual".into()))
        }
    }

    fn update_jacobian(&mut self, t: f64, x: &[f64]) -> Result<()> {
        self.stats.jacobian_evaluations += 1;
        self.sys.jacobian(t, x, &mut self.jac)?;
        self.jac_current = true;
        self.lu = None;
        Ok(())
    }

    fn factor(&mut self, c: f64) -> Result<()> {
        if matches!(&self.lu, Some((c0, _)) if *c0 == c) {
            return Ok(());
        }
        let bd = self.sys.block_dim();
        let mut a = DMatrix::zeros(bd, bd);
        for r in 0..bd {
            for k in 0..bd {
                a[(r, k)] = if self.alg[r] {
                    -self.jac[(r, k)]
                } else {
                    -c * self.jac[(r, k)] + if r == k { 1.0 } else { 0.0 }
                };
            }
        }
        self.stats.factorizations += 1;
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("BDF iteration matrix".into()));
        }
        self.lu = Some((c, lu));
        Ok(())
    }

    fn solve_blocks(&self, rhs: &mut [f64]) {
        let (_, lu) = self.lu.as_ref().expect("factorized");
        let bd = self.sys.block_dim();
        for chunk in rhs.chunks_mut(bd) {
            let mut b = DVector::from_column_slice(chunk);
            lu.solve_mut(&mut b);
            chunk.copy_from_slice(b.as_slice());
        }
    }

    fn scale_of(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.atol)
            .map(|(v, a)| a + self.rtol * v.abs())
            .collect()
    }

    fn diff_norm(&self, v: &[f64], scale: &[f64]) -> f64 {
        rms(v
            .iter()
            .zip(scale)
            .zip(&self.alg)
            .filter(|(_, a)| !**a)
            .map(|((x, s), _)| x / s))
    }

    // Simplified Newton for d in  M (psi + d) = c F(t_new, y_pred + d).
    // The convergence test is CVODE's: ||dy|| * min(1, rate) <= tol, and
    // the iteration is abandoned only when a correction more than doubles.
    // Corrections at the noise floor then count as converged instead of
    // diverging.
    // Returns (converged, iterations, y, d).
    fn solve_bdf_system(
        &mut self,
        t_new: f64,
        y_pred: &[f64],
        c: f64,
        psi: &[f64],
        scale: &[f64],
    ) -> (bool, usize, Vec<f64>, Vec<f64>) {
        let n = y_pred.len();
        let mut y = y_pred.to_vec();
        let mut d = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut dy_norm_old: Option<f64> = None;
        // convergence rate estimate, as in CVODE
        let mut crate_est = 1.0f64;
        let mut converged = false;
        let mut k = 0;
        while k < self.newton_maxiter {
            if self.eval(t_new, &y, &mut f).is_err() {
                break;
            }
            let mut dy: Vec<f64> = (0..n)
                .map(|i| {
                    if self.alg[i] {
                        f[i]
                    } else {
                        c * f[i] - psi[i] - d[i]
                    }
                })
                .collect();
            self.solve_blocks(&mut dy);

            let mut trial: Vec<f64> = y.iter().zip(&dy).map(|(a, b)| a + b).collect();
            let mut halvings = 0;
            while !self.sys.admissible(&trial, &self.atol) {
                if halvings == MAX_DAMPING {
                    break;
                }
                halvings += 1;
                for (v, s) in dy.iter_mut().zip(trial.iter_mut().zip(&y)) {
                    *v *= 0.5;
                    *s.0 = s.1 + *v;
                }
            }
            if halvings == MAX_DAMPING && !self.sys.admissible(&trial, &self.atol) {
                break;
            }

            let dy_norm = rms(dy.iter().zip(scale).map(|(a, s)| a / s));
            if let Some(old) = dy_norm_old {
                if dy_norm > NEWTON_DIVERGENCE * old {
                    k += 1;
                    break;
                }
                crate_est = (NEWTON_RATE_DECAY * crate_est).max(dy_norm / old);
            }
            y = trial;
            for (a, b) in d.iter_mut().zip(&dy) {
                *a += b;
            }
            k += 1;
            if halvings == 0 && dy_norm * crate_est.min(1.0) <= self.newton_tol {
                converged = true;
                break;
            }
            dy_norm_old = Some(dy_norm);
        }
        self.stats.newton_iterations += k;
        (converged, k, y, d)
    }

    /// Newton on the algebraic components with the differential ones held.
    /// Returns the correction that was applied.
    fn project(&mut self, t: f64, x: &mut [f64]) -> Vec<f64> {
        let n = x.len();
        let mut total = vec![0.0; n];
        if self.sys.n_alg() == 0 {
            return total;
        }
        let nd = self.sys.n_diff();
        let na = self.sys.n_alg();
        let bd = nd + na;
        let mut f = vec![0.0; n];
        let mut jac = DMatrix::zeros(bd, bd);
        for _ in 0..8 {
            if self.eval(t, x, &mut f).is_err() || self.sys.jacobian(t, x, &mut jac).is_err() {
                break;
            }
            let jaa = jac.view((nd, nd), (na, na)).into_owned();
            let lu = jaa.lu();
            let mut worst = 0.0f64;
            let mut step = vec![0.0; n];
            for b in 0..self.sys.blocks() {
                let mut r = DVector::from_iterator(na, (0..na).map(|i| f[b * bd + nd + i]));
                if !lu.solve_mut(&mut r) {
                    return total;
                }
                for i in 0..na {
                    let idx = b * bd + nd + i;
                    step[idx] = -r[i];
                    let s = self.atol[idx] + self.rtol * x[idx].abs();
                    worst = worst.max(r[i].abs() / s);
                }
            }
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            if !self.sys.admissible(&trial, &self.atol) {
                break;
            }
            x.copy_from_slice(&trial);
            for (a, b) in total.iter_mut().zip(&step) {
                *a += b;
            }
            if worst < 1e-6 {
                break;
            }
        }
        total
    }

    fn select_initial_step(&mut self, t_bound: f64, f0: &[f64]) -> f64 {
        let interval = (t_bound - self.t).abs();
        if interval == 0.0 {
            return 0.0;
        }
        let scale = self.scale_of(&self.x.clone());
        let d0 = self.diff_norm(&self.x, &scale);
        let d1 = self.diff_norm(f0, &scale);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(interval);
        let mut y1: Vec<f64> = self
            .x
            .iter()
            .zip(f0)
            .zip(&self.alg)
            .map(|((x, f), a)| if *a { *x } else { x + h0 * f })
            .collect();
        let mut f1 = vec![0.0; y1.len()];
        let ok = self.sys.admissible(&y1, &self.atol) && {
            self.project(self.t + h0, &mut y1);
            self.eval(self.t + h0, &y1, &mut f1).is_ok()
        };
        let h1 = if ok {
            let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
            let d2 = self.diff_norm(&diff, &scale) / h0;
            if d1 <= 1e-15 && d2 <= 1e-15 {
                (h0 * 1e-3).max(1e-6)
            } else {
                (0.01 / d1.max(d2)).sqrt()
            }
        } else {
            h0 * 1e-3
        };
        (100.0 * h0).min(h1).min(interval).min(self.max_step)
    }

    fn step(&mut self, t_bound: f64) -> Result<()> {
        let t = self.t;
        let min_h = min_step(t);
        let mut h_abs = self.h_abs;
        if h_abs > self.max_step {
            change_d(&mut self.d, self.order, self.max_step / h_abs);
            h_abs = self.max_step;
            self.n_equal_steps = 0;
        } else if h_abs < min_h {
            change_d(&mut self.d, self.order, min_h / h_abs);
            h_abs = min_h;
            self.n_equal_steps = 0;
        }
        let order = self.order;
        let n = self.x.len();

        let (t_new, y_new, d, n_iter, error_norm, scale) = loop {
            if h_abs < min_h {
                return Err(Error::StepSizeUnderflow { t, h: h_abs });
            }
            let mut t_new = t + h_abs;
            if t_new > t_bound {
                t_new = t_bound;
                change_d(&mut self.d, order, (t_new - t) / h_abs);
                self.n_equal_steps = 0;
            }
            let h = t_new - t;
            h_abs = h;

            let y_pred: Vec<f64> = (0..n)
                .map(|c| self.d[..=order].iter().map(|row| row[c]).sum())
                .collect();
            let scale = self.scale_of(&y_pred);
            let psi: Vec<f64> = (0..n)
                .map(|c| {
                    (1..=order)
                        .map(|j| self.d[j][c] * self.gamma[j])
                        .sum::<f64>()
                        / self.alpha[order]
                })
                .collect();
            let c = h / self.alpha[order];

            let mut result = None;
            loop {
                if self.factor(c).is_err() {
                    if self.jac_current {
                        break;
                    }
                    self.update_jacobian(t_new, &y_pred)?;
                    continue;
                }
                let (converged, n_iter, y_new, d) =
                    self.solve_bdf_system(t_new, &y_pred, c, &psi, &scale);
                if converged {
                    result = Some((n_iter, y_new, d));
                    break;
                }
                if self.jac_current {
                    break;
                }
                if self.update_jacobian(t_new, &y_pred).is_err() {
                    break;
                }
            }

            let Some((n_iter, y_new, d)) = result else {
                self.stats.newton_failures += 1;
                self.stats.rejected_steps += 1;
                h_abs *= 0.5;
                change_d(&mut self.d, order, 0.5);
                self.n_equal_steps = 0;
                continue;
            };

            let safety = 0.9 * (2 * self.newton_maxiter + 1) as f64
                / (2 * self.newton_maxiter + n_iter) as f64;
            let scale = self.scale_of(&y_new);
            let err: Vec<f64> = d.iter().map(|v| self.error_const[order] * v).collect();
            let error_norm = self.diff_norm(&err, &scale);
            if error_norm > 1.0 {
                self.stats.rejected_steps += 1;
                let factor = MIN_FACTOR.max(safety * error_norm.powf(-1.0 / (order as f64 + 1.0)));
                h_abs *= factor;
                change_d(&mut self.d, order, factor);
                self.n_equal_steps = 0;
                continue;
            }
            break (t_new, y_new, d, n_iter, error_norm, scale);
        };

        self.h_abs = h_abs;
        self.accept(t_new, y_new, d);
        self.n_equal_steps += 1;

        if self.n_equal_steps < order + 1 {
            return Ok(());
        }

        let safety = 0.9 * (2 * self.newton_maxiter + 1) as f64
            / (2 * self.newton_maxiter + n_iter) as f64;
        let error_m_norm = if order > 1 {
            let e: Vec<f64> = self.d[order].iter().map(|v| self.error_const[order - 1] * v).collect();
            self.diff_norm(&e, &scale)
        } else {
            f64::INFINITY
        };
        let error_p_norm = if order < self.max_order {
            let e: Vec<f64> = self.d[order + 2]
                .iter()
                .map(|v| self.error_const[order + 1] * v)
                .collect();
            self.diff_norm(&e, &scale)
        } else {
            f64::INFINITY
        };
        let norms = [error_m_norm, error_norm, error_p_norm];
        let mut best = 0;
        let mut factors = [0.0; 3];
        for k in 0..3 {
            factors[k] = norms[k].powf(-1.0 / (order + k) as f64);
            if factors[k] > factors[best] {
                best = k;
            }
        }
        let new_order = order + best - 1;
        self.order = new_order;
        let factor = MAX_FACTOR.min(safety * factors[best]);
        self.h_abs *= factor;
        change_d(&mut self.d, new_order, factor);
        self.n_equal_steps = 0;
        Ok(())
    }

    // Projects the corrector result, shifts the difference array and
    // advances time. `self.h_abs` must already hold the step just taken.
    fn accept(&mut self, t_new: f64, mut y_new: Vec<f64>, mut d: Vec<f64>) {
        let n = y_new.len();
        let order = self.order;
        let correction = self.project(t_new, &mut y_new);
        for (a, b) in d.iter_mut().zip(&correction) {
            *a += b;
        }
        self.stats.steps += 1;
        self.t = t_new;
        self.x = y_new;
        self.jac_current = false;
        if let Some(mesh) = self.mesh.as_mut() {
            mesh.push(MeshStep { t: t_new, order });
        }
        for c in 0..n {
            self.d[order + 2][c] = d[c] - self.d[order + 1][c];
            self.d[order + 1][c] = d[c];
        }
        for i in (0..=order).rev() {
            for c in 0..n {
                self.d[i][c] += self.d[i + 1][c];
            }
        }
    }

    /// One step with prescribed end time and order, no error control. The
    /// corrector is iterated to the noise floor so that the discrete
    /// solution is a smooth function of the problem data.
    fn replay_step(&mut self, rec: MeshStep) -> Result<()> {
        let t = self.t;
        let h = rec.t - t;
        if !(h > 0.0) || !(1..=MAX_ORDER).contains(&rec.order) {
            return Err(Error::Invalid(format!("replay mesh entry at t = {} is not usable", rec.t)));
        }
        self.order = rec.order;
        if h != self.h_abs {
            change_d(&mut self.d, self.order, h / self.h_abs);
            self.h_abs = h;
        }
        let order = self.order;
        let n = self.x.len();
        let y_pred: Vec<f64> = (0..n)
            .map(|c| self.d[..=order].iter().map(|row| row[c]).sum())
            .collect();
        let scale = self.scale_of(&y_pred);
        let psi: Vec<f64> = (0..n)
            .map(|c| (1..=order).map(|j| self.d[j][c] * self.gamma[j]).sum::<f64>() / self.alpha[order])
            .collect();
        let c = h / self.alpha[order];

        self.update_jacobian(rec.t, &y_pred)?;
        self.factor(c)?;
        let mut y = y_pred.clone();
        let mut d = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        for k in 0..REPLAY_NEWTON_ITER {
            self.eval(rec.t, &y, &mut f)?;
            let mut dy: Vec<f64> = (0..n)
                .map(|i| if self.alg[i] { f[i] } else { c * f[i] - psi[i] - d[i] })
                .collect();
            self.solve_blocks(&mut dy);
            let dy_norm = rms(dy.iter().zip(&scale).map(|(a, s)| a / s));
            self.stats.newton_iterations += 1;
            for i in 0..n {
                y[i] += dy[i];
                d[i] += dy[i];
            }
            if dy_norm <= REPLAY_NEWTON_TOL {
                break;
            }
            if dy_norm < 0.5 * best {
                best = dy_norm;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled == 3 {
                    break;
                }
            }
            if k + 1 == REPLAY_NEWTON_ITER && dy_norm > self.newton_tol {
                return Err(Error::NoConvergence {
                    what: "replayed BDF corrector",
                    iterations: REPLAY_NEWTON_ITER,
                    residual: dy_norm,
                });
            }
        }
        if !self.sys.admissible(&y, &self.atol) {
            return Err(Error::DomainExit(format!("replayed step to t = {}", rec.t)));
        }
        self.accept(rec.t, y, d);
        Ok(())
    }

    fn interpolate(&self, t: f64) -> Vec<f64> {
        let n = self.x.len();
        let h = self.h_abs;
        let mut y = self.d[0].clone();
        let mut p = 1.0;
        for j in 1..=self.order {
            let i = (j - 1) as f64;
            p *= (t - (self.t - i * h)) / ((i + 1.0) * h);
            for c in 0..n {
                y[c] += self.d[j][c] * p;
            }
        }
        y
    }
}

/// Integrates from `(output_times[0], x0)` and reports the solution at every
/// requested time. `x0` must be consistent; algebraic components of every
/// reported state are projected onto the constraint.
pub fn integrate<S: DaeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    config: &IntegratorConfig,
    output_times: &[f64],
) -> Result<Trajectory> {
    config.validate()?;
    let n = sys.dim();
    if x0.len() != n {
        return Err(Error::Invalid(format!("initial state has {} entries, expected {n}", x0.len())));
    }
    if output_times.is_empty() {
        return Err(Error::Invalid("no output times".into()));
    }
    if output_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("output times must be strictly increasing".into()));
    }
    let bd = sys.block_dim();
    let alg: Vec<bool> = (0..n).map(|i| sys.is_algebraic(i)).collect();
    let mut gamma = [0.0; MAX_ORDER + 1];
    for k in 1..=MAX_ORDER {
        gamma[k] = gamma[k - 1] + 1.0 / k as f64;
    }
    let mut error_const = [0.0; MAX_ORDER + 2];
    for (k, e) in error_const.iter_mut().enumerate() {
        *e = 1.0 / (k as f64 + 1.0);
    }
    let rtol = config.rtol.max(100.0 * f64::EPSILON);
    let mut s = Bdf {
        sys,
        rtol,
        atol: config.atol_vec(n),
        alg,
        max_order: config.max_order,
        max_step: config.max_step,
        newton_maxiter: config.max_newton_iter,
        newton_tol: (10.0 * f64::EPSILON / rtol).max(0.03f64.min(rtol.sqrt())),
        t: output_times[0],
        x: x0.to_vec(),
        h_abs: 0.0,
        order: 1,
        n_equal_steps: 0,
        d: vec![vec![0.0; n]; MAX_ORDER + 3],
        jac: DMatrix::zeros(bd, bd),
        jac_current: false,
        lu: None,
        gamma,
        alpha: gamma,
        error_const,
        stats: SolverStats::default(),
        mesh: config.record_mesh.then(Vec::new),
    };

    let mut times = vec![output_times[0]];
    let mut states = vec![x0.to_vec()];
    let t_bound = *output_times.last().unwrap();
    if output_times.len() == 1 {
        return Ok(Trajectory { times, states, stats: s.stats, mesh: s.mesh.unwrap_or_default() });
    }
    let replay = config.replay.as_deref();
    if let Some(mesh) = replay {
        if mesh.last().map(|m| m.t) != Some(t_bound) {
            return Err(Error::Invalid("replay mesh must end at the last output time".into()));
        }
    }

    let mut f0 = vec![0.0; n];
    s.eval(s.t, x0, &mut f0)?;
    s.h_abs = match (replay, config.first_step) {
        (Some(mesh), _) => mesh[0].t - s.t,
        (None, Some(h)) => h,
        (None, None) => s.select_initial_step(t_bound, &f0),
    };
    s.update_jacobian(s.t, x0)?;
    s.d[0] = x0.to_vec();
    s.d[1] = (0..n)
        .map(|i| if s.alg[i] { 0.0 } else { f0[i] * s.h_abs })
        .collect();

    let mut next = 1;
    while next < output_times.len() {
        if s.stats.steps >= config.max_steps {
            return Err(Error::TooManySteps(config.max_steps));
        }
        match replay {
            Some(mesh) => {
                let rec = *mesh
                    .get(s.stats.steps)
                    .ok_or_else(|| Error::Invalid("replay mesh exhausted".into()))?;
                s.replay_step(rec)?
            }
            None => s.step(t_bound)?,
        }
        while next < output_times.len() && output_times[next] <= s.t {
            let tq = output_times[next];
            let x = if tq == s.t {
                s.x.clone()
            } else {
                let mut x = s.interpolate(tq);
                s.project(tq, &mut x);
                x
            };
            times.push(tq);
            states.push(x);
            next += 1;
        }
    }
    Ok(Trajectory { times, states, stats: s.stats, mesh: s.mesh.unwrap_or_default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    // y' = -y, 0 = z - y
    struct Linear;

    impl DaeSystem for Linear {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = -x[0];
            out[1] = x[1] - x[0];
            Ok(())
        }
        fn jacobian(&self, _t: f64, _x: &[f64], j: &mut DMatrix<f64>) -> Result<()> {
            j[(0, 0)] = -1.0;
            j[(0, 1)] = 0.0;
            j[(1, 0)] = -1.0;
            j[(1, 1)] = 1.0;
            Ok(())
        }
    }

    // y' = lambda y
    struct Scalar(f64);

    impl DaeSystem for Scalar {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            0
        }
        fn rhs(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = self.0 * x[0];
            Ok(())
        }
        fn jacobian(&self, _t: f64, _x: &[f64], j: &mut DMatrix<f64>) -> Result<()> {
            j[(0, 0)] = self.0;
            Ok(())
        }
    }

    fn grid(t1: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|k| t1 * k as f64 / n as f64).collect()
    }

    #[test]
    fn compute_r_identity_at_unit_factor_squares_to_identity() {
        for order in 1..=5 {
            let u = compute_r(order, 1.0);
            let uu = &u * &u;
            assert!((uu - DMatrix::identity(order + 1, order + 1)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn linear_dae_matches_exponential() {
        for rtol in [1e-4, 1e-6, 1e-8] {
            let cfg = IntegratorConfig::with_tolerances(rtol, vec![rtol]);
            let tr = integrate(&Linear, &[1.0, 1.0], &cfg, &grid(5.0, 50)).unwrap();
            for (t, x) in tr.times.iter().zip(&tr.states) {
                let exact = (-t).exp();
                assert!((x[0] - exact).abs() <= 10.0 * rtol, "t={t} rtol={rtol}: {}", x[0] - exact);
                assert!((x[1] - x[0]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tighter_tolerance_reduces_error() {
        let err = |rtol: f64| {
            let cfg = IntegratorConfig::with_tolerances(rtol, vec![rtol * 1e-2]);
            let tr = integrate(&Linear, &[1.0, 1.0], &cfg, &grid(4.0, 40)).unwrap();
            tr.times
                .iter()
                .zip(&tr.states)
                .map(|(t, x)| (x[0] - (-t).exp()).abs())
                .fold(0.0, f64::max)
        };
        let coarse = err(1e-4);
        let fine = err(1e-7);
        assert!(fine < coarse / 10.0, "{fine} vs {coarse}");
    }

    #[test]
    fn every_max_order_solves_the_scalar_test_equation() {
        for lambda in [-1.0, -50.0, 0.5] {
            for max_order in 1..=5 {
                let mut cfg = IntegratorConfig::with_tolerances(1e-7, vec![1e-10]);
                cfg.max_order = max_order;
                let tr = integrate(&Scalar(lambda), &[1.0], &cfg, &grid(2.0, 20)).unwrap();
                for (t, x) in tr.times.iter().zip(&tr.states) {
                    let exact = (lambda * t).exp();
                    assert!(
                        (x[0] - exact).abs() <= 1e-3 * exact.max(1e-3),
                        "lambda={lambda} order={max_order} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn higher_orders_take_fewer_steps() {
        let steps = |k: usize| {
            let mut cfg = IntegratorConfig::with_tolerances(1e-6, vec![1e-9]);
            cfg.max_order = k;
            integrate(&Scalar(-1.0), &[1.0], &cfg, &[0.0, 10.0]).unwrap().stats.steps
        };
        assert!(steps(5) < steps(2) && steps(2) < steps(1));
    }

    #[test]
    fn stiff_scalar_does_not_need_tiny_steps() {
        let cfg = IntegratorConfig::with_tolerances(1e-6, vec![1e-9]);
        let tr = integrate(&Scalar(-1e8), &[1.0], &cfg, &[0.0, 100.0]).unwrap();
        assert!(tr.stats.steps < 500, "{}", tr.stats.steps);
        assert!(tr.states[1][0].abs() < 1e-9);
    }

    #[test]
    fn single_output_time_returns_initial_state() {
        let tr = integrate(&Linear, &[1.0, 1.0], &IntegratorConfig::default(), &[0.0]).unwrap();
        assert_eq!(tr.states, vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn rejects_unsorted_times_and_wrong_dimension() {
        let cfg = IntegratorConfig::default();
        assert!(integrate(&Linear, &[1.0, 1.0], &cfg, &[0.0, 2.0, 1.0]).is_err());
        assert!(integrate(&Linear, &[1.0], &cfg, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let cfg = IntegratorConfig::with_tolerances(1e-6, vec![1e-9]);
        let a = integrate(&Linear, &[1.0, 1.0], &cfg, &grid(3.0, 30)).unwrap();
        let b = integrate(&Linear, &[1.0, 1.0], &cfg, &grid(3.0, 30)).unwrap();
        assert_eq!(a, b);
    }
}
