//! Forward sensitivities `s_i = dy/dp_i` of the DAE solution.
//!
//! Each parameter adds one block `[s_y ; s_z]` to the unknown vector. The
//! block satisfies the linearized equations
//! `s_y' = f_y s_y + f_z s_z + f_p`, `0 = g_y s_y + g_z s_z + g_p`, whose
//! iteration matrix is the state's own, so the integrator reuses one LU for
//! every block (simultaneous corrector).

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dae::{self, DaeSystem, IntegratorConfig, Trajectory};
use crate::error::{Error, Result};
use crate::model::{self, LogGapMec, StateVector, IDX_I, IDX_MOX, IDX_XE, N_DIFF, N_STATE};
use crate::params::{ParamId, ParameterSet};
use crate::scenario::Closure;

/// A DAE depending on `n_params()` parameters with known `dF/dp_k`.
pub trait ParametricDae: DaeSystem {
    fn n_params(&self) -> usize;

    /// Writes `(df/dp_k ; dg/dp_k)` for the state `x` (one block).
    fn param_derivative(&self, t: f64, x: &[f64], k: usize, out: &mut [f64]) -> Result<()>;
}

/// The state augmented with one sensitivity block per parameter.
pub struct SensitivitySystem<'a, S: ParametricDae + ?Sized> {
    pub inner: &'a S,
}

impl<S: ParametricDae + ?Sized> DaeSystem for SensitivitySystem<'_, S> {
    fn n_diff(&self) -> usize {
        self.inner.n_diff()
    }

    fn n_alg(&self) -> usize {
        self.inner.n_alg()
    }

    fn blocks(&self) -> usize {
        1 + self.inner.n_params()
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let bd = self.block_dim();
        self.inner.rhs(t, &x[..bd], &mut out[..bd])?;
        let mut jac = DMatrix::zeros(bd, bd);
        self.inner.jacobian(t, &x[..bd], &mut jac)?;
        for k in 0..self.inner.n_params() {
            let lo = (k + 1) * bd;
            let o = &mut out[lo..lo + bd];
            self.inner.param_derivative(t, &x[..bd], k, o)?;
            let s = &x[lo..lo + bd];
            for r in 0..bd {
                o[r] += (0..bd).map(|c| jac[(r, c)] * s[c]).sum::<f64>();
            }
        }
        Ok(())
    }

    fn jacobian(&self, t: f64, x: &[f64], jac: &mut DMatrix<f64>) -> Result<()> {
        self.inner.jacobian(t, &x[..self.block_dim()], jac)
    }

    fn admissible(&self, x: &[f64], atol: &[f64]) -> bool {
        self.inner.admissible(&x[..self.block_dim()], atol)
    }
}

/// The MEC in log-gap coordinates with a list of parameters.
pub struct MecSensitivity {
    pub model: LogGapMec,
    pub ids: Vec<ParamId>,
}

impl DaeSystem for MecSensitivity {
    fn n_diff(&self) -> usize {
        N_DIFF
    }

    fn n_alg(&self) -> usize {
        1
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.model.rhs(t, x, out)
    }

    fn jacobian(&self, t: f64, x: &[f64], jac: &mut DMatrix<f64>) -> Result<()> {
        self.model.jacobian(t, x, jac)
    }

    fn admissible(&self, x: &[f64], atol: &[f64]) -> bool {
        self.model.admissible(x, atol)
    }
}

impl ParametricDae for MecSensitivity {
    fn n_params(&self) -> usize {
        self.ids.len()
    }

    fn param_derivative(&self, _t: f64, x: &[f64], k: usize, out: &mut [f64]) -> Result<()> {
        let (fp, gp) = model::log_gap_param_derivative(&self.model.params, x, self.ids[k])?;
        out[..N_DIFF].copy_from_slice(fp.as_slice());
        out[N_DIFF] = gp;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBlock {
    pub param: ParamId,
    /// Parameter value the sensitivities were computed at.
    pub value: f64,
    /// Days.
    pub times: Vec<f64>,
    /// `d(S, X_m1, X_e, X_m2, M_ox, I_MEC)/dp` at each time.
    pub s: Vec<[f64; N_STATE]>,
    /// `p dI_density/dp` in A/m^3.
    pub semi_relative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRun {
    pub trajectory: Trajectory,
    pub blocks: Vec<SensitivityBlock>,
}

impl SensitivityRun {
    pub fn block(&self, id: ParamId) -> Option<&SensitivityBlock> {
        self.blocks.iter().find(|b| b.param == id)
    }
}

/// `p dI_density/dp` along a block, given the state trajectory.
/// For V the explicit dependence of I_density = 1000 I/V is included.
pub fn semi_relative_series(block: &SensitivityBlock, states: &[Vec<f64>], p: &ParameterSet) -> Vec<f64> {
    let k = 1000.0 / p.v;
    block
        .s
        .iter()
        .zip(states)
        .map(|(s, x)| {
            let mut d = k * s[IDX_I];
            if block.param == ParamId::V {
                d -= k * x[IDX_I] / p.v;
            }
            block.value * d
        })
        .collect()
}

/// `dy0/dp` for a start built by [`crate::scenario::batch_initial_state`]:
/// components fixed by the experiment get zero, the one solved from the
/// constraint follows by implicit differentiation of `g = 0`. A current
/// fixed through its density depends on V.
pub fn initial_sensitivities(
    p: &ParameterSet,
    x0: &StateVector,
    closure: Closure,
    ids: &[ParamId],
) -> Result<Vec<[f64; N_STATE]>> {
    let x = x0.to_array();
    let blocks = model::jacobian_blocks(x0, p, ids)?;
    let free = match closure {
        Closure::Exoelectrogens(_) => IDX_I,
        Closure::CurrentDensity(_) => IDX_XE,
    };
    let g_free = if free == IDX_I { blocks.g_z } else { blocks.g_y[IDX_XE] };
    if g_free == 0.0 || !g_free.is_finite() {
        return Err(Error::Singular(format!(
            "dg/d{} vanishes at the initial state",
            model::STATE_NAMES[free]
        )));
    }
    Ok(blocks
        .g_p
        .iter()
        .map(|&(id, gp)| {
            let mut s = [0.0; N_STATE];
            if free == IDX_XE && id == ParamId::V {
                s[IDX_I] = x[IDX_I] / p.v;
            }
            let known = gp + blocks.g_z * s[IDX_I];
            s[free] = -known / g_free;
            s
        })
        .collect())
}

fn block_atol(config: &IntegratorConfig, p: &ParameterSet, ids: &[ParamId]) -> Vec<f64> {
    let base = config.atol_vec(N_STATE);
    let mut atol = base.clone();
    for &id in ids {
        let v = p.get(id).abs();
        let scale = if v > 0.0 { 1.0 / v } else { 1.0 };
        atol.extend(base.iter().map(|a| a * scale));
    }
    atol
}

/// Integrates the state and all listed sensitivities together from a
/// consistent `x0` with initial sensitivities `s0`.
pub fn solve(
    p: &ParameterSet,
    x0: &StateVector,
    s0: &[[f64; N_STATE]],
    ids: &[ParamId],
    times_days: &[f64],
    config: &IntegratorConfig,
) -> Result<SensitivityRun> {
    if s0.len() != ids.len() {
        return Err(Error::Invalid("one initial sensitivity per parameter is required".into()));
    }
    let gap0 = p.m_total - x0.m_ox;
    let mut xa: Vec<f64> = model::to_log_gap(p, &x0.to_array())?.to_vec();
    for (&id, s) in ids.iter().zip(s0) {
        let mut sw = *s;
        // w = ln(M_total - M_ox)
        let dmt = if id == ParamId::MTotal { 1.0 } else { 0.0 };
        sw[IDX_MOX] = (dmt - s[IDX_MOX]) / gap0;
        xa.extend_from_slice(&sw);
    }
    let sys = MecSensitivity {
        model: LogGapMec::new(p.clone()),
        ids: ids.to_vec(),
    };
    let aug = SensitivitySystem { inner: &sys };
    let mut cfg = config.clone();
    cfg.atol = block_atol(config, p, ids);
    let raw = dae::integrate(&aug, &xa, &cfg, times_days)?;

    let mut states = Vec::with_capacity(raw.len());
    let mut per_block: Vec<Vec<[f64; N_STATE]>> = vec![Vec::with_capacity(raw.len()); ids.len()];
    for xa in &raw.states {
        let gap = xa[IDX_MOX].exp();
        states.push(model::from_log_gap(p, &xa[..N_STATE]).to_vec());
        for (k, &id) in ids.iter().enumerate() {
            let mut s = [0.0; N_STATE];
            s.copy_from_slice(&xa[(k + 1) * N_STATE..(k + 2) * N_STATE]);
            let dmt = if id == ParamId::MTotal { 1.0 } else { 0.0 };
            s[IDX_MOX] = dmt - gap * s[IDX_MOX];
            per_block[k].push(s);
        }
    }
    let blocks = ids
        .iter()
        .zip(per_block)
        .map(|(&id, s)| {
            let mut b = SensitivityBlock {
                param: id,
                value: p.get(id),
                times: raw.times.clone(),
                s,
                semi_relative: Vec::new(),
            };
            b.semi_relative = semi_relative_series(&b, &states, p);
            b
        })
        .collect();
    Ok(SensitivityRun {
        trajectory: Trajectory {
            times: raw.times,
            states,
            stats: raw.stats,
            mesh: raw.mesh,
        },
        blocks,
    })
}

/// One integration per parameter, spread over the rayon pool. Every shard
/// carries its own copy of the state, so results do not depend on the
/// number of workers. The returned trajectory is the first shard's.
pub fn solve_sharded(
    p: &ParameterSet,
    x0: &StateVector,
    closure: Closure,
    ids: &[ParamId],
    times_days: &[f64],
    config: &IntegratorConfig,
) -> Result<SensitivityRun> {
    if ids.is_empty() {
        return Err(Error::Invalid("no parameters given".into()));
    }
    let s0 = initial_sensitivities(p, x0, closure, ids)?;
    let runs: Vec<SensitivityRun> = ids
        .par_iter()
        .zip(s0.par_iter())
        .map(|(&id, s)| solve(p, x0, std::slice::from_ref(s), &[id], times_days, config))
        .collect::<Result<_>>()?;
    let mut runs = runs.into_iter();
    let mut out = runs.next().expect("at least one shard");
    for r in runs {
        out.trajectory.stats.steps += r.trajectory.stats.steps;
        out.blocks.extend(r.blocks);
    }
    Ok(out)
}

/// Long-format CSV: `t,param,s_S,s_Xm1,s_Xe,s_Xm2,s_Mox,s_IMEC,semi_relative`,
/// times in hours.
pub fn write_csv<W: Write>(run: &SensitivityRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "param", "s_S", "s_Xm1", "s_Xe", "s_Xm2", "s_Mox", "s_IMEC", "semi_relative"])?;
    for (k, t) in run.trajectory.times.iter().enumerate() {
        for b in &run.blocks {
            let mut rec = vec![format!("{}", t * crate::scenario::HOURS_PER_DAY), b.param.key().to_string()];
            rec.extend(b.s[k].iter().map(|v| format!("{v:e}")));
            rec.push(format!("{:e}", b.semi_relative[k]));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{self, hour_grid, mec_config, reference_batch};

    // y' = -p y, 0 = z - y
    struct Decay {
        p: f64,
    }

    impl DaeSystem for Decay {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = -self.p * x[0];
            out[1] = x[1] - x[0];
            Ok(())
        }
        fn jacobian(&self, _t: f64, _x: &[f64], jac: &mut DMatrix<f64>) -> Result<()> {
            jac[(0, 0)] = -self.p;
            jac[(0, 1)] = 0.0;
            jac[(1, 0)] = -1.0;
            jac[(1, 1)] = 1.0;
            Ok(())
        }
    }

    impl ParametricDae for Decay {
        fn n_params(&self) -> usize {
            1
        }
        fn param_derivative(&self, _t: f64, x: &[f64], _k: usize, out: &mut [f64]) -> Result<()> {
            out[0] = -x[0];
            out[1] = 0.0;
            Ok(())
        }
    }

    #[test]
    fn linear_decay_sensitivity() {
        let p = 0.7;
        let sys = Decay { p };
        let aug = SensitivitySystem { inner: &sys };
        let rtol = 1e-8;
        let cfg = IntegratorConfig::with_tolerances(rtol, vec![1e-12]);
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let tr = dae::integrate(&aug, &[1.0, 1.0, 0.0, 0.0], &cfg, &times).unwrap();
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let exact = -t * (-p * t).exp();
            assert!((x[2] - exact).abs() <= 10.0 * rtol, "t={t}: {} vs {exact}", x[2]);
            assert!((x[3] - exact).abs() <= 10.0 * rtol);
        }
    }

    #[test]
    fn pressure_sensitivity_vanishes() {
        let p = ParameterSet::reference();
        let x0 = reference_batch(&p).unwrap();
        let run = solve_sharded(&p, &x0, Closure::default(), &[ParamId::P], &hour_grid(45.0, 45), &mec_config(1e-8))
            .unwrap();
        let b = run.block(ParamId::P).unwrap();
        assert!(b.s.iter().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(b.semi_relative.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_sensitivities_follow_the_constraint() {
        let p = ParameterSet::reference();
        let closure = Closure::CurrentDensity(45.8);
        let start = scenario::BatchStart::default();
        let x0 = scenario::batch_initial_state(&p, &start, closure).unwrap();
        let ids = [ParamId::KR, ParamId::S0, ParamId::MuMaxE, ParamId::V];
        let s0 = initial_sensitivities(&p, &x0, closure, &ids).unwrap();
        for (id, s) in ids.iter().zip(&s0) {
            assert_eq!(s[0], 0.0, "{id}");
            assert_eq!(s[IDX_MOX], 0.0, "{id}");
        }
        assert_eq!(s0[1][IDX_XE], 0.0);
        assert_eq!(s0[2][IDX_XE], 0.0);
        // re-solve the start at perturbed parameters
        for (k, id) in [(0, ParamId::KR), (3, ParamId::V)] {
            let v = p.get(id);
            let h = 1e-6 * v;
            let xp = scenario::batch_initial_state(&p.with(id, v + h), &start, closure).unwrap();
            let xm = scenario::batch_initial_state(&p.with(id, v - h), &start, closure).unwrap();
            let fd = (xp.x_e - xm.x_e) / (2.0 * h);
            assert!((s0[k][IDX_XE] - fd).abs() < 1e-6 * fd.abs(), "{id}: {} vs {fd}", s0[k][IDX_XE]);
        }
    }

    #[test]
    fn sensitivities_stay_on_the_linearized_constraint() {
        let p = ParameterSet::reference();
        let x0 = reference_batch(&p).unwrap();
        let ids = [ParamId::MuMaxE, ParamId::KR, ParamId::MTotal];
        let s0 = initial_sensitivities(&p, &x0, Closure::default(), &ids).unwrap();
        let run = solve(&p, &x0, &s0, &ids, &hour_grid(45.0, 45), &mec_config(1e-8)).unwrap();
        for (k, x) in run.trajectory.states.iter().enumerate() {
            let jb = model::jacobian_blocks(&StateVector::from_slice(x), &p, &ids).unwrap();
            for (b, (_, gp)) in run.blocks.iter().zip(&jb.g_p) {
                let s = b.s[k];
                let lin: f64 = (0..N_DIFF).map(|c| jb.g_y[c] * s[c]).sum::<f64>() + jb.g_z * s[IDX_I] + gp;
                assert!(lin.abs() < 1e-6, "{} at {k}: {lin:e}", b.param);
            }
        }
    }

    #[test]
    fn csv_is_long_format() {
        let p = ParameterSet::reference();
        let x0 = reference_batch(&p).unwrap();
        let ids = [ParamId::MuMaxE, ParamId::YM];
        let run = solve_sharded(&p, &x0, Closure::default(), &ids, &hour_grid(2.0, 2), &mec_config(1e-6)).unwrap();
        let mut buf = Vec::new();
        write_csv(&run, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,param,s_S,s_Xm1,s_Xe,s_Xm2,s_Mox,s_IMEC,semi_relative");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[2].starts_with("0,Y_M,"));
    }
}
