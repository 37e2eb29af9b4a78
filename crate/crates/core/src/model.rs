//! MEC equations: five differential states (substrate, three populations,
//! oxidized mediator) and one algebraic state, the cell current.
//!
//! Every evaluator has a `_gap` twin taking the reduced mediator
//! `M_total - M_ox` explicitly. Near washout that gap is ~4e-8 mg/L and
//! forming it by subtraction throws away half the significant digits.

use nalgebra::{Matrix5, RowVector5, Vector5};
use serde::{Deserialize, Serialize};

use crate::dae::DaeSystem;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterSet};

pub const N_DIFF: usize = 5;
pub const N_STATE: usize = 6;

pub const IDX_S: usize = 0;
pub const IDX_XM1: usize = 1;
pub const IDX_XE: usize = 2;
pub const IDX_XM2: usize = 3;
pub const IDX_MOX: usize = 4;
pub const IDX_I: usize = 5;

pub const STATE_NAMES: [&str; N_STATE] = ["S", "X_m1", "X_e", "X_m2", "M_ox", "I_MEC"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub s: f64,
    pub x_m1: f64,
    pub x_e: f64,
    pub x_m2: f64,
    pub m_ox: f64,
    pub i_mec: f64,
}

impl StateVector {
    pub fn new(s: f64, x_m1: f64, x_e: f64, x_m2: f64, m_ox: f64, i_mec: f64) -> Self {
        StateVector {
            s,
            x_m1,
            x_e,
            x_m2,
            m_ox,
            i_mec,
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        StateVector::new(x[0], x[1], x[2], x[3], x[4], x[5])
    }

    pub fn to_array(&self) -> [f64; N_STATE] {
        [self.s, self.x_m1, self.x_e, self.x_m2, self.m_ox, self.i_mec]
    }

    pub fn differential(&self) -> [f64; N_DIFF] {
        [self.s, self.x_m1, self.x_e, self.x_m2, self.m_ox]
    }

    pub fn i_density(&self, p: &ParameterSet) -> f64 {
        p.current_density(self.i_mec)
    }

    /// Strict admissibility: nonnegative concentrations and M_ox < M_total.
    pub fn check(&self, p: &ParameterSet) -> Result<()> {
        for (k, v) in self.to_array()[..N_DIFF].iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Domain(format!("{} is not finite", STATE_NAMES[k])));
            }
            if *v < 0.0 {
                return Err(Error::Domain(format!("{} = {v} is negative", STATE_NAMES[k])));
            }
        }
        check_mediator(self.m_ox, p)
    }
}

fn check_mediator(m_ox: f64, p: &ParameterSet) -> Result<()> {
    if m_ox < p.m_total {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "M_ox = {m_ox} must stay below M_total = {}",
            p.m_total
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticRates {
    pub mu_e: f64,
    pub mu_m: f64,
    pub q_e: f64,
    pub q_m: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub r_int: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverpotentialBreakdown {
    pub eta_ohm: f64,
    pub eta_conc_a: f64,
    pub eta_act_c: f64,
    pub emf_budget: f64,
}

impl OverpotentialBreakdown {
    pub fn balance(&self) -> f64 {
        self.emf_budget - self.eta_ohm - self.eta_conc_a - self.eta_act_c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    pub f_y: Matrix5<f64>,
    pub f_z: Vector5<f64>,
    pub g_y: RowVector5<f64>,
    pub g_z: f64,
    pub f_p: Vec<(ParamId, Vector5<f64>)>,
    pub g_p: Vec<(ParamId, f64)>,
}

impl JacobianBlocks {
    /// Reduced Jacobian f_y - f_z g_z^{-1} g_y on the constraint manifold.
    pub fn schur(&self) -> Matrix5<f64> {
        self.f_y - self.f_z * self.g_y / self.g_z
    }
}

// Intermediate quantities shared by the residual and its derivatives.
struct Terms {
    se: f64,  // S/(K_Se + S)
    sm: f64,  // S/(K_Sm + S)
    mm: f64,  // M/(K_M + M)
    dse: f64, // d se/dS
    dsm: f64,
    dmm: f64,
    a1: f64,
    a2: f64,
    da1: f64, // d alpha1/d X_m1
    da2: f64, // d alpha2/d (X_e + X_m2)
    ex: f64,  // exp(-K_R X_e)
    r_int: f64,
    vt: f64,
    u: f64, // I/(A i0)
    sq: f64, // sqrt(1 + u^2)
    log_ratio: f64,
}

impl Terms {
    fn new(p: &ParameterSet, x: &[f64], gap: f64) -> Result<Self> {
        if !(gap > 0.0) {
            return Err(Error::Domain(format!(
                "reduced mediator M_total - M_ox = {gap:e} must be positive"
            )));
        }
        let (s, x1, xe, x2, m, i) = (x[0], x[1], x[2], x[3], x[4], x[5]);
        let ke = p.k_s_e + s;
        let km = p.k_s_m + s;
        let kmm = p.k_m + m;
        let t1 = (p.k_x * (x1 - p.x_max1)).tanh();
        let t2 = (p.k_x * (xe + x2 - p.x_max2)).tanh();
        let ex = (-p.k_r * xe).exp();
        let u = i / (p.a_sur_a * p.i0);
        Ok(Terms {
            se: s / ke,
            sm: s / km,
            mm: m / kmm,
            dse: p.k_s_e / (ke * ke),
            dsm: p.k_s_m / (km * km),
            dmm: p.k_m / (kmm * kmm),
            a1: 0.5 * (1.0 + t1),
            a2: 0.5 * (1.0 + t2),
            da1: 0.5 * p.k_x * (1.0 - t1 * t1),
            da2: 0.5 * p.k_x * (1.0 - t2 * t2),
            ex,
            r_int: p.r_min + (p.r_max - p.r_min) * ex,
            vt: p.thermal_voltage(),
            u,
            sq: (1.0 + u * u).sqrt(),
            log_ratio: (p.m_total / gap).ln(),
        })
    }

    fn rates(&self, p: &ParameterSet) -> KineticRates {
        KineticRates {
            mu_e: p.mu_max_e * self.se * self.mm,
            mu_m: p.mu_max_m * self.sm,
            q_e: p.q_max_e * self.se * self.mm,
            q_m: p.q_max_m * self.sm,
            alpha1: self.a1,
            alpha2: self.a2,
            r_int: self.r_int,
        }
    }
}

/// Right-hand side f and constraint g at the full state `x`
/// (`S, X_m1, X_e, X_m2, M_ox, I_MEC`) with the reduced mediator given.
pub fn rhs_gap(p: &ParameterSet, x: &[f64], gap: f64) -> Result<([f64; N_DIFF], f64)> {
    let t = Terms::new(p, x, gap)?;
    let k = t.rates(p);
    let (s, x1, xe, x2, i) = (x[0], x[1], x[2], x[3], x[5]);
    let f = [
        p.d * (p.s0 - s) - k.q_e * xe - k.q_m * (x1 + x2),
        (k.mu_m - p.k_d_m - p.d * k.alpha1) * x1,
        (k.mu_e - p.k_d_e - p.d * k.alpha2) * xe,
        (k.mu_m - p.k_d_m - p.d * k.alpha2) * x2,
        -p.y_m * k.q_e * xe + p.mediator_gain() * i,
    ];
    let g = p.e_applied + p.e_cemf
        - t.vt * t.log_ratio
        - t.vt / p.beta * t.u.asinh()
        - i * t.r_int;
    Ok((f, g))
}

pub fn rhs(p: &ParameterSet, x: &[f64]) -> Result<([f64; N_DIFF], f64)> {
    check_mediator(x[IDX_MOX], p)?;
    rhs_gap(p, x, p.m_total - x[IDX_MOX])
}

/// Analytic f_y, f_z, g_y, g_z.
pub fn state_jacobian_gap(
    p: &ParameterSet,
    x: &[f64],
    gap: f64,
) -> Result<(Matrix5<f64>, Vector5<f64>, RowVector5<f64>, f64)> {
    let t = Terms::new(p, x, gap)?;
    let k = t.rates(p);
    let (x1, xe, x2, i) = (x[1], x[2], x[3], x[5]);
    let d = p.d;
    let mut fy = Matrix5::zeros();

    fy[(0, 0)] = -d - p.q_max_e * t.dse * t.mm * xe - p.q_max_m * t.dsm * (x1 + x2);
    fy[(0, 1)] = -k.q_m;
    fy[(0, 2)] = -k.q_e;
    fy[(0, 3)] = -k.q_m;
    fy[(0, 4)] = -p.q_max_e * t.se * t.dmm * xe;

    fy[(1, 0)] = p.mu_max_m * t.dsm * x1;
    fy[(1, 1)] = k.mu_m - p.k_d_m - d * t.a1 - d * t.da1 * x1;

    fy[(2, 0)] = p.mu_max_e * t.dse * t.mm * xe;
    fy[(2, 2)] = k.mu_e - p.k_d_e - d * t.a2 - d * t.da2 * xe;
    fy[(2, 3)] = -d * t.da2 * xe;
    fy[(2, 4)] = p.mu_max_e * t.se * t.dmm * xe;

    fy[(3, 0)] = p.mu_max_m * t.dsm * x2;
    fy[(3, 2)] = -d * t.da2 * x2;
    fy[(3, 3)] = k.mu_m - p.k_d_m - d * t.a2 - d * t.da2 * x2;

    fy[(4, 0)] = -p.y_m * p.q_max_e * t.dse * t.mm * xe;
    fy[(4, 2)] = -p.y_m * k.q_e;
    fy[(4, 4)] = -p.y_m * p.q_max_e * t.se * t.dmm * xe;

    let fz = Vector5::new(0.0, 0.0, 0.0, 0.0, p.mediator_gain());
    let gy = RowVector5::new(
        0.0,
        0.0,
        i * p.k_r * (p.r_max - p.r_min) * t.ex,
        0.0,
        -t.vt / gap,
    );
    let gz = -t.vt / (p.beta * p.a_sur_a * p.i0 * t.sq) - t.r_int;
    Ok((fy, fz, gy, gz))
}

/// Analytic derivative of (f, g) with respect to one parameter. K_M and
/// M_total are treated as independent numbers, as stored.
pub fn param_derivative_gap(
    p: &ParameterSet,
    x: &[f64],
    gap: f64,
    id: ParamId,
) -> Result<(Vector5<f64>, f64)> {
    let t = Terms::new(p, x, gap)?;
    let (s, x1, xe, x2, m, i) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let mut f = Vector5::zeros();
    let mut g = 0.0;
    // Voltage losses scale with vt; ln and arcsinh terms collected here.
    let losses = t.log_ratio + t.u.asinh() / p.beta;
    let c = p.mediator_gain();
    match id {
        ParamId::D => {
            f[0] = p.s0 - s;
            f[1] = -t.a1 * x1;
            f[2] = -t.a2 * xe;
            f[3] = -t.a2 * x2;
        }
        ParamId::S0 => f[0] = p.d,
        ParamId::EApplied | ParamId::ECemf => g = 1.0,
        ParamId::ASurA => g = t.vt / p.beta * t.u / (p.a_sur_a * t.sq),
        ParamId::I0 => g = t.vt / p.beta * t.u / (p.i0 * t.sq),
        ParamId::V => f[4] = -c * i / p.v,
        ParamId::T => g = -t.vt / p.t * losses,
        ParamId::R => g = -t.vt / p.r * losses,
        ParamId::F => {
            f[4] = -c * i / p.f;
            g = t.vt / p.f * losses;
        }
        ParamId::M => {
            f[4] = -c * i / p.m;
            g = t.vt / p.m * losses;
        }
        ParamId::Beta => g = t.vt / (p.beta * p.beta) * t.u.asinh(),
        ParamId::Gamma => f[4] = c * i / p.gamma,
        ParamId::P => {}
        ParamId::MuMaxE => f[2] = t.se * t.mm * xe,
        ParamId::MuMaxM => {
            f[1] = t.sm * x1;
            f[3] = t.sm * x2;
        }
        ParamId::QMaxE => {
            f[0] = -t.se * t.mm * xe;
            f[4] = -p.y_m * t.se * t.mm * xe;
        }
        ParamId::QMaxM => f[0] = -t.sm * (x1 + x2),
        ParamId::KSE => {
            let dk = -s / ((p.k_s_e + s) * (p.k_s_e + s)) * t.mm * xe;
            f[0] = -p.q_max_e * dk;
            f[2] = p.mu_max_e * dk;
            f[4] = -p.y_m * p.q_max_e * dk;
        }
        ParamId::KSM => {
            let dk = -s / ((p.k_s_m + s) * (p.k_s_m + s));
            f[0] = -p.q_max_m * dk * (x1 + x2);
            f[1] = p.mu_max_m * dk * x1;
            f[3] = p.mu_max_m * dk * x2;
        }
        ParamId::KM => {
            let dk = -m / ((p.k_m + m) * (p.k_m + m)) * t.se * xe;
            f[0] = -p.q_max_e * dk;
            f[2] = p.mu_max_e * dk;
            f[4] = -p.y_m * p.q_max_e * dk;
        }
        ParamId::KDE => f[2] = -xe,
        ParamId::KDM => {
            f[1] = -x1;
            f[3] = -x2;
        }
        ParamId::KX => {
            // d alpha/d K_X = (d alpha/d arg) * arg / K_X
            let b1 = t.da1 / p.k_x * (x1 - p.x_max1);
            let b2 = t.da2 / p.k_x * (xe + x2 - p.x_max2);
            f[1] = -p.d * b1 * x1;
            f[2] = -p.d * b2 * xe;
            f[3] = -p.d * b2 * x2;
        }
        ParamId::XMax1 => f[1] = p.d * t.da1 * x1,
        ParamId::XMax2 => {
            f[2] = p.d * t.da2 * xe;
            f[3] = p.d * t.da2 * x2;
        }
        ParamId::YM => f[4] = -p.q_max_e * t.se * t.mm * xe,
        ParamId::RMin => g = -i * (1.0 - t.ex),
        ParamId::RMax => g = -i * t.ex,
        ParamId::KR => g = i * (p.r_max - p.r_min) * xe * t.ex,
        ParamId::MTotal => g = t.vt * m / (p.m_total * gap),
    }
    Ok((f, g))
}

pub fn kinetic_rates(state: &StateVector, p: &ParameterSet) -> Result<KineticRates> {
    state.check(p)?;
    let x = state.to_array();
    Ok(Terms::new(p, &x, p.m_total - state.m_ox)?.rates(p))
}

/// g(y, z) in volts.
pub fn constraint_residual(state: &StateVector, p: &ParameterSet) -> Result<f64> {
    Ok(rhs(p, &state.to_array())?.1)
}

/// Fully implicit residual: `y_dot - f(y, z)` followed by `g(y, z)`.
pub fn dae_residual(
    _t: f64,
    y: &[f64; N_DIFF],
    y_dot: &[f64; N_DIFF],
    z: f64,
    p: &ParameterSet,
) -> Result<[f64; N_STATE]> {
    let x = [y[0], y[1], y[2], y[3], y[4], z];
    let (f, g) = rhs(p, &x)?;
    let mut r = [0.0; N_STATE];
    for k in 0..N_DIFF {
        r[k] = y_dot[k] - f[k];
    }
    r[N_DIFF] = g;
    Ok(r)
}

pub fn jacobian_blocks(
    state: &StateVector,
    p: &ParameterSet,
    params: &[ParamId],
) -> Result<JacobianBlocks> {
    check_mediator(state.m_ox, p)?;
    jacobian_blocks_gap(state, p, params, p.m_total - state.m_ox)
}

pub fn jacobian_blocks_gap(
    state: &StateVector,
    p: &ParameterSet,
    params: &[ParamId],
    gap: f64,
) -> Result<JacobianBlocks> {
    let x = state.to_array();
    let (f_y, f_z, g_y, g_z) = state_jacobian_gap(p, &x, gap)?;
    let mut f_p = Vec::with_capacity(params.len());
    let mut g_p = Vec::with_capacity(params.len());
    for &id in params {
        let (fp, gp) = param_derivative_gap(p, &x, gap, id)?;
        f_p.push((id, fp));
        g_p.push((id, gp));
    }
    Ok(JacobianBlocks {
        f_y,
        f_z,
        g_y,
        g_z,
        f_p,
        g_p,
    })
}

pub fn overpotentials(state: &StateVector, p: &ParameterSet) -> Result<OverpotentialBreakdown> {
    check_mediator(state.m_ox, p)?;
    let x = state.to_array();
    let t = Terms::new(p, &x, p.m_total - state.m_ox)?;
    Ok(OverpotentialBreakdown {
        eta_ohm: state.i_mec * t.r_int,
        eta_conc_a: t.vt * t.log_ratio,
        eta_act_c: t.vt / p.beta * t.u.asinh(),
        emf_budget: p.e_applied + p.e_cemf,
    })
}

/// M_ox at which the constraint holds with zero current:
/// M_total (1 - exp(-(E_applied + E_CEMF)/vt)). Returns (M_ox, gap).
pub fn zero_current_mediator(p: &ParameterSet) -> (f64, f64) {
    let gap = p.m_total * (-(p.e_applied + p.e_cemf) / p.thermal_voltage()).exp();
    (p.m_total - gap, gap)
}

/// The MEC as a semi-explicit DAE in the layout `S, X_m1, X_e, X_m2, M_ox | I_MEC`.
#[derive(Debug, Clone)]
pub struct MecModel {
    pub params: ParameterSet,
}

impl MecModel {
    pub fn new(params: ParameterSet) -> Self {
        MecModel { params }
    }
}

impl DaeSystem for MecModel {
    fn n_diff(&self) -> usize {
        N_DIFF
    }

    fn n_alg(&self) -> usize {
        1
    }

    fn rhs(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (f, g) = rhs(&self.params, x)?;
        out[..N_DIFF].copy_from_slice(&f);
        out[N_DIFF] = g;
        Ok(())
    }

    fn jacobian(&self, _t: f64, x: &[f64], jac: &mut nalgebra::DMatrix<f64>) -> Result<()> {
        check_mediator(x[IDX_MOX], &self.params)?;
        fill_jacobian(jac, state_jacobian_gap(&self.params, x, self.params.m_total - x[IDX_MOX])?);
        Ok(())
    }

    fn admissible(&self, x: &[f64], atol: &[f64]) -> bool {
        x[IDX_MOX] < self.params.m_total
            && x[..IDX_MOX]
                .iter()
                .zip(atol)
                .all(|(v, a)| v.is_finite() && *v >= -a)
    }
}

/// Maps `S, X_m1, X_e, X_m2, M_ox, I` to the log-gap layout in which the
/// fifth entry is `w = ln(M_total - M_ox)`.
pub fn to_log_gap(p: &ParameterSet, x: &[f64]) -> Result<[f64; N_STATE]> {
    check_mediator(x[IDX_MOX], p)?;
    Ok([x[0], x[1], x[2], x[3], (p.m_total - x[IDX_MOX]).ln(), x[5]])
}

pub fn from_log_gap(p: &ParameterSet, xw: &[f64]) -> [f64; N_STATE] {
    [xw[0], xw[1], xw[2], xw[3], p.m_total - xw[IDX_MOX].exp(), xw[5]]
}

fn split_log_gap(p: &ParameterSet, xw: &[f64]) -> ([f64; N_STATE], f64) {
    let gap = xw[IDX_MOX].exp();
    let mut x = [0.0; N_STATE];
    x.copy_from_slice(&xw[..N_STATE]);
    x[IDX_MOX] = p.m_total - gap;
    (x, gap)
}

/// `(f, g)` in log-gap coordinates: the fifth row is `w' = -M_ox'/gap`.
pub fn log_gap_rhs(p: &ParameterSet, xw: &[f64]) -> Result<([f64; N_DIFF], f64)> {
    let (x, gap) = split_log_gap(p, xw);
    let (mut f, g) = rhs_gap(p, &x, gap)?;
    f[IDX_MOX] /= -gap;
    Ok((f, g))
}

/// Analytic f_y, f_z, g_y, g_z in log-gap coordinates.
pub fn log_gap_jacobian(
    p: &ParameterSet,
    xw: &[f64],
) -> Result<(Matrix5<f64>, Vector5<f64>, RowVector5<f64>, f64)> {
    let (x, gap) = split_log_gap(p, xw);
    let (f, _) = rhs_gap(p, &x, gap)?;
    let (mut fy, mut fz, mut gy, gz) = state_jacobian_gap(p, &x, gap)?;
    let fmm = fy[(IDX_MOX, IDX_MOX)];
    for r in 0..N_DIFF {
        fy[(r, IDX_MOX)] *= -gap;
    }
    for c in 0..N_DIFF {
        fy[(IDX_MOX, c)] /= -gap;
    }
    fy[(IDX_MOX, IDX_MOX)] = fmm + f[IDX_MOX] / gap;
    fz[IDX_MOX] /= -gap;
    gy[IDX_MOX] *= -gap;
    Ok((fy, fz, gy, gz))
}

/// Derivative of the log-gap `(f, g)` with respect to one parameter at
/// fixed `w`. Changing M_total at fixed gap moves M_ox with it.
pub fn log_gap_param_derivative(p: &ParameterSet, xw: &[f64], id: ParamId) -> Result<(Vector5<f64>, f64)> {
    let (x, gap) = split_log_gap(p, xw);
    let (mut fp, mut gp) = param_derivative_gap(p, &x, gap, id)?;
    if id == ParamId::MTotal {
        let (fy, _, gy, _) = state_jacobian_gap(p, &x, gap)?;
        for r in 0..N_DIFF {
            fp[r] += fy[(r, IDX_MOX)];
        }
        gp += gy[IDX_MOX];
    }
    fp[IDX_MOX] /= -gap;
    Ok((fp, gp))
}

/// The MEC in log-gap coordinates, `S, X_m1, X_e, X_m2, ln(M_total - M_ox) | I_MEC`.
/// The constraint is linear in the log-gap, so Newton stays well behaved
/// while the reduced mediator shrinks by orders of magnitude.
#[derive(Debug, Clone)]
pub struct LogGapMec {
    pub params: ParameterSet,
}

impl LogGapMec {
    pub fn new(params: ParameterSet) -> Self {
        LogGapMec { params }
    }
}

pub(crate) fn fill_jacobian(
    jac: &mut nalgebra::DMatrix<f64>,
    (fy, fz, gy, gz): (Matrix5<f64>, Vector5<f64>, RowVector5<f64>, f64),
) {
    for r in 0..N_DIFF {
        for c in 0..N_DIFF {
            jac[(r, c)] = fy[(r, c)];
        }
        jac[(r, N_DIFF)] = fz[r];
        jac[(N_DIFF, r)] = gy[r];
    }
    jac[(N_DIFF, N_DIFF)] = gz;
}

impl DaeSystem for LogGapMec {
    fn n_diff(&self) -> usize {
        N_DIFF
    }

    fn n_alg(&self) -> usize {
        1
    }

    fn rhs(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (f, g) = log_gap_rhs(&self.params, x)?;
        out[..N_DIFF].copy_from_slice(&f);
        out[N_DIFF] = g;
        Ok(())
    }

    fn jacobian(&self, _t: f64, x: &[f64], jac: &mut nalgebra::DMatrix<f64>) -> Result<()> {
        fill_jacobian(jac, log_gap_jacobian(&self.params, x)?);
        Ok(())
    }

    fn admissible(&self, x: &[f64], atol: &[f64]) -> bool {
        let w = x[IDX_MOX];
        w.is_finite()
            && w.exp() <= self.params.m_total * (1.0 + 1e-12) + atol[IDX_MOX]
            && x[..IDX_MOX]
                .iter()
                .zip(atol)
                .all(|(v, a)| v.is_finite() && *v >= -a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> ParameterSet {
        ParameterSet::reference()
    }

    fn random_state(rng: &mut ChaCha8Rng, p: &ParameterSet) -> [f64; N_STATE] {
        [
            rng.random_range(0.0..1500.0),
            rng.random_range(0.0..1200.0),
            rng.random_range(0.0..800.0),
            rng.random_range(0.0..800.0),
            rng.random_range(0.0..0.999) * p.m_total,
            rng.random_range(-0.01..0.02),
        ]
    }

    #[test]
    fn mu_e_at_reference_state() {
        let st = StateVector::new(956.0, 10.0, 250.0, 10.0, 25.6, 0.0);
        let k = kinetic_rates(&st, &reference()).unwrap();
        let oracle = 2.43 * (956.0 / 1756.0) * (25.6 / 30.725);
        assert!((k.mu_e - oracle).abs() < 1e-14);
        assert!((k.mu_e - 1.1023).abs() < 1e-4);
        assert!((k.mu_e / k.q_e - 2.43 / 4.82).abs() < 1e-14);
    }

    #[test]
    fn retention_and_resistance_limits() {
        let p = reference();
        let st = StateVector::new(10.0, p.x_max1, 0.0, 0.0, 1.0, 0.0);
        let k = kinetic_rates(&st, &p).unwrap();
        assert_eq!(k.alpha1, 0.5);
        assert_eq!(k.r_int, p.r_max);
    }

    #[test]
    fn domain_errors() {
        let p = reference();
        let st = StateVector::new(10.0, 0.0, 0.0, 0.0, p.m_total, 0.0);
        assert!(matches!(constraint_residual(&st, &p), Err(Error::Domain(_))));
        let st = StateVector::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(kinetic_rates(&st, &p).is_err());
    }

    #[test]
    fn constraint_trivial_values() {
        let p = reference();
        let st = StateVector::new(956.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!((constraint_residual(&st, &p).unwrap() - 0.26).abs() < 1e-15);

        let (m_star, gap) = zero_current_mediator(&p);
        let st = StateVector::new(100.0, 0.0, 0.0, 0.0, m_star, 0.0);
        // Subtraction loses digits near M_total; the gap form is exact.
        let (_, g) = rhs_gap(&p, &st.to_array(), gap).unwrap();
        assert!(g.abs() < 1e-15, "{g}");
        assert!(constraint_residual(&st, &p).unwrap().abs() < 1e-7);
        assert!((gap - 4.16e-8).abs() / 4.16e-8 < 0.01, "{gap:e}");
    }

    #[test]
    fn constraint_regression_fixture() {
        // Reference state of the batch experiment: M_ox = 25.6, I_density = 45.8.
        let p = reference();
        let i = p.current_from_density(45.8);
        let st = StateVector::new(956.0, 10.0, 250.0, 10.0, 25.6, i);
        let vt = 8.3145 * 298.15 / (2.0 * 96485.0);
        let r_int = 25.0 + 1975.0 * (-0.06f64 * 250.0).exp();
        let oracle = 0.26
            - vt * (25.625f64 / 0.025).ln()
            - vt / 0.5 * (i / 0.4).asinh()
            - i * r_int;
        let g = constraint_residual(&st, &p).unwrap();
        assert!((g - oracle).abs() < 1e-14, "{g} vs {oracle}");
        assert!((g - 0.0676258).abs() < 1e-6, "{g}");
    }

    #[test]
    fn g_z_at_zero_current_and_no_exoelectrogens() {
        let p = reference();
        let st = StateVector::new(100.0, 5.0, 0.0, 5.0, 10.0, 0.0);
        let j = jacobian_blocks(&st, &p, &[]).unwrap();
        let oracle = -2000.0 - p.thermal_voltage() / (0.5 * 0.4);
        assert!((j.g_z - oracle).abs() < 1e-12);
        assert!((j.g_z + 2000.0642).abs() < 1e-3);
    }

    #[test]
    fn pressure_enters_nothing() {
        let p = reference();
        let st = StateVector::new(500.0, 50.0, 200.0, 80.0, 20.0, 0.004);
        let j = jacobian_blocks(&st, &p, &[ParamId::P]).unwrap();
        assert_eq!(j.f_p[0].1, Vector5::zeros());
        assert_eq!(j.g_p[0].1, 0.0);
    }

    #[test]
    fn residual_vanishes_on_washout_line_and_at_influent() {
        let p = reference();
        let (_, gap) = zero_current_mediator(&p);
        for s in [0.0, 17.0, 956.0] {
            let x = [s, 0.0, 0.0, 0.0, p.m_total - gap, 0.0];
            let (f, g) = rhs_gap(&p, &x, gap).unwrap();
            assert!(f.iter().all(|v| v.abs() < 1e-10) && g.abs() < 1e-10);
        }
        let pd = p.with_dilution(0.3);
        let y = [pd.s0, 0.0, 0.0, 0.0, 3.0];
        let r = dae_residual(0.0, &y, &[0.0; 5], 0.0, &pd).unwrap();
        assert_eq!(r[0], 0.0);
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(scale))
    }

    #[test]
    fn analytic_state_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let mut p = reference();
            p.d = rng.random_range(0.0..0.5);
            let x = random_state(&mut rng, &p);
            let gap = p.m_total - x[4];
            let (fy, fz, gy, gz) = state_jacobian_gap(&p, &x, gap).unwrap();
            let (f0, _) = rhs(&p, &x).unwrap();
            let fscale = f0.iter().fold(1e-8f64, |a, v| a.max(v.abs()));
            for c in 0..N_STATE {
                let h = 1e-6 * x[c].abs().max(1e-3);
                let h = if c == IDX_MOX { h.min(1e-3 * gap) } else { h };
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let (fp, gp) = rhs(&p, &xp).unwrap();
                let (fm, gm) = rhs(&p, &xm).unwrap();
                // floor for cancellation error of the difference quotient
                let tol_f = 1e-8 * fscale / x[c].abs().max(1e-3);
                let tol_g = 1e-8 / x[c].abs().max(1e-3);
                for r in 0..N_DIFF {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let an = if c < N_DIFF { fy[(r, c)] } else { fz[r] };
                    assert!(
                        rel_err(an, fd, 0.0) < 1e-6 || (an - fd).abs() < tol_f,
                        "trial {trial} f[{r}]/x[{c}]: {an} vs {fd}"
                    );
                }
                let fd = (gp - gm) / (2.0 * h);
                let an = if c < N_DIFF { gy[c] } else { gz };
                assert!(
                    rel_err(an, fd, 0.0) < 1e-6 || (an - fd).abs() < tol_g,
                    "trial {trial} g/x[{c}]: {an} vs {fd}"
                );
            }
            assert!(gz < 0.0);
        }
    }

    #[test]
    fn analytic_parameter_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut p = reference();
            p.d = rng.random_range(0.01..0.5);
            let x = random_state(&mut rng, &p);
            let (f0, g0) = rhs(&p, &x).unwrap();
            let fscale = f0.iter().fold(1e-8f64, |a, v| a.max(v.abs()));
            for &id in ParamId::ALL {
                let v = p.get(id);
                let h = 1e-6 * v.abs().max(1e-3);
                let (fp, gp) = rhs(&p.with(id, v + h), &x).unwrap();
                let (fm, gm) = rhs(&p.with(id, v - h), &x).unwrap();
                let (fa, ga) = param_derivative_gap(&p, &x, p.m_total - x[4], id).unwrap();
                for r in 0..N_DIFF {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!(
                        rel_err(fa[r], fd, 0.0) < 1e-6 || (fa[r] - fd).abs() * v.abs() < 1e-9 * fscale,
                        "{id} f[{r}]: {} vs {fd}",
                        fa[r]
                    );
                }
                let fd = (gp - gm) / (2.0 * h);
                assert!(
                    rel_err(ga, fd, 0.0) < 1e-6 || (ga - fd).abs() * v.abs() < 1e-10 * (1.0 + g0.abs()),
                    "{id} g: {ga} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn log_gap_coordinates_round_trip() {
        let p = reference();
        let x = [500.0, 10.0, 200.0, 10.0, 25.62499, 0.003];
        let xw = to_log_gap(&p, &x).unwrap();
        let back = from_log_gap(&p, &xw);
        assert!((back[4] - x[4]).abs() < 1e-14);
        let (f, g) = rhs(&p, &x).unwrap();
        let (fw, gw) = log_gap_rhs(&p, &xw).unwrap();
        assert!((g - gw).abs() < 1e-12);
        let gap = p.m_total - x[4];
        assert!((fw[4] + f[4] / gap).abs() < 1e-6 * fw[4].abs());
        assert!(to_log_gap(&p, &[1.0, 0.0, 0.0, 0.0, p.m_total, 0.0]).is_err());
    }

    #[test]
    fn log_gap_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..100 {
            let mut p = reference();
            p.d = rng.random_range(0.01..0.5);
            let xw = to_log_gap(&p, &random_state(&mut rng, &p)).unwrap();
            let (fy, fz, gy, gz) = log_gap_jacobian(&p, &xw).unwrap();
            let (f0, g0) = log_gap_rhs(&p, &xw).unwrap();
            let fscale = f0.iter().fold(1e-8f64, |a, v| a.max(v.abs()));
            for c in 0..N_STATE {
                let h = if c == IDX_MOX { 1e-6 } else { 1e-6 * xw[c].abs().max(1e-3) };
                let (mut xp, mut xm) = (xw, xw);
                xp[c] += h;
                xm[c] -= h;
                let (fp, gp) = log_gap_rhs(&p, &xp).unwrap();
                let (fm, gm) = log_gap_rhs(&p, &xm).unwrap();
                let mag = if c == IDX_MOX { 1.0 } else { xw[c].abs().max(1e-3) };
                for r in 0..N_DIFF {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let an = if c < N_DIFF { fy[(r, c)] } else { fz[r] };
                    assert!(
                        rel_err(an, fd, 0.0) < 1e-6 || (an - fd).abs() * mag < 1e-8 * fscale,
                        "trial {trial} f[{r}]/x[{c}]: {an} vs {fd}"
                    );
                }
                let fd = (gp - gm) / (2.0 * h);
                let an = if c < N_DIFF { gy[c] } else { gz };
                assert!(rel_err(an, fd, 0.0) < 1e-6 || (an - fd).abs() * mag < 1e-8, "trial {trial} g/x[{c}]: {an} vs {fd}");
            }
            for &id in ParamId::ALL {
                let v = p.get(id);
                let h = 1e-6 * v.abs().max(1e-3);
                let (fp, gp) = log_gap_rhs(&p.with(id, v + h), &xw).unwrap();
                let (fm, gm) = log_gap_rhs(&p.with(id, v - h), &xw).unwrap();
                let (fa, ga) = log_gap_param_derivative(&p, &xw, id).unwrap();
                for r in 0..N_DIFF {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!(
                        rel_err(fa[r], fd, 0.0) < 1e-6 || (fa[r] - fd).abs() * v.abs() < 1e-9 * fscale,
                        "{id} f[{r}]: {} vs {fd}",
                        fa[r]
                    );
                }
                let fd = (gp - gm) / (2.0 * h);
                assert!(
                    rel_err(ga, fd, 0.0) < 1e-6 || (ga - fd).abs() * v.abs() < 1e-10 * (1.0 + g0.abs()),
                    "{id} g: {ga} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn overpotentials_balance_at_consistent_state() {
        let p = reference();
        let i = 0.004;
        let mut st = StateVector::new(700.0, 20.0, 150.0, 30.0, 0.0, i);
        // bisection on M_ox so that the constraint holds
        let (mut lo, mut hi) = (0.0, p.m_total * (1.0 - 1e-12));
        for _ in 0..200 {
            st.m_ox = 0.5 * (lo + hi);
            if constraint_residual(&st, &p).unwrap() > 0.0 {
                lo = st.m_ox;
            } else {
                hi = st.m_ox;
            }
        }
        let o = overpotentials(&st, &p).unwrap();
        assert!(o.balance().abs() < 1e-9, "{}", o.balance());
        let zero = overpotentials(&StateVector::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), &p).unwrap();
        assert_eq!((zero.eta_ohm, zero.eta_act_c, zero.eta_conc_a), (0.0, 0.0, 0.0));
    }
}
