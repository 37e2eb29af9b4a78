//! Equilibria of the MEC (f = 0, g = 0) and their linear stability on the
//! constraint manifold.
//!
//! Newton runs with the reduced mediator in log form, `w = ln(M_total -
//! M_ox)`, so the gap keeps full relative precision down to the washout
//! value ~4e-8. Exclusion branches are selected by freezing populations at
//! exactly zero.

use nalgebra::{DMatrix, DVector, Matrix5};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::eigen;
use crate::error::{Error, Result};
use crate::model::{self, StateVector, IDX_I, IDX_MOX, IDX_S, IDX_XE, IDX_XM1, IDX_XM2, N_DIFF, N_STATE};
use crate::params::ParameterSet;

/// Eigenvalues beyond this modulus belong to the fast mediator mode.
pub const FAST_MODE: f64 = 1e6;
pub const RESIDUAL_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 40;
const STEP_TOL: f64 = 1e-13;
/// Populations at or below this fraction of the total biomass count as
/// absent when labelling regimes.
const ABSENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    MethanogenExclusion,
    Coexistence,
    ExoelectrogenExclusion,
    Washout,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::MethanogenExclusion => "methanogen-exclusion",
            Regime::Coexistence => "coexistence",
            Regime::ExoelectrogenExclusion => "exoelectrogen-exclusion",
            Regime::Washout => "washout",
        }
    }

    /// Populations held at zero on this regime's branch.
    pub fn frozen(self) -> &'static [usize] {
        match self {
            Regime::MethanogenExclusion => &[IDX_XE],
            Regime::Coexistence => &[],
            Regime::ExoelectrogenExclusion => &[IDX_XM2],
            Regime::Washout => &[IDX_XM1, IDX_XE, IDX_XM2],
        }
    }

    pub fn of_state(x: &[f64]) -> Regime {
        let total = x[IDX_XM1] + x[IDX_XE] + x[IDX_XM2];
        let present = |i: usize| x[i] > ABSENT * total && x[i] > 0.0;
        match (present(IDX_XE), present(IDX_XM1) || present(IDX_XM2)) {
            (false, false) => Regime::Washout,
            (false, true) => Regime::MethanogenExclusion,
            (true, _) if present(IDX_XM2) => Regime::Coexistence,
            (true, _) => Regime::ExoelectrogenExclusion,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Stable,
    Unstable,
    Nonhyperbolic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub state: StateVector,
    /// M_total - M_ox, kept separately since `state.m_ox` cannot resolve it.
    pub gap: f64,
    pub params: ParameterSet,
    pub residual_f: f64,
    pub residual_g: f64,
    pub spectrum: Vec<Complex64>,
    pub classification: Stability,
    pub regime: Regime,
    pub frozen: Vec<usize>,
}

impl EquilibriumPoint {
    pub fn residual_norm(&self) -> f64 {
        self.residual_f.max(self.residual_g)
    }

    /// Largest real part among the moderate (non-fast) eigenvalues.
    pub fn leading_eigenvalue(&self) -> Complex64 {
        leading(&self.spectrum)
    }

    pub fn is_stable(&self) -> bool {
        self.classification == Stability::Stable
    }

    pub fn report(&self) -> EquilibriumReport {
        EquilibriumReport {
            state: self.state,
            gap: self.gap,
            i_density: self.state.i_density(&self.params),
            d: self.params.d,
            spectrum: self.spectrum.iter().map(|c| [c.re, c.im]).collect(),
            classification: self.classification,
            regime: self.regime,
            residual_f: self.residual_f,
            residual_g: self.residual_g,
        }
    }
}

/// Serializable summary of an equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub state: StateVector,
    pub gap: f64,
    pub i_density: f64,
    #[serde(rename = "D")]
    pub d: f64,
    /// `[re, im]` pairs.
    pub spectrum: Vec<[f64; 2]>,
    pub classification: Stability,
    pub regime: Regime,
    pub residual_f: f64,
    pub residual_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub schur: Matrix5<f64>,
    pub eigenvalues: Vec<Complex64>,
    /// Right eigenvectors, one per eigenvalue.
    pub vectors: Vec<Vec<Complex64>>,
    /// Index of the eigenvalue of smallest modulus.
    pub smallest: usize,
    /// Real right eigenvector of the smallest eigenvalue: unit norm, sign
    /// fixed by its largest-magnitude component being positive.
    pub v: Option<[f64; N_DIFF]>,
    /// Matching left eigenvector scaled to w.v = 1 (unit norm if w.v = 0).
    pub w: Option<[f64; N_DIFF]>,
}

/// Unknowns are `S, X_m1, X_e, X_m2, w, I` minus the pinned ones.
fn free_indices(frozen: &[usize], pin_s: bool) -> Vec<usize> {
    (0..N_STATE)
        .filter(|i| !frozen.contains(i) && !(pin_s && *i == IDX_S))
        .collect()
}

fn residual(p: &ParameterSet, x: &[f64], gap: f64) -> Result<[f64; N_STATE]> {
    let (f, g) = model::rhs_gap(p, x, gap)?;
    let mut r = [0.0; N_STATE];
    r[..N_DIFF].copy_from_slice(&f);
    r[N_DIFF] = g;
    Ok(r)
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Damped Newton for f = 0, g = 0 with the populations in `frozen` held at
/// exactly zero. When D = 0 and every population is frozen the substrate is
/// arbitrary and is pinned at its guess.
pub fn find_equilibrium(guess: &StateVector, p: &ParameterSet, frozen: &[usize]) -> Result<EquilibriumPoint> {
    if frozen.iter().any(|i| ![IDX_XM1, IDX_XE, IDX_XM2].contains(i)) {
        return Err(Error::Invalid("only populations can be frozen".into()));
    }
    let mut x = guess.to_array();
    for &i in frozen {
        x[i] = 0.0;
    }
    let all_frozen = frozen.len() == 3;
    let pin_s = all_frozen && p.d == 0.0;
    if !(guess.m_ox < p.m_total) {
        return Err(Error::Domain("guess has M_ox >= M_total".into()));
    }
    let mut gap = p.m_total - guess.m_ox;
    if all_frozen {
        // zero current forces the closed-form gap; start there
        gap = model::zero_current_mediator(p).1;
        x[IDX_I] = 0.0;
    }
    let free = free_indices(frozen, pin_s);
    let n = free.len();
    // Both methanogen compartments grow on S at the same rate, so at an
    // interior equilibrium with D > 0 their retention terms agree. The tanh
    // forms share k_x, so that is a linear relation. It replaces the X_m2 row,
    // whose D alpha2 term underflows against mu_m - K_dm at small D.
    let shared = p.d > 0.0 && free.contains(&IDX_XM1) && free.contains(&IDX_XM2);
    let system = |r: &[f64; N_STATE], x: &[f64; N_STATE]| -> Vec<f64> {
        free.iter()
            .map(|&i| {
                if shared && i == IDX_XM2 {
                    (x[IDX_XM1] - p.x_max1) - (x[IDX_XE] + x[IDX_XM2] - p.x_max2)
                } else {
                    r[i]
                }
            })
            .collect()
    };

    let mut r = residual(p, &x, gap)?;
    let mut norm = max_abs(system(&r, &x));
    for _ in 0..NEWTON_MAX_ITER {
        let (fy, fz, gy, gz) = model::state_jacobian_gap(p, &x, gap)?;
        let full = |row: usize, col: usize| -> f64 {
            let v = match (row < N_DIFF, col < N_DIFF) {
                (true, true) => fy[(row, col)],
                (true, false) => fz[row],
                (false, true) => gy[col],
                (false, false) => gz,
            };
            if shared && row == IDX_XM2 {
                return match col {
                    IDX_XM1 => 1.0,
                    IDX_XE | IDX_XM2 => -1.0,
                    _ => 0.0,
                };
            }
            // the mediator unknown is w = ln(gap), dM/dw = -gap
            if col == IDX_MOX {
                -gap * v
            } else {
                v
            }
        };
        let a = DMatrix::from_fn(n, n, |ri, ci| full(free[ri], free[ci]));
        let lu = a.lu();
        let mut step = -DVector::from_vec(system(&r, &x));
        if !lu.solve_mut(&mut step) {
            return Err(Error::Singular("equilibrium Jacobian".into()));
        }
        let w0 = gap.ln();
        // unknowns measured relative to their size; w is already logarithmic
        let scale: Vec<f64> = free
            .iter()
            .map(|&i| if i == IDX_MOX { 1.0 } else { 1.0 + x[i].abs() })
            .collect();
        let snorm = |v: &DVector<f64>| {
            v.iter().zip(&scale).fold(0.0_f64, |m, (a, s)| m.max((a / s).abs()))
        };
        let step_norm = snorm(&step);
        // a small residual alone is not enough next to a singular point
        if norm <= 0.01 * RESIDUAL_TOL && step_norm <= STEP_TOL {
            break;
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let mut xt = x;
            let mut gt = gap;
            for (k, &i) in free.iter().enumerate() {
                if i == IDX_MOX {
                    gt = (w0 + lambda * step[k]).exp();
                } else {
                    xt[i] = x[i] + lambda * step[k];
                }
            }
            xt[IDX_MOX] = p.m_total - gt;
            if let Ok(rt) = residual(p, &xt, gt) {
                let st = system(&rt, &xt);
                let nt = max_abs(st.iter().copied());
                // natural monotonicity: the simplified Newton correction
                // from the trial point must shrink
                let mut bar = -DVector::from_vec(st);
                let monotone = lu.solve_mut(&mut bar)
                    && snorm(&bar) <= (1.0 - 0.25 * lambda) * step_norm;
                if nt.is_finite() && (monotone || nt <= 0.01 * RESIDUAL_TOL) {
                    x = xt;
                    gap = gt;
                    r = rt;
                    norm = nt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted || step_norm <= 4.0 * f64::EPSILON {
            break;
        }
    }
    let residual_f = max_abs(r[..N_DIFF].iter().copied());
    let residual_g = r[N_DIFF].abs();
    if residual_f.max(residual_g) > RESIDUAL_TOL {
        return Err(Error::NoConvergence {
            what: "equilibrium Newton",
            iterations: NEWTON_MAX_ITER,
            residual: residual_f.max(residual_g),
        });
    }
    for i in [IDX_XM1, IDX_XE, IDX_XM2] {
        if x[i] < 0.0 {
            return Err(Error::NegativePopulation { component: i, value: x[i] });
        }
    }
    let state = StateVector::from_slice(&x);
    let spectrum = schur_eigenvalues(p, &x, gap)?;
    Ok(EquilibriumPoint {
        state,
        gap,
        params: p.clone(),
        residual_f,
        residual_g,
        classification: classify(&spectrum),
        regime: Regime::of_state(&x),
        spectrum,
        frozen: frozen.to_vec(),
    })
}

/// Washout point for D = 0: no populations, no current, the given substrate.
pub fn washout_equilibrium(p: &ParameterSet, s: f64) -> Result<EquilibriumPoint> {
    let guess = StateVector::new(s, 0.0, 0.0, 0.0, 0.5 * p.m_total, 0.0);
    find_equilibrium(&guess, p, Regime::Washout.frozen())
}

/// Reduced Jacobian `f_y - f_z g_z^{-1} g_y` at `(x, gap)`.
pub fn schur_matrix(p: &ParameterSet, x: &[f64], gap: f64) -> Result<Matrix5<f64>> {
    let (fy, fz, gy, gz) = model::state_jacobian_gap(p, x, gap)?;
    Ok(fy - fz * gy / gz)
}

fn schur_eigenvalues(p: &ParameterSet, x: &[f64], gap: f64) -> Result<Vec<Complex64>> {
    let s = schur_matrix(p, x, gap)?;
    Ok(eigen::eig(&DMatrix::from_iterator(N_DIFF, N_DIFF, s.iter().copied()))?.values)
}

fn leading(spectrum: &[Complex64]) -> Complex64 {
    spectrum
        .iter()
        .filter(|l| l.norm() <= FAST_MODE)
        .copied()
        .max_by(|a, b| a.re.total_cmp(&b.re))
        .unwrap_or(Complex64::new(f64::NEG_INFINITY, 0.0))
}

/// Hyperbolicity threshold `1e-7 (1 + max |lambda|)` over the moderate modes.
pub fn hyperbolicity_threshold(spectrum: &[Complex64]) -> f64 {
    let m = spectrum
        .iter()
        .map(|l| l.norm())
        .filter(|a| *a <= FAST_MODE)
        .fold(0.0, f64::max);
    1e-7 * (1.0 + m)
}

pub fn classify(spectrum: &[Complex64]) -> Stability {
    let thr = hyperbolicity_threshold(spectrum);
    if spectrum.iter().any(|l| l.re.abs() <= thr) {
        Stability::Nonhyperbolic
    } else if spectrum.iter().all(|l| l.re < -thr) {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

/// Unit right eigenvector with the sign of component `sign_of` (largest
/// magnitude when `None`) made positive, and the left eigenvector scaled to
/// w.v = 1.
pub fn normalize_pair(v: &[f64], w: &[f64], sign_of: Option<usize>) -> (Vec<f64>, Vec<f64>) {
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut v: Vec<f64> = v.iter().map(|a| a / nv).collect();
    let k = sign_of.unwrap_or_else(|| {
        (0..v.len())
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0)
    });
    if v[k] < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    let wv: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
    let w = if wv.abs() > 1e-12 * w.iter().map(|a| a * a).sum::<f64>().sqrt() {
        w.iter().map(|a| a / wv).collect()
    } else {
        let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        w.iter().map(|a| a / nw).collect()
    };
    (v, w)
}

pub fn schur_spectrum_at(p: &ParameterSet, x: &[f64], gap: f64) -> Result<SpectrumReport> {
    let schur = schur_matrix(p, x, gap)?;
    let a = DMatrix::from_iterator(N_DIFF, N_DIFF, schur.iter().copied());
    let eg = eigen::eig(&a)?;
    let smallest = eg.smallest();
    let lambda = eg.values[smallest];
    let (v, w) = if lambda.im == 0.0 {
        let vr: Vec<f64> = eg.vector(smallest).iter().map(|c| c.re).collect();
        let (_, wl) = eigen::left_eigenvector(&a, lambda)?;
        let wr: Vec<f64> = wl.iter().map(|c| c.re).collect();
        let (v, w) = normalize_pair(&vr, &wr, None);
        (Some(to5(&v)), Some(to5(&w)))
    } else {
        (None, None)
    };
    Ok(SpectrumReport {
        schur,
        vectors: (0..eg.values.len()).map(|k| eg.vector(k)).collect(),
        eigenvalues: eg.values,
        smallest,
        v,
        w,
    })
}

fn to5(v: &[f64]) -> [f64; N_DIFF] {
    let mut a = [0.0; N_DIFF];
    a.copy_from_slice(v);
    a
}

pub fn schur_spectrum(point: &EquilibriumPoint) -> Result<SpectrumReport> {
    schur_spectrum_at(&point.params, &point.state.to_array(), point.gap)
}

/// Finite eigenvalues of `det(lambda E - J) = 0` with `E = diag(I_5, 0)`.
pub fn pencil_spectrum_at(p: &ParameterSet, x: &[f64], gap: f64) -> Result<Vec<Complex64>> {
    let (fy, fz, gy, gz) = model::state_jacobian_gap(p, x, gap)?;
    let mut j = DMatrix::zeros(N_STATE, N_STATE);
    model::fill_jacobian(&mut j, (fy, fz, gy, gz));
    eigen::pencil_eigenvalues(&j, N_DIFF)
}

pub fn pencil_spectrum(point: &EquilibriumPoint) -> Result<Vec<Complex64>> {
    pencil_spectrum_at(&point.params, &point.state.to_array(), point.gap)
}
