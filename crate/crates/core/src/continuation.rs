//! Equilibrium branches in the dilution rate and the transcritical points
//! where they exchange stability.

use nalgebra::{DMatrix, DVector, Matrix5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen;
use crate::equilibria::{self, EquilibriumPoint, EquilibriumReport, Regime};
use crate::error::{Error, Result};
use crate::model::{self, StateVector, IDX_MOX, IDX_XE, IDX_XM2, N_DIFF};
use crate::params::{ParamId, ParameterSet};

const REFINE_ITER: usize = 200;
pub const LEAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    /// Steps across a stability change are cut down to this width.
    pub refine: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            initial: 1e-3,
            min: 1e-10,
            max: 2e-3,
            refine: 1e-5,
        }
    }
}

impl StepPolicy {
    pub fn fixed(h: f64) -> Self {
        StepPolicy {
            initial: h,
            min: 1e-10,
            max: h,
            refine: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub regime: Regime,
    /// Ordered by strictly increasing D.
    pub points: Vec<EquilibriumPoint>,
}

impl Branch {
    pub fn d_values(&self) -> Vec<f64> {
        self.points.iter().map(|e| e.params.d).collect()
    }

    pub fn stable(&self) -> Vec<bool> {
        self.points.iter().map(|e| e.is_stable()).collect()
    }

    pub fn d_range(&self) -> (f64, f64) {
        (self.points[0].params.d, self.points[self.points.len() - 1].params.d)
    }

    /// Point with D nearest to `d`.
    pub fn nearest(&self, d: f64) -> &EquilibriumPoint {
        self.points
            .iter()
            .min_by(|a, b| (a.params.d - d).abs().total_cmp(&(b.params.d - d).abs()))
            .expect("branches are never empty")
    }

    /// Starting point for continuing to `d`: the nearest of the two points
    /// bracketing `d`, or, where they hold different populations at zero,
    /// the one with fewer frozen.
    pub fn start_for(&self, d: f64) -> &EquilibriumPoint {
        let k = self.points.partition_point(|e| e.params.d <= d);
        if k == 0 || k == self.points.len() {
            return self.nearest(d);
        }
        let (a, b) = (&self.points[k - 1], &self.points[k]);
        if a.frozen != b.frozen {
            return if a.frozen.len() < b.frozen.len() { a } else { b };
        }
        if d - a.params.d <= b.params.d - d {
            a
        } else {
            b
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_branches_csv(std::slice::from_ref(self), out)
    }
}

pub fn write_branches_csv<W: std::io::Write>(branches: &[Branch], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "D", "regime", "stable", "S", "X_m1", "X_e", "X_m2", "M_ox", "I_MEC", "I_density", "lead_eig_re",
    ])?;
    for b in branches {
        for e in &b.points {
            let s = &e.state;
            let mut row = vec![format!("{}", e.params.d), b.regime.label().to_string(), e.is_stable().to_string()];
            row.extend(
                [s.s, s.x_m1, s.x_e, s.x_m2, s.m_ox, s.i_mec, s.i_density(&e.params), e.leading_eigenvalue().re]
                    .iter()
                    .map(|v| format!("{v}")),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationRecord {
    pub d_star: f64,
    pub equilibrium: EquilibriumPoint,
    pub v: [f64; N_DIFF],
    pub w: [f64; N_DIFF],
    pub cond1: f64,
    pub cond2: f64,
    pub cond3: f64,
    pub branches_exchanging: (Regime, Regime),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationReport {
    #[serde(rename = "D_star")]
    pub d_star: f64,
    pub equilibrium: EquilibriumReport,
    pub v: [f64; N_DIFF],
    pub w: [f64; N_DIFF],
    pub cond1: f64,
    pub cond2: f64,
    pub cond3: f64,
    pub branches_exchanging: [Regime; 2],
    /// Volumetric flow at the critical dilution rate, mL/day.
    pub f_in: f64,
}

impl BifurcationRecord {
    pub fn report(&self) -> BifurcationReport {
        BifurcationReport {
            d_star: self.d_star,
            equilibrium: self.equilibrium.report(),
            v: self.v,
            w: self.w,
            cond1: self.cond1,
            cond2: self.cond2,
            cond3: self.cond3,
            branches_exchanging: [self.branches_exchanging.0, self.branches_exchanging.1],
            f_in: flow_rate(self.d_star, self.equilibrium.params.v),
        }
    }
}

/// Flow rate in mL/day for dilution rate `d` (1/day) and volume `v` (L).
pub fn flow_rate(d: f64, v: f64) -> f64 {
    1000.0 * d * v
}

/// Dilution rate for a flow in mL/day through a volume in L.
pub fn dilution_rate(f_in: f64, v: f64) -> f64 {
    f_in / (1000.0 * v)
}

fn at_d(p: &ParameterSet, d: f64) -> ParameterSet {
    p.with(ParamId::D, d)
}

fn lead_re(e: &EquilibriumPoint) -> f64 {
    e.leading_eigenvalue().re
}

/// Leading real parts at or below this size carry no sign: they come from
/// retention terms that underflow at small D.
const SIGN_FLOOR: f64 = 1e-12;

fn crosses(a: &EquilibriumPoint, b: &EquilibriumPoint) -> bool {
    let (la, lb) = (lead_re(a), lead_re(b));
    la.signum() != lb.signum() && la.abs() > SIGN_FLOOR && lb.abs() > SIGN_FLOOR
}

/// Natural-parameter continuation from `start` towards `d_end`, the previous
/// point serving as the next guess. The branch stops early, without error,
/// where it leaves the nonnegative orthant or changes regime (a transcritical
/// endpoint); Newton failure at the minimal step is `BranchLost`.
pub fn sweep_branch(start: &EquilibriumPoint, d_end: f64, policy: &StepPolicy) -> Result<Branch> {
    let regime = start.regime;
    let dir = if d_end >= start.params.d { 1.0 } else { -1.0 };
    let mut pts = vec![start.clone()];
    let mut h = policy.initial;
    loop {
        let last = pts.last().unwrap();
        let d0 = last.params.d;
        if dir * (d_end - d0) <= 0.0 {
            break;
        }
        let d = if dir * (d_end - (d0 + dir * h)) <= 0.0 { d_end } else { d0 + dir * h };
        let step = (d - d0).abs();
        match equilibria::find_equilibrium(&last.state, &at_d(&last.params, d), &start.frozen) {
            Ok(e) if e.regime == regime => {
                if crosses(last, &e) && step > policy.refine * (1.0 + 1e-9) {
                    h = (0.25 * step).max(policy.refine);
                    continue;
                }
                pts.push(e);
                h = (1.5 * step).min(policy.max).max(policy.min);
            }
            outcome => {
                if step <= policy.min * (1.0 + 1e-9) {
                    match outcome {
                        Ok(_) | Err(Error::NegativePopulation { .. }) => break,
                        Err(e) => {
                            return Err(Error::BranchLost {
                                d: d0,
                                reason: e.to_string(),
                            })
                        }
                    }
                }
                h = (0.5 * step).max(policy.min);
            }
        }
    }
    if dir < 0.0 {
        pts.reverse();
    }
    Ok(Branch { regime, points: pts })
}

/// Sweeps from `start` in both directions and joins the halves.
pub fn sweep_both_ways(start: &EquilibriumPoint, range: (f64, f64), policy: &StepPolicy) -> Result<Branch> {
    let down = sweep_branch(start, range.0, policy)?;
    let up = sweep_branch(start, range.1, policy)?;
    let mut points = down.points;
    points.extend(up.points.into_iter().skip(1));
    Ok(Branch {
        regime: start.regime,
        points,
    })
}

/// Conditions 1-3 of a transcritical point for a parametrized semi-explicit
/// system, given closures over a displacement `dy` of the differential state:
/// the Schur complement and the reduced parameter derivative
/// `f_p - f_z g_z^{-1} g_p`. Directional derivatives use central differences
/// with step `h` along `v`.
pub fn transcritical_conditions<S, R>(v: &[f64], w: &[f64], h: f64, schur_at: S, reduced_fp_at: R) -> Result<[f64; 3]>
where
    S: Fn(&[f64]) -> Result<DMatrix<f64>>,
    R: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let n = v.len();
    let wv = DVector::from_column_slice(w);
    let vv = DVector::from_column_slice(v);
    let plus: Vec<f64> = v.iter().map(|c| h * c).collect();
    let minus: Vec<f64> = v.iter().map(|c| -h * c).collect();
    let cond1 = wv.dot(&reduced_fp_at(&vec![0.0; n])?);
    let dfp = (reduced_fp_at(&plus)? - reduced_fp_at(&minus)?) / (2.0 * h);
    let ds = (schur_at(&plus)? - schur_at(&minus)?) / (2.0 * h);
    Ok([cond1, wv.dot(&dfp), wv.dot(&(ds * vv))])
}

fn mec_conditions(e: &EquilibriumPoint, v: &[f64], w: &[f64]) -> Result<[f64; 3]> {
    let p = &e.params;
    let x0 = e.state.to_array();
    let gap0 = e.gap;
    let shifted = |dy: &[f64]| {
        let mut x = x0;
        for k in 0..N_DIFF {
            x[k] += dy[k];
        }
        (x, gap0 - dy[IDX_MOX])
    };
    let schur_at = |dy: &[f64]| -> Result<DMatrix<f64>> {
        let (x, gap) = shifted(dy);
        let s: Matrix5<f64> = equilibria::schur_matrix(p, &x, gap)?;
        Ok(DMatrix::from_iterator(N_DIFF, N_DIFF, s.iter().copied()))
    };
    let fp_at = |dy: &[f64]| -> Result<DVector<f64>> {
        let (x, gap) = shifted(dy);
        let (_, fz, _, gz) = model::state_jacobian_gap(p, &x, gap)?;
        let (fp, gp) = model::param_derivative_gap(p, &x, gap, ParamId::D)?;
        let r = fp - fz * (gp / gz);
        Ok(DVector::from_iterator(N_DIFF, r.iter().copied()))
    };
    let ymax = x0[..N_DIFF].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    transcritical_conditions(v, w, 1e-6 * (1.0 + ymax), schur_at, fp_at)
}

/// Eigen-pair of the near-zero eigenvalue: v unit with positive X_e
/// component, w.v = 1.
fn zero_pair(e: &EquilibriumPoint) -> Result<([f64; N_DIFF], [f64; N_DIFF])> {
    let rep = equilibria::schur_spectrum(e)?;
    let lambda = rep.eigenvalues[rep.smallest];
    if lambda.im != 0.0 {
        return Err(Error::Invalid("critical eigenvalue is not real".into()));
    }
    let a = DMatrix::from_iterator(N_DIFF, N_DIFF, rep.schur.iter().copied());
    // geometric simplicity: exactly one eigenvalue near zero
    let thr = 1e3 * equilibria::hyperbolicity_threshold(&rep.eigenvalues);
    if rep.eigenvalues.iter().filter(|l| l.norm() <= thr).count() > 1 {
        return Err(Error::Invalid("zero eigenvalue is not simple".into()));
    }
    let vr: Vec<f64> = rep.vectors[rep.smallest].iter().map(|c| c.re).collect();
    let (_, wl) = eigen::left_eigenvector(&a, lambda)?;
    let wr: Vec<f64> = wl.iter().map(|c| c.re).collect();
    let (v, w) = equilibria::normalize_pair(&vr, &wr, Some(IDX_XE));
    let mut va = [0.0; N_DIFF];
    let mut wa = [0.0; N_DIFF];
    va.copy_from_slice(&v);
    wa.copy_from_slice(&w);
    Ok((va, wa))
}

/// The branch that crosses this one at a zero eigenvalue: the eigenvector
/// points into a frozen population, which the partner carries.
fn partner(regime: Regime, v: &[f64]) -> Regime {
    let into = |i: usize| v[i].abs() > 1e-6;
    match regime {
        Regime::MethanogenExclusion if into(IDX_XE) => Regime::Coexistence,
        Regime::ExoelectrogenExclusion if into(IDX_XM2) => Regime::Coexistence,
        Regime::Coexistence if v[IDX_XM2].abs() > v[IDX_XE].abs() => Regime::ExoelectrogenExclusion,
        Regime::Coexistence => Regime::MethanogenExclusion,
        other => other,
    }
}

/// Bisection on the leading eigenvalue between two branch points whose
/// leading real parts have opposite signs.
pub fn refine_crossing(a: &EquilibriumPoint, b: &EquilibriumPoint) -> Result<EquilibriumPoint> {
    let (mut lo, mut hi) = (a.clone(), b.clone());
    let fail = |d: f64, why: &str| Error::BranchLost {
        d,
        reason: why.to_string(),
    };
    let sign_lo = lead_re(&lo).signum();
    if sign_lo == lead_re(&hi).signum() {
        return Err(fail(lo.params.d, "no sign change in the bracket"));
    }
    for _ in 0..REFINE_ITER {
        let best = if lead_re(&lo).abs() <= lead_re(&hi).abs() { &lo } else { &hi };
        if lead_re(best).abs() <= LEAD_TOL {
            return Ok(best.clone());
        }
        let dm = 0.5 * (lo.params.d + hi.params.d);
        if dm <= lo.params.d.min(hi.params.d) || dm >= lo.params.d.max(hi.params.d) {
            return Ok(best.clone());
        }
        let guess = StateVector::from_slice(
            &lo.state
                .to_array()
                .iter()
                .zip(hi.state.to_array())
                .map(|(x, y)| 0.5 * (x + y))
                .collect::<Vec<_>>(),
        );
        let m = equilibria::find_equilibrium(&guess, &at_d(&lo.params, dm), &lo.frozen)
            .map_err(|e| fail(dm, &e.to_string()))?;
        if lead_re(&m).signum() == sign_lo {
            lo = m;
        } else {
            hi = m;
        }
    }
    Err(fail(lo.params.d, "bisection did not reach the eigenvalue tolerance"))
}

/// Locates and characterizes every stability change along `branch`.
pub fn detect_bifurcations(branch: &Branch) -> Result<Vec<BifurcationRecord>> {
    let mut out = Vec::new();
    for pair in branch.points.windows(2) {
        if !crosses(&pair[0], &pair[1]) {
            continue;
        }
        let e = refine_crossing(&pair[0], &pair[1])?;
        let (v, w) = zero_pair(&e)?;
        let [cond1, cond2, cond3] = mec_conditions(&e, &v, &w)?;
        out.push(BifurcationRecord {
            d_star: e.params.d,
            branches_exchanging: (branch.regime, partner(branch.regime, &v)),
            equilibrium: e,
            v,
            w,
            cond1,
            cond2,
            cond3,
        });
    }
    Ok(out)
}

/// Newton from a methanogen-dominated guess (substrate low, both methanogen
/// layers just under their retention thresholds). At small D the attached
/// methanogens cannot persist; the suspended ones are then alone.
pub fn seed_methanogen_exclusion(p: &ParameterSet) -> Result<EquilibriumPoint> {
    let (m_ox, _) = model::zero_current_mediator(p);
    let mut guess = StateVector::new(20.0, p.x_max1 - 40.0, 0.0, p.x_max2 - 40.0, m_ox, 0.0);
    match equilibria::find_equilibrium(&guess, p, Regime::MethanogenExclusion.frozen()) {
        Err(Error::NegativePopulation { component: IDX_XM2, .. }) => {
            guess.x_m2 = 0.0;
            equilibria::find_equilibrium(&guess, p, &[IDX_XE, IDX_XM2])
        }
        other => other,
    }
}

/// The methanogen-exclusion branch over `[d_lo, d_hi]`, and the part of it
/// with attached methanogens present, on which the exchange with the
/// coexistence branch is sought. Below the D where X_m2 can invade, the
/// branch carries X_m1 alone.
fn methanogen_branch(p: &ParameterSet, d_lo: f64, d_hi: f64, policy: &StepPolicy) -> Result<(Branch, Option<Branch>)> {
    let seed = seed_methanogen_exclusion(&at_d(p, d_lo))?;
    if !seed.frozen.contains(&IDX_XM2) {
        let b = sweep_branch(&seed, d_hi, policy)?;
        return Ok((b.clone(), Some(b)));
    }
    // X_m2 invades once the resident's retention exceeds its own at zero
    // density; with a shared k_x that is a linear condition. The invasion
    // eigenvalue itself is D times two underflowing retention terms.
    let invades = |e: &EquilibriumPoint| e.state.x_m1 - p.x_max1 - e.state.x_e + p.x_max2;
    let mut low = sweep_branch(&seed, d_hi, policy)?;
    let Some(k) = low.points.windows(2).position(|w| invades(&w[0]) < 0.0 && invades(&w[1]) >= 0.0) else {
        return Ok((low, None));
    };
    let (mut a, mut b) = (low.points[k].clone(), low.points[k + 1].clone());
    while b.params.d - a.params.d > 1e-12 * b.params.d {
        let m = equilibria::find_equilibrium(&a.state, &at_d(p, 0.5 * (a.params.d + b.params.d)), &seed.frozen)?;
        if invades(&m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    low.points.truncate(k + 1);
    low.points.push(b.clone());
    let invasion = b;
    let d_b = invasion.params.d;
    let mut last_err = None;
    for offset in [1.0, 10.0, 100.0] {
        let d = d_b + offset * policy.refine;
        if d > d_hi {
            break;
        }
        let mut guess = invasion.state;
        guess.x_m2 = (guess.x_m1 - p.x_max1 + p.x_max2 - guess.x_e).max(0.0);
        match equilibria::find_equilibrium(&guess, &at_d(p, d), Regime::MethanogenExclusion.frozen()) {
            Ok(e) if e.regime == Regime::MethanogenExclusion => {
                let upper = sweep_branch(&e, d_hi, policy)?;
                let mut points = low.points;
                points.extend(upper.points.iter().cloned());
                return Ok((Branch { regime: Regime::MethanogenExclusion, points }, Some(upper)));
            }
            Ok(_) => {}
            Err(err) => last_err = Some(err),
        }
    }
    match last_err {
        Some(err) => Err(Error::BranchLost { d: d_b, reason: err.to_string() }),
        None => Ok((low, None)),
    }
}

/// Coexistence point just past a methanogen-exclusion crossing, reached by
/// stepping off along the critical eigenvector.
pub fn seed_coexistence(record: &BifurcationRecord, branch: &Branch) -> Result<EquilibriumPoint> {
    let e = &record.equilibrium;
    let d1 = record.d_star;
    // slope of the critical eigenvalue from the neighbouring branch points
    let above = branch
        .points
        .iter()
        .find(|q| q.params.d > d1 + 1e-9)
        .ok_or_else(|| Error::BranchLost { d: d1, reason: "nothing beyond the crossing".into() })?;
    let slope = (lead_re(above) - lead_re(e)) / (above.params.d - d1);
    let mut last_err = None;
    for dd in [1e-6, 1e-5, 1e-4] {
        let d = d1 + dd;
        // w.f = slope dd a + cond3 a^2 / 2 along the eigenvector
        let amp = (-2.0 * slope * dd / record.cond3).abs();
        for scale in [1.0, 0.5, 2.0, 4.0] {
            let mut x = e.state.to_array();
            for k in 0..N_DIFF {
                x[k] += scale * amp * record.v[k];
            }
            if x[IDX_MOX] >= e.params.m_total {
                x[IDX_MOX] = e.state.m_ox;
            }
            match equilibria::find_equilibrium(&StateVector::from_slice(&x), &at_d(&e.params, d), &[]) {
                Ok(c) if c.regime == Regime::Coexistence => return Ok(c),
                Ok(_) => {}
                Err(err) => last_err = Some(err),
            }
        }
    }
    Err(Error::BranchLost {
        d: d1,
        reason: last_err.map_or("seed converged to another branch".into(), |e| e.to_string()),
    })
}

/// Exoelectrogen-exclusion point at the end of the coexistence branch.
pub fn seed_exoelectrogen_exclusion(coexistence: &Branch) -> Result<EquilibriumPoint> {
    let end = coexistence.points.last().unwrap();
    let mut x = end.state;
    x.x_m2 = 0.0;
    equilibria::find_equilibrium(&x, &end.params, Regime::ExoelectrogenExclusion.frozen())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagram {
    pub branches: Vec<Branch>,
    pub bifurcations: Vec<BifurcationRecord>,
}

impl Diagram {
    pub fn branch(&self, regime: Regime) -> Option<&Branch> {
        self.branches.iter().find(|b| b.regime == regime)
    }

    /// Stable equilibrium at `d`, solved by continuation from the nearest
    /// sampled point of the stable branch.
    pub fn stable_point(&self, p: &ParameterSet, d: f64) -> Result<EquilibriumPoint> {
        if d == 0.0 {
            let s = self
                .branch(Regime::MethanogenExclusion)
                .map_or(p.s0, |b| b.points[0].state.s);
            return equilibria::washout_equilibrium(&at_d(p, 0.0), s);
        }
        let mut crit: Vec<f64> = self.bifurcations.iter().map(|b| b.d_star).collect();
        crit.sort_by(f64::total_cmp);
        let regime = match crit.iter().filter(|c| **c < d).count() {
            0 => Regime::MethanogenExclusion,
            1 => Regime::Coexistence,
            _ => Regime::ExoelectrogenExclusion,
        };
        let b = self
            .branch(regime)
            .ok_or_else(|| Error::BranchLost { d, reason: format!("no {regime} branch") })?;
        let (lo, hi) = b.d_range();
        if d < lo - 1e-12 || d > hi + 1e-12 {
            return Err(Error::BranchLost {
                d,
                reason: format!("outside the swept {regime} branch [{lo}, {hi}]"),
            });
        }
        let start = b.start_for(d);
        if start.params.d == d {
            return Ok(start.clone());
        }
        let policy = StepPolicy::default();
        let seg = sweep_branch(start, d, &policy)?;
        let e = if d >= start.params.d { seg.points.last() } else { seg.points.first() }.unwrap();
        if (e.params.d - d).abs() > 1e-12 {
            return Err(Error::BranchLost { d, reason: "branch ended before the target".into() });
        }
        Ok(e.clone())
    }
}

/// Full picture on `[d_lo, d_hi]`: the three MEC branches and their
/// transcritical points.
pub fn analyze(p: &ParameterSet, d_lo: f64, d_hi: f64, policy: &StepPolicy) -> Result<Diagram> {
    let (meth, attached) = methanogen_branch(p, d_lo, d_hi, policy)?;
    let mut bifurcations = match &attached {
        Some(b) => detect_bifurcations(b)?,
        None => Vec::new(),
    };
    let mut branches = vec![meth];
    let first = bifurcations
        .iter()
        .find(|r| r.branches_exchanging.1 == Regime::Coexistence)
        .cloned();
    if let Some(first) = first {
        let c0 = seed_coexistence(&first, &branches[0])?;
        let coex = sweep_both_ways(&c0, (first.d_star, d_hi), policy)?;
        let top = coex.points.last().unwrap().params.d;
        let exo_seed = seed_exoelectrogen_exclusion(&coex);
        branches.push(coex);
        if top < d_hi {
            let exo = sweep_both_ways(&exo_seed?, (d_lo, d_hi), policy)?;
            bifurcations.extend(detect_bifurcations(&exo)?);
            branches.push(exo);
        }
    }
    bifurcations.sort_by(|a, b| a.d_star.total_cmp(&b.d_star));
    Ok(Diagram { branches, bifurcations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    #[serde(rename = "F_in")]
    pub f_in: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "I_density")]
    pub i_density: f64,
    pub regime: Regime,
}

/// Stable-equilibrium current density over a grid of flow rates (mL/day) and
/// volumes (L). Each volume is an independent tile; tiles run in parallel.
pub fn bifurcation_surface(p: &ParameterSet, f_in: &[f64], volumes: &[f64], policy: &StepPolicy) -> Result<Vec<SurfaceSample>> {
    if f_in.iter().any(|f| *f < 0.0) || volumes.iter().any(|v| *v <= 0.0) {
        return Err(Error::Invalid("flow rates must be >= 0 and volumes > 0".into()));
    }
    let tiles: Vec<Result<Vec<SurfaceSample>>> = volumes
        .par_iter()
        .map(|&vol| {
            let pv = p.with(ParamId::V, vol);
            let ds: Vec<f64> = f_in.iter().map(|f| dilution_rate(*f, vol)).collect();
            let positive: Vec<f64> = ds.iter().copied().filter(|d| *d > 0.0).collect();
            let (lo, hi) = positive
                .iter()
                .fold((f64::INFINITY, 0.0_f64), |(a, b), d| (a.min(*d), b.max(*d)));
            let diagram = if positive.is_empty() { None } else { Some(analyze(&pv, lo, hi, policy)?) };
            f_in.iter()
                .zip(&ds)
                .map(|(&f, &d)| {
                    let e = match &diagram {
                        Some(dg) => dg.stable_point(&pv, d)?,
                        None => equilibria::washout_equilibrium(&at_d(&pv, 0.0), pv.s0)?,
                    };
                    Ok(SurfaceSample {
                        f_in: f,
                        v: vol,
                        d,
                        i_density: e.state.i_density(&pv),
                        regime: e.regime,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for t in tiles {
        out.extend(t?);
    }
    Ok(out)
}

pub fn write_surface_csv<W: std::io::Write>(samples: &[SurfaceSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["F_in", "V", "D", "I_density", "regime"])?;
    for s in samples {
        w.write_record([
            format!("{}", s.f_in),
            format!("{}", s.v),
            format!("{}", s.d),
            format!("{}", s.i_density),
            s.regime.label().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_normal_form_conditions() {
        // y' = p y - y^2, 0 = z - y at y = 0, p = 0
        let schur = |dy: &[f64]| -> Result<DMatrix<f64>> {
            let (y, p) = (dy[0], 0.0);
            // f_y - f_z g_z^{-1} g_y with f_z = 0
            Ok(DMatrix::from_element(1, 1, p - 2.0 * y))
        };
        let fp = |dy: &[f64]| -> Result<DVector<f64>> { Ok(DVector::from_element(1, dy[0])) };
        let [c1, c2, c3] = transcritical_conditions(&[1.0], &[1.0], 1e-6, schur, fp).unwrap();
        assert_eq!(c1, 0.0);
        assert!((c2 - 1.0).abs() < 1e-9);
        assert!((c3 + 2.0).abs() < 1e-9);
    }

    #[test]
    fn conditions_scale_with_the_eigenvector() {
        let schur = |dy: &[f64]| -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_row_slice(2, 2, &[-2.0 * dy[0] + dy[1] * dy[1], 0.0, 0.0, -1.0]))
        };
        let fp = |dy: &[f64]| -> Result<DVector<f64>> { Ok(DVector::from_row_slice(&[dy[0] + 0.5, 0.0])) };
        let v = [1.0, 0.0];
        let w = [1.0, 0.0];
        let a = transcritical_conditions(&v, &w, 1e-6, schur, fp).unwrap();
        let b = transcritical_conditions(&[3.0, 0.0], &[1.0 / 3.0, 0.0], 1e-6, schur, fp).unwrap();
        // w scales inversely with v: cond2 invariant, cond3 linear in v
        assert!((a[0] - 0.5).abs() < 1e-12 && (b[0] - 0.5 / 3.0).abs() < 1e-12);
        assert!((a[1] - b[1]).abs() < 1e-8);
        assert!((3.0 * a[2] - b[2]).abs() < 1e-7);
    }

    #[test]
    fn flow_conversion() {
        assert!((flow_rate(0.1233388, 0.09) - 11.100492).abs() < 1e-9);
        assert!((dilution_rate(11.100492, 0.09) - 0.1233388).abs() < 1e-12);
    }

    #[test]
    fn methanogen_branch_is_smooth_and_current_free() {
        let p = ParameterSet::reference();
        let seed = seed_methanogen_exclusion(&at_d(&p, 0.10)).unwrap();
        let b = sweep_branch(&seed, 0.12, &StepPolicy::default()).unwrap();
        let ds = b.d_values();
        assert!(ds.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*ds.last().unwrap(), 0.12);
        assert!(b.points.iter().all(|e| e.state.i_mec.abs() < 1e-15 && e.is_stable()));
        assert!(b.points.iter().all(|e| e.regime == Regime::MethanogenExclusion));
    }

    #[test]
    fn downward_sweep_is_reordered() {
        let p = ParameterSet::reference();
        let seed = seed_methanogen_exclusion(&at_d(&p, 0.11)).unwrap();
        let b = sweep_branch(&seed, 0.105, &StepPolicy::fixed(1e-3)).unwrap();
        assert_eq!(b.points.len(), 6);
        assert!((b.points[0].params.d - 0.105).abs() < 1e-15);
        assert!(b.d_values().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn attached_methanogens_match_retention() {
        let p = ParameterSet::reference();
        let e = seed_methanogen_exclusion(&at_d(&p, 0.05)).unwrap();
        assert!(e.frozen == vec![IDX_XE]);
        let lhs = e.state.x_m1 - p.x_max1;
        let rhs = e.state.x_m2 - p.x_max2;
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        assert!(e.residual_f < 1e-9);
    }

    #[test]
    fn small_dilution_keeps_only_suspended_methanogens() {
        let p = ParameterSet::reference();
        let dg = analyze(&p, 0.005, 0.05, &StepPolicy::default()).unwrap();
        assert!(dg.bifurcations.is_empty());
        let b = dg.branch(Regime::MethanogenExclusion).unwrap();
        assert!(b.d_values().windows(2).all(|w| w[1] > w[0]));
        let k = b.points.iter().position(|e| !e.frozen.contains(&IDX_XM2)).unwrap();
        assert!(k > 0);
        assert!(b.points[..k].iter().all(|e| e.state.x_m2 == 0.0 && e.state.x_e == 0.0));
        // at the junction the suspended layer sits at X_max1 - X_max2
        let j = &b.points[k - 1];
        assert!((j.state.x_m1 - (p.x_max1 - p.x_max2)).abs() < 1e-6);
        let d_b = j.params.d;
        for d in [0.8 * d_b, 1.2 * d_b] {
            let e = dg.stable_point(&p, d).unwrap();
            assert_eq!(e.params.d, d);
            assert_eq!(e.state.x_m2 == 0.0, d < d_b);
            assert_eq!(e.state.i_mec, 0.0);
        }
    }
}
