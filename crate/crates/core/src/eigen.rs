//! Dense nonsymmetric eigenproblems for the small (5x5, 6x6) matrices of the
//! stability analysis: EISPACK-style balancing, Householder reduction to
//! Hessenberg form and the Francis double-shift QR iteration (after the JAMA
//! port of `orthes`/`hqr2`), plus a shift-invert route for the pencil
//! `det(lambda E - J) = 0`.
//!
//! Balancing matters here: the spectra span ten orders of magnitude and the
//! permutation step isolates eigenvalues sitting in zero rows/columns
//! (washout, exclusion equilibria), which then come out exactly.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const MAX_SWEEPS_PER_EIGENVALUE: usize = 60;

#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<Complex64>,
    /// Right eigenvectors as columns, same order as `values`.
    pub vectors: DMatrix<Complex64>,
}

impl Eigen {
    pub fn vector(&self, k: usize) -> Vec<Complex64> {
        self.vectors.column(k).iter().copied().collect()
    }

    /// Index of the eigenvalue of smallest modulus.
    pub fn smallest(&self) -> usize {
        let mut best = 0;
        for k in 1..self.values.len() {
            if self.values[k].norm() < self.values[best].norm() {
                best = k;
            }
        }
        best
    }
}

struct Balance {
    low: usize,
    high: usize,
    scale: Vec<f64>,
}

// EISPACK balanc with radix 2. Works on a row-major copy.
fn balance(a: &mut [f64], n: usize) -> Balance {
    let at = |a: &[f64], i: usize, j: usize| a[i * n + j];
    let mut scale = vec![1.0; n];
    let mut k = 0usize;
    let mut l = n - 1;

    let swap = |a: &mut [f64], j: usize, m: usize, k: usize, l: usize| {
        if j == m {
            return;
        }
        for i in 0..=l {
            a.swap(i * n + j, i * n + m);
        }
        for i in k..n {
            a.swap(j * n + i, m * n + i);
        }
    };

    // Rows isolating an eigenvalue go to the bottom.
    'rows: loop {
        for j in (0..=l).rev() {
            let isolated = (0..=l).all(|i| i == j || at(a, j, i) == 0.0);
            if isolated {
                scale[l] = j as f64;
                swap(a, j, l, k, l);
                if l == 0 {
                    return Balance { low: 0, high: 0, scale };
                }
                l -= 1;
                continue 'rows;
            }
        }
        break;
    }
    // Columns isolating an eigenvalue go to the left.
    'cols: loop {
        for j in k..=l {
            let isolated = (k..=l).all(|i| i == j || at(a, i, j) == 0.0);
            if isolated {
                scale[k] = j as f64;
                swap(a, j, k, k, l);
                k += 1;
                continue 'cols;
            }
        }
        break;
    }

    for s in scale.iter_mut().take(l + 1).skip(k) {
        *s = 1.0;
    }
    const RADIX: f64 = 2.0;
    const B2: f64 = RADIX * RADIX;
    loop {
        let mut noconv = false;
        for i in k..=l {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in k..=l {
                if j != i {
                    c += at(a, j, i).abs();
                    r += at(a, i, j).abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let mut g = r / RADIX;
            let mut f = 1.0;
            let s = c + r;
            while c < g {
                f *= RADIX;
                c *= B2;
            }
            g = r * RADIX;
            while c >= g {
                f /= RADIX;
                c /= B2;
            }
            if (c + r) / f < 0.95 * s {
                let g = 1.0 / f;
                scale[i] *= f;
                noconv = true;
                for j in k..n {
                    a[i * n + j] *= g;
                }
                for j in 0..=l {
                    a[j * n + i] *= f;
                }
            }
        }
        if !noconv {
            break;
        }
    }
    Balance { low: k, high: l, scale }
}

fn balance_back(b: &Balance, v: &mut [f64], n: usize) {
    // with low == high, scale[low] holds a permutation index, not a factor
    for i in (b.low..=b.high).filter(|_| b.high > b.low) {
        let s = b.scale[i];
        for j in 0..n {
            v[i * n + j] *= s;
        }
    }
    for ii in 0..n {
        let i = if ii < b.low {
            b.low - 1 - ii
        } else if ii > b.high {
            ii
        } else {
            continue;
        };
        let k = b.scale[i] as usize;
        if k != i {
            for j in 0..n {
                v.swap(i * n + j, k * n + j);
            }
        }
    }
}

// Householder reduction to Hessenberg form on rows/columns low..=high,
// accumulating the transformation in v.
fn orthes(n: usize, low: usize, high: usize, h: &mut [f64], v: &mut [f64]) {
    let mut ort = vec![0.0; n];
    if high > low + 1 {
        for m in (low + 1)..high {
            let mut scale = 0.0;
            for i in m..=high {
                scale += h[i * n + m - 1].abs();
            }
            if scale != 0.0 {
                let mut hh = 0.0;
                for i in (m..=high).rev() {
                    ort[i] = h[i * n + m - 1] / scale;
                    hh += ort[i] * ort[i];
                }
                let mut g = hh.sqrt();
                if ort[m] > 0.0 {
                    g = -g;
                }
                hh -= ort[m] * g;
                ort[m] -= g;
                for j in m..n {
                    let mut f = 0.0;
                    for i in (m..=high).rev() {
                        f += ort[i] * h[i * n + j];
                    }
                    f /= hh;
                    for i in m..=high {
                        h[i * n + j] -= f * ort[i];
                    }
                }
                for i in 0..=high {
                    let mut f = 0.0;
                    for j in (m..=high).rev() {
                        f += ort[j] * h[i * n + j];
                    }
                    f /= hh;
                    for j in m..=high {
                        h[i * n + j] -= f * ort[j];
                    }
                }
                ort[m] *= scale;
                h[m * n + m - 1] = scale * g;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            v[i * n + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    if high > low + 1 {
        for m in ((low + 1)..high).rev() {
            if h[m * n + m - 1] != 0.0 {
                for i in (m + 1)..=high {
                    ort[i] = h[i * n + m - 1];
                }
                for j in m..=high {
                    let mut g = 0.0;
                    for i in m..=high {
                        g += ort[i] * v[i * n + j];
                    }
                    g = (g / ort[m]) / h[m * n + m - 1];
                    for i in m..=high {
                        v[i * n + j] += g * ort[i];
                    }
                }
            }
        }
    }
}

fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

// Real Schur form by double-shift QR and back-substitution for the
// eigenvectors. Indices are signed to follow the Algol original.
#[allow(clippy::many_single_char_names)]
fn hqr2(
    nn: usize,
    low: usize,
    high: usize,
    d: &mut [f64],
    e: &mut [f64],
    h: &mut [f64],
    v: &mut [f64],
) -> Result<()> {
    let nu = nn;
    let nn = nn as isize;
    let low = low as isize;
    let high = high as isize;
    let ix = |i: isize, j: isize| (i * nn + j) as usize;
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut t;
    let mut w;
    let mut x;
    let mut y;

    let mut norm = 0.0;
    for i in 0..nn {
        if i < low || i > high {
            d[i as usize] = h[ix(i, i)];
            e[i as usize] = 0.0;
        }
        for j in (i - 1).max(0)..nn {
            norm += h[ix(i, j)].abs();
        }
    }

    let mut n = high;
    let mut iter = 0;
    let mut total_iter = 0;
    while n >= low {
        let mut l = n;
        while l > low {
            s = h[ix(l - 1, l - 1)].abs() + h[ix(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[ix(l, l - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            h[ix(n, n)] += exshift;
            d[n as usize] = h[ix(n, n)];
            e[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            w = h[ix(n, n - 1)] * h[ix(n - 1, n)];
            p = (h[ix(n - 1, n - 1)] - h[ix(n, n)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[ix(n, n)] += exshift;
            h[ix(n - 1, n - 1)] += exshift;
            x = h[ix(n, n)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[(n - 1) as usize] = x + z;
                d[n as usize] = d[(n - 1) as usize];
                if z != 0.0 {
                    d[n as usize] = x - w / z;
                }
                e[(n - 1) as usize] = 0.0;
                e[n as usize] = 0.0;
                x = h[ix(n, n - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in (n - 1)..nn {
                    z = h[ix(n - 1, j)];
                    h[ix(n - 1, j)] = q * z + p * h[ix(n, j)];
                    h[ix(n, j)] = q * h[ix(n, j)] - p * z;
                }
                for i in 0..=n {
                    z = h[ix(i, n - 1)];
                    h[ix(i, n - 1)] = q * z + p * h[ix(i, n)];
                    h[ix(i, n)] = q * h[ix(i, n)] - p * z;
                }
                for i in low..=high {
                    z = v[ix(i, n - 1)];
                    v[ix(i, n - 1)] = q * z + p * v[ix(i, n)];
                    v[ix(i, n)] = q * v[ix(i, n)] - p * z;
                }
            } else {
                d[(n - 1) as usize] = x + p;
                d[n as usize] = x + p;
                e[(n - 1) as usize] = z;
                e[n as usize] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            total_iter += 1;
            if total_iter > MAX_SWEEPS_PER_EIGENVALUE * nu {
                return Err(Error::EigenFailure);
            }
            x = h[ix(n, n)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[ix(n - 1, n - 1)];
                w = h[ix(n, n - 1)] * h[ix(n - 1, n)];
            }
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    h[ix(i, i)] -= x;
                }
                s = h[ix(n, n - 1)].abs() + h[ix(n - 1, n - 2)].abs();
                y = 0.75 * s;
                x = y;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        h[ix(i, i)] -= s;
                    }
                    exshift += s;
                    w = 0.964;
                    y = w;
                    x = y;
                }
            }
            iter += 1;

            let mut m = n - 2;
            while m >= l {
                z = h[ix(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[ix(m + 1, m)] + h[ix(m, m + 1)];
                q = h[ix(m + 1, m + 1)] - z - r - s;
                r = h[ix(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[ix(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[ix(m - 1, m - 1)].abs() + z.abs() + h[ix(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in (m + 2)..=n {
                h[ix(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[ix(i, i - 3)] = 0.0;
                }
            }

            let mut k = m;
            while k <= n - 1 {
                let notlast = k != n - 1;
                if k != m {
                    p = h[ix(k, k - 1)];
                    q = h[ix(k + 1, k - 1)];
                    r = if notlast { h[ix(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[ix(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[ix(k, k - 1)] = -h[ix(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[ix(k, j)] + q * h[ix(k + 1, j)];
                        if notlast {
                            p += r * h[ix(k + 2, j)];
                            h[ix(k + 2, j)] -= p * z;
                        }
                        h[ix(k, j)] -= p * x;
                        h[ix(k + 1, j)] -= p * y;
                    }
                    for i in 0..=n.min(k + 3) {
                        p = x * h[ix(i, k)] + y * h[ix(i, k + 1)];
                        if notlast {
                            p += z * h[ix(i, k + 2)];
                            h[ix(i, k + 2)] -= p * r;
                        }
                        h[ix(i, k)] -= p;
                        h[ix(i, k + 1)] -= p * q;
                    }
                    for i in low..=high {
                        p = x * v[ix(i, k)] + y * v[ix(i, k + 1)];
                        if notlast {
                            p += z * v[ix(i, k + 2)];
                            v[ix(i, k + 2)] -= p * r;
                        }
                        v[ix(i, k)] -= p;
                        v[ix(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    if norm == 0.0 {
        return Ok(());
    }

    for n in (0..nn).rev() {
        p = d[n as usize];
        q = e[n as usize];
        if q == 0.0 {
            let mut l = n;
            h[ix(n, n)] = 1.0;
            for i in (0..n).rev() {
                w = h[ix(i, i)] - p;
                r = 0.0;
                for j in l..=n {
                    r += h[ix(i, j)] * h[ix(j, n)];
                }
                if e[i as usize] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i as usize] == 0.0 {
                        h[ix(i, n)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        x = h[ix(i, i + 1)];
                        y = h[ix(i + 1, i)];
                        q = (d[i as usize] - p) * (d[i as usize] - p) + e[i as usize] * e[i as usize];
                        t = (x * s - z * r) / q;
                        h[ix(i, n)] = t;
                        h[ix(i + 1, n)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    t = h[ix(i, n)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[ix(j, n)] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            let mut l = n - 1;
            if h[ix(n, n - 1)].abs() > h[ix(n - 1, n)].abs() {
                h[ix(n - 1, n - 1)] = q / h[ix(n, n - 1)];
                h[ix(n - 1, n)] = -(h[ix(n, n)] - p) / h[ix(n, n - 1)];
            } else {
                let (cr, ci) = cdiv(0.0, -h[ix(n - 1, n)], h[ix(n - 1, n - 1)] - p, q);
                h[ix(n - 1, n - 1)] = cr;
                h[ix(n - 1, n)] = ci;
            }
            h[ix(n, n - 1)] = 0.0;
            h[ix(n, n)] = 1.0;
            for i in (0..(n - 1)).rev() {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=n {
                    ra += h[ix(i, j)] * h[ix(j, n - 1)];
                    sa += h[ix(i, j)] * h[ix(j, n)];
                }
                w = h[ix(i, i)] - p;
                if e[i as usize] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i as usize] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        h[ix(i, n - 1)] = cr;
                        h[ix(i, n)] = ci;
                    } else {
                        x = h[ix(i, i + 1)];
                        y = h[ix(i + 1, i)];
                        let mut vr = (d[i as usize] - p) * (d[i as usize] - p)
                            + e[i as usize] * e[i as usize]
                            - q * q;
                        let vi = (d[i as usize] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps * norm * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) =
                            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        h[ix(i, n - 1)] = cr;
                        h[ix(i, n)] = ci;
                        if x.abs() > z.abs() + q.abs() {
                            h[ix(i + 1, n - 1)] = (-ra - w * h[ix(i, n - 1)] + q * h[ix(i, n)]) / x;
                            h[ix(i + 1, n)] = (-sa - w * h[ix(i, n)] - q * h[ix(i, n - 1)]) / x;
                        } else {
                            let (cr, ci) =
                                cdiv(-r - y * h[ix(i, n - 1)], -s - y * h[ix(i, n)], z, q);
                            h[ix(i + 1, n - 1)] = cr;
                            h[ix(i + 1, n)] = ci;
                        }
                    }
                    t = h[ix(i, n - 1)].abs().max(h[ix(i, n)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[ix(j, n - 1)] /= t;
                            h[ix(j, n)] /= t;
                        }
                    }
                }
            }
        }
    }

    for i in 0..nn {
        if i < low || i > high {
            for j in i..nn {
                v[ix(i, j)] = h[ix(i, j)];
            }
        }
    }

    for j in (low..nn).rev() {
        for i in low..=high {
            z = 0.0;
            for k in low..=j.min(high) {
                z += v[ix(i, k)] * h[ix(k, j)];
            }
            v[ix(i, j)] = z;
        }
    }
    Ok(())
}

/// Eigenvalues and right eigenvectors of a real square matrix.
pub fn eig(a: &DMatrix<f64>) -> Result<Eigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Invalid("eigenproblem needs a square matrix".into()));
    }
    if n == 0 {
        return Ok(Eigen {
            values: vec![],
            vectors: DMatrix::zeros(0, 0),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("matrix has non-finite entries".into()));
    }
    let mut h: Vec<f64> = (0..n * n).map(|k| a[(k / n, k % n)]).collect();
    let bal = balance(&mut h, n);
    let mut v = vec![0.0; n * n];
    orthes(n, bal.low, bal.high, &mut h, &mut v);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    hqr2(n, bal.low, bal.high, &mut d, &mut e, &mut h, &mut v)?;
    balance_back(&bal, &mut v, n);

    let values: Vec<Complex64> = d.iter().zip(&e).map(|(re, im)| Complex64::new(*re, *im)).collect();
    let mut vectors = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let mut j = 0;
    while j < n {
        if e[j] == 0.0 {
            for i in 0..n {
                vectors[(i, j)] = Complex64::new(v[i * n + j], 0.0);
            }
            j += 1;
        } else {
            for i in 0..n {
                let re = v[i * n + j];
                let im = v[i * n + j + 1];
                vectors[(i, j)] = Complex64::new(re, im);
                vectors[(i, j + 1)] = Complex64::new(re, -im);
            }
            j += 2;
        }
    }
    Ok(Eigen { values, vectors })
}

/// Left eigenvector `w` (with `w^T A = lambda w^T`) for the eigenvalue of
/// `A^T` closest to `lambda`.
pub fn left_eigenvector(a: &DMatrix<f64>, lambda: Complex64) -> Result<(Complex64, Vec<Complex64>)> {
    let et = eig(&a.transpose())?;
    let mut best = 0;
    for k in 1..et.values.len() {
        if (et.values[k] - lambda).norm() < (et.values[best] - lambda).norm() {
            best = k;
        }
    }
    Ok((et.values[best], et.vector(best)))
}

/// Finite eigenvalues of the pencil `det(lambda E - J) = 0` for
/// `E = diag(I_n, 0_m)`. With `mu = 1/(lambda - sigma)` the problem becomes
/// the ordinary eigenproblem of `(J - sigma E)^{-1} E`; the `m` infinite
/// eigenvalues map to `mu = 0` and are dropped.
pub fn pencil_eigenvalues(j: &DMatrix<f64>, n_diff: usize) -> Result<Vec<Complex64>> {
    let dim = j.nrows();
    let m = dim - n_diff;
    // Shifts that are unlikely to be eigenvalues; the next one is tried if
    // J - sigma E is singular or the infinite eigenvalues do not separate.
    for sigma in [1.234_567, -2.718_281, 31.415_926, -0.577_215] {
        let mut a = j.clone();
        for k in 0..n_diff {
            a[(k, k)] -= sigma;
        }
        let mut e = DMatrix::zeros(dim, dim);
        for k in 0..n_diff {
            e[(k, k)] = 1.0;
        }
        let Some(b) = a.lu().solve(&e) else { continue };
        if b.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let mut mus = eig(&b)?.values;
        mus.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        if m > 0 && m < dim && mus[m - 1].norm() > 1e-6 * mus[m].norm() {
            continue;
        }
        return Ok(mus[m..]
            .iter()
            .map(|mu| Complex64::new(sigma, 0.0) + mu.inv())
            .collect());
    }
    Err(Error::EigenFailure)
}
