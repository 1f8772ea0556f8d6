//! 1-D heteroclinic connections and the cylindrical machinery built on them:
//! the Action, the effective potential W_eff(v) = A(v) - A(e), hyperbolicity
//! of the linearized operator on the symmetric subspace, the L^2-polar form
//! over cylinders, and the associated density scans.
//!
//! Symmetric class: v(-s) = v_hat(s), realized on the half line [0, L] with
//! parity conditions per component (first component odd, value 0 at s = 0;
//! the rest even, zero derivative at s = 0).

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::density::DensityReport;
use crate::error::{PhaseError, Result};
use crate::grid::{Field, Grid, NodeTag, Region};
use crate::potentials::{self, PotentialSpec, Q_MIN};
use crate::rng;

/// Uniformly sampled m-vector curve on [-L, L].
#[derive(Clone, Debug, Serialize)]
pub struct SampledCurve {
    pub l: f64,
    pub m: usize,
    pub values: Vec<f64>,
}

impl SampledCurve {
    pub fn new(l: f64, m: usize, values: Vec<f64>) -> Self {
        assert!(values.len() % m == 0 && values.len() / m >= 3);
        SampledCurve { l, m, values }
    }

    pub fn from_fn(l: f64, m: usize, nodes: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let h = 2.0 * l / (nodes - 1) as f64;
        let mut values = vec![0.0; nodes * m];
        for i in 0..nodes {
            let s = -l + i as f64 * h;
            f(s, &mut values[i * m..(i + 1) * m]);
        }
        SampledCurve { l, m, values }
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn h(&self) -> f64 {
        2.0 * self.l / (self.nodes() - 1) as f64
    }

    pub fn s(&self, i: usize) -> f64 {
        -self.l + i as f64 * self.h()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// Trapezoid L^2 norm over the line.
    pub fn l2_norm(&self) -> f64 {
        l2_inner(self, self).sqrt()
    }

    /// Max over nodes of |v(-s) - v_hat(s)|.
    pub fn symmetry_gap(&self) -> f64 {
        let n = self.nodes();
        let mut worst = 0.0f64;
        for i in 0..n {
            let j = n - 1 - i;
            for c in 0..self.m {
                let a = self.values[i * self.m + c];
                let b = self.values[j * self.m + c];
                let b = if c == 0 { -b } else { b };
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Project onto the symmetric class (idempotent).
    pub fn symmetrize(&mut self) {
        let n = self.nodes();
        let m = self.m;
        for i in 0..=(n - 1) / 2 {
            let j = n - 1 - i;
            for c in 0..m {
                let a = self.values[i * m + c];
                let b = self.values[j * m + c];
                let b_ref = if c == 0 { -b } else { b };
                let v = 0.5 * (a + b_ref);
                self.values[i * m + c] = v;
                self.values[j * m + c] = if c == 0 { -v } else { v };
            }
            if i == j {
                self.values[i * m] = 0.0;
            }
        }
    }
}

/// Trapezoid inner product of two curves on the same truncation.
pub fn l2_inner(a: &SampledCurve, b: &SampledCurve) -> f64 {
    assert_eq!(a.nodes(), b.nodes());
    assert_eq!(a.m, b.m);
    let n = a.nodes();
    let h = a.h();
    let mut total = 0.0;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let mut dot = 0.0;
        for c in 0..a.m {
            dot += a.values[i * a.m + c] * b.values[i * b.m + c];
        }
        total += w * dot * h;
    }
    total
}

#[derive(Clone, Debug, Serialize)]
pub struct ActionEval {
    pub value: f64,
    /// endpoints within tolerance of the wells
    pub admissible: bool,
    pub end_gap: f64,
}

/// Trapezoid quadrature of the Action density 1/2 |v_s|^2 + W(v); the exact
/// same quadrature everywhere, so W_eff(e) = 0 identically.
pub fn action(v: &SampledCurve, spec: &PotentialSpec, wells: (&[f64], &[f64])) -> ActionEval {
    let n = v.nodes();
    let h = v.h();
    let m = v.m;
    let mut kinetic = 0.0;
    for i in 0..n - 1 {
        let mut d2 = 0.0;
        for c in 0..m {
            let d = v.values[(i + 1) * m + c] - v.values[i * m + c];
            d2 += d * d;
        }
        kinetic += d2 / (2.0 * h);
    }
    let mut potential = 0.0;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        potential += w * potentials::eval_w(spec, v.value(i)) * h;
    }
    let gap_minus: f64 = v
        .value(0)
        .iter()
        .zip(wells.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let gap_plus: f64 = v
        .value(n - 1)
        .iter()
        .zip(wells.1)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let end_gap = gap_minus.max(gap_plus);
    ActionEval { value: kinetic + potential, admissible: end_gap <= 1e-3, end_gap }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConnectionProfile {
    pub curve: SampledCurve,
    pub well_minus: Vec<f64>,
    pub well_plus: Vec<f64>,
    pub action: f64,
    /// sup-norm of the interior ODE residual e_ss - W_u(e)
    pub residual: f64,
    /// exponential tail fit |e - a_+| <= K exp(-k s)
    pub tail_k: f64,
    pub tail_big_k: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum ConnectionInit {
    /// straight segment between the wells
    Linear,
    /// straight segment plus a second-component arc (m >= 2); positive
    /// amplitude selects the upper branch when the minimizer is not unique
    Arc(f64),
}

/// Minimize the discrete Action in the symmetric class with clamped
/// endpoints. Steps are semi-implicit (tridiagonal in the stiffness term),
/// projected onto the symmetry class, with the adaptive halve/grow rule on
/// the Action; fixed points satisfy the discrete ODE e_ss = W_u(e) exactly.
pub fn solve_connection(
    spec: &PotentialSpec,
    l: f64,
    nodes: usize,
    init: ConnectionInit,
) -> Result<ConnectionProfile> {
    if spec.alpha != 2.0 {
        return Err(PhaseError::UnsupportedAlpha { alpha: spec.alpha });
    }
    if !spec.symmetric || spec.wells.len() != 2 {
        return Err(PhaseError::NonAdmissible(
            "connection solving needs a symmetric two-well potential".into(),
        ));
    }
    if nodes % 2 == 0 || nodes < 11 {
        return Err(PhaseError::NonAdmissible("need an odd node count >= 11".into()));
    }
    let plus = spec
        .plus_well()
        .ok_or_else(|| PhaseError::NonAdmissible("no well with positive first coordinate".into()))?;
    let a_plus = spec.wells[plus].clone();
    let a_minus = potentials::reflect(&a_plus);
    let m = spec.m;
    let h = 2.0 * l / (nodes - 1) as f64;

    let mut v = SampledCurve::from_fn(l, m, nodes, |s, out| {
        let t = 0.5 * (s / l + 1.0);
        for c in 0..m {
            out[c] = a_minus[c] + t * (a_plus[c] - a_minus[c]);
        }
        if let ConnectionInit::Arc(amp) = init {
            if m >= 2 {
                out[1] += amp * (0.5 * std::f64::consts::PI * s / l).cos();
            }
        }
    });
    v.symmetrize();
    clamp_ends(&mut v, &a_minus, &a_plus);

    let mut act = action(&v, spec, (&a_minus, &a_plus)).value;
    let mut dt = 0.05_f64;
    let dt_max = 0.5;
    let tol = 1e-8;
    let max_iters = 60_000;
    let mut trial = v.clone();
    let mut wgrad = vec![0.0; nodes * m];
    let mut converged = false;
    let mut res = f64::INFINITY;

    for iter in 1..=max_iters {
        for i in 1..nodes - 1 {
            let g = potentials::eval_w_grad(spec, v.value(i))?;
            wgrad[i * m..(i + 1) * m].copy_from_slice(&g);
        }
        let mut halvings = 0;
        loop {
            trial.values.copy_from_slice(&v.values);
            imex_step(&mut trial, &wgrad, dt, h, &a_minus, &a_plus);
            trial.symmetrize();
            clamp_ends(&mut trial, &a_minus, &a_plus);
            let a_new = action(&trial, spec, (&a_minus, &a_plus)).value;
            if a_new <= act + 1e-14 * act.abs().max(1.0) {
                act = a_new;
                break;
            }
            dt *= 0.5;
            halvings += 1;
            if dt < 1e-14 {
                break;
            }
        }
        std::mem::swap(&mut v.values, &mut trial.values);
        if halvings == 0 {
            dt = (dt * 1.1).min(dt_max);
        }
        if iter % 8 == 0 || iter == max_iters {
            res = ode_residual(&v, spec)?;
            if res <= tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(PhaseError::NoConvergence { residual: res, iters: max_iters });
    }

    // exponential tail fit on [L/2, L - 2h]
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..nodes {
        let s = v.s(i);
        if s < l / 2.0 || s > l - 2.0 * h {
            continue;
        }
        let dev: f64 = v
            .value(i)
            .iter()
            .zip(&a_plus)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if dev > 1e-14 {
            xs.push(s);
            ys.push(dev.ln());
        }
    }
    if xs.len() < 4 {
        return Err(PhaseError::TruncationTooShort(
            "tail has too few resolvable nodes".into(),
        ));
    }
    let nf = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
    let tail_k = -slope;
    let hess = potentials::eval_w_hess(spec, &a_plus)?;
    let k_floor = 0.5 * potentials::smallest_eigenvalue(&hess).max(0.0).sqrt();
    if !(tail_k > 0.0) || tail_k < k_floor {
        return Err(PhaseError::TruncationTooShort(format!(
            "tail rate {tail_k:.3} below the admissible floor {k_floor:.3}; increase L"
        )));
    }
    // K as an actual bound over s >= 0 for |e - a_+| and |e_s|
    let mut big_k = 0.0f64;
    for i in 1..nodes - 1 {
        let s = v.s(i);
        if s < 0.0 {
            continue;
        }
        let dev: f64 = v
            .value(i)
            .iter()
            .zip(&a_plus)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let mut der = 0.0;
        for c in 0..m {
            let d = (v.values[(i + 1) * m + c] - v.values[(i - 1) * m + c]) / (2.0 * h);
            der += d * d;
        }
        big_k = big_k.max(dev.max(der.sqrt()) * (tail_k * s).exp());
    }

    let act_eval = action(&v, spec, (&a_minus, &a_plus));
    Ok(ConnectionProfile {
        curve: v,
        well_minus: a_minus,
        well_plus: a_plus,
        action: act_eval.value,
        residual: res,
        tail_k,
        tail_big_k: big_k,
    })
}

fn clamp_ends(v: &mut SampledCurve, a_minus: &[f64], a_plus: &[f64]) {
    let n = v.nodes();
    let m = v.m;
    v.values[..m].copy_from_slice(a_minus);
    v.values[(n - 1) * m..].copy_from_slice(a_plus);
}

/// (I - dt D2) v_new = v_old - dt W_u(v_old), per component (Thomas solve).
fn imex_step(
    v: &mut SampledCurve,
    wgrad: &[f64],
    dt: f64,
    h: f64,
    a_minus: &[f64],
    a_plus: &[f64],
) {
    let n = v.nodes();
    let m = v.m;
    let interior = n - 2;
    let r = dt / (h * h);
    let diag = 1.0 + 2.0 * r;
    let mut c_star = vec![0.0; interior];
    let mut d_star = vec![0.0; interior];
    for comp in 0..m {
        // rhs
        for i in 0..interior {
            let node = i + 1;
            let mut rhs = v.values[node * m + comp] - dt * wgrad[node * m + comp];
            if i == 0 {
                rhs += r * a_minus[comp];
            }
            if i == interior - 1 {
                rhs += r * a_plus[comp];
            }
            d_star[i] = rhs;
        }
        // Thomas with constant coefficients (sub = sup = -r)
        c_star[0] = -r / diag;
        d_star[0] /= diag;
        for i in 1..interior {
            let mden = diag + r * c_star[i - 1];
            c_star[i] = -r / mden;
            d_star[i] = (d_star[i] + r * d_star[i - 1]) / mden;
        }
        for i in (0..interior - 1).rev() {
            d_star[i] -= c_star[i] * d_star[i + 1];
        }
        for i in 0..interior {
            v.values[(i + 1) * m + comp] = d_star[i];
        }
    }
}

/// sup-norm of the interior discrete ODE residual v_ss - W_u(v).
pub fn ode_residual(v: &SampledCurve, spec: &PotentialSpec) -> Result<f64> {
    let n = v.nodes();
    let m = v.m;
    let h = v.h();
    let mut worst = 0.0f64;
    for i in 1..n - 1 {
        let g = potentials::eval_w_grad(spec, v.value(i))?;
        let mut r2 = 0.0;
        for c in 0..m {
            let vss = (v.values[(i + 1) * m + c] - 2.0 * v.values[i * m + c]
                + v.values[(i - 1) * m + c])
                / (h * h);
            let r = vss - g[c];
            r2 += r * r;
        }
        worst = worst.max(r2.sqrt());
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Effective potential
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EffectivePotentialEval {
    /// W_eff(v) = A(v) - A(e)
    pub value: f64,
    /// q = ||v - e|| (trapezoid L^2)
    pub q: f64,
    /// (v - e)/q when q > Q_MIN
    pub nu: Option<SampledCurve>,
}

/// A(v) - A(e) for an admissible symmetric curve on e's truncation.
pub fn effective_potential(
    v: &SampledCurve,
    e: &ConnectionProfile,
    spec: &PotentialSpec,
) -> Result<EffectivePotentialEval> {
    if v.nodes() != e.curve.nodes() || (v.l - e.curve.l).abs() > 1e-12 || v.m != e.curve.m {
        return Err(PhaseError::TruncationMismatch(
            "curve does not match the connection truncation".into(),
        ));
    }
    if v.symmetry_gap() > 1e-6 {
        return Err(PhaseError::NonAdmissible(format!(
            "symmetry gap {:.3e}",
            v.symmetry_gap()
        )));
    }
    let av = action(v, spec, (&e.well_minus, &e.well_plus));
    if !av.admissible {
        return Err(PhaseError::NonAdmissible(format!(
            "endpoint gap {:.3e}",
            av.end_gap
        )));
    }
    let m = v.m;
    let diff = SampledCurve::new(
        v.l,
        m,
        v.values
            .iter()
            .zip(&e.curve.values)
            .map(|(a, b)| a - b)
            .collect(),
    );
    let q = diff.l2_norm();
    let nu = if q > Q_MIN {
        Some(SampledCurve::new(
            v.l,
            m,
            diff.values.iter().map(|x| x / q).collect(),
        ))
    } else {
        None
    };
    Ok(EffectivePotentialEval { value: av.value - e.action, q, nu })
}

// ---------------------------------------------------------------------------
// Hyperbolicity of T = -d^2/ds^2 + W_uu(e) on the symmetric subspace
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct HyperbolicityReport {
    pub eta: f64,
    /// independent spectral oracle (Sturm bisection), m = 1 only
    pub eta_bisection: Option<f64>,
    /// lowest mode reconstructed on the full line, trapezoid-normalized
    pub eigenvector: SampledCurve,
    pub dim: usize,
}

/// Smallest eigenvalue of the reflection-reduced operator. The half-line
/// reduction uses Dirichlet 0 at s = 0 for the odd first component, a mirror
/// (Neumann) row for the even ones, and Dirichlet at the truncation end.
pub fn hyperbolicity(e: &ConnectionProfile, spec: &PotentialSpec) -> Result<HyperbolicityReport> {
    if spec.alpha != 2.0 {
        return Err(PhaseError::UnsupportedAlpha { alpha: spec.alpha });
    }
    let n = e.curve.nodes();
    let m = e.curve.m;
    let h = e.curve.h();
    let mid = (n - 1) / 2;
    let half = n - mid; // nodes s = 0 .. L inclusive

    // unknown layout: j = 0 has the even components only, then all m
    // components per node for 1 <= j <= half-2 (j = half-1 is clamped)
    let mut index = vec![usize::MAX; half * m];
    let mut dim = 0usize;
    for j in 0..half - 1 {
        for c in 0..m {
            if j == 0 && c == 0 {
                continue; // odd component vanishes at s = 0
            }
            index[j * m + c] = dim;
            dim += 1;
        }
    }

    // Hessians along the half-line profile
    let mut hess = Vec::with_capacity(half);
    for j in 0..half {
        hess.push(potentials::eval_w_hess(spec, e.curve.value(mid + j))?);
    }

    // Assemble the similarity-scaled symmetric banded matrix (lower storage).
    // The mirror (Neumann) row at j = 0 is made symmetric by scaling those
    // unknowns with 1/sqrt(2): the j = 0 <-> j = 1 off-diagonals both become
    // -sqrt(2)/h^2, while same-node entries are untouched (equal scales
    // cancel in d_i A d_k^{-1}). Eigenvalues are preserved.
    let bw = m; // max index distance of a coupling
    let mut band = vec![0.0; dim * (bw + 1)]; // band[r * dim + i] = A[i + r][i]
    let mut add = |i: usize, k: usize, v: f64| {
        let (lo, hi) = if i <= k { (i, k) } else { (k, i) };
        let r = hi - lo;
        debug_assert!(r <= bw);
        band[r * dim + lo] += v;
    };
    let h2 = h * h;
    for j in 0..half - 1 {
        for c in 0..m {
            let i = index[j * m + c];
            if i == usize::MAX {
                continue;
            }
            add(i, i, 2.0 / h2);
            if j + 1 <= half - 2 {
                let kx = index[(j + 1) * m + c];
                let v = if j == 0 && c >= 1 { -2f64.sqrt() / h2 } else { -1.0 / h2 };
                add(i, kx, v);
            }
            for c2 in c..m {
                let k2 = index[j * m + c2];
                if k2 == usize::MAX {
                    continue;
                }
                add(i, k2, hess[j][c][c2]);
            }
        }
    }

    let eta = smallest_eigenvalue_banded(&band, dim, bw)?;
    let eta_bisection = if m == 1 {
        // tridiagonal: independent Sturm-sequence bisection
        let mut diag = Vec::with_capacity(dim);
        let mut off = Vec::with_capacity(dim.saturating_sub(1));
        for i in 0..dim {
            diag.push(band[i]);
            if i + 1 < dim {
                off.push(band[dim + i]);
            }
        }
        Some(tridiagonal_smallest_eigenvalue(&diag, &off))
    } else {
        None
    };

    // reconstruct the lowest mode on the full line (undoing the 1/sqrt(2)
    // similarity scale on the j = 0 even-component unknowns)
    let vec_half = banded_inverse_iteration_vector(&band, dim, bw, eta)?;
    let mut full = vec![0.0; n * m];
    for j in 0..half {
        for c in 0..m {
            let idx = index.get(j * m + c).cloned().unwrap_or(usize::MAX);
            let val = if j >= half - 1 || idx == usize::MAX {
                0.0
            } else if j == 0 && c >= 1 {
                vec_half[idx] * 2f64.sqrt()
            } else {
                vec_half[idx]
            };
            full[(mid + j) * m + c] = val;
            let mirror = mid - j;
            full[mirror * m + c] = if c == 0 { -val } else { val };
        }
    }
    let mut eigenvector = SampledCurve::new(e.curve.l, m, full);
    let norm = eigenvector.l2_norm();
    if norm > 0.0 {
        eigenvector.values.iter_mut().for_each(|x| *x /= norm);
    }

    if eta <= 0.0 {
        return Err(PhaseError::NotHyperbolic { eta });
    }
    Ok(HyperbolicityReport { eta, eta_bisection, eigenvector, dim })
}

/// Eigenvalue count below x for a symmetric tridiagonal matrix (Sturm), then
/// bisection for the smallest eigenvalue.
pub fn tridiagonal_smallest_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let n = diag.len();
    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut d = diag[0] - x;
        if d < 0.0 {
            count += 1;
        }
        for i in 1..n {
            let od = off[i - 1];
            d = diag[i] - x - od * od / if d != 0.0 { d } else { 1e-300 };
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    // Gershgorin bracket
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let mut r = 0.0;
        if i > 0 {
            r += off[i - 1].abs();
        }
        if i + 1 < n {
            r += off[i].abs();
        }
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count_below(mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 * (1.0 + hi.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Banded Cholesky factorization (lower, in place); fails if not PD.
fn banded_cholesky(band: &mut [f64], dim: usize, bw: usize) -> bool {
    for j in 0..dim {
        let mut d = band[j];
        for k in 1..=bw.min(j) {
            let l = band[k * dim + (j - k)];
            d -= l * l;
        }
        if d <= 0.0 {
            return false;
        }
        let d = d.sqrt();
        band[j] = d;
        for r in 1..=bw {
            if j + r >= dim {
                break;
            }
            let mut v = band[r * dim + j];
            for k in 1..=bw {
                if k <= j && r + k <= bw {
                    // A[j+r][j] update with previously computed columns
                    let l1 = band[(r + k) * dim + (j - k)];
                    let l2 = band[k * dim + (j - k)];
                    v -= l1 * l2;
                }
            }
            band[r * dim + j] = v / d;
        }
    }
    true
}

fn banded_solve(chol: &[f64], dim: usize, bw: usize, rhs: &mut [f64]) {
    // forward
    for i in 0..dim {
        let mut v = rhs[i];
        for k in 1..=bw.min(i) {
            v -= chol[k * dim + (i - k)] * rhs[i - k];
        }
        rhs[i] = v / chol[i];
    }
    // backward
    for i in (0..dim).rev() {
        let mut v = rhs[i];
        for k in 1..=bw {
            if i + k < dim {
                v -= chol[k * dim + i] * rhs[i + k];
            }
        }
        rhs[i] = v / chol[i];
    }
}

/// Smallest eigenvalue by shifted inverse iteration with banded Cholesky.
fn smallest_eigenvalue_banded(band: &[f64], dim: usize, bw: usize) -> Result<f64> {
    // Gershgorin lower bound
    let mut lo = f64::INFINITY;
    for i in 0..dim {
        let mut r = 0.0;
        for k in 1..=bw {
            if i + k < dim {
                r += band[k * dim + i].abs();
            }
            if k <= i {
                r += band[k * dim + (i - k)].abs();
            }
        }
        lo = lo.min(band[i] - r);
    }
    let matvec = |x: &[f64], y: &mut [f64]| {
        for i in 0..dim {
            let mut v = band[i] * x[i];
            for k in 1..=bw {
                if i + k < dim {
                    v += band[k * dim + i] * x[i + k];
                }
                if k <= i {
                    v += band[k * dim + (i - k)] * x[i - k];
                }
            }
            y[i] = v;
        }
    };

    let mut shift = lo - 1.0;
    let mut x = vec![1.0; dim];
    let mut y = vec![0.0; dim];
    let mut lambda = f64::NAN;
    let mut prev = f64::NAN;
    for _round in 0..8 {
        let mut shifted = band.to_vec();
        for i in 0..dim {
            shifted[i] -= shift;
        }
        if !banded_cholesky(&mut shifted, dim, bw) {
            // shift landed at or above the bottom eigenvalue; back off
            shift -= 1.0 + shift.abs() * 0.1;
            continue;
        }
        for _ in 0..120 {
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            let mut z = x.clone();
            banded_solve(&shifted, dim, bw, &mut z);
            x = z;
        }
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        matvec(&x, &mut y);
        lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        if !prev.is_nan() && (lambda - prev).abs() <= 1e-11 * lambda.abs().max(1.0) {
            break;
        }
        prev = lambda;
        // re-shift just below the current estimate for fast convergence
        shift = lambda - 0.05 * lambda.abs().max(0.1);
    }
    if lambda.is_nan() {
        return Err(PhaseError::NoConvergence { residual: f64::NAN, iters: 0 });
    }
    Ok(lambda)
}

/// Lowest-mode vector for a given eigenvalue estimate (one factored solve).
fn banded_inverse_iteration_vector(
    band: &[f64],
    dim: usize,
    bw: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    let mut shifted = band.to_vec();
    let mut margin = 0.01 * lambda.abs().max(0.1);
    loop {
        for i in 0..dim {
            shifted[i] = band[i] - (lambda - margin);
        }
        let mut chol = shifted.clone();
        if banded_cholesky(&mut chol, dim, bw) {
            let mut x = vec![1.0; dim];
            for _ in 0..200 {
                let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter_mut().for_each(|v| *v /= norm);
                banded_solve(&chol, dim, bw, &mut x);
            }
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            return Ok(x);
        }
        margin *= 2.0;
        if margin > 1e6 {
            return Err(PhaseError::NoConvergence { residual: f64::NAN, iters: 0 });
        }
    }
}

// ---------------------------------------------------------------------------
// D_qq W_eff scan
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct WqqRow {
    pub q: f64,
    pub min_dqq: f64,
    /// Richardson gap between the delta and delta/2 second differences
    pub fd_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WqqReport {
    pub eta: f64,
    /// c0 = eta / 2
    pub c0: f64,
    /// largest scanned q with inf_nu D_qq W_eff >= c0
    pub q_bar: f64,
    /// lambda* is the measured q_bar
    pub lambda_star: f64,
    pub rows: Vec<WqqRow>,
    /// max |D_qq W_eff(0) - <T nu, nu>| over the sampled directions
    pub tl_equal_t_gap: f64,
    pub directions: usize,
}

/// Quadratic form <T nu, nu> = int |nu_s|^2 + W_uu(e) nu . nu by quadrature.
pub fn t_quadratic_form(nu: &SampledCurve, e: &ConnectionProfile, spec: &PotentialSpec) -> Result<f64> {
    let n = nu.nodes();
    let m = nu.m;
    let h = nu.h();
    let mut kinetic = 0.0;
    for i in 0..n - 1 {
        for c in 0..m {
            let d = nu.values[(i + 1) * m + c] - nu.values[i * m + c];
            kinetic += d * d / h;
        }
    }
    let mut potential = 0.0;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let hess = potentials::eval_w_hess(spec, e.curve.value(i))?;
        let nv = nu.value(i);
        let mut q = 0.0;
        for c in 0..m {
            for d in 0..m {
                q += nv[c] * hess[c][d] * nv[d];
            }
        }
        potential += w * q * h;
    }
    Ok(kinetic + potential)
}

/// Random smooth symmetric directions, L^2-normalized, vanishing at the
/// truncation ends.
pub fn random_direction(e: &ConnectionProfile, seed: u64, id: u64) -> SampledCurve {
    let mut rg = rng::stream(seed, id);
    let l = e.curve.l;
    let m = e.curve.m;
    let n = e.curve.nodes();
    let bumps: Vec<(usize, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rg.gen_range(0..m),
                rg.gen_range(-0.6 * l..0.6 * l),
                rg.gen_range(0.3..1.2),
                rg.gen_range(0.5..1.5) * if rg.gen::<bool>() { 1.0 } else { -1.0 },
            )
        })
        .collect();
    // bumps on signed s: generic off-center profiles keep both parities
    // alive, so the symmetrization below never annihilates a component
    let mut nu = SampledCurve::from_fn(l, m, n, |s, out| {
        for &(c, center, width, amp) in &bumps {
            let z = (s - center) / width;
            out[c] += amp * (-z * z).exp();
        }
        // taper to zero at the ends to keep endpoint admissibility
        let taper = (1.0 - (s.abs() / l).powi(4)).max(0.0);
        for v in out.iter_mut() {
            *v *= taper;
        }
    });
    nu.symmetrize();
    let norm = nu.l2_norm();
    if norm > 1e-12 {
        nu.values.iter_mut().for_each(|x| *x /= norm);
    }
    nu
}

/// Scan D_qq W_eff(e + q nu) over sampled directions by second central
/// differences in q (with a Richardson half-step check), and estimate the
/// largest q_bar with inf D_qq >= c0 := eta/2. lambda* is set to q_bar.
pub fn wqq_check(
    e: &ConnectionProfile,
    spec: &PotentialSpec,
    eta: f64,
    directions: usize,
    qbar_scan: &[f64],
    seed: u64,
) -> Result<WqqReport> {
    let c0 = 0.5 * eta;
    let dirs: Vec<SampledCurve> = (0..directions as u64)
        .map(|d| random_direction(e, seed, d))
        .collect();
    let qmax = qbar_scan.iter().cloned().fold(0.0, f64::max);
    let delta = 1e-3 * qmax.max(1e-2);

    let w_eff_at = |nu: &SampledCurve, q: f64| -> Result<f64> {
        let v = SampledCurve::new(
            e.curve.l,
            e.curve.m,
            e.curve
                .values
                .iter()
                .zip(&nu.values)
                .map(|(ev, nv)| ev + q * nv)
                .collect(),
        );
        Ok(action(&v, spec, (&e.well_minus, &e.well_plus)).value - e.action)
    };
    let dqq = |nu: &SampledCurve, q: f64, d: f64| -> Result<f64> {
        let wp = w_eff_at(nu, q + d)?;
        let w0 = w_eff_at(nu, q)?;
        let wm = w_eff_at(nu, q - d)?;
        Ok((wp - 2.0 * w0 + wm) / (d * d))
    };

    // tl-equal-t check at q = 0
    let mut tl_gap = 0.0f64;
    for nu in &dirs {
        let fd = dqq(nu, 0.0, delta)?;
        let quad = t_quadratic_form(nu, e, spec)?;
        tl_gap = tl_gap.max((fd - quad).abs());
    }

    let rows: Result<Vec<WqqRow>> = qbar_scan
        .par_iter()
        .map(|&q| {
            let mut min_dqq = f64::INFINITY;
            let mut fd_gap = 0.0f64;
            for nu in &dirs {
                let d1 = dqq(nu, q, delta)?;
                let d2 = dqq(nu, q, 0.5 * delta)?;
                fd_gap = fd_gap.max((d1 - d2).abs());
                min_dqq = min_dqq.min(d2);
            }
            Ok(WqqRow { q, min_dqq, fd_gap })
        })
        .collect();
    let rows = rows?;

    let mut q_bar = 0.0;
    for row in &rows {
        if row.min_dqq >= c0 {
            q_bar = row.q;
        } else {
            break;
        }
    }
    Ok(WqqReport {
        eta,
        c0,
        q_bar,
        lambda_star: q_bar,
        rows,
        tl_equal_t_gap: tl_gap,
        directions,
    })
}

// ---------------------------------------------------------------------------
// Interpolation bounds
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct InterpReport {
    pub linf: f64,
    pub l2: f64,
    pub l2_grad: f64,
    /// ||v||_inf <= sqrt(2) ||v||^(1/2) ||v_s||^(1/2)
    pub sqrt2_ok: bool,
    /// exponential-class data, when the tail fit succeeds
    pub exp_k: Option<f64>,
    pub exp_big_k: Option<f64>,
    /// ||v||_inf <= (3 K)^(1/3) ||v||^(2/3)
    pub twothirds_ok: Option<bool>,
}

/// Evaluate the interpolation inequalities on a decaying curve by quadrature.
pub fn interp_bound_check(v: &SampledCurve) -> InterpReport {
    let n = v.nodes();
    let m = v.m;
    let h = v.h();
    let mut linf = 0.0f64;
    for i in 0..n {
        let norm: f64 = v.value(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        linf = linf.max(norm);
    }
    let l2 = v.l2_norm();
    let mut grad2 = 0.0;
    for i in 0..n - 1 {
        for c in 0..m {
            let d = v.values[(i + 1) * m + c] - v.values[i * m + c];
            grad2 += d * d / h;
        }
    }
    let l2_grad = grad2.sqrt();
    let sqrt2_ok = linf <= 2f64.sqrt() * l2.sqrt() * l2_grad.sqrt() + 1e-12;

    // tail fit for the exponential class
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let s = v.s(i);
        if s <= 0.0 {
            continue;
        }
        let norm: f64 = v.value(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 && norm < 0.5 * linf {
            xs.push(s);
            ys.push(norm.ln());
        }
    }
    let (exp_k, exp_big_k, twothirds_ok) = if xs.len() >= 4 {
        let nf = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
        let k = -slope;
        if k > 0.0 {
            // K bounds both |v| and |v_s| times e^{k s}
            let mut big_k = 0.0f64;
            for i in 1..n - 1 {
                let s = v.s(i).abs();
                let norm: f64 = v.value(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut der = 0.0;
                for c in 0..m {
                    let d = (v.values[(i + 1) * m + c] - v.values[(i - 1) * m + c]) / (2.0 * h);
                    der += d * d;
                }
                big_k = big_k.max(norm.max(der.sqrt()) * (k * s).exp());
            }
            let c = (3.0 * big_k).powf(1.0 / 3.0);
            let ok = linf <= c * l2.powf(2.0 / 3.0) + 1e-12;
            (Some(k), Some(big_k), Some(ok))
        } else {
            (None, None, None)
        }
    } else {
        (None, None, None)
    };
    InterpReport { linf, l2, l2_grad, sqrt2_ok, exp_k, exp_big_k, twothirds_ok }
}

// ---------------------------------------------------------------------------
// Cylindrical polar form and density scans
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CylPolar {
    /// grid over the transverse variables y (dimension n - 1)
    pub y_grid: Grid,
    pub s_nodes: usize,
    pub m: usize,
    /// q(y) = || u(., y) - e ||
    pub q: Vec<f64>,
    /// W_eff(u(., y))
    pub w_eff: Vec<f64>,
    /// unit slice directions, flattened per y-node (zero where q <= Q_MIN)
    pub nu: Vec<f64>,
    l: f64,
    h: f64,
}

/// Slice-wise polar data of a cylinder field whose first axis matches the
/// connection truncation.
pub fn cyl_polar(u: &Field, e: &ConnectionProfile, spec: &PotentialSpec) -> Result<CylPolar> {
    let gridref = &u.grid;
    if gridref.n() < 2 {
        return Err(PhaseError::TruncationMismatch("cylinder grid needs n >= 2".into()));
    }
    let ns = gridref.shape()[0];
    if ns != e.curve.nodes()
        || (gridref.h() - e.curve.h()).abs() > 1e-12
        || (gridref.origin()[0] + e.curve.l).abs() > 1e-9
    {
        return Err(PhaseError::TruncationMismatch(format!(
            "axis 0 ({} nodes, h = {}, origin {}) vs connection ({} nodes, h = {}, -L = {})",
            ns,
            gridref.h(),
            gridref.origin()[0],
            e.curve.nodes(),
            e.curve.h(),
            -e.curve.l
        )));
    }
    let m = u.m;
    let y_grid = Grid::new(
        &gridref.shape()[1..],
        gridref.h(),
        &gridref.origin()[1..],
    )?;
    let ny = y_grid.len();
    let h = gridref.h();
    let mut q = vec![0.0; ny];
    let mut w_eff = vec![0.0; ny];
    let mut nu = vec![0.0; ny * ns * m];
    let mut slice = vec![0.0; ns * m];
    for iy in 0..ny {
        let base = iy * ns;
        for s in 0..ns {
            let node = base + s;
            slice[s * m..(s + 1) * m].copy_from_slice(u.value(node));
        }
        // q via trapezoid against e
        let mut q2 = 0.0;
        for s in 0..ns {
            let w = if s == 0 || s == ns - 1 { 0.5 } else { 1.0 };
            let mut d2 = 0.0;
            for c in 0..m {
                let d = slice[s * m + c] - e.curve.values[s * m + c];
                d2 += d * d;
            }
            q2 += w * d2 * h;
        }
        q[iy] = q2.sqrt();
        let curve = SampledCurve::new(e.curve.l, m, slice.clone());
        let a = action(&curve, spec, (&e.well_minus, &e.well_plus));
        w_eff[iy] = a.value - e.action;
        if q[iy] > Q_MIN {
            for s in 0..ns {
                for c in 0..m {
                    nu[(base + s) * m + c] =
                        (slice[s * m + c] - e.curve.values[s * m + c]) / q[iy];
                }
            }
        }
    }
    Ok(CylPolar { y_grid, s_nodes: ns, m, q, w_eff, nu, l: e.curve.l, h })
}

impl CylPolar {
    /// Trapezoid-in-s L^2 distance between the nu slices of two y-nodes.
    fn nu_slice_dist2(&self, iy: usize, jy: usize) -> f64 {
        let ns = self.s_nodes;
        let m = self.m;
        let mut total = 0.0;
        for s in 0..ns {
            let w = if s == 0 || s == ns - 1 { 0.5 } else { 1.0 };
            let mut d2 = 0.0;
            for c in 0..m {
                let d = self.nu[(jy * ns + s) * m + c] - self.nu[(iy * ns + s) * m + c];
                d2 += d * d;
            }
            total += w * d2 * self.h;
        }
        total
    }

    /// The modified cylinder energy over a region in y-space:
    /// int ( 1/2 |grad_y q|^2 + 1/2 q^2 sum_i ||d nu / d y_i||^2 + W_eff ) dy.
    pub fn modified_energy(&self, region: &Region) -> f64 {
        let yg = &self.y_grid;
        let n = yg.n();
        let h2 = yg.h() * yg.h();
        let vol = yg.cell_volume();
        let strides = yg.strides();
        let count = 1usize << n;
        let edges_per_axis = count / 2;
        let cells_per_axis: Vec<usize> = yg.shape().iter().map(|&s| s - 1).collect();
        let total_cells: usize = cells_per_axis.iter().product();
        let mut x = vec![0.0; n];
        let mut mi = [0usize; 3];
        let mut energy = 0.0;
        for cell in 0..total_cells {
            let mut r = cell;
            for c in 0..n {
                mi[c] = r % cells_per_axis[c];
                r /= cells_per_axis[c];
            }
            let base = yg.flat(&mi[..n]);
            yg.coord_into(base, &mut x);
            if !region.contains(&x) {
                continue;
            }
            let mut corners = [0usize; 8];
            for bits in 0..count {
                let mut idx = base;
                for c in 0..n {
                    if bits & (1 << c) != 0 {
                        idx += strides[c];
                    }
                }
                corners[bits] = idx;
            }
            let cut = (0..count).any(|bits| self.q[corners[bits]] <= Q_MIN);
            let mut kin = 0.0;
            for axis in 0..n {
                let bit = 1usize << axis;
                let mut acc = 0.0;
                for bits in 0..count {
                    if bits & bit != 0 {
                        continue;
                    }
                    let i = corners[bits];
                    let j = corners[bits | bit];
                    let dq = self.q[j] - self.q[i];
                    acc += dq * dq;
                    if !cut {
                        let qbar = 0.5 * (self.q[i] + self.q[j]);
                        acc += qbar * qbar * self.nu_slice_dist2(i, j);
                    }
                }
                kin += acc / (edges_per_axis as f64 * h2);
            }
            let mut w_mid = 0.0;
            for bits in 0..count {
                w_mid += self.w_eff[corners[bits]];
            }
            w_mid /= count as f64;
            energy += (0.5 * kin + w_mid) * vol;
        }
        energy
    }

    fn y_region_count(&self, region: &Region) -> usize {
        let mut x = vec![0.0; self.y_grid.n()];
        let mut count = 0;
        for i in 0..self.y_grid.len() {
            self.y_grid.coord_into(i, &mut x);
            if region.contains(&x) {
                count += 1;
            }
        }
        count
    }
}

/// V_R / A_R / modified-energy scan over balls in y-space, with shell
/// measures against lambda*.
#[allow(clippy::too_many_arguments)]
pub fn cyl_density_scan(
    u: &Field,
    e: &ConnectionProfile,
    spec: &PotentialSpec,
    y0: &[f64],
    radii: &[f64],
    lambda: f64,
    lambda_star: f64,
    shell_t: f64,
) -> Result<DensityReport> {
    let polar = cyl_polar(u, e, spec)?;
    let yg = &polar.y_grid;
    let volume = yg.cell_volume();
    let mut x = vec![0.0; yg.n()];
    let mut v = Vec::with_capacity(radii.len());
    let mut a = Vec::with_capacity(radii.len());
    let mut j = Vec::with_capacity(radii.len());
    let mut layer = Vec::with_capacity(radii.len());
    let band = yg.h() * (yg.n() as f64).sqrt();
    for &r in radii {
        let region = Region::Ball { center: y0.to_vec(), radius: r };
        let mut v_count = 0usize;
        let mut a_sum = 0.0;
        let mut layer_count = 0usize;
        for i in 0..yg.len() {
            yg.coord_into(i, &mut x);
            let d: f64 = x
                .iter()
                .zip(y0)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            if d <= r {
                if polar.q[i] > lambda {
                    v_count += 1;
                } else {
                    a_sum += polar.w_eff[i] * volume;
                }
            }
            if (d - r).abs() <= band {
                layer_count += 1;
            }
        }
        v.push(v_count as f64 * volume);
        a.push(a_sum);
        j.push(polar.modified_energy(&region));
        layer.push(layer_count as f64 * volume);
    }
    let kmax = (radii.iter().cloned().fold(0.0, f64::max) / shell_t).floor() as usize;
    let mut omega = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        let (inner, outer) = ((k - 1) as f64 * shell_t, k as f64 * shell_t);
        let mut count = 0usize;
        for i in 0..yg.len() {
            yg.coord_into(i, &mut x);
            let d: f64 = x
                .iter()
                .zip(y0)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let in_shell = if k == 1 { d <= outer } else { d > inner && d <= outer };
            if in_shell && polar.q[i] > lambda_star {
                count += 1;
            }
        }
        omega.push(count as f64 * volume);
    }
    Ok(DensityReport {
        center: y0.to_vec(),
        lambda,
        lambda_star,
        shell_t,
        radii: radii.to_vec(),
        v,
        a,
        j,
        cell_layer: layer,
        omega,
        dominant_pair: vec![],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProductProbe {
    /// (distance of y to the transverse boundary, sup_s |u(s,y) - e(s)|)
    pub pairs: Vec<(f64, f64)>,
    pub max_deviation: f64,
    pub rigid: bool,
    /// exponential fit of deviation against transverse boundary distance
    pub k0: Option<f64>,
    pub big_k0: Option<f64>,
}

/// Fit sup_s |u(s, y) - e(s)| against d(y, boundary of O). RIGID when the
/// deviation is below 1e-6 everywhere.
pub fn product_structure_probe(u: &Field, e: &ConnectionProfile) -> Result<ProductProbe> {
    let gridref = &u.grid;
    let ns = gridref.shape()[0];
    if ns != e.curve.nodes() {
        return Err(PhaseError::TruncationMismatch("axis 0 mismatch".into()));
    }
    let m = u.m;
    let y_grid = Grid::new(&gridref.shape()[1..], gridref.h(), &gridref.origin()[1..])?;
    let ny = y_grid.len();
    // boundary of O: y-grid edge nodes
    let mut bcoords = Vec::new();
    for iy in 0..ny {
        if y_grid.is_grid_edge(iy) {
            bcoords.push(y_grid.coord(iy));
        }
    }
    let mut pairs = Vec::with_capacity(ny);
    let mut x = vec![0.0; y_grid.n()];
    let mut max_dev = 0.0f64;
    for iy in 0..ny {
        y_grid.coord_into(iy, &mut x);
        let mut dist = f64::INFINITY;
        for b in &bcoords {
            let d2: f64 = x.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            dist = dist.min(d2);
        }
        let dist = dist.sqrt();
        let mut dev = 0.0f64;
        for s in 0..ns {
            let node = iy * ns + s;
            for c in 0..m {
                dev = dev.max((u.values[node * m + c] - e.curve.values[s * m + c]).abs());
            }
        }
        max_dev = max_dev.max(dev);
        pairs.push((dist, dev));
    }
    let rigid = max_dev <= 1e-6;
    // exponential fit over bins where deviation decays
    let (k0, big_k0) = if rigid {
        (None, None)
    } else {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &(d, dev) in &pairs {
            if dev > 1e-10 && dev < 0.5 * max_dev {
                xs.push(d);
                ys.push(dev.ln());
            }
        }
        if xs.len() >= 4 {
            let nf = xs.len() as f64;
            let sx: f64 = xs.iter().sum();
            let sy: f64 = ys.iter().sum();
            let sxx: f64 = xs.iter().map(|p| p * p).sum();
            let sxy: f64 = xs.iter().zip(&ys).map(|(p, q)| p * q).sum();
            let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
            (Some(-slope), Some(((sy - slope * sx) / nf).exp()))
        } else {
            (None, None)
        }
    };
    Ok(ProductProbe { pairs, max_deviation: max_dev, rigid, k0, big_k0 })
}

/// Splice the competitor v into u on the slab |s| <= l, fading linearly to u
/// over one unit on both sides (the unbounded-cylinder minimality probe).
pub fn splice_fade(u: &Field, v: &Field, l: f64) -> Field {
    assert_eq!(u.grid, v.grid);
    assert_eq!(u.m, v.m);
    let m = u.m;
    let mut out = u.clone();
    let mut x = vec![0.0; u.grid.n()];
    for i in 0..u.grid.len() {
        if u.mask[i] == NodeTag::Exterior {
            continue;
        }
        u.grid.coord_into(i, &mut x);
        let s = x[0].abs();
        let w = if s <= l {
            1.0
        } else if s < l + 1.0 {
            1.0 + l - s
        } else {
            0.0
        };
        if w > 0.0 {
            for c in 0..m {
                out.values[i * m + c] =
                    w * v.values[i * m + c] + (1.0 - w) * u.values[i * m + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_well_connection() -> (PotentialSpec, ConnectionProfile) {
        let spec = PotentialSpec::two_well();
        let e = solve_connection(&spec, 10.0, 2001, ConnectionInit::Linear).unwrap();
        (spec, e)
    }

    #[test]
    fn connection_matches_tanh_closed_form() {
        let (_, e) = two_well_connection();
        let mut worst = 0.0f64;
        for i in 0..e.curve.nodes() {
            let s = e.curve.s(i);
            worst = worst.max((e.curve.value(i)[0] - (s / 2f64.sqrt()).tanh()).abs());
        }
        assert!(worst <= 1e-4, "max profile error {worst}");
        let exact = 2.0 * 2f64.sqrt() / 3.0;
        assert!(
            (e.action - exact).abs() / exact <= 1e-4,
            "action {} vs {}",
            e.action,
            exact
        );
        assert!(e.residual <= 1e-6);
        assert!(e.curve.symmetry_gap() <= 1e-12);
    }

    #[test]
    fn action_evaluates_connection_consistently() {
        let (spec, e) = two_well_connection();
        let a = action(&e.curve, &spec, (&e.well_minus, &e.well_plus));
        assert_eq!(a.value, e.action);
        assert!(a.admissible);
    }

    #[test]
    fn action_flags_wrong_left_limit() {
        let (spec, e) = two_well_connection();
        let v = SampledCurve::from_fn(10.0, 1, 2001, |_, out| out[0] = 1.0);
        let a = action(&v, &spec, (&e.well_minus, &e.well_plus));
        assert!(!a.admissible);
        assert_eq!(a.value, 0.0);
    }

    #[test]
    fn action_rescaling_change_of_variables() {
        // v(s) = e(2s): A(v) = int (1/2 * 4 |e_s|^2 + W(e)) ds/2 in the
        // stretched variable; verify against direct quadrature
        let (spec, e) = two_well_connection();
        let n = e.curve.nodes();
        let v = SampledCurve::from_fn(e.curve.l / 2.0, 1, (n + 1) / 2, |s, out| {
            let t = 2.0 * s / 2f64.sqrt();
            out[0] = t.tanh();
        });
        let av = action(&v, &spec, (&e.well_minus, &e.well_plus)).value;
        // oracle: fine quadrature of 2 |e'|^2/2*... with e = tanh(2s/sqrt2):
        // A = int 1/2 * (2 e'(2s))^2 + W(e(2s)) ds, substitute t = 2s
        let steps = 200_000;
        let l = e.curve.l / 2.0;
        let dt = 2.0 * l / steps as f64;
        let mut oracle = 0.0;
        for i in 0..steps {
            let s = -l + (i as f64 + 0.5) * dt;
            let t = 2.0 * s / 2f64.sqrt();
            let u: f64 = t.tanh();
            let du = (1.0 - u * u) * 2.0 / 2f64.sqrt(); // d/ds tanh(2s/sqrt2)
            oracle += (0.5 * du * du + 0.25 * (1.0 - u * u).powi(2)) * dt;
        }
        assert!((av - oracle).abs() / oracle < 1e-3, "{av} vs {oracle}");
    }

    #[test]
    fn effective_potential_vanishes_at_e() {
        let (spec, e) = two_well_connection();
        let ev = effective_potential(&e.curve, &e, &spec).unwrap();
        assert_eq!(ev.value, 0.0);
        assert_eq!(ev.q, 0.0);
        assert!(ev.nu.is_none());
    }

    #[test]
    fn effective_potential_positive_for_bumps() {
        let (spec, e) = two_well_connection();
        let nu = random_direction(&e, 7, 0);
        let v = SampledCurve::new(
            e.curve.l,
            1,
            e.curve
                .values
                .iter()
                .zip(&nu.values)
                .map(|(a, b)| a + 0.1 * b)
                .collect(),
        );
        let ev = effective_potential(&v, &e, &spec).unwrap();
        assert!(ev.value > 0.0, "W_eff = {}", ev.value);
        assert_relative_eq!(ev.q, 0.1, max_relative = 1e-9);
    }

    #[test]
    fn effective_potential_rejects_reversed_tail() {
        let (spec, e) = two_well_connection();
        let v = SampledCurve::new(
            e.curve.l,
            1,
            e.curve.values.iter().rev().cloned().collect(),
        );
        assert!(matches!(
            effective_potential(&v, &e, &spec),
            Err(PhaseError::NonAdmissible(_))
        ));
    }

    #[test]
    fn hyperbolicity_of_scalar_two_well() {
        let (spec, e) = two_well_connection();
        let rep = hyperbolicity(&e, &spec).unwrap();
        // odd-subspace spectrum of the Poschl-Teller operator: 3/2
        assert!(
            (rep.eta - 1.5).abs() < 0.02,
            "eta = {} vs odd-subspace bottom 1.5",
            rep.eta
        );
        assert!(rep.eta >= 0.1);
        let oracle = rep.eta_bisection.unwrap();
        assert!(
            (rep.eta - oracle).abs() / oracle.abs() < 0.01,
            "inverse iteration {} vs bisection {}",
            rep.eta,
            oracle
        );
    }

    #[test]
    fn hyperbolicity_free_operator_floor() {
        // W_uu = 2 at both wells for the quartic double well; the free test
        // replaces the profile by the constant well value, where
        // W''(1) = 2 everywhere: spectrum = 2 + Dirichlet Laplacian modes > 2
        let spec = PotentialSpec::two_well();
        let l = 10.0;
        let n = 801;
        let flat = SampledCurve::from_fn(l, 1, n, |_, out| out[0] = 1.0);
        let e = ConnectionProfile {
            curve: flat,
            well_minus: vec![-1.0],
            well_plus: vec![1.0],
            action: 0.0,
            residual: 0.0,
            tail_k: 1.0,
            tail_big_k: 1.0,
        };
        let rep = hyperbolicity(&e, &spec).unwrap();
        assert!(rep.eta >= 2.0, "eta = {}", rep.eta);
        assert!(rep.eta <= 2.0 + 4.0 * (std::f64::consts::PI / l).powi(2));
    }

    #[test]
    fn hyperbolicity_detects_saddle() {
        // the constant 0 profile sits on the potential maximum: W''(0) = -1
        let spec = PotentialSpec::two_well();
        let flat = SampledCurve::from_fn(6.0, 1, 601, |_, out| out[0] = 0.0);
        let e = ConnectionProfile {
            curve: flat,
            well_minus: vec![-1.0],
            well_plus: vec![1.0],
            action: 0.0,
            residual: 0.0,
            tail_k: 1.0,
            tail_big_k: 1.0,
        };
        assert!(matches!(
            hyperbolicity(&e, &spec),
            Err(PhaseError::NotHyperbolic { .. })
        ));
    }

    #[test]
    fn wqq_scan_two_well() {
        let (spec, e) = two_well_connection();
        let rep = hyperbolicity(&e, &spec).unwrap();
        let scan: Vec<f64> = (1..=8).map(|k| 0.05 * k as f64).collect();
        let wq = wqq_check(&e, &spec, rep.eta, 16, &scan, 11).unwrap();
        assert!(wq.q_bar > 0.0, "q_bar = {}", wq.q_bar);
        assert!(wq.tl_equal_t_gap <= 1e-3, "tl gap {}", wq.tl_equal_t_gap);
        assert_eq!(wq.lambda_star, wq.q_bar);
        assert_relative_eq!(wq.c0, 0.5 * rep.eta);
    }

    #[test]
    fn dqq_at_zero_matches_eta_for_lowest_mode() {
        let (spec, e) = two_well_connection();
        let rep = hyperbolicity(&e, &spec).unwrap();
        let nu = &rep.eigenvector;
        let quad = t_quadratic_form(nu, &e, &spec).unwrap();
        // the lowest mode's quadratic form equals the matrix eigenvalue
        assert!(
            (quad - rep.eta).abs() <= 1e-4 * rep.eta.max(1.0),
            "quadform {} vs eta {}",
            quad,
            rep.eta
        );
        // and the finite-difference D_qq W_eff(0) agrees
        let w_at = |q: f64| {
            let v = SampledCurve::new(
                e.curve.l,
                1,
                e.curve
                    .values
                    .iter()
                    .zip(&nu.values)
                    .map(|(a, b)| a + q * b)
                    .collect(),
            );
            action(&v, &spec, (&e.well_minus, &e.well_plus)).value - e.action
        };
        let d = 1e-3;
        let fd = (w_at(d) - 2.0 * w_at(0.0) + w_at(-d)) / (d * d);
        assert!((fd - rep.eta).abs() <= 1e-3, "fd {} vs eta {}", fd, rep.eta);
    }

    #[test]
    fn interp_bounds_on_gaussian_bump() {
        let v = SampledCurve::from_fn(10.0, 1, 2001, |s, out| {
            out[0] = 0.7 * (-(s * s)).exp();
        });
        let rep = interp_bound_check(&v);
        assert!(rep.sqrt2_ok);
        assert_eq!(rep.twothirds_ok, Some(true));
    }

    #[test]
    fn interp_sqrt2_scaling_covariance() {
        // v_lam(s) = v(lam s): ||v_lam|| = lam^{-1/2}||v||, ||v_lam_s|| = lam^{1/2}||v_s||
        let base = |lam: f64| {
            SampledCurve::from_fn(10.0, 1, 4001, move |s, out| {
                out[0] = (-(lam * s).powi(2)).exp();
            })
        };
        let r1 = interp_bound_check(&base(1.0));
        let r2 = interp_bound_check(&base(2.0));
        assert_relative_eq!(r2.l2 / r1.l2, 2.0f64.powf(-0.5), max_relative = 1e-3);
        assert_relative_eq!(r2.l2_grad / r1.l2_grad, 2.0f64.powf(0.5), max_relative = 1e-3);
        // both sides of the sqrt-2 inequality scale identically
        assert_relative_eq!(
            (r2.l2.sqrt() * r2.l2_grad.sqrt()) / (r1.l2.sqrt() * r1.l2_grad.sqrt()),
            1.0,
            max_relative = 1e-3
        );
    }

    #[test]
    fn interp_zero_curve() {
        let v = SampledCurve::from_fn(5.0, 1, 501, |_, out| out[0] = 0.0);
        let rep = interp_bound_check(&v);
        assert_eq!(rep.linf, 0.0);
        assert!(rep.sqrt2_ok);
    }

    fn extend_connection(e: &ConnectionProfile, ny: usize) -> Field {
        // u(s, y) = e(s) on a cylinder grid
        let ns = e.curve.nodes();
        let h = e.curve.h();
        let g = Grid::new(&[ns, ny], h, &[-e.curve.l, -0.5 * (ny - 1) as f64 * h]).unwrap();
        let m = e.curve.m;
        let mut f = Field::constant(g, &vec![0.0; m]);
        for iy in 0..ny {
            for s in 0..ns {
                let node = iy * ns + s;
                f.values[node * m..(node + 1) * m].copy_from_slice(e.curve.value(s));
            }
        }
        f.mark_grid_edges_dirichlet();
        f
    }

    #[test]
    fn cyl_polar_of_extended_connection_vanishes() {
        let (spec, e) = two_well_connection();
        let f = extend_connection(&e, 41);
        let polar = cyl_polar(&f, &e, &spec).unwrap();
        assert!(polar.q.iter().all(|q| *q == 0.0));
        assert!(polar.w_eff.iter().all(|w| *w == 0.0));
        let region = Region::Ball { center: vec![0.0], radius: 1.5 };
        assert_eq!(polar.modified_energy(&region), 0.0);
        assert!(polar.y_region_count(&region) > 0);
    }

    #[test]
    fn cyl_polar_of_y_constant_perturbation() {
        // u(s, y) = e(s) + 0.2 b(s) for a fixed symmetric bump b: q constant
        // in y, all y-gradient terms vanish, W_eff constant and positive
        let (spec, e) = two_well_connection();
        let mut f = extend_connection(&e, 41);
        let bump = random_direction(&e, 3, 0);
        let ns = e.curve.nodes();
        let ny = 41;
        for iy in 0..ny {
            for s in 0..ns {
                f.values[iy * ns + s] += 0.2 * bump.values[s];
            }
        }
        let polar = cyl_polar(&f, &e, &spec).unwrap();
        let q0 = polar.q[20];
        assert_relative_eq!(q0, 0.2, max_relative = 1e-9);
        for iy in 1..ny - 1 {
            assert_relative_eq!(polar.q[iy], q0, max_relative = 1e-12);
            assert!(polar.w_eff[iy] > 0.0, "W_eff = {}", polar.w_eff[iy]);
        }
        // constant in y: no gradient terms, modified energy = W_eff * |O|
        let me = polar.modified_energy(&Region::All);
        let extent = (ny - 1) as f64 * e.curve.h();
        let direct: f64 = polar.w_eff[20] * extent;
        assert_relative_eq!(me, direct, max_relative = 1e-12);
    }

    #[test]
    fn cyl_density_of_extended_connection_is_zero() {
        let (spec, e) = two_well_connection();
        let f = extend_connection(&e, 61);
        let radii = [0.5, 1.0, 1.5, 2.0];
        let rep = cyl_density_scan(&f, &e, &spec, &[0.0], &radii, 0.1, 0.1, 0.5).unwrap();
        assert!(rep.v.iter().all(|v| *v == 0.0));
        assert!(rep.a.iter().all(|v| *v == 0.0));
        assert!(rep.j.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn product_probe_rigid_on_extension() {
        let (spec, e) = two_well_connection();
        let _ = spec;
        let f = extend_connection(&e, 31);
        let probe = product_structure_probe(&f, &e).unwrap();
        assert!(probe.rigid);
        assert_eq!(probe.max_deviation, 0.0);
    }

    #[test]
    fn splice_fade_blends() {
        let (_, e) = two_well_connection();
        let u = extend_connection(&e, 21);
        let mut v = u.clone();
        for val in v.values.iter_mut() {
            *val += 0.3;
        }
        let spliced = splice_fade(&u, &v, 2.0);
        let g = &u.grid;
        for i in 0..g.len() {
            let s = g.coord(i)[0].abs();
            let d = spliced.values[i] - u.values[i];
            if s <= 2.0 {
                assert_relative_eq!(d, 0.3, epsilon = 1e-12);
            } else if s >= 3.0 {
                assert_eq!(d, 0.0);
            } else {
                assert!(d > 0.0 && d < 0.3);
            }
        }
    }
}
