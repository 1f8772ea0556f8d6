//! Polar decomposition u = a + q nu, the exact kinetic split, the comparison
//! maps sigma = a + min{q^h, q^u} nu, the power/Helmholtz modulus profiles,
//! and the discrete verification of the energy identity behind the density
//! estimates.
//!
//! Per-edge quadrature convention: with q-bar the edge-midpoint modulus, the
//! exact algebra |D(q nu)|^2 = |Dq|^2 + q-bar^2 |Dnu|^2 - (1/4)|Dq|^2 |Dnu|^2
//! holds for unit nu, so the discrete split agrees with the discrete kinetic
//! energy to O(h^2) pointwise. Cells touching a nu = 0 node have their
//! nu-gradient zeroed and the omitted kinetic mass is reported.

use serde::Serialize;

use crate::error::{PhaseError, Result};
use crate::grid::{self, Field, Grid, NodeTag, Region};
use crate::potentials::{self, PotentialSpec, Q_MIN};

/// Modulus field q = |u - a| and unit direction nu (zero where q <= Q_MIN).
#[derive(Clone, Debug)]
pub struct PolarDecomposition {
    pub grid: Grid,
    pub m: usize,
    pub q: Vec<f64>,
    pub nu: Vec<f64>,
}

pub fn to_polar(f: &Field, a: &[f64]) -> PolarDecomposition {
    let m = f.m;
    let len = f.grid.len();
    let mut q = vec![0.0; len];
    let mut nu = vec![0.0; len * m];
    for i in 0..len {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        let v = f.value(i);
        let qi: f64 = v
            .iter()
            .zip(a)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        q[i] = qi;
        if qi > Q_MIN {
            for c in 0..m {
                nu[i * m + c] = (v[c] - a[c]) / qi;
            }
        }
    }
    PolarDecomposition { grid: f.grid.clone(), m, q, nu }
}

/// a + q nu as a Field (exact wherever q > Q_MIN).
pub fn reconstruct(p: &PolarDecomposition, a: &[f64], mask: &[NodeTag]) -> Field {
    let m = p.m;
    let len = p.grid.len();
    let mut values = vec![0.0; len * m];
    for i in 0..len {
        for c in 0..m {
            values[i * m + c] = a[c] + p.q[i] * p.nu[i * m + c];
        }
    }
    Field { grid: p.grid.clone(), m, values, mask: mask.to_vec() }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergySplit {
    /// int |grad q|^2
    pub grad_q: f64,
    /// int q^2 |grad nu|^2
    pub q2_grad_nu: f64,
    /// int W(u)
    pub potential: f64,
    /// int |grad u|^2 with the same quadrature (diagnostic)
    pub direct_kinetic: f64,
    /// kinetic mass omitted by the nu-cutoff cells
    pub omitted_kinetic: f64,
    pub cut_cells: usize,
}

impl EnergySplit {
    /// 1/2 grad_q + 1/2 q2_grad_nu + potential ~ energy(f, region, spec, 1).
    pub fn total(&self) -> f64 {
        0.5 * self.grad_q + 0.5 * self.q2_grad_nu + self.potential
    }
}

/// Split the energy over `region` into the polar kinetic pieces and the
/// potential term.
pub fn energy_split(f: &Field, a: &[f64], region: &Region, spec: &PotentialSpec) -> EnergySplit {
    let p = to_polar(f, a);
    let n = f.grid.n();
    let m = f.m;
    let h2 = f.grid.h() * f.grid.h();
    let vol = f.grid.cell_volume();
    let edges_per_axis = (1usize << n) / 2;

    let mut split = EnergySplit {
        grad_q: 0.0,
        q2_grad_nu: 0.0,
        potential: 0.0,
        direct_kinetic: 0.0,
        omitted_kinetic: 0.0,
        cut_cells: 0,
    };
    let mut mean = vec![0.0; m];

    grid::visit_cells(f, region, |c| {
        let cut = (0..c.count).any(|bits| p.q[c.flats[bits]] <= Q_MIN);
        let mut gq_cell = 0.0;
        let mut nu_cell = 0.0;
        let mut du_cell = 0.0;
        for axis in 0..n {
            let bit = 1usize << axis;
            let mut gq = 0.0;
            let mut nug = 0.0;
            let mut du = 0.0;
            for bits in 0..c.count {
                if bits & bit != 0 {
                    continue;
                }
                let i = c.flats[bits];
                let j = c.flats[bits | bit];
                let dq = p.q[j] - p.q[i];
                gq += dq * dq;
                for comp in 0..m {
                    let d = f.values[j * m + comp] - f.values[i * m + comp];
                    du += d * d;
                }
                if !cut {
                    let qbar = 0.5 * (p.q[i] + p.q[j]);
                    let mut dnu = 0.0;
                    for comp in 0..m {
                        let d = p.nu[j * m + comp] - p.nu[i * m + comp];
                        dnu += d * d;
                    }
                    nug += qbar * qbar * dnu;
                }
            }
            let scale = 1.0 / (edges_per_axis as f64 * h2);
            gq_cell += gq * scale;
            nu_cell += nug * scale;
            du_cell += du * scale;
        }
        split.grad_q += gq_cell * vol;
        split.q2_grad_nu += nu_cell * vol;
        split.direct_kinetic += du_cell * vol;
        if cut {
            split.cut_cells += 1;
            split.omitted_kinetic += (du_cell - gq_cell) * vol;
        }
        grid::cell_mean(f, c, &mut mean);
        split.potential += potentials::eval_w(spec, &mean) * vol;
    });
    split
}

// ---------------------------------------------------------------------------
// Comparison modulus profiles q^h
// ---------------------------------------------------------------------------

/// Radial solution of phi'' + (n-1)/r phi' = c1 phi, phi'(0) = 0, phi(R) = 1,
/// with the largest constant c2 such that phi(r) <= exp(-c2 (R - r)).
#[derive(Clone, Debug, Serialize)]
pub struct HelmholtzProfile {
    pub r: f64,
    pub c1: f64,
    pub dim: usize,
    pub step: f64,
    pub values: Vec<f64>,
    pub c2: f64,
}

impl HelmholtzProfile {
    pub fn eval(&self, radius: f64) -> f64 {
        if radius >= self.r {
            return 1.0;
        }
        let s = (radius.max(0.0)) / self.step;
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let t = s - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }
}

/// Tridiagonal solve of the radial two-point problem.
pub fn helmholtz_profile(r: f64, c1: f64, dim: usize, nodes: usize) -> HelmholtzProfile {
    assert!(c1 > 0.0 && r > 0.0 && nodes >= 3);
    let nn = nodes;
    let h = r / (nn - 1) as f64;
    // rows: a_i phi_{i-1} + b_i phi_i + c_i phi_{i+1} = 0, phi_{N-1} = 1
    let mut sub = vec![0.0; nn];
    let mut diag = vec![0.0; nn];
    let mut sup = vec![0.0; nn];
    let mut rhs = vec![0.0; nn];
    // r = 0: symmetry gives n * phi''(0) = c1 phi(0), phi'' ~ 2(phi1 - phi0)/h^2
    diag[0] = -2.0 * dim as f64 / (h * h) - c1;
    sup[0] = 2.0 * dim as f64 / (h * h);
    for i in 1..nn - 1 {
        let ri = i as f64 * h;
        sub[i] = 1.0 / (h * h) - (dim as f64 - 1.0) / (2.0 * h * ri);
        diag[i] = -2.0 / (h * h) - c1;
        sup[i] = 1.0 / (h * h) + (dim as f64 - 1.0) / (2.0 * h * ri);
    }
    diag[nn - 1] = 1.0;
    rhs[nn - 1] = 1.0;

    // Thomas algorithm
    let mut c_star = vec![0.0; nn];
    let mut d_star = vec![0.0; nn];
    c_star[0] = sup[0] / diag[0];
    d_star[0] = rhs[0] / diag[0];
    for i in 1..nn {
        let mden = diag[i] - sub[i] * c_star[i - 1];
        c_star[i] = sup[i] / mden;
        d_star[i] = (rhs[i] - sub[i] * d_star[i - 1]) / mden;
    }
    let mut phi = vec![0.0; nn];
    phi[nn - 1] = d_star[nn - 1];
    for i in (0..nn - 1).rev() {
        phi[i] = d_star[i] - c_star[i] * phi[i + 1];
    }

    // largest c2 with phi(r) <= exp(-c2 (R - r)) on [0, R)
    let mut c2 = f64::INFINITY;
    for (i, &p) in phi.iter().enumerate().take(nn - 1) {
        if p <= 0.0 {
            continue;
        }
        let ri = i as f64 * h;
        c2 = c2.min(-(p.ln()) / (r - ri));
    }
    HelmholtzProfile { r, c1, dim, step: h, values: phi, c2 }
}

/// Modulus cap used by the comparison map.
#[derive(Clone, Debug)]
pub enum ComparisonProfile {
    /// q^h = H (|x - center| - (R - T))^p on the annulus, 0 inside B_{R-T},
    /// with p = 2/(2 - tau), tau = max(alpha, 1), H = m_bound / T^p.
    Power {
        center: Vec<f64>,
        r: f64,
        t: f64,
        tau: f64,
        h_coef: f64,
        exponent: f64,
    },
    /// q^h = q_m * phi(|x - center|) with phi the Helmholtz profile.
    Helmholtz {
        center: Vec<f64>,
        q_m: f64,
        profile: HelmholtzProfile,
    },
}

impl ComparisonProfile {
    pub fn power(center: Vec<f64>, r: f64, t: f64, alpha: f64, m_bound: f64) -> Result<Self> {
        let tau = alpha.max(1.0);
        if tau >= 2.0 {
            return Err(PhaseError::UnsupportedTau { tau });
        }
        assert!(t > 0.0 && t < r);
        let exponent = 2.0 / (2.0 - tau);
        let h_coef = m_bound / t.powf(exponent);
        Ok(ComparisonProfile::Power { center, r, t, tau, h_coef, exponent })
    }

    pub fn helmholtz(center: Vec<f64>, r: f64, c1: f64, q_m: f64, dim: usize) -> Self {
        let nodes = ((r / 1e-3).ceil() as usize).clamp(512, 20_000);
        let profile = helmholtz_profile(r, c1, dim, nodes);
        ComparisonProfile::Helmholtz { center, q_m, profile }
    }

    pub fn qh_at(&self, x: &[f64]) -> f64 {
        match self {
            ComparisonProfile::Power { center, r, t, h_coef, exponent, .. } => {
                let s: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let inner = r - t;
                if s <= inner {
                    0.0
                } else {
                    h_coef * (s - inner).powf(*exponent)
                }
            }
            ComparisonProfile::Helmholtz { center, q_m, profile } => {
                let s: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                q_m * profile.eval(s)
            }
        }
    }
}

/// The comparison map sigma = a + q^sigma nu^u with q^sigma = min{q^h, q^u},
/// plus the cut-off beta = min{q^u - q^sigma, lambda}.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub sigma: Field,
    pub qu: Vec<f64>,
    pub qh: Vec<f64>,
    pub qsigma: Vec<f64>,
    pub beta: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda: f64,
}

pub fn build_comparison(
    f: &Field,
    a: &[f64],
    profile: &ComparisonProfile,
    lambda: f64,
) -> Comparison {
    assert!(lambda > 0.0);
    let p = to_polar(f, a);
    let m = f.m;
    let len = f.grid.len();
    let mut qh = vec![0.0; len];
    let mut qs = vec![0.0; len];
    let mut beta = vec![0.0; len];
    let mut sigma = f.clone();
    let mut x = vec![0.0; f.grid.n()];
    for i in 0..len {
        f.grid.coord_into(i, &mut x);
        qh[i] = profile.qh_at(&x);
        qs[i] = qh[i].min(p.q[i]);
        beta[i] = (p.q[i] - qs[i]).min(lambda);
        // sigma = u verbatim wherever the cap does not bite
        if qh[i] < p.q[i] {
            for c in 0..m {
                sigma.values[i * m + c] = a[c] + qs[i] * p.nu[i * m + c];
            }
        }
    }
    Comparison { sigma, qu: p.q, qh, qsigma: qs, beta, nu: p.nu, lambda }
}

#[derive(Clone, Debug, Serialize)]
pub struct PowerCheckReport {
    /// smallest C1 valid for the discrete Laplacian: max Lap q^h / (q^h)^(tau-1)
    pub c1_discrete: f64,
    /// closed form p H^{2-tau} (p - 1 + (n-1) T / R) at the annulus edge
    pub c1_analytic: f64,
    /// max |grad q^h| on nodes next to the inner sphere (C^1 matching)
    pub grad_inner_max: f64,
    pub grad_tol: f64,
}

/// Verify the differential inequality Lap q^h <= C1 (q^h)^{tau-1} nodewise on
/// the annulus and the C^1 matching grad q^h = 0 at the inner sphere.
pub fn power_profile_check(
    profile: &ComparisonProfile,
    gridref: &Grid,
) -> Result<PowerCheckReport> {
    let ComparisonProfile::Power { center, r, t, tau, h_coef, exponent } = profile else {
        return Err(PhaseError::CheckFailed {
            node: vec![],
            detail: "power_profile_check needs a power profile".into(),
        });
    };
    let n = gridref.n();
    let h = gridref.h();
    let mut field = Field::from_fn(gridref.clone(), 1, |x, v| v[0] = profile.qh_at(x));
    field.mark_grid_edges_dirichlet();
    let lap = grid::laplacian(&field);

    let inner = r - t;
    let mut c1_discrete = 0.0f64;
    let mut grad_inner_max = 0.0f64;
    let mut x = vec![0.0; n];
    let strides = gridref.strides();
    for i in 0..gridref.len() {
        if field.mask[i] != NodeTag::Interior {
            continue;
        }
        gridref.coord_into(i, &mut x);
        let s: f64 = x
            .iter()
            .zip(center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let q = field.value(i)[0];
        // stencils straddling the C^1 junction at the inner sphere
        // overestimate the ratio; the junction layer is covered by the
        // gradient-matching check below instead
        if s > inner + 2.5 * h && s <= *r && q > 1e-12 {
            let ratio = lap.value(i)[0] / q.powf(tau - 1.0);
            if !ratio.is_finite() {
                return Err(PhaseError::CheckFailed {
                    node: gridref.multi(i)[..n].to_vec(),
                    detail: format!("non-finite ratio at s = {s}"),
                });
            }
            c1_discrete = c1_discrete.max(ratio);
        }
        if (s - inner).abs() <= 1.5 * h {
            let mut g2 = 0.0;
            for c in 0..n {
                let d = (field.values[i + strides[c]] - field.values[i - strides[c]]) / (2.0 * h);
                g2 += d * d;
            }
            grad_inner_max = grad_inner_max.max(g2.sqrt());
        }
    }
    // analytic |grad q^h| at distance d from the inner sphere is H p d^(p-1);
    // central differences smear one extra node (slack factor 2)
    let grad_tol = 2.0 * h_coef * exponent * (2.5 * h * (n as f64).sqrt()).powf(exponent - 1.0) + 1e-12;
    if grad_inner_max > grad_tol {
        return Err(PhaseError::CheckFailed {
            node: vec![],
            detail: format!("C1 matching fails: |grad q^h| = {grad_inner_max:.3e} > {grad_tol:.3e}"),
        });
    }
    let c1_analytic =
        exponent * h_coef.powf(2.0 - tau) * (exponent - 1.0 + (n as f64 - 1.0) * t / r);
    Ok(PowerCheckReport { c1_discrete, c1_analytic, grad_inner_max, grad_tol })
}

#[derive(Clone, Debug, Serialize)]
pub struct InequalityVerdict {
    pub lhs: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    /// (1/2) int (|grad q^u|^2 - |grad q^sigma|^2)
    pub lhs: f64,
    pub j_u: f64,
    pub j_sigma: f64,
    /// (1/2) int ((q^sigma)^2 - (q^u)^2) |grad nu^u|^2
    pub coupling: f64,
    /// int (W(sigma) - W(u))
    pub w_diff: f64,
    pub rhs: f64,
    pub mismatch: f64,
    pub relative_mismatch: f64,
    /// lhs <= w_diff + tol, checked only for minimality-audited inputs
    pub inequality: Option<InequalityVerdict>,
}

/// Evaluate both sides of the comparison identity
///   1/2 int(|grad q^u|^2 - |grad q^sigma|^2)
///     = J(u) - J(sigma) + 1/2 int((q^sigma)^2 - (q^u)^2)|grad nu^u|^2
///       + int(W(sigma) - W(u))
/// with one shared cell quadrature, and report the discrete mismatch.
pub fn verify_identity(
    u: &Field,
    cmp: &Comparison,
    region: &Region,
    spec: &PotentialSpec,
    audit_tol: Option<f64>,
) -> IdentityReport {
    let n = u.grid.n();
    let m = u.m;
    let h2 = u.grid.h() * u.grid.h();
    let vol = u.grid.cell_volume();
    let edges_per_axis = (1usize << n) / 2;

    let mut gu = 0.0;
    let mut gs = 0.0;
    let mut coupling = 0.0;
    let mut w_diff = 0.0;
    let mut mean_u = vec![0.0; m];
    let mut mean_s = vec![0.0; m];

    grid::visit_cells(u, region, |c| {
        let cut = (0..c.count).any(|bits| cmp.qu[c.flats[bits]] <= Q_MIN);
        let mut gu_cell = 0.0;
        let mut gs_cell = 0.0;
        let mut cp_cell = 0.0;
        for axis in 0..n {
            let bit = 1usize << axis;
            for bits in 0..c.count {
                if bits & bit != 0 {
                    continue;
                }
                let i = c.flats[bits];
                let j = c.flats[bits | bit];
                let dqu = cmp.qu[j] - cmp.qu[i];
                let dqs = cmp.qsigma[j] - cmp.qsigma[i];
                gu_cell += dqu * dqu;
                gs_cell += dqs * dqs;
                if !cut {
                    let qu_bar = 0.5 * (cmp.qu[i] + cmp.qu[j]);
                    let qs_bar = 0.5 * (cmp.qsigma[i] + cmp.qsigma[j]);
                    let mut dnu = 0.0;
                    for comp in 0..m {
                        let d = cmp.nu[j * m + comp] - cmp.nu[i * m + comp];
                        dnu += d * d;
                    }
                    cp_cell += (qs_bar * qs_bar - qu_bar * qu_bar) * dnu;
                }
            }
        }
        let scale = vol / (edges_per_axis as f64 * h2);
        gu += gu_cell * scale;
        gs += gs_cell * scale;
        coupling += cp_cell * scale;
        grid::cell_mean(u, c, &mut mean_u);
        grid::cell_mean(&cmp.sigma, c, &mut mean_s);
        w_diff += (potentials::eval_w(spec, &mean_s) - potentials::eval_w(spec, &mean_u)) * vol;
    });

    let j_u = grid::energy(u, region, spec, 1.0);
    let j_sigma = grid::energy(&cmp.sigma, region, spec, 1.0);
    let lhs = 0.5 * (gu - gs);
    let rhs = (j_u - j_sigma) + 0.5 * coupling + w_diff;
    let mismatch = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs()).max(j_u.abs()).max(1e-30);
    let inequality = audit_tol.map(|tol| InequalityVerdict {
        lhs,
        bound: w_diff + tol,
        pass: lhs <= w_diff + tol,
    });
    IdentityReport {
        lhs,
        j_u,
        j_sigma,
        coupling: 0.5 * coupling,
        w_diff,
        rhs,
        mismatch,
        relative_mismatch: mismatch / scale,
        inequality,
    }
}
