//! Density and energy-growth measurements: V_R / A_R / J_R scans with shell
//! bookkeeping, log-log exponent fits, the difference-scheme and shell-sum
//! inequality checks, and Liouville/decay probes.
//!
//! Constants are always reported as (best constant over the window, window,
//! cell-layer bound) rather than bare booleans: the estimates are asymptotic
//! and the desk-scale evidence carries its error bars.

use serde::Serialize;

use crate::error::{PhaseError, Result};
use crate::grid::{self, Field, NodeTag, Region};
use crate::potentials::PotentialSpec;

#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub center: Vec<f64>,
    pub lambda: f64,
    pub lambda_star: f64,
    pub shell_t: f64,
    pub radii: Vec<f64>,
    /// V_R = meas(B_R intersect {|u - a| > lambda})
    pub v: Vec<f64>,
    /// A_R = int over B_R intersect {|u - a| <= lambda} of W(u)
    pub a: Vec<f64>,
    /// J_R = energy over B_R
    pub j: Vec<f64>,
    /// node-layer volume at each sphere (measure uncertainty)
    pub cell_layer: Vec<f64>,
    /// omega_j = meas((B_{jT} \ B_{(j-1)T}) intersect {|u - a| > lambda_star})
    pub omega: Vec<f64>,
    /// for potentials with >= 3 wells: the two wells with the largest
    /// theta-sublevel measure per radius (theta = lambda)
    pub dominant_pair: Vec<(usize, usize)>,
}

/// Measure V_R, A_R, J_R over the given radii, and shell measures of width
/// `shell_t` against the `lambda_star` threshold.
#[allow(clippy::too_many_arguments)]
pub fn scan(
    f: &Field,
    a: &[f64],
    center: &[f64],
    radii: &[f64],
    lambda: f64,
    lambda_star: f64,
    shell_t: f64,
    spec: &PotentialSpec,
) -> DensityReport {
    assert!(lambda > 0.0 && lambda_star > 0.0 && shell_t > 0.0);
    let mut v = Vec::with_capacity(radii.len());
    let mut aa = Vec::with_capacity(radii.len());
    let mut j = Vec::with_capacity(radii.len());
    let mut layer = Vec::with_capacity(radii.len());
    let mut dominant = Vec::new();
    for &r in radii {
        let region = Region::Ball { center: center.to_vec(), radius: r };
        v.push(grid::measure_superlevel(f, a, lambda, &region));
        aa.push(grid::sublevel_potential_integral(f, a, lambda, &region, spec));
        j.push(grid::energy(f, &region, spec, 1.0));
        layer.push(grid::ball_layer_volume(f, center, r));
        if spec.wells.len() >= 3 {
            let mut meas: Vec<(usize, f64)> = spec
                .wells
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let sub = grid::region_measure(f, &region)
                        - grid::measure_superlevel(f, w, lambda, &region);
                    (k, sub)
                })
                .collect();
            meas.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
            dominant.push((meas[0].0, meas[1].0));
        }
    }
    // shells tile the largest radius
    let kmax = (radii.iter().cloned().fold(0.0, f64::max) / shell_t).floor() as usize;
    let mut omega = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        // first shell is the full ball so the shells tile B_{kT} exactly
        let region = if k == 1 {
            Region::Ball { center: center.to_vec(), radius: shell_t }
        } else {
            Region::Annulus {
                center: center.to_vec(),
                inner: (k - 1) as f64 * shell_t,
                outer: k as f64 * shell_t,
            }
        };
        omega.push(grid::measure_superlevel(f, a, lambda_star, &region));
    }
    DensityReport {
        center: center.to_vec(),
        lambda,
        lambda_star,
        shell_t,
        radii: radii.to_vec(),
        v,
        a: aa,
        j,
        cell_layer: layer,
        omega,
        dominant_pair: dominant,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub intercept: f64,
    pub window: (f64, f64),
    /// max |ln v - fit| over the window
    pub residual: f64,
    pub used: usize,
    pub excluded_nonpositive: usize,
}

/// Least-squares slope of ln(value) against ln(radius) over the window.
pub fn fit_exponent(values: &[f64], radii: &[f64], window: (f64, f64)) -> Result<ExponentFit> {
    assert_eq!(values.len(), radii.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0usize;
    for (&v, &r) in values.iter().zip(radii) {
        if r < window.0 || r > window.1 {
            continue;
        }
        if v <= 0.0 {
            excluded += 1;
            continue;
        }
        xs.push(r.ln());
        ys.push(v.ln());
    }
    if xs.len() < 4 {
        return Err(PhaseError::DegenerateWindow { usable: xs.len() });
    }
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).abs())
        .fold(0.0, f64::max);
    Ok(ExponentFit {
        exponent: slope,
        intercept,
        window,
        residual,
        used: xs.len(),
        excluded_nonpositive: excluded,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CaffCordRow {
    pub r_inner: f64,
    pub r_outer: f64,
    /// (V_{R-T})^{(n-1)/n} + V_{R-T}
    pub lhs_base: f64,
    /// (V_R - V_{R-T}) + (A_R - A_{R-T})
    pub rhs: f64,
    /// rhs / lhs_base
    pub c: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BasicRow {
    pub k: usize,
    /// (sum_{j<=k} omega_j)^{(n-1)/n}
    pub lhs_base: f64,
    /// sum_j exp(-c2 j T) omega_{k+1-j} + omega_{k+1}
    pub rhs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SchemeReport {
    pub caff_cord: Vec<CaffCordRow>,
    /// largest constant C(lambda) making every difference inequality hold
    pub c_lambda: f64,
    pub caff_pass: bool,
    pub basic: Vec<BasicRow>,
    /// largest constant C0 making every shell-sum inequality hold
    pub c0_best: f64,
    pub basic_pass: bool,
    pub c2: f64,
}

/// Evaluate both discrete inequality families on a measured report: the
/// difference scheme
///   C (V_{R-T}^{(n-1)/n} + V_{R-T}) <= (V_R - V_{R-T}) + (A_R - A_{R-T})
/// over consecutive radii spaced by shell width T, and the shell-sum scheme
///   C0 (sum_{j<=k} omega_j)^{(n-1)/n} <= sum_j e^{-c2 jT} omega_{k+1-j} + omega_{k+1}.
/// PASS means a positive constant exists across the scanned range; failures
/// are findings, not errors.
pub fn difference_scheme_check(report: &DensityReport, dim: usize, c2: f64) -> SchemeReport {
    let t = report.shell_t;
    let exp_frac = (dim as f64 - 1.0) / dim as f64;
    let mut caff = Vec::new();
    let mut c_lambda = f64::INFINITY;
    for (i, &r) in report.radii.iter().enumerate() {
        // find the radius r - t in the list
        let Some(i0) = report
            .radii
            .iter()
            .position(|&x| (x - (r - t)).abs() < 1e-9)
        else {
            continue;
        };
        let v_in = report.v[i0];
        if v_in <= 0.0 {
            continue; // vacuous row
        }
        let lhs_base = v_in.powf(exp_frac) + v_in;
        let rhs = (report.v[i] - v_in) + (report.a[i] - report.a[i0]);
        let c = rhs / lhs_base;
        c_lambda = c_lambda.min(c);
        caff.push(CaffCordRow { r_inner: r - t, r_outer: r, lhs_base, rhs, c });
    }
    let caff_pass = caff.is_empty() || c_lambda > 0.0;
    if caff.is_empty() {
        c_lambda = 0.0;
    }

    let mut basic = Vec::new();
    let mut c0_best = f64::INFINITY;
    let kmax = report.omega.len().saturating_sub(1);
    for k in 1..=kmax {
        let sum: f64 = report.omega[..k].iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let lhs_base = sum.powf(exp_frac);
        let mut rhs = report.omega[k]; // omega_{k+1} (0-indexed)
        for j in 1..=k {
            rhs += (-c2 * j as f64 * t).exp() * report.omega[k - j];
        }
        c0_best = c0_best.min(rhs / lhs_base);
        basic.push(BasicRow { k, lhs_base, rhs });
    }
    let basic_pass = basic.is_empty() || c0_best > 0.0;
    if basic.is_empty() {
        c0_best = 0.0;
    }
    SchemeReport { caff_cord: caff, c_lambda, caff_pass, basic, c0_best, basic_pass, c2 }
}

// ---------------------------------------------------------------------------
// Liouville / decay probes
// ---------------------------------------------------------------------------

/// Euclidean distance from every node to the domain boundary (Dirichlet
/// nodes and nodes adjacent to Exterior or the grid edge).
pub fn boundary_distance(f: &Field) -> Vec<f64> {
    let gridref = &f.grid;
    let n = gridref.n();
    let strides = gridref.strides();
    let shape = gridref.shape().to_vec();
    let mut boundary = Vec::new();
    for i in 0..gridref.len() {
        match f.mask[i] {
            NodeTag::Exterior => continue,
            NodeTag::Dirichlet => boundary.push(i),
            NodeTag::Interior => {
                let mi = gridref.multi(i);
                let mut on_edge = false;
                for c in 0..n {
                    if mi[c] == 0
                        || mi[c] + 1 == shape[c]
                        || f.mask[i - strides[c]] == NodeTag::Exterior
                        || f.mask[i + strides[c]] == NodeTag::Exterior
                    {
                        on_edge = true;
                        break;
                    }
                }
                if on_edge {
                    boundary.push(i);
                }
            }
        }
    }
    let bcoords: Vec<Vec<f64>> = boundary.iter().map(|&i| gridref.coord(i)).collect();
    let mut out = vec![f64::INFINITY; gridref.len()];
    let mut x = vec![0.0; n];
    for i in 0..gridref.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        gridref.coord_into(i, &mut x);
        let mut best = f64::INFINITY;
        for b in &bcoords {
            let d2: f64 = x.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            if d2 < best {
                best = d2;
            }
        }
        out[i] = best.sqrt();
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct LiouvilleReport {
    /// (depth d, sup |u - a| over nodes with boundary distance >= d)
    pub levels: Vec<(f64, f64)>,
    pub innermost_sup: f64,
    pub constant: bool,
}

/// sup |u - a| as a function of distance to the boundary; CONSTANT when the
/// deepest level has sup <= 1e-6.
pub fn liouville_probe(f: &Field, a: &[f64]) -> LiouvilleReport {
    let dist = boundary_distance(f);
    let h = f.grid.h();
    let mut bins: Vec<f64> = Vec::new();
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        let dev: f64 = f
            .value(i)
            .iter()
            .zip(a)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let b = (dist[i] / h).floor() as usize;
        if bins.len() <= b {
            bins.resize(b + 1, 0.0);
        }
        bins[b] = bins[b].max(dev);
    }
    // suffix max: sup over depth >= d
    let mut levels = Vec::with_capacity(bins.len());
    let mut suffix = 0.0f64;
    for (b, &v) in bins.iter().enumerate().rev() {
        suffix = suffix.max(v);
        levels.push((b as f64 * h, suffix));
    }
    levels.reverse();
    let innermost = bins.last().cloned().unwrap_or(0.0);
    LiouvilleReport { levels, innermost_sup: innermost, constant: innermost <= 1e-6 }
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    /// |u - a| <~ K exp(-k d)
    pub k: f64,
    pub big_k: f64,
    pub residual: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Fit log sup_{d(x, boundary) = d} |u - a| against d on the linear-decay
/// window (deviations below e^-1 of the peak and above 1e-10).
pub fn exp_decay_probe(f: &Field, a: &[f64]) -> Result<DecayFit> {
    let dist = boundary_distance(f);
    let h = f.grid.h();
    let mut bins: Vec<f64> = Vec::new();
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        let dev: f64 = f
            .value(i)
            .iter()
            .zip(a)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let b = (dist[i] / h).floor() as usize;
        if bins.len() <= b {
            bins.resize(b + 1, 0.0);
        }
        bins[b] = bins[b].max(dev);
    }
    let peak = bins.iter().cloned().fold(0.0, f64::max);
    if peak < 1e-10 {
        return Err(PhaseError::NoDecayWindow("field deviation is identically ~0".into()));
    }
    let hi = peak * (-1.0f64).exp();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (b, &v) in bins.iter().enumerate() {
        if v > 1e-10 && v <= hi {
            xs.push(b as f64 * h);
            ys.push(v.ln());
        }
    }
    if xs.len() < 4 {
        return Err(PhaseError::NoDecayWindow(format!(
            "only {} usable decay levels",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).abs())
        .fold(0.0, f64::max);
    Ok(DecayFit {
        k: -slope,
        big_k: intercept.exp(),
        residual,
        window: (xs[0], *xs.last().unwrap()),
        points: xs.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LowerBoundReport {
    /// largest c with J_R >= c R^{n-1} across the window
    pub c_best: f64,
    /// J_R / R^{n-2} nondecreasing (within the layer tolerance)
    pub monotone: bool,
    pub ratios: Vec<f64>,
    pub violations: Vec<usize>,
}

/// Check J_R >= c R^{n-1} and the monotonicity-formula consequence
/// J_R / R^{n-2} nondecreasing, with a one-node-layer relative slack.
pub fn lower_bound_check(report: &DensityReport, dim: usize, h: f64) -> LowerBoundReport {
    let mut c_best = f64::INFINITY;
    let mut ratios = Vec::with_capacity(report.radii.len());
    for (i, &r) in report.radii.iter().enumerate() {
        c_best = c_best.min(report.j[i] / r.powi(dim as i32 - 1));
        ratios.push(report.j[i] / r.powi(dim as i32 - 2));
    }
    let mut violations = Vec::new();
    for i in 0..ratios.len().saturating_sub(1) {
        // the sphere is only resolved to one node layer: allow ~ h/R relative
        let slack = ratios[i].abs() * 3.0 * h / report.radii[i + 1] + 1e-12;
        if ratios[i + 1] < ratios[i] - slack {
            violations.push(i + 1);
        }
    }
    LowerBoundReport { c_best, monotone: violations.is_empty(), ratios, violations }
}
