//! Multi-well potentials W, their derivatives, hypothesis checkers, and the
//! degenerate geodesic distance on u-space.
//!
//! Built-in family: W(u) = coeff * prod_j |u - a_j|^alpha, optionally times a
//! Gaussian obstacle factor (1 + amp * exp(-|u|^2 / width^2)) that keeps every
//! reflection symmetry of the well set. alpha = 2 is the smooth product
//! quartic; alpha < 2 gives the non-Lipschitz radial blends.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PhaseError, Result};
use crate::rng;

/// Modulus cutoff shared by the polar decomposition and the alpha < 2
/// dead-core rules. One threshold, one documented dead zone.
pub const Q_MIN: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PotentialForm {
    /// coeff * prod_j |u - a_j|^alpha
    ProductPower,
    /// ProductPower times (1 + amp * exp(-|u|^2 / width^2)). The obstacle at
    /// the origin splits the minimizing connection into two mirror branches.
    ProductPowerBump { amp: f64, width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub m: usize,
    pub wells: Vec<Vec<f64>>,
    pub alpha: f64,
    pub coeff: f64,
    pub form: PotentialForm,
    /// Reflection symmetry W(u_hat) = W(u), u_hat = (-u_1, u_2, ..).
    pub symmetric: bool,
    /// Constant added to W; nonzero values exist to exercise the hypothesis
    /// checker with a deliberately broken potential.
    pub offset: f64,
}

/// Reflection in the plane {u_1 = 0}.
pub fn reflect(u: &[f64]) -> Vec<f64> {
    let mut v = u.to_vec();
    v[0] = -v[0];
    v
}

pub fn reflect_into(u: &[f64], out: &mut [f64]) {
    out.copy_from_slice(u);
    out[0] = -out[0];
}

impl PotentialSpec {
    pub fn new(wells: Vec<Vec<f64>>, alpha: f64, coeff: f64, form: PotentialForm) -> Self {
        assert!(!wells.is_empty(), "need at least one well");
        let m = wells[0].len();
        assert!(wells.iter().all(|w| w.len() == m));
        assert!(alpha > 0.0 && alpha <= 2.0, "alpha in (0, 2]");
        let symmetric = Self::well_set_symmetric(&wells);
        PotentialSpec {
            m,
            wells,
            alpha,
            coeff,
            form,
            symmetric,
            offset: 0.0,
        }
    }

    /// Scalar two-well W(u) = 1/4 (1 - u^2)^2.
    pub fn two_well() -> Self {
        Self::new(vec![vec![-1.0], vec![1.0]], 2.0, 0.25, PotentialForm::ProductPower)
    }

    /// Scalar |1 - u^2|^alpha blend (non-smooth wells for alpha < 2).
    pub fn two_well_alpha(alpha: f64) -> Self {
        Self::new(vec![vec![-1.0], vec![1.0]], alpha, 1.0, PotentialForm::ProductPower)
    }

    /// Planar product well W(u) = |u - a1|^2 |u - a2|^2, a_{1,2} = (-+1, 0).
    pub fn product_two_well_2d() -> Self {
        Self::new(
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            2.0,
            1.0,
            PotentialForm::ProductPower,
        )
    }

    /// Product well with a Gaussian obstacle at the origin. For amp large
    /// enough the minimizing connection leaves the u_1 axis and comes in an
    /// upper/lower mirror pair.
    pub fn double_connection(amp: f64, width: f64) -> Self {
        Self::new(
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            2.0,
            1.0,
            PotentialForm::ProductPowerBump { amp, width },
        )
    }

    /// Deliberately broken copy (negative dip) for checker tests.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    fn well_set_symmetric(wells: &[Vec<f64>]) -> bool {
        wells.iter().all(|w| {
            let r = reflect(w);
            wells
                .iter()
                .any(|v| v.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-12))
        })
    }

    /// Minimal pairwise well distance (f64::INFINITY for a single well).
    pub fn well_separation(&self) -> f64 {
        let mut sep = f64::INFINITY;
        for (i, a) in self.wells.iter().enumerate() {
            for b in self.wells.iter().skip(i + 1) {
                sep = sep.min(dist(a, b));
            }
        }
        sep
    }

    /// Index of the well with positive first coordinate (the `a_+` of the
    /// symmetric two-well setting).
    pub fn plus_well(&self) -> Option<usize> {
        self.wells.iter().position(|w| w[0] > 0.0)
    }
}

fn dist2(u: &[f64], a: &[f64]) -> f64 {
    u.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(u: &[f64], a: &[f64]) -> f64 {
    dist2(u, a).sqrt()
}

fn bump_factor(spec: &PotentialSpec, u: &[f64]) -> f64 {
    match spec.form {
        PotentialForm::ProductPower => 1.0,
        PotentialForm::ProductPowerBump { amp, width } => {
            let r2: f64 = u.iter().map(|x| x * x).sum();
            1.0 + amp * (-r2 / (width * width)).exp()
        }
    }
}

/// W(u).
pub fn eval_w(spec: &PotentialSpec, u: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), spec.m);
    let mut w = spec.coeff;
    for a in &spec.wells {
        let d2 = dist2(u, a);
        w *= if spec.alpha == 2.0 { d2 } else { d2.powf(spec.alpha / 2.0) };
    }
    w * bump_factor(spec, u) + spec.offset
}

/// W_u(u). For alpha < 2 the gradient blows up at the wells; calls closer
/// than `Q_MIN` to a well return `DegenerateGradient`.
pub fn eval_w_grad(spec: &PotentialSpec, u: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(u.len(), spec.m);
    let n_wells = spec.wells.len();
    let mut p = vec![0.0; n_wells]; // |u - a_j|^2
    for (j, a) in spec.wells.iter().enumerate() {
        p[j] = dist2(u, a);
        if spec.alpha < 2.0 && p[j] < Q_MIN * Q_MIN {
            return Err(PhaseError::DegenerateGradient { well: j, q_min: Q_MIN });
        }
    }
    // grad(prod p_j^{alpha/2}) = sum_j alpha (u - a_j) p_j^{alpha/2 - 1} prod_{k != j} p_k^{alpha/2}
    let half = spec.alpha / 2.0;
    let pw: Vec<f64> = p
        .iter()
        .map(|&x| if spec.alpha == 2.0 { x } else { x.powf(half) })
        .collect();
    let mut grad = vec![0.0; spec.m];
    for (j, a) in spec.wells.iter().enumerate() {
        let mut rest = spec.coeff;
        for (k, &w) in pw.iter().enumerate() {
            if k != j {
                rest *= w;
            }
        }
        // alpha * p_j^{alpha/2 - 1}; for alpha = 2 this is just alpha.
        let radial = if spec.alpha == 2.0 {
            spec.alpha
        } else {
            spec.alpha * p[j].powf(half - 1.0)
        };
        for c in 0..spec.m {
            grad[c] += rest * radial * (u[c] - a[c]);
        }
    }
    match spec.form {
        PotentialForm::ProductPower => {}
        PotentialForm::ProductPowerBump { amp, width } => {
            let prod: f64 = spec.coeff * pw.iter().product::<f64>();
            let r2: f64 = u.iter().map(|x| x * x).sum();
            let b = amp * (-r2 / (width * width)).exp();
            let factor = 1.0 + b;
            let dfactor = -2.0 * b / (width * width);
            for c in 0..spec.m {
                grad[c] = grad[c] * factor + prod * dfactor * u[c];
            }
        }
    }
    Ok(grad)
}

/// Hessian W_uu(u); only defined for the smooth case alpha = 2.
pub fn eval_w_hess(spec: &PotentialSpec, u: &[f64]) -> Result<Vec<Vec<f64>>> {
    if spec.alpha != 2.0 {
        return Err(PhaseError::UnsupportedAlpha { alpha: spec.alpha });
    }
    let m = spec.m;
    let n_wells = spec.wells.len();
    let p: Vec<f64> = spec.wells.iter().map(|a| dist2(u, a)).collect();

    let prod_except = |skip: &[usize]| -> f64 {
        let mut r = spec.coeff;
        for k in 0..n_wells {
            if !skip.contains(&k) {
                r *= p[k];
            }
        }
        r
    };

    // H_P = sum_j 2I prod_{k!=j} p_k + sum_{j!=l} 4 (u-a_l) x (u-a_j) prod_{k notin {j,l}} p_k
    let mut h = vec![vec![0.0; m]; m];
    for j in 0..n_wells {
        let rj = prod_except(&[j]);
        for c in 0..m {
            h[c][c] += 2.0 * rj;
        }
        for l in 0..n_wells {
            if l == j {
                continue;
            }
            let rjl = prod_except(&[j, l]);
            for c in 0..m {
                for d in 0..m {
                    h[c][d] += 4.0 * (u[c] - spec.wells[l][c]) * (u[d] - spec.wells[j][d]) * rjl;
                }
            }
        }
    }

    if let PotentialForm::ProductPowerBump { amp, width } = spec.form {
        let w2 = width * width;
        let r2: f64 = u.iter().map(|x| x * x).sum();
        let b = amp * (-r2 / w2).exp();
        let factor = 1.0 + b;
        let prod = prod_except(&[]);
        // grad of the plain product part
        let mut gp = vec![0.0; m];
        for j in 0..n_wells {
            let rj = prod_except(&[j]);
            for c in 0..m {
                gp[c] += 2.0 * rj * (u[c] - spec.wells[j][c]);
            }
        }
        let dfac: Vec<f64> = u.iter().map(|x| -2.0 * b * x / w2).collect();
        for c in 0..m {
            for d in 0..m {
                let hb = b * (4.0 * u[c] * u[d] / (w2 * w2) - if c == d { 2.0 / w2 } else { 0.0 });
                h[c][d] = h[c][d] * factor + gp[c] * dfac[d] + dfac[c] * gp[d] + prod * hb;
            }
        }
    }
    Ok(h)
}

/// Options for the hypothesis checker ray/direction sampling.
#[derive(Clone, Debug)]
pub struct HypothesisOptions {
    pub directions: usize,
    pub radii: usize,
    pub rho0: Option<f64>,
}

impl Default for HypothesisOptions {
    fn default() -> Self {
        HypothesisOptions { directions: 64, radii: 32, rho0: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub alpha: f64,
    pub well_values: Vec<f64>,
    pub min_sampled: f64,
    pub nonnegative: bool,
    /// alpha = 2: inf over wells/directions of nu^T W_uu(a) nu.
    pub c0_estimate: Option<f64>,
    /// alpha = 2: smallest Hessian eigenvalue over the wells.
    pub min_hessian_eigenvalue: Option<f64>,
    /// alpha < 2: inf over rays of W_u(a + rho nu) . nu / rho^{alpha-1}.
    pub cstar_estimate: Option<f64>,
    pub rho0: f64,
    /// min W over samples at distance >= gap_radius from every well.
    pub positivity_gap: f64,
    pub gap_radius: f64,
    /// max |W(u_hat) - W(u)| over samples, when the spec claims symmetry.
    pub symmetry_gap: Option<f64>,
    pub samples: usize,
}

/// Sample-based verification of the structural hypotheses on W: wells are
/// zeros, W is nonnegative, the radial/Hessian lower bounds hold with a
/// positive constant, and claimed reflection symmetry is exact.
pub fn check_hypotheses(
    spec: &PotentialSpec,
    lo: &[f64],
    hi: &[f64],
    samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    check_hypotheses_with(spec, lo, hi, samples, seed, &HypothesisOptions::default())
}

pub fn check_hypotheses_with(
    spec: &PotentialSpec,
    lo: &[f64],
    hi: &[f64],
    samples: usize,
    seed: u64,
    opts: &HypothesisOptions,
) -> Result<HypothesisReport> {
    assert!(samples >= 1);
    assert_eq!(lo.len(), spec.m);
    assert_eq!(hi.len(), spec.m);
    let mut rng = rng::stream(seed, 0);

    let mut well_values = Vec::new();
    for a in &spec.wells {
        let w = eval_w(spec, a);
        if w.abs() > 1e-13 {
            return Err(PhaseError::HypothesisViolated {
                name: "well-zero",
                point: a.clone(),
                detail: format!("W(a) = {w:.3e} != 0"),
            });
        }
        well_values.push(w);
    }

    let sep = spec.well_separation();
    let gap_radius = if sep.is_finite() { 0.1 * sep } else { 0.1 };
    let mut min_sampled = f64::INFINITY;
    let mut positivity_gap = f64::INFINITY;
    let mut symmetry_gap: Option<f64> = spec.symmetric.then_some(0.0);

    for _ in 0..samples {
        let u: Vec<f64> = (0..spec.m)
            .map(|c| rng.gen_range(lo[c]..=hi[c]))
            .collect();
        let w = eval_w(spec, &u);
        min_sampled = min_sampled.min(w);
        if w < -1e-13 {
            return Err(PhaseError::HypothesisViolated {
                name: "nonnegativity",
                point: u,
                detail: format!("W = {w:.3e} < 0"),
            });
        }
        if spec.wells.iter().all(|a| dist(&u, a) >= gap_radius) {
            positivity_gap = positivity_gap.min(w);
        }
        if let Some(gap) = symmetry_gap.as_mut() {
            let wr = eval_w(spec, &reflect(&u));
            *gap = gap.max((wr - w).abs());
            if *gap > 1e-12 {
                return Err(PhaseError::HypothesisViolated {
                    name: "symmetry",
                    point: u,
                    detail: format!("|W(u_hat) - W(u)| = {gap:.3e}"),
                });
            }
        }
    }
    if positivity_gap <= 0.0 {
        return Err(PhaseError::HypothesisViolated {
            name: "positivity-off-wells",
            point: vec![],
            detail: format!("min W at distance >= {gap_radius} from wells is {positivity_gap:.3e}"),
        });
    }

    let rho0 = opts
        .rho0
        .unwrap_or(if sep.is_finite() { 0.45 * sep } else { 0.5 });

    let mut c0_estimate = None;
    let mut min_eig = None;
    let mut cstar_estimate = None;

    if spec.alpha == 2.0 {
        let mut c0 = f64::INFINITY;
        let mut eig_min = f64::INFINITY;
        for a in &spec.wells {
            let h = eval_w_hess(spec, a)?;
            for _ in 0..opts.directions {
                let nu = rng::unit_vector(&mut rng, spec.m);
                let mut q = 0.0;
                for c in 0..spec.m {
                    for d in 0..spec.m {
                        q += nu[c] * h[c][d] * nu[d];
                    }
                }
                c0 = c0.min(q);
            }
            eig_min = eig_min.min(smallest_eigenvalue(&h));
        }
        if c0 <= 0.0 {
            return Err(PhaseError::HypothesisViolated {
                name: "hessian-bound",
                point: vec![],
                detail: format!("C0 estimate {c0:.3e} <= 0"),
            });
        }
        c0_estimate = Some(c0);
        min_eig = Some(eig_min);
    } else {
        let mut cstar = f64::INFINITY;
        for (j, a) in spec.wells.iter().enumerate() {
            for _ in 0..opts.directions {
                let nu = rng::unit_vector(&mut rng, spec.m);
                for i in 1..=opts.radii {
                    let rho = rho0 * i as f64 / opts.radii as f64;
                    let u: Vec<f64> = a.iter().zip(&nu).map(|(ac, nc)| ac + rho * nc).collect();
                    let g = eval_w_grad(spec, &u)?;
                    let radial: f64 = g.iter().zip(&nu).map(|(gc, nc)| gc * nc).sum();
                    cstar = cstar.min(radial / rho.powf(spec.alpha - 1.0));
                    if cstar <= 0.0 {
                        return Err(PhaseError::HypothesisViolated {
                            name: "radial-bound",
                            point: u,
                            detail: format!("W_u(a+rho nu).nu / rho^(alpha-1) = {cstar:.3e} at well {j}"),
                        });
                    }
                }
            }
        }
        cstar_estimate = Some(cstar);
    }

    Ok(HypothesisReport {
        alpha: spec.alpha,
        well_values,
        min_sampled,
        nonnegative: true,
        c0_estimate,
        min_hessian_eigenvalue: min_eig,
        cstar_estimate,
        rho0,
        positivity_gap,
        gap_radius,
        symmetry_gap,
        samples,
    })
}

/// Smallest eigenvalue of a small symmetric matrix (m <= 4 in practice).
pub fn smallest_eigenvalue(h: &[Vec<f64>]) -> f64 {
    let m = h.len();
    if m == 1 {
        return h[0][0];
    }
    let a = nalgebra::DMatrix::from_fn(m, m, |i, j| h[i][j]);
    let eig = a.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Degenerate geodesic distance d(z1, z2) = inf int sqrt(2 W) |zeta'| ds,
// approximated by Dijkstra on a u-space lattice: 2-connected for m = 1,
// 8-connected for m = 2, 26-connected for m = 3. Converges from above.
// ---------------------------------------------------------------------------

struct HeapEntry {
    cost: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap by cost, tie-break on node id for determinism
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then(other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn geodesic_distance(
    spec: &PotentialSpec,
    z1: &[f64],
    z2: &[f64],
    lo: &[f64],
    hi: &[f64],
    resolution: f64,
) -> f64 {
    let m = spec.m;
    assert!(m <= 3, "u-space lattice only supported up to m = 3");
    assert!(resolution > 0.0);
    let shape: Vec<usize> = (0..m)
        .map(|c| (((hi[c] - lo[c]) / resolution).round() as usize + 1).max(2))
        .collect();
    let total: usize = shape.iter().product();

    let coord = |node: usize, out: &mut [f64]| {
        let mut r = node;
        for c in 0..m {
            out[c] = lo[c] + (r % shape[c]) as f64 * resolution;
            r /= shape[c];
        }
    };
    let snap = |z: &[f64]| -> usize {
        let mut node = 0;
        let mut stride = 1;
        for c in 0..m {
            let i = (((z[c] - lo[c]) / resolution).round() as isize)
                .clamp(0, shape[c] as isize - 1) as usize;
            node += i * stride;
            stride *= shape[c];
        }
        node
    };

    // neighbor offsets: all nonzero {-1,0,1}^m moves
    let mut offsets: Vec<Vec<isize>> = Vec::new();
    let mut ix = vec![0isize; m];
    loop {
        if ix.iter().any(|&d| d != 0) {
            offsets.push(ix.clone());
        }
        let mut c = 0;
        loop {
            if c == m {
                break;
            }
            ix[c] += 1;
            if ix[c] > 1 {
                ix[c] = -1;
                c += 1;
            } else {
                break;
            }
        }
        if c == m {
            break;
        }
    }

    let src = snap(z1);
    let dst = snap(z2);
    let mut distm = vec![f64::INFINITY; total];
    let mut heap = BinaryHeap::new();
    distm[src] = 0.0;
    heap.push(HeapEntry { cost: 0.0, node: src });

    let mut x = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut mid = vec![0.0; m];

    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if node == dst {
            return cost;
        }
        if cost > distm[node] {
            continue;
        }
        coord(node, &mut x);
        // decompose node into multi-index to bound neighbors
        let mut mi = [0usize; 3];
        {
            let mut r = node;
            for c in 0..m {
                mi[c] = r % shape[c];
                r /= shape[c];
            }
        }
        'next: for off in &offsets {
            let mut nb = 0usize;
            let mut stride = 1usize;
            let mut len2 = 0.0;
            for c in 0..m {
                let j = mi[c] as isize + off[c];
                if j < 0 || j >= shape[c] as isize {
                    continue 'next;
                }
                nb += j as usize * stride;
                stride *= shape[c];
                len2 += (off[c] as f64 * resolution) * (off[c] as f64 * resolution);
            }
            coord(nb, &mut y);
            for c in 0..m {
                mid[c] = 0.5 * (x[c] + y[c]);
            }
            let w = eval_w(spec, &mid).max(0.0);
            let edge = (2.0 * w).sqrt() * len2.sqrt();
            let next = cost + edge;
            if next < distm[nb] {
                distm[nb] = next;
                heap.push(HeapEntry { cost: next, node: nb });
            }
        }
    }
    distm[dst]
}
