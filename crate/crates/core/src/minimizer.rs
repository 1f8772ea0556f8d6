//! Gradient-flow minimization of the discrete energy under Dirichlet data,
//! symmetric-class descent, multi-start, and perturbation-based minimality
//! audits.
//!
//! The flow iterates u <- u + dt (eps^2 Lap u - W_u(u)) with Jacobi sweeps
//! (full-field updates, no in-place Gauss-Seidel) and Dirichlet nodes frozen.
//! The adaptive rule halves dt whenever a step would raise the energy and
//! grows it 1.1x after a clean step, so energy is non-increasing across
//! accepted steps by construction.

use rayon::prelude::*;

use rand::Rng;

use crate::error::{PhaseError, Result};
use crate::grid::{self, Field, NodeTag, Region};
use crate::potentials::{self, PotentialSpec, Q_MIN};
use crate::rng;

#[derive(Clone, Debug)]
pub struct DescentSchedule {
    /// Initial step; 0 means "use the stability bound".
    pub dt0: f64,
    /// Halve on energy increase, grow 1.1x on success. `false` = fixed dt.
    pub adaptive: bool,
    /// Residual sup-norm stopping threshold.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Residual checks / log rows every this many accepted steps.
    pub check_every: usize,
}

impl Default for DescentSchedule {
    fn default() -> Self {
        DescentSchedule {
            dt0: 0.0,
            adaptive: true,
            tol: 1e-8,
            max_iters: 1_000_000,
            seed: 0,
            check_every: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogRow {
    pub iter: usize,
    pub dt: f64,
    pub energy: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ConvergenceLog {
    pub rows: Vec<LogRow>,
}

impl ConvergenceLog {
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "iter,dt,energy,residual")?;
        for r in &self.rows {
            writeln!(w, "{},{:.16e},{:.16e},{:.16e}", r.iter, r.dt, r.energy, r.residual)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DescentOutcome {
    pub field: Field,
    pub log: ConvergenceLog,
    pub converged: bool,
    pub iters: usize,
    pub residual: f64,
    pub energy: f64,
    /// alpha < 2: interior nodes pinned at a well by the dead-core rule.
    pub pinned_nodes: usize,
}

/// Explicit-step stability bound dt <= h^2 / (2 n eps^2).
pub fn stability_dt(gridref: &crate::grid::Grid, eps: f64) -> f64 {
    gridref.h() * gridref.h() / (2.0 * gridref.n() as f64 * eps * eps)
}

/// Minimize J under the Dirichlet data carried by `f0`.
/// Non-convergence is reported in the outcome (best iterate + log), not as
/// an error.
pub fn descend(
    f0: &Field,
    spec: &PotentialSpec,
    sched: &DescentSchedule,
    eps: f64,
) -> Result<DescentOutcome> {
    descend_impl(f0, spec, sched, eps, false)
}

/// As `descend` (eps = 1), but projects every step onto the symmetry class
/// u(x_hat) = u_hat(x); fixed points satisfy the symmetry exactly.
pub fn descend_symmetric(
    f0: &Field,
    spec: &PotentialSpec,
    sched: &DescentSchedule,
) -> Result<DescentOutcome> {
    if !spec.symmetric {
        return Err(PhaseError::NonAdmissible(
            "descend_symmetric needs a symmetric potential".into(),
        ));
    }
    if !f0.grid.symmetric_about_first_axis() {
        return Err(PhaseError::Grid(
            "descend_symmetric needs a grid symmetric about {x_1 = 0}".into(),
        ));
    }
    descend_impl(f0, spec, sched, 1.0, true)
}

/// Average u with its reflection conjugate: u(x) <- (u(x) + u_hat(x_hat))/2.
pub fn project_symmetric(f: &mut Field) {
    let grid = f.grid.clone();
    let m = f.m;
    let shape0 = grid.shape()[0];
    let strides = grid.strides();
    let len = grid.len();
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; m];
    for i in 0..len {
        let mi = grid.multi(i);
        let mirror0 = shape0 - 1 - mi[0];
        if mi[0] > mirror0 {
            continue; // handled by the partner
        }
        let j = i + (mirror0 - mi[0]) * strides[0];
        a.copy_from_slice(f.value(i));
        b.copy_from_slice(f.value(j));
        b[0] = -b[0];
        for c in 0..m {
            let v = 0.5 * (a[c] + b[c]);
            f.values[i * m + c] = v;
            f.values[j * m + c] = if c == 0 { -v } else { v };
        }
        if i == j {
            // on the symmetry plane the first component is odd, hence zero
            f.values[i * m] = 0.0;
        }
    }
}

/// Max over nodes of |u(x_hat) - u_hat(x)|: how far f is from the class.
pub fn symmetry_gap(f: &Field) -> f64 {
    let grid = &f.grid;
    let m = f.m;
    let shape0 = grid.shape()[0];
    let strides = grid.strides();
    let mut worst = 0.0f64;
    for i in 0..grid.len() {
        let mi = grid.multi(i);
        let j = i + (shape0 - 1 - mi[0]) * strides[0] - mi[0] * strides[0];
        for c in 0..m {
            let v = f.values[i * m + c];
            let w = f.values[j * m + c];
            let w = if c == 0 { -w } else { w };
            worst = worst.max((v - w).abs());
        }
    }
    worst
}

fn descend_impl(
    f0: &Field,
    spec: &PotentialSpec,
    sched: &DescentSchedule,
    eps: f64,
    symmetric: bool,
) -> Result<DescentOutcome> {
    f0.validate()?;
    let mut u = f0.clone();
    if symmetric {
        project_symmetric(&mut u);
    }
    let degenerate = spec.alpha < 2.0;
    let m = u.m;
    let dt_max = stability_dt(&u.grid, eps);
    let mut dt = if sched.dt0 > 0.0 { sched.dt0.min(dt_max) } else { dt_max };

    let mut log = ConvergenceLog::default();
    let mut pinned = 0usize;
    let (res0, _) = grid::residual_with_skips(&u, spec, eps);
    let mut energy = grid::energy(&u, &Region::All, spec, eps);
    log.rows.push(LogRow { iter: 0, dt, energy, residual: res0 });
    if res0 <= sched.tol {
        return Ok(DescentOutcome {
            field: u,
            log,
            converged: true,
            iters: 0,
            residual: res0,
            energy,
            pinned_nodes: pinned,
        });
    }

    let len = u.grid.len();
    let mut gvec = vec![0.0; len * m];
    let mut trial = u.clone();
    let mut residual = res0;
    let mut iters = 0usize;

    'outer: for iter in 1..=sched.max_iters {
        iters = iter;
        // descent direction g = eps^2 Lap u - W_u(u); for alpha < 2 the
        // potential term is dropped inside the dead core (well-pinned nodes)
        let lap = grid::laplacian(&u);
        pinned = 0;
        for i in 0..len {
            if u.mask[i] != NodeTag::Interior {
                for c in 0..m {
                    gvec[i * m + c] = 0.0;
                }
                continue;
            }
            let wgrad = if degenerate {
                match potentials::eval_w_grad(spec, u.value(i)) {
                    Ok(g) => g,
                    Err(PhaseError::DegenerateGradient { .. }) => {
                        pinned += 1;
                        vec![0.0; m]
                    }
                    Err(e) => return Err(e),
                }
            } else {
                potentials::eval_w_grad(spec, u.value(i))?
            };
            for c in 0..m {
                gvec[i * m + c] = eps * eps * lap.values[i * m + c] - wgrad[c];
            }
        }

        // try dt, halving on energy increase; g is reused across retries
        let mut halvings = 0;
        loop {
            trial.values.copy_from_slice(&u.values);
            for i in 0..len {
                if u.mask[i] != NodeTag::Interior {
                    continue;
                }
                for c in 0..m {
                    trial.values[i * m + c] += dt * gvec[i * m + c];
                }
            }
            if degenerate {
                snap_to_wells(&mut trial, spec);
            }
            if symmetric {
                project_symmetric(&mut trial);
            }
            if !sched.adaptive {
                break;
            }
            let e_new = grid::energy(&trial, &Region::All, spec, eps);
            if e_new <= energy + 1e-14 * energy.abs().max(1.0) {
                energy = e_new;
                break;
            }
            dt *= 0.5;
            halvings += 1;
            if dt < 1e-18 {
                break 'outer;
            }
        }
        std::mem::swap(&mut u.values, &mut trial.values);
        if !sched.adaptive {
            energy = grid::energy(&u, &Region::All, spec, eps);
        } else if halvings == 0 {
            dt = (dt * 1.1).min(dt_max);
        }

        if iter % sched.check_every == 0 || iter == sched.max_iters {
            let (res, _) = grid::residual_with_skips(&u, spec, eps);
            residual = res;
            log.rows.push(LogRow { iter, dt, energy, residual: res });
            if res <= sched.tol {
                return Ok(DescentOutcome {
                    field: u,
                    log,
                    converged: true,
                    iters: iter,
                    residual: res,
                    energy,
                    pinned_nodes: pinned,
                });
            }
        }
    }

    let (res, _) = grid::residual_with_skips(&u, spec, eps);
    log.rows.push(LogRow { iter: iters, dt, energy, residual: res });
    let _ = residual;
    Ok(DescentOutcome {
        field: u,
        log,
        converged: false,
        iters,
        residual: res,
        energy,
        pinned_nodes: pinned,
    })
}

/// Dead-core rule for alpha < 2: nodes within Q_MIN of a well stay exactly at
/// the well unless the Laplacian pulls them further out in one step.
fn snap_to_wells(f: &mut Field, spec: &PotentialSpec) {
    let m = f.m;
    for i in 0..f.grid.len() {
        if f.mask[i] != NodeTag::Interior {
            continue;
        }
        for a in &spec.wells {
            let d2: f64 = f
                .value(i)
                .iter()
                .zip(a)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d2 < Q_MIN * Q_MIN {
                f.values[i * m..(i + 1) * m].copy_from_slice(a);
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Minimality audit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MinimalityAudit {
    pub trials: usize,
    /// Support radius of the perturbation bumps.
    pub radius: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for MinimalityAudit {
    fn default() -> Self {
        MinimalityAudit { trials: 100, radius: 0.5, amplitude: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub deltas: Vec<f64>,
    pub min_delta: f64,
    pub tol: f64,
    pub pass: bool,
    pub base_energy: f64,
}

/// Add compactly supported random bumps v (zero on the region boundary) and
/// report Delta J = J(u + v) - J(u) per trial. PASS iff min Delta J >= -tol
/// with tol = 1e-8 J. A negative Delta J is a finding, not an error.
pub fn audit_minimality(f: &Field, spec: &PotentialSpec, audit: &MinimalityAudit) -> AuditReport {
    let base = grid::energy(f, &Region::All, spec, 1.0);
    let tol = 1e-8 * base.abs().max(1e-4);
    let m = f.m;
    let grid_len = f.grid.len();
    let n = f.grid.n();
    let h = f.grid.h();
    let support_nodes = (audit.radius / h).ceil() as isize;

    // candidate centers: interior nodes whose radius-ball stays interior
    let interior: Vec<usize> = (0..grid_len)
        .filter(|&i| f.mask[i] == NodeTag::Interior)
        .collect();

    let mut deltas = Vec::with_capacity(audit.trials);
    let mut xc = vec![0.0; n];
    let mut x = vec![0.0; n];
    for t in 0..audit.trials {
        let mut rng = rng::stream(audit.seed, t as u64);
        // rejection-sample a center with clearance
        let mut center = None;
        for _ in 0..200 {
            let cand = interior[rng.gen_range(0..interior.len())];
            f.grid.coord_into(cand, &mut xc);
            let mi = f.grid.multi(cand);
            let mut ok = true;
            'scan: for off in NeighborhoodIter::new(n, support_nodes) {
                let mut idx = 0usize;
                let strides = f.grid.strides();
                for c in 0..n {
                    let j = mi[c] as isize + off[c];
                    if j < 0 || j >= f.grid.shape()[c] as isize {
                        ok = false;
                        break 'scan;
                    }
                    idx += j as usize * strides[c];
                }
                f.grid.coord_into(idx, &mut x);
                let d: f64 = x
                    .iter()
                    .zip(&xc)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d <= audit.radius && f.mask[idx] != NodeTag::Interior {
                    ok = false;
                    break;
                }
            }
            if ok {
                center = Some(cand);
                break;
            }
        }
        let Some(center) = center else {
            // no admissible center: domain too small for this radius
            deltas.push(0.0);
            continue;
        };
        f.grid.coord_into(center, &mut xc);
        let dir = rng::unit_vector(&mut rng, m);
        let amp = audit.amplitude * rng.gen_range(0.5..1.0);

        let mut perturbed = f.clone();
        for i in 0..grid_len {
            if perturbed.mask[i] != NodeTag::Interior {
                continue;
            }
            perturbed.grid.coord_into(i, &mut x);
            let r: f64 = x
                .iter()
                .zip(&xc)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / audit.radius;
            if r < 1.0 {
                let bump = (1.0 - 1.0 / (1.0 - r * r)).exp();
                for c in 0..m {
                    perturbed.values[i * m + c] += amp * bump * dir[c];
                }
            }
        }
        deltas.push(grid::energy(&perturbed, &Region::All, spec, 1.0) - base);
    }
    let min_delta = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    AuditReport { pass: min_delta >= -tol, deltas, min_delta, tol, base_energy: base }
}

/// Offsets in {-k..k}^n, iterated deterministically.
struct NeighborhoodIter {
    n: usize,
    k: isize,
    cur: Vec<isize>,
    done: bool,
}

impl NeighborhoodIter {
    fn new(n: usize, k: isize) -> Self {
        NeighborhoodIter { n, k, cur: vec![-k; n], done: false }
    }
}

impl Iterator for NeighborhoodIter {
    type Item = Vec<isize>;
    fn next(&mut self) -> Option<Vec<isize>> {
        if self.done {
            return None;
        }
        let out = self.cur.clone();
        let mut c = 0;
        loop {
            if c == self.n {
                self.done = true;
                break;
            }
            self.cur[c] += 1;
            if self.cur[c] > self.k {
                self.cur[c] = -self.k;
                c += 1;
            } else {
                break;
            }
        }
        Some(out)
    }
}

/// Multi-start descent: run `starts` noise-perturbed descents concurrently
/// and keep the lowest-energy converged iterate (ties break on start index,
/// so the result is deterministic for a fixed seed).
pub fn multi_start(
    f0: &Field,
    spec: &PotentialSpec,
    sched: &DescentSchedule,
    eps: f64,
    starts: usize,
    noise: f64,
) -> Result<DescentOutcome> {
    let outcomes: Vec<Result<DescentOutcome>> = (0..starts.max(1))
        .into_par_iter()
        .map(|k| {
            let mut init = f0.clone();
            if k > 0 {
                let mut rng = rng::stream(sched.seed, 0x5eed_0000 + k as u64);
                for i in 0..init.grid.len() {
                    if init.mask[i] != NodeTag::Interior {
                        continue;
                    }
                    for c in 0..init.m {
                        init.values[i * init.m + c] += noise * rng.gen_range(-1.0..1.0);
                    }
                }
            }
            descend(&init, spec, sched, eps)
        })
        .collect();

    let mut best: Option<DescentOutcome> = None;
    for out in outcomes {
        let out = out?;
        let better = match &best {
            None => true,
            Some(b) => {
                (out.converged && !b.converged)
                    || (out.converged == b.converged && out.energy < b.energy)
            }
        };
        if better {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one start"))
}
