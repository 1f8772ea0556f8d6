//! Sharp-interface linking experiments: eps-continuation of Dirichlet
//! minimizers of the scaled energy, marching-squares level-set extraction,
//! and Hausdorff comparison against the analytic minimal partition.

use serde::Serialize;

use crate::error::{PhaseError, Result};
use crate::grid::{Field, Grid, NodeTag};
use crate::minimizer::{self, DescentSchedule};
use crate::potentials::PotentialSpec;

/// Level set {|u - a| = gamma} as polyline segments (endpoints on cell edges).
#[derive(Clone, Debug, Serialize)]
pub struct LevelSet {
    pub gamma: f64,
    pub epsilon: f64,
    pub segments: Vec<[[f64; 2]; 2]>,
}

/// Analytic reference interface of the limiting partition.
#[derive(Clone, Debug)]
pub enum ReferencePartition {
    /// chord of the disk between the boundary-data transition angles
    ChordInDisk { center: [f64; 2], radius: f64, theta1: f64, theta2: f64 },
    SegmentInRectangle { from: [f64; 2], to: [f64; 2] },
}

impl ReferencePartition {
    pub fn endpoints(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            ReferencePartition::ChordInDisk { center, radius, theta1, theta2 } => (
                [center[0] + radius * theta1.cos(), center[1] + radius * theta1.sin()],
                [center[0] + radius * theta2.cos(), center[1] + radius * theta2.sin()],
            ),
            ReferencePartition::SegmentInRectangle { from, to } => (*from, *to),
        }
    }
}

/// A disk domain with arc-wise constant two-well boundary data: g = a1 on the
/// arc (theta1, theta2), a2 on the complement (one-cell transitions).
pub fn two_arc_disk_field(
    grid: Grid,
    m: usize,
    center: &[f64],
    radius: f64,
    a1: &[f64],
    a2: &[f64],
    theta1: f64,
    theta2: f64,
) -> Field {
    let c0 = center[0];
    let c1 = center[1];
    let wrap = |t: f64| t.rem_euclid(2.0 * std::f64::consts::PI);
    let (t1, t2) = (wrap(theta1), wrap(theta2));
    let in_arc = move |theta: f64| -> bool {
        let t = wrap(theta);
        if t1 <= t2 {
            t >= t1 && t < t2
        } else {
            t >= t1 || t < t2
        }
    };
    let a1v = a1.to_vec();
    let a2v = a2.to_vec();
    let mut f = Field::from_fn(grid, m, |x, v| {
        let theta = (x[1] - c1).atan2(x[0] - c0);
        let g = if in_arc(theta) { &a1v } else { &a2v };
        v.copy_from_slice(g);
    });
    f.mask_outside_ball(center, radius);
    f
}

#[derive(Clone, Debug)]
pub struct ContinuationOutcome {
    pub eps: f64,
    pub field: Field,
    pub converged: bool,
    pub energy: f64,
    pub residual: f64,
}

/// Minimize the eps-scaled energy along a decreasing eps schedule,
/// multi-starting at the first eps and warm-starting each subsequent one
/// from the previous minimizer (stays in one branch). A non-converged eps is
/// recorded and the continuation goes on.
pub fn eps_continuation(
    template: &Field,
    spec: &PotentialSpec,
    sched: &DescentSchedule,
    eps_schedule: &[f64],
    starts: usize,
    noise: f64,
) -> Result<Vec<ContinuationOutcome>> {
    assert!(!eps_schedule.is_empty());
    assert!(
        eps_schedule.windows(2).all(|w| w[1] < w[0]),
        "eps schedule must decrease"
    );
    let mut outcomes: Vec<ContinuationOutcome> = Vec::with_capacity(eps_schedule.len());
    for (i, &eps) in eps_schedule.iter().enumerate() {
        let out = if i == 0 {
            minimizer::multi_start(template, spec, sched, eps, starts, noise)?
        } else {
            let mut warm = outcomes[i - 1].field.clone();
            warm.mask.clone_from(&template.mask);
            minimizer::descend(&warm, spec, sched, eps)?
        };
        outcomes.push(ContinuationOutcome {
            eps,
            field: out.field,
            converged: out.converged,
            energy: out.energy,
            residual: out.residual,
        });
    }
    Ok(outcomes)
}

/// Marching-squares extraction of {|u - a| = gamma} on a 2-D field. Crossing
/// points by linear interpolation along cell edges; ambiguous saddle cells
/// are split by the cell-average rule (average above gamma links the
/// high-value corners).
pub fn extract_levelset(f: &Field, a: &[f64], gamma: f64, epsilon: f64) -> Result<LevelSet> {
    let grid = &f.grid;
    if grid.n() != 2 {
        return Err(PhaseError::Grid("level-set extraction needs a 2-D field".into()));
    }
    assert!(gamma > 0.0);
    let m = f.m;
    let shape = grid.shape().to_vec();
    let strides = grid.strides();
    let h = grid.h();
    let rho = |node: usize| -> f64 {
        f.value(node)
            .iter()
            .zip(a)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let _ = m;

    let mut segments = Vec::new();
    let mut xy = vec![0.0; 2];
    for j in 0..shape[1] - 1 {
        for i in 0..shape[0] - 1 {
            let n00 = i + j * strides[1];
            let n10 = n00 + 1;
            let n01 = n00 + strides[1];
            let n11 = n01 + 1;
            if [n00, n10, n01, n11]
                .iter()
                .any(|&n| f.mask[n] == NodeTag::Exterior)
            {
                continue;
            }
            grid.coord_into(n00, &mut xy);
            let (x0, y0) = (xy[0], xy[1]);
            let v = [rho(n00), rho(n10), rho(n11), rho(n01)]; // ccw corners
            let above = [v[0] > gamma, v[1] > gamma, v[2] > gamma, v[3] > gamma];
            let case = (above[0] as usize)
                | (above[1] as usize) << 1
                | (above[2] as usize) << 2
                | (above[3] as usize) << 3;
            if case == 0 || case == 15 {
                continue;
            }
            // edge crossing points: 0 bottom, 1 right, 2 top, 3 left
            let cross = |ea: usize| -> [f64; 2] {
                let (va, vb, pa, pb): (f64, f64, [f64; 2], [f64; 2]) = match ea {
                    0 => (v[0], v[1], [x0, y0], [x0 + h, y0]),
                    1 => (v[1], v[2], [x0 + h, y0], [x0 + h, y0 + h]),
                    2 => (v[3], v[2], [x0, y0 + h], [x0 + h, y0 + h]),
                    _ => (v[0], v[3], [x0, y0], [x0, y0 + h]),
                };
                let t = ((gamma - va) / (vb - va)).clamp(0.0, 1.0);
                [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
            };
            let mut push = |ea: usize, eb: usize| {
                segments.push([cross(ea), cross(eb)]);
            };
            match case {
                1 | 14 => push(3, 0),
                2 | 13 => push(0, 1),
                4 | 11 => push(1, 2),
                8 | 7 => push(2, 3),
                3 | 12 => push(3, 1),
                6 | 9 => push(0, 2),
                5 | 10 => {
                    // ambiguous saddle: cell-average rule
                    let avg = 0.25 * (v[0] + v[1] + v[2] + v[3]);
                    let connect_first = (avg > gamma) == (case == 5);
                    if connect_first {
                        push(3, 0);
                        push(1, 2);
                    } else {
                        push(0, 1);
                        push(2, 3);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    if segments.is_empty() {
        return Err(PhaseError::EmptyLevelSet { gamma });
    }
    Ok(LevelSet { gamma, epsilon, segments })
}

fn sample_segment(a: [f64; 2], b: [f64; 2], step: f64, out: &mut Vec<[f64; 2]>) {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let pieces = (len / step).ceil().max(1.0) as usize;
    for k in 0..=pieces {
        let t = k as f64 / pieces as f64;
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
}

/// Symmetric Hausdorff distance between the extracted polylines and the
/// analytic reference curve, both sampled at `step`.
pub fn hausdorff_to_reference(ls: &LevelSet, reference: &ReferencePartition, step: f64) -> f64 {
    let mut p = Vec::new();
    for seg in &ls.segments {
        sample_segment(seg[0], seg[1], step, &mut p);
    }
    let (from, to) = reference.endpoints();
    let mut q = Vec::new();
    sample_segment(from, to, step, &mut q);
    hausdorff(&p, &q)
}

fn hausdorff(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
    let one_sided = |a: &[[f64; 2]], b: &[[f64; 2]]| -> f64 {
        let mut worst = 0.0f64;
        for x in a {
            let mut best = f64::INFINITY;
            for y in b {
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
                if d < best {
                    best = d;
                }
            }
            worst = worst.max(best);
        }
        worst.sqrt()
    };
    one_sided(p, q).max(one_sided(q, p))
}
