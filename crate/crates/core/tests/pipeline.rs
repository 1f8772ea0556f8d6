//! End-to-end checks chaining the solvers to the comparison-map identity,
//! the density scheme, and the cylinder splice probe.

use phaselab_core::connection1d::{self, ConnectionInit};
use phaselab_core::density;
use phaselab_core::grid::{self, Field, Grid, Region};
use phaselab_core::minimizer::{self, DescentSchedule, MinimalityAudit};
use phaselab_core::polar;
use phaselab_core::potentials::PotentialSpec;
use phaselab_core::NodeTag;

/// Converged planar-interface minimizer on a square with two-arc data.
fn planar_minimizer(shape: usize, h: f64) -> (PotentialSpec, minimizer::DescentOutcome) {
    let spec = PotentialSpec::product_two_well_2d();
    let g = Grid::centered(&[shape, shape], h).unwrap();
    let mut f = Field::from_fn(g, 2, |x, v| {
        v[0] = (2f64.sqrt() * x[1]).tanh();
        v[1] = 0.0;
    });
    f.mark_grid_edges_dirichlet();
    f.set_dirichlet(|x, v| {
        v[0] = if x[1] < 0.0 { -1.0 } else { 1.0 };
        v[1] = 0.0;
    });
    let sched = DescentSchedule { tol: 1e-8, ..Default::default() };
    let out = minimizer::descend(&f, &spec, &sched, 1.0).unwrap();
    assert!(out.converged, "descent residual {}", out.residual);
    (spec, out)
}

#[test]
fn audited_minimizer_satisfies_identity_inequality() {
    let (spec, out) = planar_minimizer(161, 0.125);
    let u = &out.field;

    let audit = MinimalityAudit { trials: 40, radius: 0.6, amplitude: 0.05, seed: 1 };
    let report = minimizer::audit_minimality(u, &spec, &audit);
    assert!(report.pass, "min Delta J = {:.3e}", report.min_delta);

    // comparison map against the well a = a2 = (1, 0); the Helmholtz cap
    // equals 1.05 sup q^u on the boundary sphere, so sigma = u near it
    let a = [1.0, 0.0];
    let p = polar::to_polar(u, &a);
    let q_max = p.q.iter().cloned().fold(0.0, f64::max);
    let big_r = 6.0;
    let prof = polar::ComparisonProfile::helmholtz(vec![0.0, 0.0], big_r, 0.05, 1.05 * q_max, 2);
    let lambda = 0.5;
    let cmp = polar::build_comparison(u, &a, &prof, lambda);
    let region = Region::Ball { center: vec![0.0, 0.0], radius: big_r };
    let rep = polar::verify_identity(u, &cmp, &region, &spec, Some(report.tol));
    // the cap must actually bite somewhere for the test to mean anything
    assert!(rep.j_sigma != rep.j_u, "comparison map did not modify u");
    let ineq = rep.inequality.unwrap();
    assert!(
        ineq.pass,
        "identity inequality fails: lhs {} vs bound {}",
        ineq.lhs, ineq.bound
    );
    assert!(
        rep.relative_mismatch < 1e-6,
        "identity mismatch {}",
        rep.relative_mismatch
    );
}

#[test]
fn density_scan_on_minimizer_matches_halfplane_geometry() {
    let (spec, out) = planar_minimizer(161, 0.125);
    let a1 = [-1.0, 0.0];
    let radii: Vec<f64> = (2..=8).map(|k| k as f64).collect();
    let rep = density::scan(&out.field, &a1, &[0.0, 0.0], &radii, 1.0, 1.0, 1.0, &spec);
    for (i, &r) in radii.iter().enumerate() {
        let half_disk = 0.5 * std::f64::consts::PI * r * r;
        assert!(
            (rep.v[i] - half_disk).abs() <= rep.cell_layer[i] + 0.06 * half_disk,
            "V_{r} = {} vs half disk {half_disk} (layer {})",
            rep.v[i],
            rep.cell_layer[i]
        );
    }
    let scheme = density::difference_scheme_check(&rep, 2, 1.0);
    assert!(scheme.caff_pass && scheme.c_lambda > 0.0);
    assert!(scheme.basic_pass && scheme.c0_best > 0.0);
}

#[test]
fn blowup_rescale_of_interface_keeps_density_exponent() {
    // zooming into a point on the interface: V_R of the rescaled field keeps
    // the full-dimensional exponent (the blow-up step of the uniform
    // convergence argument)
    let (_spec, out) = planar_minimizer(161, 0.125);
    let target = Grid::centered(&[81, 81], 0.1).unwrap();
    let eps = 0.5;
    let blown = grid::rescale(&out.field, &[0.3, 0.0], eps, &target).unwrap();
    let a1 = [-1.0, 0.0];
    let radii = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
    let spec = PotentialSpec::product_two_well_2d();
    let rep = density::scan(&blown, &a1, &[0.0, 0.0], &radii, 1.0, 1.0, 0.5, &spec);
    let fit = density::fit_exponent(&rep.v, &radii, (1.0, 3.5)).unwrap();
    assert!(
        fit.exponent > 1.8 && fit.exponent < 2.2,
        "blow-up V exponent {}",
        fit.exponent
    );
}

#[test]
fn cylinder_splice_energy_excess_is_exponentially_small() {
    // a converged symmetric cylinder field; splicing any competitor into
    // [-l, l] with the linear fade raises the energy up to O(e^{-2 k l})
    let spec = PotentialSpec::two_well();
    let e = connection1d::solve_connection(&spec, 8.0, 161, ConnectionInit::Linear).unwrap();
    let ns = e.curve.nodes();
    let ny = 41;
    let h = e.curve.h();
    let g = Grid::new(&[ns, ny], h, &[-8.0, -0.5 * (ny - 1) as f64 * h]).unwrap();
    let mut f = Field::constant(g, &[0.0]);
    for iy in 0..ny {
        for s in 0..ns {
            f.values[iy * ns + s] = e.curve.value(s)[0];
        }
    }
    f.mark_grid_edges_dirichlet();
    let sched = DescentSchedule { tol: 1e-9, max_iters: 200_000, ..Default::default() };
    let out = minimizer::descend_symmetric(&f, &spec, &sched).unwrap();
    assert!(out.converged);
    let u = &out.field;
    let j_u = grid::energy(u, &Region::All, &spec, 1.0);

    for (trial, l) in [(0u64, 2.0), (1u64, 4.0)] {
        // competitor: u plus a smooth symmetric bump crossing the fade slab
        let mut v = u.clone();
        let bump = connection1d::random_direction(&e, 17, trial);
        for iy in 0..ny {
            for s in 0..ns {
                v.values[iy * ns + s] += 0.2 * bump.values[s];
            }
        }
        let spliced = connection1d::splice_fade(u, &v, l);
        let j_spliced = grid::energy(&spliced, &Region::All, &spec, 1.0);
        let slack = 1e-8 * j_u + e.tail_big_k.powi(2) * (-2.0 * e.tail_k * l).exp();
        assert!(
            j_spliced - j_u >= -slack,
            "l = {l}: excess {} below -{slack}",
            j_spliced - j_u
        );
    }
}

#[test]
fn noisy_disk_relaxes_to_well_and_probe_reports_constant() {
    let spec = PotentialSpec::product_two_well_2d();
    let g = Grid::centered(&[81, 81], 0.15).unwrap();
    let a = [1.0, 0.0];
    let mut f = Field::constant(g, &a);
    f.mask_outside_ball(&[0.0, 0.0], 5.5);
    let mut rng_state = 0x9e3779b97f4a7c15u64;
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Interior {
            for c in 0..2 {
                // cheap deterministic noise
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let r = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
                f.values[i * 2 + c] += 0.1 * (2.0 * r - 1.0);
            }
        }
    }
    let out = minimizer::descend(&f, &spec, &DescentSchedule::default(), 1.0).unwrap();
    assert!(out.converged);
    let probe = density::liouville_probe(&out.field, &a);
    assert!(probe.constant, "innermost sup {}", probe.innermost_sup);
}
