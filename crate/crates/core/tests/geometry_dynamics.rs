use std::f64::consts::PI;

use brakeorbit_core::dynamics::{geodesic_from_orbit, orbit_from_geodesic, shoot_brake_orbit};
use brakeorbit_core::jacobi_geodesic::boundary_start;
use brakeorbit_core::{PotentialSystem, Vector};
use proptest::prelude::*;

fn harmonic(omega: &[f64]) -> PotentialSystem {
    let c: Vec<serde_json::Value> = omega.iter().map(|&w| w.into()).collect();
    PotentialSystem::builtin("harmonic", omega.len(), 0.5, &c).unwrap()
}

fn double_well() -> PotentialSystem {
    PotentialSystem::builtin("double-well", 2, 0.5, &[]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn tangent_basis_is_orthonormal_and_tangent(phi in 0.0..2.0 * PI, w2 in 0.5f64..3.0, theta in 0.0..PI) {
        for sys in [harmonic(&[1.0, w2]), harmonic(&[1.0, w2, 1.5])] {
            let mut dir = Vector::zeros(sys.dim);
            dir[0] = phi.cos() * theta.sin();
            dir[1] = phi.sin() * theta.sin();
            if sys.dim == 3 {
                dir[2] = theta.cos();
            } else {
                dir[1] += theta.cos();
            }
            prop_assume!(dir.norm() > 1e-3);
            let x = sys.ray_to_boundary(&Vector::zeros(sys.dim), &dir).unwrap();
            prop_assert!((sys.potential_value(&x) - 0.5).abs() < 1e-10);
            let b = sys.tangent_basis(&x);
            prop_assert_eq!(b.ncols(), sys.dim - 1);
            let g = sys.metric_at(&x);
            let gram = b.transpose() * &g * &b;
            prop_assert!((gram - brakeorbit_core::Matrix::identity(sys.dim - 1, sys.dim - 1)).amax() < 1e-10);
            let dv = sys.differential(&x);
            for k in 0..b.ncols() {
                prop_assert!(dv.dot(&b.column(k)).abs() < 1e-10 * dv.norm());
            }
        }
    }

    #[test]
    fn harmonic_brake_period_is_pi_over_omega(w in 0.5f64..4.0) {
        let sys = harmonic(&[w]);
        let b = shoot_brake_orbit(&sys, &Vector::from_vec(vec![1.0 / w])).unwrap();
        prop_assert!((b.half_period - PI / w).abs() < 1e-6 * PI / w);
        prop_assert!(b.trajectory.energy_residual <= 1e-8);
        for (t, q) in b.trajectory.times.iter().zip(&b.trajectory.q) {
            prop_assert!((q[0] - (w * t).cos() / w).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_reproduces_the_orbit(phi in 0.0..2.0 * PI) {
        let sys = double_well();
        let centre = Vector::from_vec(vec![1.0, 0.0]);
        let x0 = sys.ray_to_boundary(&centre, &Vector::from_vec(vec![phi.cos(), phi.sin()])).unwrap();
        let Ok(b) = shoot_brake_orbit(&sys, &x0) else { return Ok(()) };
        let geo = geodesic_from_orbit(&sys, &b.trajectory).unwrap();
        let back = orbit_from_geodesic(&sys, &geo).unwrap();
        let mut err: f64 = 0.0;
        // both ends are turning points, where a small time offset barely moves q
        let t_max = b.trajectory.t_end();
        for (t, q) in back.times.iter().zip(&back.q) {
            let s = b.trajectory.state_at(&sys, t.min(t_max)).unwrap();
            err = err.max((q - &s.q).amax());
        }
        // grazing passes (E − V ~ 1e-4) amplify interpolation error in 1/(E − V)
        prop_assert!(err <= 1e-5, "round trip error {err:e}");
    }
}

#[test]
fn half_orbit_length_in_one_dimension() {
    let sys = harmonic(&[1.0]);
    let b = shoot_brake_orbit(&sys, &Vector::from_vec(vec![1.0])).unwrap();
    let geo = geodesic_from_orbit(&sys, &b.trajectory).unwrap();
    // ∫ ½ sin²t dt over [0, π]
    assert!((geo.arc_length() - PI / 4.0).abs() < 1e-5);
}

#[test]
fn boundary_geodesic_follows_closed_form_time() {
    let sys = harmonic(&[1.0, 1.0]);
    let g = boundary_start(&sys, &Vector::from_vec(vec![1.0, 0.0]), 0.7).unwrap();
    for i in (1..g.len()).step_by(7) {
        let t = g.t[i];
        let s = (t - t.sin() * t.cos()) / 4.0;
        assert!((g.s[i] - s).abs() < 1e-7, "node {i}: s={} closed form {s}", g.s[i]);
        assert!((g.points[i][0] - t.cos()).abs() < 1e-7);
    }
}
