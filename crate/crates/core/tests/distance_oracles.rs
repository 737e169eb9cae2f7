use std::f64::consts::PI;

use brakeorbit_core::distance::{distance, grad_dv, Backend, DistanceOptions};
use brakeorbit_core::{PotentialSystem, Vector};
use proptest::prelude::*;

fn harmonic(dim: usize) -> PotentialSystem {
    PotentialSystem::builtin("harmonic", dim, 0.5, &[]).unwrap()
}

/// Jacobi length from the wall to radius cos t along the radial orbit.
fn radial_distance(r: f64) -> f64 {
    let t = r.acos();
    (t - t.sin() * t.cos()) / 4.0
}

#[test]
fn one_dimensional_distance_matches_quadrature() {
    let sys = harmonic(1);
    let opts = DistanceOptions::default();
    for x in [0.0, 0.25, -0.5, 0.8] {
        let want = radial_distance(f64::abs(x));
        for backend in [Backend::Shooting, Backend::Variational] {
            let d = distance(&sys, &Vector::from_vec(vec![x]), backend, &opts).unwrap().value;
            assert!((d - want).abs() < 1e-4, "{backend:?} at {x}: {d} vs {want}");
        }
    }
    assert!((radial_distance(0.0) - PI / 8.0).abs() < 1e-15);
}

#[test]
fn seeded_runs_are_repeatable() {
    let sys = PotentialSystem::builtin("double-well", 2, 0.5, &[]).unwrap();
    let q = Vector::from_vec(vec![0.9, 0.1]);
    let opts = DistanceOptions { seed: 3, ..Default::default() };
    let a = distance(&sys, &q, Backend::Variational, &opts).unwrap();
    let b = distance(&sys, &q, Backend::Variational, &opts).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.start, b.start);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn isotropic_distance_is_radial_and_eikonal(r in 0.1f64..0.9, phi in 0.0..2.0 * PI) {
        let sys = harmonic(2);
        let q = Vector::from_vec(vec![r * phi.cos(), r * phi.sin()]);
        let res = distance(&sys, &q, Backend::Shooting, &DistanceOptions::default()).unwrap();
        prop_assert!((res.value - radial_distance(r)).abs() < 1e-5);
        prop_assert!(res.unique);
        let grad = grad_dv(&sys, &res).unwrap();
        // g*-unit gradient: |∇d|² = (E − V)/2 for the Euclidean base metric
        let g = sys.metric_at(&q) * &grad;
        prop_assert!((g.norm_squared() - 0.5 * sys.gap(&q)).abs() < 1e-6);
        // points toward the centre
        prop_assert!(g.dot(&q) < 0.0);
    }
}
