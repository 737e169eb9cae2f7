//! Acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_BLOCKED` print FAIL without failing the target;
//! set ACCEPTANCE_STRICT=1 to make every FAIL fatal.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use brakeorbit_core::distance::{distance, grad_dv, Backend, DistanceOptions};
use brakeorbit_core::dynamics::{geodesic_from_orbit, orbit_from_geodesic, shoot_brake_orbit};
use brakeorbit_core::jacobi_geodesic::{asymptotic_exponents, boundary_start, boundary_start_with};
use brakeorbit_core::morse::{self, MorseOptions, MorseReport};
use brakeorbit_core::verify::{null_field_diagnostics, standard_cases, Case};
use brakeorbit_core::{PotentialSystem, Result, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_BLOCKED: &[usize] = &[6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn harmonic(dim: usize, omega: &[f64]) -> PotentialSystem {
    let c: Vec<serde_json::Value> = omega.iter().map(|&w| w.into()).collect();
    PotentialSystem::builtin("harmonic", dim, 0.5, &c).unwrap()
}

fn e1(dim: usize) -> Vector {
    let mut x = Vector::zeros(dim);
    x[0] = 1.0;
    x
}

fn brake_orbit() -> Result<Outcome> {
    let sys = harmonic(1, &[]);
    let b = shoot_brake_orbit(&sys, &e1(1))?;
    let tr = &b.trajectory;
    let cos_err = tr.times.iter().zip(&tr.q).map(|(t, q)| (q[0] - t.cos()).abs()).fold(0.0, f64::max);
    let dt = (b.half_period - PI).abs();
    outcome(
        dt <= 1e-6 && cos_err <= 1e-6 && tr.energy_residual <= 1e-8,
        format!("|T-pi|={dt:.2e} cos_err={cos_err:.2e} energy_residual={:.2e}", tr.energy_residual),
    )
}

fn round_trip() -> Result<Outcome> {
    let sys = harmonic(1, &[]);
    let b = shoot_brake_orbit(&sys, &e1(1))?;
    let geo = geodesic_from_orbit(&sys, &b.trajectory)?;
    let back = orbit_from_geodesic(&sys, &geo)?;
    let err = back.times.iter().zip(&back.q).map(|(t, q)| (q[0] - t.cos()).abs()).fold(0.0, f64::max);
    let len = (geo.arc_length() - PI / 4.0).abs();
    outcome(err <= 1e-6 && len <= 1e-5, format!("sup_err={err:.2e} |L-pi/4|={len:.2e}"))
}

fn asymptotics() -> Result<Outcome> {
    let mut pass = true;
    let mut detail = Vec::new();
    let off_axis = harmonic(2, &[1.0, 2.0]);
    let x_off = off_axis.project_to_boundary(&Vector::from_vec(vec![0.6, 0.3]))?;
    let cases = [("1d", harmonic(1, &[]), e1(1)), ("2d", harmonic(2, &[]), e1(2)), ("2d_aniso", off_axis, x_off)];
    for (name, sys, x0) in &cases {
        let g = boundary_start(sys, x0, 0.3)?;
        let a = asymptotic_exponents(sys, &g)?;
        let fine = asymptotic_exponents(sys, &boundary_start_with(sys, x0, 0.3, 800)?)?;
        let ratio_change = if a.sigma_ratio == 0.0 && fine.sigma_ratio == 0.0 {
            0.0
        } else {
            (fine.sigma_ratio - a.sigma_ratio).abs() / a.sigma_ratio.max(fine.sigma_ratio)
        };
        pass &= (a.alpha_gap - 2.0 / 3.0).abs() <= 0.05
            && (a.alpha_speed + 1.0 / 3.0).abs() <= 0.05
            && a.sigma_ratio.is_finite()
            && ratio_change <= 0.10;
        detail.push(format!(
            "{name}: gap={:.4} speed={:.4} sigma={:.3} refine={:.1e}",
            a.alpha_gap, a.alpha_speed, a.sigma_ratio, ratio_change
        ));
    }
    outcome(pass, detail.join("; "))
}

fn centre_distance() -> Result<Outcome> {
    let sys = harmonic(1, &[]);
    let o = DistanceOptions::default();
    let q = Vector::zeros(1);
    let dv = distance(&sys, &q, Backend::Variational, &o)?.value;
    let ds = distance(&sys, &q, Backend::Shooting, &o)?.value;
    let t = PI / 8.0;
    outcome(
        (dv - t).abs() <= 1e-4 && (ds - t).abs() <= 1e-4 && (dv - ds).abs() <= 1e-4,
        format!("variational={dv:.8} shooting={ds:.8} oracle={t:.8}"),
    )
}

fn gradient() -> Result<Outcome> {
    let sys = harmonic(2, &[]);
    let o = DistanceOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst, mut used, mut skipped) = (0.0f64, 0, 0);
    while used < 20 {
        let r = rng.gen_range(0.1..0.9);
        let phi = rng.gen_range(0.0..2.0 * PI);
        let q = Vector::from_vec(vec![r * phi.cos(), r * phi.sin()]);
        let res = distance(&sys, &q, Backend::Shooting, &o)?;
        if !res.unique {
            skipped += 1;
            continue;
        }
        let formula = sys.metric_at(&q) * grad_dv(&sys, &res)?;
        let h = 1e-5;
        let mut fd = Vector::zeros(2);
        for i in 0..2 {
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp[i] += h;
            qm[i] -= h;
            fd[i] = (distance(&sys, &qp, Backend::Shooting, &o)?.value - distance(&sys, &qm, Backend::Shooting, &o)?.value) / (2.0 * h);
        }
        worst = worst.max((formula - &fd).norm() / fd.norm());
        used += 1;
    }
    outcome(worst <= 1e-3, format!("points={used} skipped_non_unique={skipped} worst_rel={worst:.2e}"))
}

fn null_field(cases: &[Case]) -> Result<Outcome> {
    let crossing = cases.iter().find(|c| c.name == "crossing1").unwrap();
    let d = null_field_diagnostics(crossing, 400)?;
    let pass = d.jacobi_residual <= 1e-5
        && !d.boundary_inconclusive
        && d.boundary_residual <= 1e-4
        && d.certificate <= 5e-3
        && d.certificate_refined < d.certificate;
    outcome(
        pass,
        format!(
            "jacobi_residual={:.3e} boundary={:.2e} certificate={:.3e} refined={:.3e}",
            d.jacobi_residual, d.boundary_residual, d.certificate, d.certificate_refined
        ),
    )
}

fn positivity(cases: &[Case], opts: &MorseOptions) -> Result<Outcome> {
    let mut pass = true;
    let mut detail = Vec::new();
    for c in cases {
        let p = morse::positivity_threshold(&c.sys, &c.gamma, c.a, opts)?;
        pass &= p.positive_below && p.s_hat > 0.0;
        detail.push(format!("{} s_hat={:.4}", c.name, p.s_hat));
    }
    outcome(pass, detail.join("; "))
}

fn report<'a>(reports: &'a [(String, MorseReport)], name: &str) -> &'a MorseReport {
    &reports.iter().find(|r| r.0 == name).unwrap().1
}

fn index_theorem(reports: &[(String, MorseReport)]) -> Result<Outcome> {
    let located = |rep: &MorseReport, want: &[(f64, usize)]| {
        rep.conjugate_points.len() == want.len()
            && rep.conjugate_points.iter().zip(want).all(|(c, (s, m))| (c.s - s).abs() <= 1e-3 && c.multiplicity == *m)
    };
    let r2 = report(reports, "isotropic2");
    let r3 = report(reports, "isotropic3");
    let ra = report(reports, "anisotropic2");
    let ok2 = r2.index == 1 && located(r2, &[(PI / 8.0, 1)]);
    let ok3 = r3.index == 2 && located(r3, &[(PI / 8.0, 2)]);
    let oka = ra.jumps_match_nullity && ra.index == ra.multiplicity_sum && ra.mit_consistent == Some(true);
    let pts = |r: &MorseReport| r.conjugate_points.iter().map(|c| format!("{:.5}x{}", c.s, c.multiplicity)).collect::<Vec<_>>().join(",");
    outcome(
        ok2 && ok3 && oka,
        format!(
            "iso2 index={} [{}]; iso3 index={} [{}]; aniso index={} sum={} [{}]",
            r2.index,
            pts(r2),
            r3.index,
            pts(r3),
            ra.index,
            ra.multiplicity_sum,
            pts(ra)
        ),
    )
}

fn monotone(reports: &[(String, MorseReport)]) -> Result<Outcome> {
    let bad: Vec<&str> = reports.iter().filter(|(_, r)| !(r.monotone && r.jumps_match_nullity)).map(|(n, _)| n.as_str()).collect();
    outcome(bad.is_empty(), format!("staircases={} failing={bad:?}", reports.len()))
}

fn backends(cases: &[Case], reports: &[(String, MorseReport)], opts: &MorseOptions) -> Result<Outcome> {
    let mut pass = true;
    let mut detail = Vec::new();
    for c in cases.iter().filter(|c| c.name != "crossing1") {
        let r = report(reports, c.name);
        let b = morse::broken_jacobi_index(&c.sys, &c.gamma, c.a, None, opts)?;
        pass &= (b.index, b.nullity) == (r.index, r.nullity);
        detail.push(format!("{} broken=({},{}) eigencount=({},{})", c.name, b.index, b.nullity, r.index, r.nullity));
    }
    outcome(pass, detail.join("; "))
}

fn determinism() -> Result<Outcome> {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_verify");
    let _ = std::fs::remove_dir_all(&root);
    let dirs = [root.join("a"), root.join("b")];
    for d in &dirs {
        let st = Command::new(env!("CARGO_BIN_EXE_brakeorbit"))
            .args(["verify", "--seed", "7", "--output"])
            .arg(d)
            .env_remove("BRAKEORBIT_SEED")
            .output()?;
        if !st.status.success() {
            return outcome(false, format!("verify exited {:?}: {}", st.status.code(), String::from_utf8_lossy(&st.stderr)));
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(&dirs[0])?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
    names.sort();
    let mut differ = Vec::new();
    for n in &names {
        if std::fs::read(dirs[0].join(n))? != std::fs::read(dirs[1].join(n)).unwrap_or_default() {
            differ.push(n.to_string_lossy().into_owned());
        }
    }
    let count_b = std::fs::read_dir(&dirs[1])?.count();
    outcome(differ.is_empty() && count_b == names.len() && !names.is_empty(), format!("files={} differing={differ:?}", names.len()))
}

fn main() {
    let start = Instant::now();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let cases = standard_cases().expect("acceptance geodesics");
    let opts = MorseOptions::default();
    let reports: Vec<(String, MorseReport)> = cases
        .iter()
        .map(|c| (c.name.to_string(), morse::mit_verify(&c.sys, &c.gamma, c.a, &opts).expect("mit_verify")))
        .collect();

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Result<Outcome> + '_>)> = vec![
        (1, "brake orbit half-period", Box::new(brake_orbit)),
        (2, "round trip and half-orbit length", Box::new(round_trip)),
        (3, "boundary asymptotics", Box::new(asymptotics)),
        (4, "distance at the centre", Box::new(centre_distance)),
        (5, "gradient formula", Box::new(gradient)),
        (6, "null Jacobi field", Box::new(|| null_field(&cases))),
        (7, "small-interval positivity", Box::new(|| positivity(&cases, &opts))),
        (8, "index theorem", Box::new(|| index_theorem(&reports))),
        (9, "staircase monotonicity", Box::new(|| monotone(&reports))),
        (10, "backend agreement", Box::new(|| backends(&cases, &reports, &opts))),
        (11, "determinism", Box::new(determinism)),
    ];

    let mut fatal = Vec::new();
    for (n, name, run) in &criteria {
        let t = Instant::now();
        let o = run().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        let blocked = KNOWN_BLOCKED.contains(n) && !o.pass;
        println!(
            "criterion {n:>2} {}: {name} ({:.1}s) {}{}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail,
            if blocked { " [known blocked, see decisions ledger]" } else { "" }
        );
        if !o.pass && (strict || !blocked) {
            fatal.push(*n);
        }
    }
    println!("acceptance finished in {:.1}s", start.elapsed().as_secs_f64());
    if !fatal.is_empty() {
        eprintln!("failing criteria: {fatal:?}");
        std::process::exit(1);
    }
}
