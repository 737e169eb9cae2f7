//! Newton flow D/dt q̇ = −∇V(q), brake orbits, and the Maupertuis change of
//! parameter between time t and the arc length s of ½(E − V)g.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{PotentialSystem, Vector, TOL_PROJ};
use crate::jacobi_geodesic::{JacobiGeodesic, Trace};
use crate::numerics::quad::Rule;
use crate::numerics::roots::brent;
use crate::numerics::{Dopri5, Event};

pub const TOL_V: f64 = 1e-7;
pub const TOL_E: f64 = 1e-8;
pub const TOL_RT: f64 = 1e-6;
pub const T_MIN: f64 = 1e-3;
pub const T_MAX: f64 = 100.0;
const GRADED_LEVELS: usize = 24;

/// State layout: [q (N), q̇ (N), s], with ṡ = ½g(q̇, q̇) the unit-speed arc rate.
pub(crate) fn natural_rhs(sys: &PotentialSystem) -> impl Fn(f64, &[f64], &mut [f64]) + Sync + '_ {
    let n = sys.dim;
    move |_t: f64, y: &[f64], dy: &mut [f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        let gv = sys.grad(&q);
        let acc = if sys.metric.is_flat() {
            -gv
        } else {
            -sys.christoffel_unchecked(&q).contract(&v, &v) - gv
        };
        dy[..n].copy_from_slice(v.as_slice());
        dy[n..2 * n].copy_from_slice(acc.as_slice());
        dy[2 * n] = 0.5 * sys.inner(&q, &v, &v);
    }
}

fn pack(q: &Vector, v: &Vector, s: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(2 * q.len() + 1);
    y.extend_from_slice(q.as_slice());
    y.extend_from_slice(v.as_slice());
    y.push(s);
    y
}

/// Time-parameterized solution sampled at accepted integrator nodes.
#[derive(Debug, Clone, Serialize)]
pub struct NaturalTrajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    pub q: Vec<Vector>,
    pub v: Vec<Vector>,
    /// Arc length of ½(E − V)g accumulated from the first node.
    pub arc: Vec<f64>,
    pub energy_residual: f64,
    /// Integrator (rtol, atol) used to produce the nodes.
    pub tol: (f64, f64),
}

/// Evaluated state of a trajectory at an arbitrary time.
#[derive(Debug, Clone)]
pub struct TimeState {
    pub t: f64,
    pub q: Vector,
    pub v: Vector,
    pub arc: f64,
}

impl TimeState {
    /// E − V from the kinetic energy, free of cancellation near the wall.
    pub fn kinetic_gap(&self, sys: &PotentialSystem) -> f64 {
        0.5 * sys.inner(&self.q, &self.v, &self.v)
    }
}

impl NaturalTrajectory {
    fn from_solution(sys: &PotentialSystem, t: Vec<f64>, y: Vec<Vec<f64>>, tol: (f64, f64)) -> Self {
        let n = sys.dim;
        let q: Vec<Vector> = y.iter().map(|r| Vector::from_column_slice(&r[..n])).collect();
        let v: Vec<Vector> = y.iter().map(|r| Vector::from_column_slice(&r[n..2 * n])).collect();
        let arc: Vec<f64> = y.iter().map(|r| r[2 * n]).collect();
        let energy_residual =
            q.iter().zip(&v).map(|(q, v)| (sys.energy_of(q, v) - sys.energy).abs()).fold(0.0, f64::max);
        NaturalTrajectory { dim: n, times: t, q, v, arc, energy_residual, tol }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn node(&self, i: usize) -> Vec<f64> {
        pack(&self.q[i], &self.v[i], self.arc[i])
    }

    /// Dense evaluation: one Runge–Kutta step from the closest node at or before `t`.
    pub fn state_at(&self, sys: &PotentialSystem, t: f64) -> Result<TimeState> {
        let (t0, t1) = (self.t_start(), self.t_end());
        let (lo, hi) = (t0.min(t1), t0.max(t1));
        let slack = 1e-12 * (1.0 + hi.abs());
        if t < lo - slack || t > hi + slack {
            return Err(Error::Interpolation(format!("t = {t} outside [{lo}, {hi}]")));
        }
        let forward = t1 >= t0;
        let i = if forward {
            self.times.partition_point(|&x| x <= t).saturating_sub(1)
        } else {
            self.times.partition_point(|&x| x >= t).saturating_sub(1)
        };
        let h = t - self.times[i];
        let n = self.dim;
        let rhs = natural_rhs(sys);
        let y = if h == 0.0 { self.node(i) } else { Dopri5::advance(&rhs, self.times[i], &self.node(i), h) };
        Ok(TimeState {
            t,
            q: Vector::from_column_slice(&y[..n]),
            v: Vector::from_column_slice(&y[n..2 * n]),
            arc: y[2 * n],
        })
    }

    /// Time at which the accumulated arc equals `s` (arc is increasing in |t|).
    pub fn time_of_arc_value(&self, sys: &PotentialSystem, s: f64) -> Result<f64> {
        let (a0, a1) = (self.arc[0], *self.arc.last().unwrap());
        if s < a0 - 1e-14 || s > a1 + 1e-12 * (1.0 + a1.abs()) {
            return Err(Error::Interpolation(format!("arc {s} outside [{a0}, {a1}]")));
        }
        let s = s.clamp(a0, a1);
        let k = self.arc.partition_point(|&x| x < s);
        if k == 0 {
            return Ok(self.times[0]);
        }
        if self.arc[k.min(self.len() - 1)] == s {
            return Ok(self.times[k]);
        }
        let (ta, tb) = (self.times[k - 1], self.times[k]);
        let f = |t: f64| self.state_at(sys, t).map(|st| st.arc - s).unwrap_or(f64::NAN);
        brent(f, ta, tb, 1e-15 * (1.0 + tb.abs()), 200)
            .ok_or_else(|| Error::Interpolation(format!("arc {s} not bracketed")))
    }

    pub fn write_csv<W: Write>(&self, sys: &PotentialSystem, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.dim;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("q{i}")));
        header.extend((1..=n).map(|i| format!("v{i}")));
        header.push("energy_residual".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![fmt_num(self.times[i])];
            rec.extend(self.q[i].iter().map(|x| fmt_num(*x)));
            rec.extend(self.v[i].iter().map(|x| fmt_num(*x)));
            rec.push(fmt_num((sys.energy_of(&self.q[i], &self.v[i]) - sys.energy).abs()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_num(x: f64) -> String {
    format!("{x:.17e}")
}

/// Integrate the Newton system from (q0, v0) over [0, t_end]. With
/// `energy_locked`, the initial data must lie on the energy level E.
pub fn integrate_natural(
    sys: &PotentialSystem,
    q0: &Vector,
    v0: &Vector,
    t_end: f64,
    energy_locked: bool,
) -> Result<NaturalTrajectory> {
    integrate_natural_with(sys, q0, v0, t_end, energy_locked, &Dopri5::default(), &[])
}

pub fn integrate_natural_with(
    sys: &PotentialSystem,
    q0: &Vector,
    v0: &Vector,
    t_end: f64,
    energy_locked: bool,
    solver: &Dopri5,
    stops: &[f64],
) -> Result<NaturalTrajectory> {
    sys.check_domain(q0)?;
    if energy_locked && (sys.energy_of(q0, v0) - sys.energy).abs() > TOL_E {
        return Err(Error::Domain(format!(
            "initial energy {} differs from E = {}",
            sys.energy_of(q0, v0),
            sys.energy
        )));
    }
    let rhs = natural_rhs(sys);
    let n = sys.dim;
    let check = |t: f64, y: &[f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        if sys.in_box(&q) && y.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Escape { t })
        }
    };
    let sol = solver.integrate(&rhs, 0.0, &pack(q0, v0, 0.0), t_end, stops, &[], &check)?;
    Ok(NaturalTrajectory::from_solution(sys, sol.t, sol.y, (solver.rtol, solver.atol)))
}

/// A half brake orbit: q̇(0) = q̇(T) = 0 with both ends on V = E.
#[derive(Debug, Clone, Serialize)]
pub struct BrakeOrbit {
    pub trajectory: NaturalTrajectory,
    pub half_period: f64,
    pub start: Vector,
    pub end: Vector,
    /// ‖q̇(T)‖_g at the located rebrake.
    pub end_speed: f64,
    /// max(|V(q(0)) − E|, |V(q(T)) − E|).
    pub boundary_residual: f64,
}

impl BrakeOrbit {
    /// Unit-speed g*-length of the half orbit.
    pub fn arc_length(&self) -> f64 {
        *self.trajectory.arc.last().unwrap()
    }

    /// True when the stored invariants hold at the default tolerances.
    pub fn invariants_hold(&self) -> bool {
        self.end_speed <= TOL_V && self.boundary_residual <= TOL_PROJ && (&self.start - &self.end).norm() > 0.0
    }
}

pub fn shoot_brake_orbit(sys: &PotentialSystem, x0: &Vector) -> Result<BrakeOrbit> {
    shoot_brake_orbit_with(sys, x0, &Dopri5::default(), T_MAX, &[])
}

/// Shoot from (x0, 0) and stop at the first zero of the speed after `T_MIN`.
/// The event is the − → + sign change of d/dt ½g(q̇, q̇) = −dV(q̇), accepted
/// only where the kinetic energy has essentially vanished.
pub fn shoot_brake_orbit_with(
    sys: &PotentialSystem,
    x0: &Vector,
    solver: &Dopri5,
    t_max: f64,
    stops: &[f64],
) -> Result<BrakeOrbit> {
    sys.check_domain(x0)?;
    let r0 = (sys.potential_value(x0) - sys.energy).abs();
    if r0 > TOL_PROJ {
        return Err(Error::Domain(format!("start point is not on V = E (|V − E| = {r0:.3e})")));
    }
    let n = sys.dim;
    if sys.norm(x0, &sys.grad(x0)) == 0.0 {
        return Err(Error::Degenerate("start point is a critical point of V".into()));
    }
    let rhs = natural_rhs(sys);
    let g = |_t: f64, y: &[f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        -sys.differential(&q).dot(&v)
    };
    let kin_floor = 1e-8 * (1.0 + sys.energy.abs());
    let accept = |_t: f64, y: &[f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        0.5 * sys.inner(&q, &v, &v) <= kin_floor
    };
    let ev = Event { g: &g, rising: true, t_min: T_MIN, accept: &accept };
    let check = |t: f64, y: &[f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        if sys.in_box(&q) {
            Ok(())
        } else {
            Err(Error::Escape { t })
        }
    };
    let sol = solver.integrate(&rhs, 0.0, &pack(x0, &Vector::zeros(n), 0.0), t_max, stops, &[&ev], &check)?;
    if !sol.event_hit {
        return Err(Error::NoBrake { t_max });
    }
    let traj = NaturalTrajectory::from_solution(sys, sol.t, sol.y, (solver.rtol, solver.atol));
    let end = traj.q.last().unwrap().clone();
    let end_speed = sys.norm(&end, traj.v.last().unwrap());
    let boundary_residual = r0.max((sys.potential_value(&end) - sys.energy).abs());
    Ok(BrakeOrbit { half_period: traj.t_end(), start: x0.clone(), end, end_speed, boundary_residual, trajectory: traj })
}

/// Samples of r(t) = ‖∇V/‖∇V‖ + q̇/‖q̇‖‖ / t on (0, T/2].
#[derive(Debug, Clone, Serialize)]
pub struct OrthProfile {
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub sup: f64,
    /// Times skipped because ‖q̇‖ was below the noise floor.
    pub skipped: Vec<f64>,
}

pub fn orthcond_profile(sys: &PotentialSystem, orbit: &BrakeOrbit) -> Result<OrthProfile> {
    let x0 = &orbit.start;
    if (sys.potential_value(x0) - sys.energy).abs() > TOL_PROJ || orbit.trajectory.v[0].norm() > TOL_V {
        return Err(Error::Domain("profile needs an orbit starting at rest on the boundary".into()));
    }
    let t_probe = 0.5 * orbit.half_period;
    let mut ts: Vec<f64> = (0..40).map(|k| t_probe * 0.5f64.powi(k)).collect();
    ts.extend((1..200).map(|k| t_probe * k as f64 / 200.0));
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let gv0 = sys.grad(x0);
    let mut out = OrthProfile { t: vec![], r: vec![], sup: 0.0, skipped: vec![] };
    for t in ts {
        let (q, v) = if t < T_MIN {
            // q̇(t) = −t∇V(q(0)) + O(t³), q(t) = q(0) − ½t²∇V(q(0)) + O(t⁴)
            (x0 - &gv0 * (0.5 * t * t), -&gv0 * t)
        } else {
            let st = orbit.trajectory.state_at(sys, t)?;
            (st.q, st.v)
        };
        let vn = sys.norm(&q, &v);
        if vn < 1e-13 {
            out.skipped.push(t);
            continue;
        }
        let gv = sys.grad(&q);
        let sigma = &gv / sys.norm(&q, &gv) + &v / vn;
        let r = sys.norm(&q, &sigma) / t;
        out.sup = out.sup.max(r);
        out.t.push(t);
        out.r.push(r);
    }
    Ok(out)
}

/// Monotone map between arc length s and time t, sampled on the geodesic grid.
#[derive(Debug, Clone, Serialize)]
pub struct ReparamMap {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    /// dt/ds at the nodes; infinite at boundary nodes.
    pub rate: Vec<f64>,
    pub c: f64,
}

impl ReparamMap {
    fn cell_of(&self, xs: &[f64], x: f64) -> Result<usize> {
        let (a, b) = (xs[0], *xs.last().unwrap());
        let slack = 1e-12 * (1.0 + b.abs());
        if x < a - slack || x > b + slack {
            return Err(Error::Interpolation(format!("{x} outside [{a}, {b}]")));
        }
        Ok(xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1)
    }

    fn eval_cell(&self, i: usize, s: f64) -> f64 {
        let (s0, s1, t0, t1) = (self.s[i], self.s[i + 1], self.t[i], self.t[i + 1]);
        let (r0, r1) = (self.rate[i], self.rate[i + 1]);
        let h = s1 - s0;
        if !r0.is_finite() && !r1.is_finite() {
            return t0 + (t1 - t0) * (s - s0) / h;
        }
        if !r0.is_finite() {
            // t − t0 ∝ (s − s0)^{1/3} next to a wall
            return t0 + (t1 - t0) * ((s - s0) / h).max(0.0).cbrt();
        }
        if !r1.is_finite() {
            return t1 - (t1 - t0) * ((s1 - s) / h).max(0.0).cbrt();
        }
        let x = (s - s0) / h;
        let (h00, h10, h01, h11) =
            (2.0 * x * x * x - 3.0 * x * x + 1.0, x * x * x - 2.0 * x * x + x, -2.0 * x * x * x + 3.0 * x * x, x * x * x - x * x);
        h00 * t0 + h10 * h * r0 + h01 * t1 + h11 * h * r1
    }

    pub fn t_of(&self, s: f64) -> Result<f64> {
        let i = self.cell_of(&self.s, s)?;
        Ok(self.eval_cell(i, s))
    }

    /// Inverse map σ(t).
    pub fn s_of(&self, t: f64) -> Result<f64> {
        let i = self.cell_of(&self.t, t)?;
        if t == self.t[i] {
            return Ok(self.s[i]);
        }
        let f = |s: f64| self.eval_cell(i, s) - t;
        brent(f, self.s[i], self.s[i + 1], 1e-15 * (1.0 + self.s[i + 1].abs()), 200)
            .ok_or_else(|| Error::Interpolation(format!("t = {t} not bracketed")))
    }
}

/// ∫ √c / (E − V(γ(σ))) dσ over [a, b], with a graded mesh toward whichever
/// end sits on the boundary.
fn reciprocal_gap_integral(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    a: f64,
    b: f64,
    wall_a: bool,
    wall_b: bool,
    rule: &Rule,
) -> Result<f64> {
    let gap = |s: f64| gamma.gap_at(sys, s);
    if !wall_a && !wall_b {
        return interior_reciprocal_gap(&gap, a, b, gap(a)?, gap(b)?, rule, 0);
    }
    if wall_a && wall_b {
        let m = 0.5 * (a + b);
        return Ok(reciprocal_gap_integral(sys, gamma, a, m, true, false, rule)?
            + reciprocal_gap_integral(sys, gamma, m, b, false, true, rule)?);
    }
    // distance u from the wall end; levels [L 2^{-l-1}, L 2^{-l}] with σ = u³ inside each
    let len = b - a;
    let at = |u: f64| if wall_a { a + u } else { b - u };
    let mut acc = 0.0;
    let mut hi = len;
    for _ in 0..GRADED_LEVELS {
        let lo = 0.5 * hi;
        let (ra, rb) = (lo.cbrt(), hi.cbrt());
        for (r, w) in rule.points(ra, rb) {
            acc += w * 3.0 * r * r / gap(at(r * r * r))?;
        }
        hi = lo;
    }
    // remaining [0, ε] with E − V ≈ A σ^{2/3}
    let eps = hi;
    let amp = gap(at(eps))? / eps.powf(2.0 / 3.0);
    if !(amp > 0.0) || !amp.is_finite() {
        return Err(Error::Quadrature(format!("no wall asymptotics near s = {}", at(0.0))));
    }
    acc += 3.0 * eps.cbrt() / amp;
    Ok(acc)
}

/// Gauss quadrature of 1/(E − V), bisecting while the gap at the ends and
/// midpoint varies by more than a factor 2 (grazing passes dip mid-cell).
fn interior_reciprocal_gap(
    gap: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    b: f64,
    ga: f64,
    gb: f64,
    rule: &Rule,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let gm = gap(m)?;
    let (lo, hi) = (ga.min(gb).min(gm), ga.max(gb).max(gm));
    if depth < 60 && hi > 2.0 * lo {
        return Ok(interior_reciprocal_gap(gap, a, m, ga, gm, rule, depth + 1)?
            + interior_reciprocal_gap(gap, m, b, gm, gb, rule, depth + 1)?);
    }
    let mut acc = 0.0;
    for (x, w) in rule.points(a, b) {
        acc += w / gap(x)?;
    }
    Ok(acc)
}

/// t(s) = ∫ √c / (E − V(γ)) ds on the geodesic grid.
pub fn time_of_arc(sys: &PotentialSystem, gamma: &JacobiGeodesic, c: f64) -> Result<ReparamMap> {
    if !(c > 0.0) {
        return Err(Error::Config("conservation constant must be positive".into()));
    }
    let m = gamma.s.len();
    let tol_touch = 1e-12 * (1.0 + sys.energy.abs());
    for i in 1..m.saturating_sub(1) {
        if gamma.gaps[i] <= tol_touch {
            return Err(Error::InvalidGeodesic(format!("touches the boundary at interior s = {}", gamma.s[i])));
        }
    }
    let rule = Rule::new(8);
    let wall = |i: usize| gamma.gaps[i] <= tol_touch;
    let mut t = vec![0.0; m];
    for i in 0..m - 1 {
        let piece = reciprocal_gap_integral(sys, gamma, gamma.s[i], gamma.s[i + 1], wall(i), wall(i + 1), &rule)?;
        t[i + 1] = t[i] + c.sqrt() * piece;
    }
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::Quadrature("time map is not finite".into()));
    }
    let rate = (0..m).map(|i| if wall(i) { f64::INFINITY } else { c.sqrt() / gamma.gaps[i] }).collect();
    Ok(ReparamMap { s: gamma.s.clone(), t, rate, c })
}

/// Time parameterization of a geodesic; times come from `time_of_arc`.
pub fn orbit_from_geodesic(sys: &PotentialSystem, gamma: &JacobiGeodesic) -> Result<NaturalTrajectory> {
    if gamma.s.len() < 2 || gamma.points.windows(2).all(|p| (&p[1] - &p[0]).norm() == 0.0) {
        return Err(Error::Degenerate("geodesic is a single point".into()));
    }
    let map = time_of_arc(sys, gamma, gamma.c)?;
    let sc = gamma.c.sqrt();
    let q = gamma.points.clone();
    let v: Vec<Vector> = gamma.qdot.clone();
    let arc = gamma.s.iter().map(|s| sc * s).collect();
    let energy_residual =
        q.iter().zip(&v).map(|(q, v)| (sys.energy_of(q, v) - sys.energy).abs()).fold(0.0, f64::max);
    Ok(NaturalTrajectory { dim: sys.dim, times: map.t, q, v, arc, energy_residual, tol: Dopri5::default().tol() })
}

/// Unit-speed geodesic through the nodes of a trajectory on the energy level.
pub fn geodesic_from_orbit(sys: &PotentialSystem, orbit: &NaturalTrajectory) -> Result<JacobiGeodesic> {
    if orbit.len() < 2 || orbit.v.iter().all(|v| v.norm() == 0.0) {
        return Err(Error::Degenerate("trajectory is constant".into()));
    }
    let s0 = orbit.arc[0];
    let t0 = orbit.times[0];
    let s: Vec<f64> = orbit.arc.iter().map(|a| a - s0).collect();
    if s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Degenerate("arc length is not strictly increasing".into()));
    }
    let t: Vec<f64> = orbit.times.iter().map(|x| x - t0).collect();
    JacobiGeodesic::from_time_nodes(sys, s, t, orbit.q.clone(), orbit.v.clone(), Trace::Time { traj: orbit.clone(), t0, s0 })
}

impl Dopri5 {
    pub(crate) fn tol(&self) -> (f64, f64) {
        (self.rtol, self.atol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn h1() -> PotentialSystem {
        PotentialSystem::builtin("harmonic", 1, 0.5, &[]).unwrap()
    }

    #[test]
    fn harmonic_cosine_over_half_period() {
        let s = h1();
        let tr = integrate_natural(&s, &Vector::from_vec(vec![1.0]), &Vector::zeros(1), PI, true).unwrap();
        for (t, q) in tr.times.iter().zip(&tr.q) {
            assert!((q[0] - t.cos()).abs() < 1e-8);
        }
        assert!(tr.energy_residual < 1e-10);
        let mid = tr.state_at(&s, 1.2345).unwrap();
        assert!((mid.q[0] - 1.2345f64.cos()).abs() < 1e-9);
        assert!((mid.arc - (2.0 * 1.2345 - (2.0 * 1.2345f64).sin()) / 8.0).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_stays_put() {
        let s = PotentialSystem::builtin("harmonic", 2, 0.5, &[]).unwrap();
        let tr = integrate_natural(&s, &Vector::zeros(2), &Vector::zeros(2), 5.0, false).unwrap();
        assert!(tr.q.iter().all(|q| q.norm() == 0.0));
    }

    #[test]
    fn energy_lock_rejects_off_level_data() {
        let s = h1();
        let r = integrate_natural(&s, &Vector::from_vec(vec![0.5]), &Vector::zeros(1), 1.0, true);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn escape_is_reported() {
        let s = h1();
        let r = integrate_natural(&s, &Vector::from_vec(vec![0.0]), &Vector::from_vec(vec![10.0]), 5.0, false);
        assert!(matches!(r, Err(Error::Escape { .. })));
    }

    #[test]
    fn radial_brake_orbit_in_2d() {
        let s = PotentialSystem::builtin("harmonic", 2, 0.5, &[]).unwrap();
        let b = shoot_brake_orbit(&s, &Vector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((b.half_period - PI).abs() < 1e-8);
        assert!((b.end[0] + 1.0).abs() < 1e-8 && b.end[1].abs() < 1e-12);
        assert!(b.invariants_hold(), "{:?}", (b.end_speed, b.boundary_residual));
    }

    #[test]
    fn double_well_rebrakes_at_inner_turning_point() {
        let s = PotentialSystem::builtin("double-well", 1, 0.5, &[]).unwrap();
        // (q² − 1)² = ½ at q² = 1 ± 1/√2
        let outer = (1.0 + 0.5f64.sqrt()).sqrt();
        let inner = (1.0 - 0.5f64.sqrt()).sqrt();
        let b = shoot_brake_orbit(&s, &Vector::from_vec(vec![outer])).unwrap();
        assert!((b.end[0] - inner).abs() < 1e-7, "{}", b.end[0]);
        // period oracle: T = ∫ dq / sqrt(2(E − V)) with q = m + r sin φ removing the endpoint singularities
        let (m, r) = (0.5 * (outer + inner), 0.5 * (outer - inner));
        let rule = Rule::new(8);
        let mut t_oracle = 0.0;
        let n = 200;
        for k in 0..n {
            let (a, b2) = (-PI / 2.0 + PI * k as f64 / n as f64, -PI / 2.0 + PI * (k + 1) as f64 / n as f64);
            t_oracle += rule.integrate(a, b2, |phi| {
                let q: f64 = m + r * phi.sin();
                let w = 0.5 - (q * q - 1.0).powi(2);
                r * phi.cos() / (2.0 * w).sqrt()
            });
        }
        assert!((b.half_period - t_oracle).abs() < 1e-6, "{} vs {}", b.half_period, t_oracle);
    }

    #[test]
    fn orthogonality_profile_vanishes_for_collinear_motion() {
        let s = h1();
        let b = shoot_brake_orbit(&s, &Vector::from_vec(vec![1.0])).unwrap();
        let p = orthcond_profile(&s, &b).unwrap();
        assert!(p.sup < 1e-12);
        let s2 = PotentialSystem::builtin("harmonic", 2, 0.5, &[]).unwrap();
        let b2 = shoot_brake_orbit(&s2, &Vector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!(orthcond_profile(&s2, &b2).unwrap().sup < 1e-12);
    }

    #[test]
    fn reversibility() {
        let s = PotentialSystem::builtin("anisotropic", 2, 0.5, &[]).unwrap();
        let q0 = Vector::from_vec(vec![0.3, -0.1]);
        let v0 = Vector::from_vec(vec![0.2, 0.5]);
        let fw = integrate_natural(&s, &q0, &v0, 2.0, false).unwrap();
        let (q1, v1) = (fw.q.last().unwrap().clone(), fw.v.last().unwrap().clone());
        let bw = integrate_natural(&s, &q1, &(-v1), 2.0, false).unwrap();
        assert!((bw.q.last().unwrap() - &q0).norm() < 1e-7);
        assert!((bw.v.last().unwrap() + &v0).norm() < 1e-7);
    }
}
