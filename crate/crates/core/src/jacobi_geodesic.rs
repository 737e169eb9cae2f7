//! Geodesics of ½(E − V)g in arc parameter, including those that start on
//! the wall V = E. Boundary starts are always lifted from the Newton flow.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{fmt_num, natural_rhs, NaturalTrajectory, TOL_V};
use crate::error::{Error, Result};
use crate::geometry::{PotentialSystem, Vector, TOL_PROJ};
use crate::numerics::roots::brent;
use crate::numerics::{Dopri5, Event};

/// Fraction of ε_reg below which arc-parameter integration hands off.
pub const HANDOFF_MARGIN: f64 = 1e-3;
pub const GRADED_FLOOR: f64 = 1e-8;
pub const DEFAULT_UNIFORM_CELLS: usize = 400;

/// Underlying dense solution used to evaluate the geodesic between nodes.
#[derive(Debug, Clone)]
pub enum Trace {
    /// Newton trajectory; geodesic arc s = traj.arc − s0 and time t = traj.t − t0.
    Time { traj: NaturalTrajectory, t0: f64, s0: f64 },
    /// Direct integration in s with state [x, dx/ds, t].
    Arc { s: Vec<f64>, y: Vec<Vec<f64>> },
}

/// Unit-speed (c = 1) or general c geodesic sampled on an increasing arc grid.
#[derive(Debug, Clone, Serialize)]
pub struct JacobiGeodesic {
    pub s: Vec<f64>,
    /// Time t(s) along the corresponding Newton trajectory.
    pub t: Vec<f64>,
    pub points: Vec<Vector>,
    /// Time velocity q̇ = γ̇ (E − V)/√c; zero at wall nodes.
    pub qdot: Vec<Vector>,
    /// E − V at the nodes, taken from ½g(q̇, q̇) to avoid cancellation at the wall.
    pub gaps: Vec<f64>,
    pub c: f64,
    pub boundary_start: bool,
    pub ends_on_boundary: bool,
    /// Set when the requested length exceeded what was available before rebrake.
    pub truncated: bool,
    /// max |½(E − V(γ))g(γ̇, γ̇) − c| / c over nodes away from the wall.
    pub conservation_residual: f64,
    #[serde(skip)]
    pub trace: Trace,
}

/// Geodesic quantities at one arc value.
#[derive(Debug, Clone)]
pub struct ArcState {
    pub s: f64,
    pub t: f64,
    pub q: Vector,
    pub qdot: Vector,
    pub gap: f64,
}

impl ArcState {
    /// γ̇ = q̇ √c / (E − V), undefined on the wall.
    pub fn velocity(&self, c: f64) -> Option<Vector> {
        if self.gap > 0.0 {
            Some(&self.qdot * (c.sqrt() / self.gap))
        } else {
            None
        }
    }
}

fn on_wall(sys: &PotentialSystem, q: &Vector, v: &Vector) -> bool {
    (sys.potential_value(q) - sys.energy).abs() <= TOL_PROJ.max(1e-9) && sys.norm(q, v) <= TOL_V.max(1e-6)
}

impl JacobiGeodesic {
    pub(crate) fn from_time_nodes(
        sys: &PotentialSystem,
        s: Vec<f64>,
        t: Vec<f64>,
        points: Vec<Vector>,
        qdot: Vec<Vector>,
        trace: Trace,
    ) -> Result<Self> {
        let m = s.len();
        let gaps: Vec<f64> = points.iter().zip(&qdot).map(|(q, v)| 0.5 * sys.inner(q, v, v)).collect();
        let boundary_start = on_wall(sys, &points[0], &qdot[0]);
        let ends_on_boundary = m > 1 && on_wall(sys, &points[m - 1], &qdot[m - 1]);
        let mut g = JacobiGeodesic {
            s,
            t,
            points,
            qdot,
            gaps,
            c: 1.0,
            boundary_start,
            ends_on_boundary,
            truncated: false,
            conservation_residual: 0.0,
            trace,
        };
        g.conservation_residual = g.conservation(sys);
        Ok(g)
    }

    fn conservation(&self, sys: &PotentialSystem) -> f64 {
        let margin = HANDOFF_MARGIN * sys.reg_band;
        let mut worst: f64 = 0.0;
        for i in 0..self.s.len() {
            if self.gaps[i] < margin {
                continue;
            }
            let gd = &self.qdot[i] * (self.c.sqrt() / self.gaps[i]);
            let cons = 0.5 * sys.gap(&self.points[i]) * sys.inner(&self.points[i], &gd, &gd);
            worst = worst.max((cons - self.c).abs() / self.c);
        }
        worst
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn arc_length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    pub fn end_point(&self) -> &Vector {
        self.points.last().unwrap()
    }

    /// γ̇ at node i; None on the wall.
    pub fn velocity(&self, i: usize) -> Option<Vector> {
        if self.gaps[i] > 0.0 && self.qdot[i].norm() > 0.0 {
            Some(&self.qdot[i] * (self.c.sqrt() / self.gaps[i]))
        } else {
            None
        }
    }

    pub fn state_at_arc(&self, sys: &PotentialSystem, s: f64) -> Result<ArcState> {
        match &self.trace {
            Trace::Time { traj, t0, s0 } => {
                let ta = traj.time_of_arc_value(sys, s + s0)?;
                let st = traj.state_at(sys, ta)?;
                let gap = st.kinetic_gap(sys);
                Ok(ArcState { s, t: ta - t0, q: st.q, qdot: st.v, gap })
            }
            Trace::Arc { s: ns, y } => {
                let n = sys.dim;
                let (a, b) = (ns[0], *ns.last().unwrap());
                if s < a - 1e-12 || s > b + 1e-12 * (1.0 + b.abs()) {
                    return Err(Error::Interpolation(format!("s = {s} outside [{a}, {b}]")));
                }
                let i = ns.partition_point(|&x| x <= s).saturating_sub(1);
                let rhs = arc_rhs(sys, self.c);
                let yy = Dopri5::advance(&rhs, ns[i], &y[i], s - ns[i]);
                let q = Vector::from_column_slice(&yy[..n]);
                let xd = Vector::from_column_slice(&yy[n..2 * n]);
                let gap = sys.gap(&q);
                Ok(ArcState { s, t: yy[2 * n], qdot: &xd * (gap / self.c.sqrt()), q, gap })
            }
        }
    }

    pub fn gap_at(&self, sys: &PotentialSystem, s: f64) -> Result<f64> {
        Ok(self.state_at_arc(sys, s)?.gap)
    }

    /// State at time t measured from the first node.
    pub fn state_at_time(&self, sys: &PotentialSystem, t: f64) -> Result<ArcState> {
        match &self.trace {
            Trace::Time { traj, t0, s0 } => {
                let st = traj.state_at(sys, t + t0)?;
                let gap = st.kinetic_gap(sys);
                Ok(ArcState { s: st.arc - s0, t, q: st.q, qdot: st.v, gap })
            }
            Trace::Arc { .. } => {
                let m = self.len();
                if t < self.t[0] - 1e-12 || t > self.t[m - 1] + 1e-12 {
                    return Err(Error::Interpolation(format!("t = {t} outside the geodesic")));
                }
                let k = self.t.partition_point(|&x| x < t).clamp(1, m - 1);
                let f = |s: f64| self.state_at_arc(sys, s).map(|a| a.t - t).unwrap_or(f64::NAN);
                let s = brent(f, self.s[k - 1], self.s[k], 1e-15, 200)
                    .ok_or_else(|| Error::Interpolation("time not bracketed".into()))?;
                self.state_at_arc(sys, s)
            }
        }
    }

    /// Total time span of the corresponding trajectory.
    pub fn duration(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn write_csv<W: Write>(&self, sys: &PotentialSystem, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = sys.dim;
        let mut header = vec!["s".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("dx{i}")));
        header.push("gap".into());
        header.push("conservation_residual".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![fmt_num(self.s[i])];
            rec.extend(self.points[i].iter().map(|x| fmt_num(*x)));
            match self.velocity(i) {
                Some(v) => {
                    rec.extend(v.iter().map(|x| fmt_num(*x)));
                    let r = 0.5 * sys.gap(&self.points[i]) * sys.inner(&self.points[i], &v, &v) - self.c;
                    rec.push(fmt_num(self.gaps[i]));
                    rec.push(fmt_num(r.abs()));
                }
                None => {
                    rec.extend((0..n).map(|_| "nan".to_string()));
                    rec.push(fmt_num(self.gaps[i]));
                    rec.push("nan".into());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// d²x/ds² = −Γ(ẋ, ẋ) + [dV(ẋ) ẋ − ½g(ẋ, ẋ)∇V]/(E − V), dt/ds = √c/(E − V).
fn arc_rhs(sys: &PotentialSystem, c: f64) -> impl Fn(f64, &[f64], &mut [f64]) + Sync + '_ {
    let n = sys.dim;
    let sc = c.sqrt();
    move |_s: f64, y: &[f64], dy: &mut [f64]| {
        let x = Vector::from_column_slice(&y[..n]);
        let xd = Vector::from_column_slice(&y[n..2 * n]);
        let w = sys.gap(&x);
        let dv = sys.differential(&x);
        let gv = sys.grad(&x);
        let mut acc = (&xd * dv.dot(&xd) - gv * (0.5 * sys.inner(&x, &xd, &xd))) / w;
        if !sys.metric.is_flat() {
            acc -= sys.christoffel_unchecked(&x).contract(&xd, &xd);
        }
        dy[..n].copy_from_slice(xd.as_slice());
        dy[n..2 * n].copy_from_slice(acc.as_slice());
        dy[2 * n] = sc / w;
    }
}

/// Integrate the geodesic equation directly in arc parameter from an interior point.
pub fn integrate_interior(sys: &PotentialSystem, q0: &Vector, v0: &Vector, s_span: f64) -> Result<JacobiGeodesic> {
    integrate_interior_on(sys, q0, v0, s_span, &[])
}

pub fn integrate_interior_on(
    sys: &PotentialSystem,
    q0: &Vector,
    v0: &Vector,
    s_span: f64,
    stops: &[f64],
) -> Result<JacobiGeodesic> {
    sys.check_domain(q0)?;
    let margin = HANDOFF_MARGIN * sys.reg_band;
    let w0 = sys.gap(q0);
    if w0 <= margin {
        return Err(Error::Handoff { s: 0.0 });
    }
    if !(s_span > 0.0) {
        return Err(Error::Config("arc span must be positive".into()));
    }
    let c = 0.5 * w0 * sys.inner(q0, v0, v0);
    if !(c > 0.0) {
        return Err(Error::Degenerate("zero initial velocity".into()));
    }
    let n = sys.dim;
    let rhs = arc_rhs(sys, c);
    let mut y0 = Vec::with_capacity(2 * n + 1);
    y0.extend_from_slice(q0.as_slice());
    y0.extend_from_slice(v0.as_slice());
    y0.push(0.0);
    let check = |s: f64, y: &[f64]| {
        let x = Vector::from_column_slice(&y[..n]);
        if !sys.in_box(&x) {
            return Err(Error::Escape { t: s });
        }
        if sys.gap(&x) <= margin {
            return Err(Error::Handoff { s });
        }
        Ok(())
    };
    let sol = Dopri5::default().integrate(&rhs, 0.0, &y0, s_span, stops, &[], &check)?;
    let points: Vec<Vector> = sol.y.iter().map(|r| Vector::from_column_slice(&r[..n])).collect();
    let gaps: Vec<f64> = points.iter().map(|x| sys.gap(x)).collect();
    let qdot: Vec<Vector> =
        sol.y.iter().zip(&gaps).map(|(r, w)| Vector::from_column_slice(&r[n..2 * n]) * (w / c.sqrt())).collect();
    let t: Vec<f64> = sol.y.iter().map(|r| r[2 * n]).collect();
    let mut g = JacobiGeodesic {
        s: sol.t.clone(),
        t,
        points,
        qdot,
        gaps,
        c,
        boundary_start: false,
        ends_on_boundary: false,
        truncated: false,
        conservation_residual: 0.0,
        trace: Trace::Arc { s: sol.t, y: sol.y },
    };
    g.conservation_residual = g.conservation(sys);
    Ok(g)
}

/// Arc grid on [0, a]: uniform cells merged with a geometric sequence
/// (ratio ½) toward each wall end, down to GRADED_FLOOR·a.
pub fn graded_arc_grid(a: f64, uniform: usize, grade_end: bool) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=uniform).map(|j| a * j as f64 / uniform as f64).collect();
    let mut h = a / uniform as f64;
    while h > GRADED_FLOOR * a {
        h *= 0.5;
        g.push(h);
        if grade_end {
            g.push(a - h);
        }
    }
    g.sort_by(|x, y| x.partial_cmp(y).unwrap());
    g.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * a);
    g
}

/// Unit-speed geodesic of length `a` leaving the wall at x0, obtained by
/// lifting the Newton trajectory that starts at rest at x0.
pub fn boundary_start(sys: &PotentialSystem, x0: &Vector, a: f64) -> Result<JacobiGeodesic> {
    boundary_start_with(sys, x0, a, DEFAULT_UNIFORM_CELLS)
}

pub fn boundary_start_with(sys: &PotentialSystem, x0: &Vector, a: f64, uniform: usize) -> Result<JacobiGeodesic> {
    sys.check_domain(x0)?;
    let r0 = (sys.potential_value(x0) - sys.energy).abs();
    if r0 > TOL_PROJ {
        return Err(Error::Domain(format!("start point is not on V = E (|V − E| = {r0:.3e})")));
    }
    if !(a >= 0.0) {
        return Err(Error::Config("arc length must be non-negative".into()));
    }
    let n = sys.dim;
    if a == 0.0 {
        let traj = NaturalTrajectory {
            dim: n,
            times: vec![0.0],
            q: vec![x0.clone()],
            v: vec![Vector::zeros(n)],
            arc: vec![0.0],
            energy_residual: r0,
            tol: Dopri5::default().tol(),
        };
        let mut g = JacobiGeodesic::from_time_nodes(
            sys,
            vec![0.0],
            vec![0.0],
            vec![x0.clone()],
            vec![Vector::zeros(n)],
            Trace::Time { traj, t0: 0.0, s0: 0.0 },
        )?;
        g.boundary_start = true;
        return Ok(g);
    }
    let rhs = natural_rhs(sys);
    let dvv = |y: &[f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        (q, v)
    };
    let g_brake = |_t: f64, y: &[f64]| {
        let (q, v) = dvv(y);
        -sys.differential(&q).dot(&v)
    };
    let kin_floor = 1e-8 * (1.0 + sys.energy.abs());
    let accept_brake = |_t: f64, y: &[f64]| {
        let (q, v) = dvv(y);
        0.5 * sys.inner(&q, &v, &v) <= kin_floor
    };
    let g_arc = |_t: f64, y: &[f64]| y[2 * n] - a;
    let yes = |_t: f64, _y: &[f64]| true;
    let brake = Event { g: &g_brake, rising: true, t_min: crate::dynamics::T_MIN, accept: &accept_brake };
    let reach = Event { g: &g_arc, rising: true, t_min: 0.0, accept: &yes };
    let check = |t: f64, y: &[f64]| {
        let (q, _) = dvv(y);
        if sys.in_box(&q) {
            Ok(())
        } else {
            Err(Error::Escape { t })
        }
    };
    let mut y0 = Vec::with_capacity(2 * n + 1);
    y0.extend_from_slice(x0.as_slice());
    y0.extend(std::iter::repeat(0.0).take(n));
    y0.push(0.0);
    let sol = Dopri5::default().integrate(&rhs, 0.0, &y0, crate::dynamics::T_MAX, &[], &[&brake, &reach], &check)?;
    let rebraked = sol.event_index == Some(0);
    if !sol.event_hit {
        return Err(Error::NoBrake { t_max: crate::dynamics::T_MAX });
    }
    let last = sol.y.last().unwrap().clone();
    let avail = last[2 * n];
    let (a_eff, truncated) = if rebraked && a > avail * (1.0 + 1e-12) { (avail, true) } else { (a.min(avail), false) };
    let mut traj_t = sol.t.clone();
    let mut traj_y = sol.y.clone();
    if !rebraked {
        // pin the final arc value exactly
        let k = traj_y.len() - 1;
        traj_y[k][2 * n] = a_eff;
        traj_t[k] = *sol.t.last().unwrap();
    }
    let traj = NaturalTrajectory {
        dim: n,
        energy_residual: traj_y
            .iter()
            .map(|r| {
                let (q, v) = dvv(r);
                (sys.energy_of(&q, &v) - sys.energy).abs()
            })
            .fold(0.0, f64::max),
        q: traj_y.iter().map(|r| dvv(r).0).collect(),
        v: traj_y.iter().map(|r| dvv(r).1).collect(),
        arc: traj_y.iter().map(|r| r[2 * n]).collect(),
        times: traj_t,
        tol: Dopri5::default().tol(),
    };
    let grid = graded_arc_grid(a_eff, uniform, rebraked);
    let m = grid.len();
    let mut ts = Vec::with_capacity(m);
    let mut qs = Vec::with_capacity(m);
    let mut vs = Vec::with_capacity(m);
    for (i, &s) in grid.iter().enumerate() {
        if i == 0 {
            ts.push(0.0);
            qs.push(x0.clone());
            vs.push(Vector::zeros(n));
            continue;
        }
        if i == m - 1 {
            ts.push(traj.t_end());
            qs.push(traj.q.last().unwrap().clone());
            vs.push(if rebraked { Vector::zeros(n) } else { traj.v.last().unwrap().clone() });
            continue;
        }
        let t = traj.time_of_arc_value(sys, s)?;
        let st = traj.state_at(sys, t)?;
        ts.push(t);
        qs.push(st.q);
        vs.push(st.v);
    }
    let mut g = JacobiGeodesic::from_time_nodes(sys, grid, ts, qs, vs, Trace::Time { traj, t0: 0.0, s0: 0.0 })?;
    g.boundary_start = true;
    g.ends_on_boundary = rebraked;
    g.truncated = truncated;
    Ok(g)
}

/// Log-log slopes of E − V and ‖γ̇‖ against s near the wall, and
/// sup ‖Σ(s)‖/s^{1/3} with Σ = γ̇/‖γ̇‖ + ∇V/‖∇V‖.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Asymptotics {
    pub alpha_gap: f64,
    pub alpha_speed: f64,
    pub sigma_ratio: f64,
    pub nodes: usize,
    pub s_fit: f64,
}

pub fn asymptotic_exponents(sys: &PotentialSystem, gamma: &JacobiGeodesic) -> Result<Asymptotics> {
    if !gamma.boundary_start {
        return Err(Error::InvalidGeodesic("asymptotics need a boundary-starting geodesic".into()));
    }
    let s_fit = (gamma.arc_length() / 4.0).min(0.1);
    let mut xs = vec![];
    let mut yg = vec![];
    let mut ysp = vec![];
    let mut ratio: f64 = 0.0;
    for i in 1..gamma.len() {
        let s = gamma.s[i];
        if s > s_fit {
            break;
        }
        let q = &gamma.points[i];
        let Some(gd) = gamma.velocity(i) else { continue };
        let gap = sys.gap(q);
        if !(gap > 0.0) {
            continue;
        }
        let sp = sys.norm(q, &gd);
        let gv = sys.grad(q);
        let sigma = &gd / sp + &gv / sys.norm(q, &gv);
        ratio = ratio.max(sys.norm(q, &sigma) / s.cbrt());
        xs.push(s.ln());
        yg.push(gap.ln());
        ysp.push(sp.ln());
    }
    if xs.len() < 20 {
        return Err(Error::Sampling(format!("{} nodes in (0, {s_fit}], need 20", xs.len())));
    }
    Ok(Asymptotics {
        alpha_gap: slope(&xs, &yg),
        alpha_speed: slope(&xs, &ysp),
        sigma_ratio: ratio,
        nodes: xs.len(),
        s_fit,
    })
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn h(n: usize) -> PotentialSystem {
        PotentialSystem::builtin("harmonic", n, 0.5, &[]).unwrap()
    }

    #[test]
    fn quarter_arc_reaches_centre() {
        let s = h(1);
        let g = boundary_start(&s, &Vector::from_vec(vec![1.0]), PI / 8.0).unwrap();
        assert!(g.end_point()[0].abs() < 1e-8, "{}", g.end_point()[0]);
        assert!((g.duration() - PI / 2.0).abs() < 1e-8);
        assert!(g.conservation_residual < 1e-6);
        let s2 = h(2);
        let g2 = boundary_start(&s2, &Vector::from_vec(vec![1.0, 0.0]), PI / 8.0).unwrap();
        assert!(g2.end_point().norm() < 1e-8);
    }

    #[test]
    fn zero_length_is_a_point() {
        let s = h(1);
        let g = boundary_start(&s, &Vector::from_vec(vec![1.0]), 0.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.points[0][0], 1.0);
    }

    #[test]
    fn overlong_request_is_truncated() {
        let s = h(1);
        let g = boundary_start(&s, &Vector::from_vec(vec![1.0]), 1.0).unwrap();
        assert!(g.truncated);
        assert!(g.ends_on_boundary);
        assert!((g.arc_length() - PI / 4.0).abs() < 1e-9);
    }

    #[test]
    fn exponents_for_harmonic_start() {
        let s = h(1);
        let g = boundary_start(&s, &Vector::from_vec(vec![1.0]), PI / 4.0).unwrap();
        let a = asymptotic_exponents(&s, &g).unwrap();
        assert!((0.62..=0.72).contains(&a.alpha_gap), "{a:?}");
        assert!((-0.38..=-0.28).contains(&a.alpha_speed), "{a:?}");
        assert!(a.sigma_ratio < 1e-12);
    }

    #[test]
    fn interior_integration_matches_lift() {
        let s = h(1);
        // centre of the crossing geodesic, moving toward −1 at unit g*-speed
        let v0 = Vector::from_vec(vec![-2.0]);
        let gi = integrate_interior(&s, &Vector::zeros(1), &v0, 0.3).unwrap();
        let gb = boundary_start(&s, &Vector::from_vec(vec![1.0]), PI / 4.0).unwrap();
        for (sv, x) in gi.s.iter().zip(&gi.points) {
            let st = gb.state_at_arc(&s, PI / 8.0 + sv).unwrap();
            assert!((st.q[0] - x[0]).abs() < 1e-6, "s={sv}: {} vs {}", st.q[0], x[0]);
        }
        assert!(gi.conservation_residual < 1e-8);
        // reversed velocity traces the mirror image
        let gr = integrate_interior(&s, &Vector::zeros(1), &(-v0), 0.3).unwrap();
        let p = gr.state_at_arc(&s, 0.2).unwrap().q[0];
        let m = gi.state_at_arc(&s, 0.2).unwrap().q[0];
        assert!((p + m).abs() < 1e-9);
    }

    #[test]
    fn straight_line_where_gap_is_constant() {
        // V ≡ 0 on a 2D box: geodesics are Euclidean straight lines
        let p = crate::geometry::Polynomial { dim: 2, terms: vec![(0.0, vec![0, 0])] };
        let s = PotentialSystem::new(std::sync::Arc::new(p), 1.0, vec![[-5.0, 5.0]; 2]).unwrap();
        let g = integrate_interior(&s, &Vector::from_vec(vec![0.0, 0.0]), &Vector::from_vec(vec![1.0, 2.0]), 1.0).unwrap();
        for x in &g.points {
            assert!((x[1] - 2.0 * x[0]).abs() < 1e-12);
        }
        // t = s/κ scaled by √c with κ = E − V = 1
        let c = g.c;
        assert!((g.duration() - c.sqrt() * g.arc_length()).abs() < 1e-12);
    }

    #[test]
    fn handoff_near_wall() {
        let s = h(1);
        let r = integrate_interior(&s, &Vector::zeros(1), &Vector::from_vec(vec![2.0]), 0.5);
        assert!(matches!(r, Err(Error::Handoff { .. })));
    }
}
