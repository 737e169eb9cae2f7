//! Distance d_V from the wall V = E in the metric ½(E − V)g, its gradient
//! and fields of it over grids.
//!
//! Two backends: shooting brake orbits from the wall onto Q, and direct
//! minimization of the discrete energy ∫ ½(E − V)g(ẋ, ẋ) over curves from
//! the wall to Q. Several boundary seeds are tried; two distinct curves with
//! nearly equal values flag the minimizer as non-unique.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{fmt_num, integrate_natural, shoot_brake_orbit, NaturalTrajectory};
use crate::error::{Error, Result};
use crate::geometry::{Matrix, PotentialSystem, Vector, TOL_PROJ};
use crate::jacobi_geodesic::{boundary_start, JacobiGeodesic};
use crate::numerics::{Rule, SymBand};

pub const TOL_OPT: f64 = 1e-8;
pub const TOL_HIT: f64 = 1e-10;
pub const TOL_UNIQUE: f64 = 1e-3;
pub const SEP_UNIQUE: f64 = 1e-2;
pub const N_START: usize = 8;
pub const DEFAULT_NODES: usize = 256;
const CURVE_SAMPLES: usize = 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Variational,
    Shooting,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variational" => Ok(Backend::Variational),
            "shooting" => Ok(Backend::Shooting),
            o => Err(Error::Config(format!("unknown backend '{o}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceOptions {
    pub n_start: usize,
    pub seed: u64,
    /// Cells of the curve discretization (variational backend).
    pub nodes: usize,
    pub tol_opt: f64,
    pub tol_hit: f64,
    pub tol_unique: f64,
    pub sep_unique: f64,
    pub max_iter: usize,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            n_start: N_START,
            seed: 0,
            nodes: DEFAULT_NODES,
            tol_opt: TOL_OPT,
            tol_hit: TOL_HIT,
            tol_unique: TOL_UNIQUE,
            sep_unique: SEP_UNIQUE,
            max_iter: 200,
        }
    }
}

/// Curve from the wall to Q sampled on u ∈ [0, 1] with τ = u³; node 0 lies on
/// V = E and the last node is Q.
#[derive(Debug, Clone, Serialize)]
pub struct DiscretizedCurve {
    pub u: Vec<f64>,
    pub points: Vec<Vector>,
    /// ∫₀¹ ½(E − V)g(ẋ, ẋ) dτ.
    pub energy: f64,
    /// ∫₀¹ √(½(E − V)g(ẋ, ẋ)) dτ.
    pub length: f64,
}

impl DiscretizedCurve {
    /// Position at parameter τ ∈ [0, 1].
    pub fn at(&self, tau: f64) -> Vector {
        let u = tau.clamp(0.0, 1.0).cbrt();
        let m = self.u.len() - 1;
        let h = 1.0 / m as f64;
        let j = ((u / h) as usize).min(m - 1);
        let (sh, _) = shape(j, u, h);
        &self.points[j] * sh[0] + &self.points[j + 1] * sh[1]
    }
}

/// A converged candidate from one seed.
#[derive(Debug, Clone)]
struct Candidate {
    value: f64,
    start: Vector,
    /// dx/dτ at Q for the [0, 1] constant-speed parameterization.
    end_velocity: Vector,
    energy: f64,
    length: f64,
    samples: Vec<Vector>,
    curve: Option<DiscretizedCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceResult {
    pub q: Vector,
    pub value: f64,
    pub backend: Backend,
    pub start: Vector,
    /// γ̇_Q(1) for the minimizer parameterized on [0, 1].
    pub end_velocity: Vector,
    /// Minimized energy; equals value² for an exact minimizer.
    pub energy: f64,
    /// g*-length of the returned curve.
    pub length: f64,
    /// Relative value gap to the best distinct competitor (∞ if none was found).
    pub spread: f64,
    pub unique: bool,
    pub candidates: usize,
    pub seeds_failed: usize,
    #[serde(skip)]
    pub minimizer: Option<JacobiGeodesic>,
    #[serde(skip)]
    pub curve: Option<DiscretizedCurve>,
}

impl DistanceResult {
    /// ψ_V = d_V².
    pub fn psi(&self) -> f64 {
        self.value * self.value
    }
}

pub fn distance(sys: &PotentialSystem, q: &Vector, backend: Backend, opts: &DistanceOptions) -> Result<DistanceResult> {
    match backend {
        Backend::Variational => minimize_variational(sys, q, None, opts),
        Backend::Shooting => minimize_shooting(sys, q, opts),
    }
}

fn precheck(sys: &PotentialSystem, q: &Vector) -> Result<Option<DistanceResult>> {
    if q.len() != sys.dim {
        return Err(Error::Config(format!("point has dimension {}, expected {}", q.len(), sys.dim)));
    }
    sys.check_domain(q)?;
    let r = sys.potential_value(q) - sys.energy;
    if r.abs() <= TOL_PROJ {
        return Ok(Some(DistanceResult {
            q: q.clone(),
            value: 0.0,
            backend: Backend::Variational,
            start: q.clone(),
            end_velocity: Vector::zeros(sys.dim),
            energy: 0.0,
            length: 0.0,
            spread: f64::INFINITY,
            unique: true,
            candidates: 1,
            seeds_failed: 0,
            minimizer: boundary_start(sys, q, 0.0).ok(),
            curve: None,
        }));
    }
    if r > 0.0 {
        return Err(Error::Domain(format!("V(Q) − E = {r:.3e} > 0: point outside the well")));
    }
    Ok(None)
}

/// Boundary points reached along rays from Q: ±∇V(Q), the coordinate axes,
/// then random directions in antipodal pairs.
fn boundary_seeds(sys: &PotentialSystem, q: &Vector, opts: &DistanceOptions) -> Vec<Vector> {
    let n = sys.dim;
    let mut dirs: Vec<Vector> = vec![];
    if n == 1 {
        dirs.push(Vector::from_element(1, 1.0));
        dirs.push(Vector::from_element(1, -1.0));
    } else {
        let gv = sys.grad(q);
        if gv.norm() > 1e-12 {
            dirs.push(gv.normalize());
            dirs.push(-gv.normalize());
        }
        for i in 0..n {
            if dirs.len() + 2 > opts.n_start {
                break;
            }
            let e = Vector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
            dirs.push(e.clone());
            dirs.push(-e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        while dirs.len() < opts.n_start.max(2) {
            let d = loop {
                let v = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let l = v.norm();
                if l > 1e-3 && l <= 1.0 {
                    break v / l;
                }
            };
            dirs.push(d.clone());
            if dirs.len() < opts.n_start {
                dirs.push(-d);
            }
        }
    }
    dirs.iter().filter_map(|d| sys.ray_to_boundary(q, d)).collect()
}

fn select(
    sys: &PotentialSystem,
    q: &Vector,
    backend: Backend,
    mut cands: Vec<Candidate>,
    failed: usize,
    opts: &DistanceOptions,
) -> Result<DistanceResult> {
    if cands.is_empty() {
        return Err(match backend {
            Backend::Shooting => Error::Miss { miss: f64::INFINITY },
            Backend::Variational => Error::Stall { iterations: opts.max_iter, grad_norm: f64::INFINITY },
        });
    }
    cands.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap());
    let best = cands[0].clone();
    let sep = |a: &Candidate, b: &Candidate| a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    let mut distinct: Vec<&Candidate> = vec![&cands[0]];
    for c in &cands[1..] {
        if distinct.iter().all(|d| sep(d, c) >= opts.sep_unique) {
            distinct.push(c);
        }
    }
    let spread = if distinct.len() > 1 {
        (distinct[1].value - best.value) / best.value.max(f64::MIN_POSITIVE)
    } else {
        f64::INFINITY
    };
    let minimizer = boundary_start(sys, &best.start, best.value).ok();
    Ok(DistanceResult {
        q: q.clone(),
        value: best.value,
        backend,
        start: best.start,
        end_velocity: best.end_velocity,
        energy: best.energy,
        length: best.length,
        spread,
        unique: spread > opts.tol_unique,
        candidates: distinct.len(),
        seeds_failed: failed,
        minimizer,
        curve: best.curve,
    })
}

// ---------------------------------------------------------------- shooting

struct Shot {
    q: Vector,
    v: Vector,
    traj: NaturalTrajectory,
}

fn shoot(sys: &PotentialSystem, x0: &Vector, t: f64) -> Result<Shot> {
    let traj = integrate_natural(sys, x0, &Vector::zeros(sys.dim), t, false)?;
    Ok(Shot { q: traj.q.last().unwrap().clone(), v: traj.v.last().unwrap().clone(), traj })
}

fn shoot_candidate(sys: &PotentialSystem, q: &Vector, seed: &Vector, opts: &DistanceOptions) -> Result<Candidate> {
    let n = sys.dim;
    // closest approach along the orbit from the seed
    let horizon = match shoot_brake_orbit(sys, seed) {
        Ok(o) => o.half_period,
        Err(Error::NoBrake { .. }) | Err(Error::Escape { .. }) => 10.0,
        Err(e) => return Err(e),
    };
    let scan = integrate_natural(sys, seed, &Vector::zeros(n), horizon, false).or_else(|_| {
        integrate_natural(sys, seed, &Vector::zeros(n), horizon * 0.5, false)
    })?;
    let t_end = scan.t_end();
    // first local minimum of the distance to Q along the orbit
    let mut t = t_end;
    let mut prev = f64::INFINITY;
    for k in 1..=400 {
        let tk = t_end * k as f64 / 400.0;
        let d = (&scan.state_at(sys, tk)?.q - q).norm();
        if d > prev {
            t = t_end * (k - 1) as f64 / 400.0;
            break;
        }
        prev = d;
    }
    let mut x0 = seed.clone();
    let mut cur = shoot(sys, &x0, t)?;
    let mut res = (&cur.q - q).norm();
    let tol = opts.tol_hit * (1.0 + q.norm());
    let mut it = 0;
    while res > tol {
        it += 1;
        if it > 60 {
            return Err(Error::Miss { miss: res });
        }
        let b = if n > 1 { sys.tangent_basis(&x0) } else { Matrix::zeros(1, 0) };
        let mut jac = DMatrix::zeros(n, n);
        let delta = 1e-7 * (1.0 + x0.norm());
        for k in 0..n - 1 {
            let xp = sys.project_to_boundary(&(&x0 + b.column(k) * delta))?;
            let sp = shoot(sys, &xp, t)?;
            jac.set_column(k, &((&sp.q - &cur.q) / delta));
        }
        jac.set_column(n - 1, &cur.v);
        let rhs = -(&cur.q - q);
        let step = jac.lu().solve(&rhs).ok_or(Error::Miss { miss: res })?;
        let mut alpha = 1.0;
        // keep the flight time positive
        let dt = step[n - 1];
        if t + dt < 0.2 * t {
            alpha = (0.8 * t / dt.abs()).min(1.0);
        }
        let mut accepted = false;
        for _ in 0..30 {
            let th = step.rows(0, n - 1) * alpha;
            let x_try = if n > 1 { sys.project_to_boundary(&(&x0 + &b * th)) } else { Ok(x0.clone()) };
            let t_try = t + alpha * dt;
            if let Ok(x_try) = x_try {
                if let Ok(s) = shoot(sys, &x_try, t_try) {
                    let r = (&s.q - q).norm();
                    if r < res * (1.0 - 1e-4 * alpha) || r <= tol {
                        x0 = x_try;
                        t = t_try;
                        cur = s;
                        res = r;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::Miss { miss: res });
        }
    }
    let value = *cur.traj.arc.last().unwrap();
    let w = 0.5 * sys.inner(&cur.q, &cur.v, &cur.v);
    let mut samples = Vec::with_capacity(CURVE_SAMPLES);
    for k in 0..CURVE_SAMPLES {
        let s = value * k as f64 / (CURVE_SAMPLES - 1) as f64;
        let tk = cur.traj.time_of_arc_value(sys, s)?;
        samples.push(cur.traj.state_at(sys, tk)?.q);
    }
    Ok(Candidate {
        value,
        start: x0,
        end_velocity: &cur.v * (value / w),
        energy: value * value,
        length: value,
        samples,
        curve: None,
    })
}

/// Newton on (boundary chart, flight time) so that the brake orbit from the
/// boundary point passes through Q; the g*-length up to Q is the candidate value.
pub fn minimize_shooting(sys: &PotentialSystem, q: &Vector, opts: &DistanceOptions) -> Result<DistanceResult> {
    if let Some(r) = precheck(sys, q)? {
        return Ok(DistanceResult { backend: Backend::Shooting, ..r });
    }
    let seeds = boundary_seeds(sys, q, opts);
    let mut cands = vec![];
    let mut failed = 0;
    let mut worst_miss = f64::INFINITY;
    for s in &seeds {
        match shoot_candidate(sys, q, s, opts) {
            Ok(c) => cands.push(c),
            Err(Error::Miss { miss }) => {
                worst_miss = worst_miss.min(miss);
                failed += 1
            }
            Err(_) => failed += 1,
        }
    }
    if cands.is_empty() {
        return Err(Error::Miss { miss: worst_miss });
    }
    select(sys, q, Backend::Shooting, cands, failed, opts)
}

// ------------------------------------------------------------- variational

/// Shape values and u-derivatives of the two nodes of cell j at u. The first
/// cell is quadratic in u so that x − x₀ ∝ u² there.
fn shape(j: usize, u: f64, h: f64) -> ([f64; 2], [f64; 2]) {
    if j == 0 {
        let r = u / h;
        ([1.0 - r * r, r * r], [-2.0 * r / h, 2.0 * r / h])
    } else {
        let r = (u - j as f64 * h) / h;
        ([1.0 - r, r], [-1.0 / h, 1.0 / h])
    }
}

struct Density {
    phi: f64,
    phi_x: Vector,
    phi_p: Vector,
}

fn metric_quad_dx(sys: &PotentialSystem, x: &Vector, p: &Vector) -> Vector {
    let n = sys.dim;
    let h = 1e-6 * (1.0 + x.norm());
    Vector::from_fn(n, |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        (sys.inner(&a, p, p) - sys.inner(&b, p, p)) / (2.0 * h)
    })
}

/// φ(x, p) = ½(E − V(x)) g(x)(p, p) and its first partials.
fn density(sys: &PotentialSystem, x: &Vector, p: &Vector) -> Density {
    let w = sys.gap(x);
    let gp = sys.metric_at(x) * p;
    let pp = gp.dot(p);
    let mut phi_x = -sys.differential(x) * (0.5 * pp);
    if !sys.metric.is_flat() {
        phi_x += metric_quad_dx(sys, x, p) * (0.5 * w);
    }
    Density { phi: 0.5 * w * pp, phi_x, phi_p: gp * w }
}

/// Second partials of φ as [[φ_xx, φ_xp], [φ_px, φ_pp]] (2N × 2N).
fn density_hessian(sys: &PotentialSystem, x: &Vector, p: &Vector) -> Matrix {
    let n = sys.dim;
    let mut hm = Matrix::zeros(2 * n, 2 * n);
    if sys.metric.is_flat() {
        let w = sys.gap(x);
        let dv = sys.differential(x);
        let hv = sys.potential.second_partials(x);
        let pp = p.dot(p);
        hm.view_mut((0, 0), (n, n)).copy_from(&(hv * (-0.5 * pp)));
        let xp = -&dv * p.transpose();
        hm.view_mut((0, n), (n, n)).copy_from(&xp);
        hm.view_mut((n, 0), (n, n)).copy_from(&xp.transpose());
        hm.view_mut((n, n), (n, n)).copy_from(&(Matrix::identity(n, n) * w));
    } else {
        let h = 1e-5 * (1.0 + x.norm());
        for k in 0..n {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            let da = density(sys, &a, p);
            let db = density(sys, &b, p);
            let cx = (da.phi_x - db.phi_x) / (2.0 * h);
            let cp = (da.phi_p - db.phi_p) / (2.0 * h);
            for i in 0..n {
                hm[(i, k)] = cx[i];
                hm[(n + i, k)] = cp[i];
            }
        }
        for i in 0..n {
            for k in 0..i {
                let s = 0.5 * (hm[(i, k)] + hm[(k, i)]);
                hm[(i, k)] = s;
                hm[(k, i)] = s;
            }
            for k in 0..n {
                hm[(i, n + k)] = hm[(n + k, i)];
            }
        }
        let g = sys.metric_at(x) * sys.gap(x);
        hm.view_mut((n, n), (n, n)).copy_from(&g);
    }
    hm
}

struct Energy {
    value: f64,
    length: f64,
    /// ∂F/∂x_j for every node, including node 0 and Q.
    grad: Vec<Vector>,
}

/// F = Σ_cells ∫ φ(x, x_u) / (3u²) du, with Gauss–Legendre per cell.
/// Returns None if the curve leaves the well at a quadrature point.
fn curve_energy(sys: &PotentialSystem, pts: &[Vector], rule: &Rule, with_grad: bool) -> Option<Energy> {
    let m = pts.len() - 1;
    let h = 1.0 / m as f64;
    let n = sys.dim;
    let mut value = 0.0;
    let mut length = 0.0;
    let mut grad = if with_grad { vec![Vector::zeros(n); m + 1] } else { vec![] };
    for j in 0..m {
        for (u, wq) in rule.points(j as f64 * h, (j + 1) as f64 * h) {
            let (sh, dsh) = shape(j, u, h);
            let x = &pts[j] * sh[0] + &pts[j + 1] * sh[1];
            let p = &pts[j] * dsh[0] + &pts[j + 1] * dsh[1];
            if !(sys.gap(&x) > 0.0) || !sys.in_box(&x) {
                return None;
            }
            let rho = wq / (3.0 * u * u);
            let d = density(sys, &x, &p);
            value += d.phi * rho;
            length += (d.phi.max(0.0)).sqrt() * wq;
            if with_grad {
                for a in 0..2 {
                    grad[j + a] += (&d.phi_x * sh[a] + &d.phi_p * dsh[a]) * rho;
                }
            }
        }
    }
    Some(Energy { value, length, grad })
}

/// Foot point of x on V = E along the straight line through x in the
/// direction of dV(x): x₀ = x − λ dV(x) with V(x₀) = E.
fn foot(sys: &PotentialSystem, x: &Vector) -> Result<(Vector, f64)> {
    let nv = sys.differential(x);
    let mut lam = 0.0;
    for _ in 0..60 {
        let x0 = x - &nv * lam;
        if !sys.in_box(&x0) {
            break;
        }
        let phi = sys.potential_value(&x0) - sys.energy;
        let dphi = -sys.differential(&x0).dot(&nv);
        if !(dphi.abs() > 0.0) {
            break;
        }
        let step = phi / dphi;
        lam -= step;
        if step.abs() <= 1e-16 * (1.0 + lam.abs()) || phi == 0.0 {
            return Ok((x - &nv * lam, lam));
        }
    }
    let x0 = x - &nv * lam;
    let r = (sys.potential_value(&x0) - sys.energy).abs();
    if sys.in_box(&x0) && r <= 1e-13 * (1.0 + sys.energy.abs()) {
        Ok((x0, lam))
    } else {
        Err(Error::Projection { iterations: 60, residual: r })
    }
}

/// ∂x₀/∂x for the foot point map.
fn foot_jacobian(sys: &PotentialSystem, x: &Vector, x0: &Vector, lam: f64) -> Matrix {
    let n = sys.dim;
    let nv = sys.differential(x);
    let dn = sys.potential.second_partials(x);
    let dv0 = sys.differential(x0);
    let phi_l = -dv0.dot(&nv);
    let base = Matrix::identity(n, n) - &dn * lam;
    let phi_x = base.transpose() * &dv0;
    let grad_l = -phi_x / phi_l;
    base - &nv * grad_l.transpose()
}

/// Banded Hessian in the unknowns [x_1, …, x_{m−1}], with the boundary node
/// x₀ = foot(x_1).
fn assemble_hessian(sys: &PotentialSystem, pts: &[Vector], g0: &Vector, rule: &Rule) -> Result<SymBand> {
    let m = pts.len() - 1;
    let h = 1.0 / m as f64;
    let n = sys.dim;
    let size = (m - 1) * n;
    let mut hb = SymBand::zeros(size, 2 * n - 1);
    let mut c0 = Matrix::zeros(2 * n, 2 * n);
    let off = |j: usize| (j - 1) * n;
    for j in 0..m {
        let mut blk = Matrix::zeros(2 * n, 2 * n);
        for (u, wq) in rule.points(j as f64 * h, (j + 1) as f64 * h) {
            let (sh, dsh) = shape(j, u, h);
            let x = &pts[j] * sh[0] + &pts[j + 1] * sh[1];
            let p = &pts[j] * dsh[0] + &pts[j + 1] * dsh[1];
            let rho = wq / (3.0 * u * u);
            let dh = density_hessian(sys, &x, &p);
            let hxx = dh.view((0, 0), (n, n));
            let hxp = dh.view((0, n), (n, n));
            let hpx = dh.view((n, 0), (n, n));
            let hpp = dh.view((n, n), (n, n));
            for a in 0..2 {
                for b in 0..2 {
                    let loc = (hxx * (sh[a] * sh[b]) + hxp * (sh[a] * dsh[b]) + hpx * (dsh[a] * sh[b]) + hpp * (dsh[a] * dsh[b])) * rho;
                    let mut v = blk.view_mut((a * n, b * n), (n, n));
                    v += loc;
                }
            }
        }
        if j == 0 {
            c0 = blk;
            continue;
        }
        for a in 0..2 {
            for b in 0..2 {
                let (ja, jb) = (j + a, j + b);
                if ja == m || jb == m {
                    continue;
                }
                let loc = blk.view((a * n, b * n), (n, n));
                let (oa, ob) = (off(ja), off(jb));
                for r in 0..n {
                    for c in 0..n {
                        if oa + r >= ob + c {
                            hb.add(oa + r, ob + c, loc[(r, c)]);
                        }
                    }
                }
            }
        }
    }
    if m > 1 {
        // first cell through the chain rule, including the curvature of the foot map
        let x1 = &pts[1];
        let (x0, lam) = foot(sys, x1)?;
        let jac = foot_jacobian(sys, x1, &x0, lam);
        let h00 = c0.view((0, 0), (n, n));
        let h01 = c0.view((0, n), (n, n));
        let h11 = c0.view((n, n), (n, n));
        let mut red = jac.transpose() * h00 * &jac + jac.transpose() * h01 + h01.transpose() * &jac + h11;
        let step = 1e-6 * (1.0 + x1.norm());
        for k in 0..n {
            let mut a = x1.clone();
            let mut b = x1.clone();
            a[k] += step;
            b[k] -= step;
            let (fa, la) = foot(sys, &a)?;
            let (fb, lb) = foot(sys, &b)?;
            let col = (foot_jacobian(sys, &a, &fa, la).transpose() * g0 - foot_jacobian(sys, &b, &fb, lb).transpose() * g0)
                / (2.0 * step);
            for r in 0..n {
                red[(r, k)] += 0.5 * col[r];
                red[(k, r)] += 0.5 * col[r];
            }
        }
        for r in 0..n {
            for c in 0..=r {
                hb.add(r, c, red[(r, c)]);
            }
        }
    }
    Ok(hb)
}

fn reduced_gradient(sys: &PotentialSystem, pts: &[Vector], grad: &[Vector]) -> Result<Vec<f64>> {
    let m = grad.len() - 1;
    let (x0, lam) = foot(sys, &pts[1])?;
    let jac = foot_jacobian(sys, &pts[1], &x0, lam);
    let mut g: Vec<f64> = Vec::with_capacity((m - 1) * sys.dim);
    g.extend((&grad[1] + jac.transpose() * &grad[0]).iter());
    for gj in &grad[2..m] {
        g.extend(gj.iter());
    }
    Ok(g)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Newton iteration with Levenberg damping and backtracking on the discrete
/// energy. The boundary node is the foot point of the first interior node and
/// is recomputed after every step.
fn optimize_curve(sys: &PotentialSystem, mut pts: Vec<Vector>, opts: &DistanceOptions) -> Result<(Vec<Vector>, Energy)> {
    let n = sys.dim;
    let m = pts.len() - 1;
    if m < 2 {
        return Err(Error::Config("curve needs at least two cells".into()));
    }
    let rule = Rule::new(8);
    pts[0] = foot(sys, &pts[1])?.0;
    let mut en = curve_energy(sys, &pts, &rule, true)
        .ok_or_else(|| Error::InvalidGeodesic("initial curve leaves the well".into()))?;
    let mut mu = 0.0;
    let mut gnorm = f64::INFINITY;
    let mut history = vec![en.value];
    for it in 0..opts.max_iter {
        let g = reduced_gradient(sys, &pts, &en.grad)?;
        gnorm = sup_norm(&g);
        if gnorm <= opts.tol_opt {
            for p in &pts[1..m] {
                if sys.gap(p) <= 1e-14 {
                    return Err(Error::InvalidGeodesic("interior node on the wall".into()));
                }
            }
            return Ok((pts, en));
        }
        let hb = assemble_hessian(sys, &pts, &en.grad[0], &rule)?;
        let scale = hb.max_abs().max(1e-300);
        let mut dir = None;
        for _ in 0..40 {
            let mut hm = hb.clone();
            if mu > 0.0 {
                for i in 0..hm.dim() {
                    hm.add(i, i, mu * scale);
                }
            }
            let inertia = hm.ldlt(1e-13).2;
            if inertia.negative == 0 && inertia.zero == 0 {
                if let Some(d) = hm.solve(&g.iter().map(|x| -x).collect::<Vec<_>>()) {
                    dir = Some(d);
                    break;
                }
            }
            mu = if mu == 0.0 { 1e-10 } else { mu * 10.0 };
        }
        let Some(dir) = dir else {
            return Err(Error::Stall { iterations: it, grad_norm: gnorm });
        };
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = pts.clone();
            for j in 1..m {
                for c in 0..n {
                    trial[j][c] += alpha * dir[(j - 1) * n + c];
                }
            }
            if let Ok((x0, _)) = foot(sys, &trial[1]) {
                trial[0] = x0;
                if let Some(e) = curve_energy(sys, &trial, &rule, true) {
                    let tolf = 1e-14 * en.value.abs().max(1e-300);
                    if e.value <= en.value + 1e-4 * alpha * slope + tolf {
                        pts = trial;
                        en = e;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::Stall { iterations: it, grad_norm: gnorm });
        }
        history.push(en.value);
        if history.len() > STALL_WINDOW {
            let old = history[history.len() - 1 - STALL_WINDOW];
            if old - en.value <= 1e-13 * en.value.abs() {
                return Err(Error::Stall { iterations: it, grad_norm: gnorm });
            }
        }
        mu = if alpha == 1.0 { mu * 0.1 } else { mu.max(1e-10) * 10.0 };
        if mu < 1e-14 {
            mu = 0.0;
        }
    }
    Err(Error::Stall { iterations: opts.max_iter, grad_norm: gnorm })
}

/// Straight segment from x0 to Q with x − x0 ∝ u² ∝ τ^{2/3}.
pub fn initial_curve(x0: &Vector, q: &Vector, cells: usize) -> Vec<Vector> {
    (0..=cells)
        .map(|j| {
            let u = j as f64 / cells as f64;
            x0 + (q - x0) * (u * u)
        })
        .collect()
}

/// Resample nodes of a curve onto a uniform u-grid with `cells` cells.
fn prolong(pts: &[Vector], cells: usize) -> Vec<Vector> {
    let m = pts.len() - 1;
    let h = 1.0 / m as f64;
    (0..=cells)
        .map(|k| {
            let u = k as f64 / cells as f64;
            let j = ((u / h) as usize).min(m - 1);
            let (sh, _) = shape(j, u, h);
            &pts[j] * sh[0] + &pts[j + 1] * sh[1]
        })
        .collect()
}

const COARSEST: usize = 16;
/// Iterations without energy decrease before a seed is declared stalled.
const STALL_WINDOW: usize = 12;

/// Coarse-to-fine: the boundary node can only slide a distance of order the
/// first cell on a fine mesh, so it is positioned on coarse meshes first.
fn variational_candidate(sys: &PotentialSystem, q: &Vector, init: Vec<Vector>, opts: &DistanceOptions) -> Result<Candidate> {
    let m = init.len() - 1;
    let mut levels = vec![m];
    while levels.last().unwrap() / 2 >= COARSEST && levels.last().unwrap() % 2 == 0 {
        levels.push(levels.last().unwrap() / 2);
    }
    levels.reverse();
    let mut pts = prolong(&init, levels[0]);
    for &lv in &levels[..levels.len() - 1] {
        pts = prolong(&optimize_curve(sys, prolong(&pts, lv), opts)?.0, lv);
    }
    let (pts, en) = optimize_curve(sys, prolong(&pts, m), opts)?;
    let h = 1.0 / m as f64;
    let value = en.value.sqrt();
    // dx/dτ = x_u / (3u²) at u = 1
    let end_velocity = (&pts[m] - &pts[m - 1]) / (3.0 * h);
    let curve = DiscretizedCurve {
        u: (0..=m).map(|j| j as f64 * h).collect(),
        points: pts,
        energy: en.value,
        length: en.length,
    };
    let samples = (0..CURVE_SAMPLES).map(|k| curve.at(k as f64 / (CURVE_SAMPLES - 1) as f64)).collect();
    let _ = q;
    Ok(Candidate {
        value,
        start: curve.points[0].clone(),
        end_velocity,
        energy: en.value,
        length: en.length,
        samples,
        curve: Some(curve),
    })
}

/// Minimize the discrete energy over curves from the wall to Q. With `init`
/// only that curve is optimized; otherwise the boundary seeds supply straight
/// initial segments.
pub fn minimize_variational(
    sys: &PotentialSystem,
    q: &Vector,
    init: Option<&DiscretizedCurve>,
    opts: &DistanceOptions,
) -> Result<DistanceResult> {
    if let Some(r) = precheck(sys, q)? {
        return Ok(r);
    }
    let inits: Vec<Vec<Vector>> = match init {
        Some(c) => {
            let mut pts = c.points.clone();
            let last = pts.len() - 1;
            pts[0] = sys.project_to_boundary(&pts[0])?;
            pts[last] = q.clone();
            vec![pts]
        }
        None => boundary_seeds(sys, q, opts).iter().map(|x0| initial_curve(x0, q, opts.nodes)).collect(),
    };
    let mut cands = vec![];
    let mut failed = 0;
    let mut last_err = None;
    for p in inits {
        match variational_candidate(sys, q, p, opts) {
            Ok(c) => cands.push(c),
            Err(e) => {
                failed += 1;
                last_err = Some(e)
            }
        }
    }
    if cands.is_empty() {
        return Err(last_err.unwrap_or(Error::Stall { iterations: 0, grad_norm: f64::INFINITY }));
    }
    select(sys, q, Backend::Variational, cands, failed, opts)
}

// ---------------------------------------------------------------- gradient

/// ∇d_V(Q) = (E − V(Q)) / (2 d_V(Q)) · γ̇_Q(1).
pub fn grad_dv(sys: &PotentialSystem, r: &DistanceResult) -> Result<Vector> {
    if !r.unique {
        return Err(Error::NonUnique { spread: r.spread });
    }
    if r.value <= 0.0 {
        return Err(Error::Degenerate("d_V vanishes on the wall".into()));
    }
    Ok(&r.end_velocity * (sys.gap(&r.q) / (2.0 * r.value)))
}

/// ∇ψ_V(Q) = (E − V(Q)) γ̇_Q(1) for ψ_V = d_V².
pub fn grad_psi(sys: &PotentialSystem, r: &DistanceResult) -> Result<Vector> {
    if !r.unique {
        return Err(Error::NonUnique { spread: r.spread });
    }
    Ok(&r.end_velocity * sys.gap(&r.q))
}

// ------------------------------------------------------------------- field

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    /// Uniform grid of `n` cells per axis covering the domain box.
    pub fn over_box(sys: &PotentialSystem, n: usize) -> Self {
        GridSpec {
            lo: sys.domain_box.iter().map(|b| b[0]).collect(),
            hi: sys.domain_box.iter().map(|b| b[1]).collect(),
            cells: vec![n; sys.dim],
        }
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Centre of the cell with linear index k (first axis fastest).
    pub fn centre(&self, mut k: usize) -> Vector {
        Vector::from_fn(self.cells.len(), |i, _| {
            let n = self.cells[i];
            let j = k % n;
            k /= n;
            self.lo[i] + (j as f64 + 0.5) * (self.hi[i] - self.lo[i]) / n as f64
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldCell {
    pub centre: Vector,
    pub exterior: bool,
    pub value: Option<f64>,
    pub unique: Option<bool>,
    pub gradient: Option<Vector>,
    /// Unit direction of travel of the minimizer at the cell centre.
    pub direction: Option<Vector>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceField {
    pub grid: GridSpec,
    pub backend: Backend,
    pub cells: Vec<FieldCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldSummary {
    pub cells: usize,
    pub exterior: usize,
    pub computed: usize,
    pub non_unique: usize,
    pub failed: usize,
    pub max_value: f64,
}

pub fn distance_field(sys: &PotentialSystem, grid: &GridSpec, backend: Backend, opts: &DistanceOptions) -> Result<DistanceField> {
    if grid.lo.len() != sys.dim || grid.hi.len() != sys.dim || grid.cells.len() != sys.dim {
        return Err(Error::Config("grid dimension does not match the system".into()));
    }
    for i in 0..sys.dim {
        let b = sys.domain_box[i];
        if grid.lo[i] < b[0] || grid.hi[i] > b[1] || grid.lo[i] >= grid.hi[i] || grid.cells[i] == 0 {
            return Err(Error::Config(format!("grid axis {i} is empty or outside the domain box")));
        }
    }
    let cells: Vec<FieldCell> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let c = grid.centre(k);
            let mut cell = FieldCell {
                centre: c.clone(),
                exterior: false,
                value: None,
                unique: None,
                gradient: None,
                direction: None,
                error: None,
            };
            if sys.potential_value(&c) >= sys.energy {
                cell.exterior = true;
                return cell;
            }
            match distance(sys, &c, backend, opts) {
                Ok(r) => {
                    cell.value = Some(r.value);
                    cell.unique = Some(r.unique);
                    if r.end_velocity.norm() > 0.0 {
                        cell.direction = Some(r.end_velocity.normalize());
                    }
                    cell.gradient = grad_dv(sys, &r).ok();
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect();
    Ok(DistanceField { grid: grid.clone(), backend, cells })
}

impl DistanceField {
    pub fn summary(&self) -> FieldSummary {
        FieldSummary {
            cells: self.cells.len(),
            exterior: self.cells.iter().filter(|c| c.exterior).count(),
            computed: self.cells.iter().filter(|c| c.value.is_some()).count(),
            non_unique: self.cells.iter().filter(|c| c.unique == Some(false)).count(),
            failed: self.cells.iter().filter(|c| c.error.is_some()).count(),
            max_value: self.cells.iter().filter_map(|c| c.value).fold(0.0, f64::max),
        }
    }

    /// Columns: centre coordinates, d_V, exterior, unique, gradient components.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.grid.cells.len();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.extend(["d".to_string(), "exterior".into(), "unique".into()]);
        header.extend((1..=n).map(|i| format!("grad{i}")));
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec: Vec<String> = c.centre.iter().map(|x| fmt_num(*x)).collect();
            rec.push(c.value.map(fmt_num).unwrap_or_else(|| "nan".into()));
            rec.push(c.exterior.to_string());
            rec.push(c.unique.map(|u| u.to_string()).unwrap_or_default());
            match &c.gradient {
                Some(g) => rec.extend(g.iter().map(|x| fmt_num(*x))),
                None => rec.extend((0..n).map(|_| "nan".to_string())),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn harmonic(n: usize) -> PotentialSystem {
        PotentialSystem::builtin("harmonic", n, 0.5, &[]).unwrap()
    }

    /// ∫_r^1 ½√(1 − ρ²) dρ by composite Gauss–Legendre.
    fn radial_oracle(r: f64) -> f64 {
        let rule = Rule::new(20);
        let k = 64;
        (0..k)
            .map(|i| {
                let a = r + (1.0 - r) * i as f64 / k as f64;
                let b = r + (1.0 - r) * (i + 1) as f64 / k as f64;
                rule.integrate(a, b, |x| 0.5 * (1.0 - x * x).max(0.0).sqrt())
            })
            .sum()
    }

    #[test]
    fn centre_of_1d_harmonic() {
        let s = harmonic(1);
        let o = DistanceOptions::default();
        let q = Vector::zeros(1);
        let a = minimize_shooting(&s, &q, &o).unwrap();
        let b = minimize_variational(&s, &q, None, &o).unwrap();
        assert!((a.value - PI / 8.0).abs() < 1e-8, "{}", a.value);
        assert!((b.value - PI / 8.0).abs() < 1e-4, "{}", b.value);
        assert!(!a.unique && !b.unique);
        assert!(matches!(grad_dv(&s, &a), Err(Error::NonUnique { .. })));
    }

    #[test]
    fn radial_point_in_2d() {
        let s = harmonic(2);
        let o = DistanceOptions::default();
        let q = Vector::from_vec(vec![0.5, 0.0]);
        let exact = radial_oracle(0.5);
        for b in [Backend::Shooting, Backend::Variational] {
            let r = distance(&s, &q, b, &o).unwrap();
            assert!((r.value - exact).abs() < 1e-4, "{b:?}: {} vs {exact}", r.value);
            assert!((&r.start - Vector::from_vec(vec![1.0, 0.0])).norm() < 1e-3, "{b:?}: {}", r.start);
            assert!(r.unique);
        }
        let r = minimize_shooting(&s, &q, &o).unwrap();
        let g = grad_dv(&s, &r).unwrap();
        assert!(g[0] < 0.0 && g[1].abs() < 1e-8);
        let want = -0.5 * (1.0f64 - 0.25).sqrt();
        assert!((g[0] - want).abs() < 1e-8);
        let gp = grad_psi(&s, &r).unwrap();
        assert!((gp - &g * (2.0 * r.value)).norm() < 1e-12);
    }

    #[test]
    fn wall_point_has_zero_distance() {
        let s = harmonic(2);
        let q = Vector::from_vec(vec![0.6, 0.8]);
        let r = minimize_variational(&s, &q, None, &DistanceOptions::default()).unwrap();
        assert_eq!(r.value, 0.0);
        let out = Vector::from_vec(vec![1.2, 0.0]);
        assert!(matches!(minimize_shooting(&s, &out, &DistanceOptions::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn near_wall_backends_agree() {
        let s = harmonic(2);
        // E − V = 0.01
        let r = (1.0f64 - 0.02).sqrt();
        let q = Vector::from_vec(vec![r * 0.6, r * 0.8]);
        let o = DistanceOptions::default();
        let a = minimize_shooting(&s, &q, &o).unwrap();
        let b = minimize_variational(&s, &q, None, &o).unwrap();
        assert!((a.value - b.value).abs() < 1e-4, "{} {}", a.value, b.value);
        assert!((a.value - radial_oracle(r)).abs() < 1e-8);
    }

    #[test]
    fn field_is_radial() {
        let s = harmonic(2);
        let g = GridSpec { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0], cells: vec![6, 6] };
        let f = distance_field(&s, &g, Backend::Shooting, &DistanceOptions::default()).unwrap();
        for c in &f.cells {
            let r = c.centre.norm();
            if r >= 1.0 {
                assert!(c.exterior);
                continue;
            }
            assert!((c.value.unwrap() - radial_oracle(r)).abs() < 1e-3);
        }
        let sum = f.summary();
        assert_eq!(sum.failed, 0);
    }
}
