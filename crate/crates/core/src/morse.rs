//! Index form of a boundary-starting geodesic: assembly, eigencounts, Jacobi
//! fields, conjugate points and the broken-Jacobi-field second backend.
//!
//! Everything is computed in the time variable t of the underlying Newton
//! trajectory, where ds = (E − V) dt. A mesh that is uniform in t is graded
//! like s^{1/3} at the wall, and the coefficients of the index form stay
//! bounded there.

use std::io::Write;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Matrix, PotentialSystem, Vector};
use crate::jacobi_geodesic::JacobiGeodesic;
use crate::numerics::band::SymBand;
use crate::numerics::ode::Dopri5;
use crate::numerics::quad::Rule;
use crate::numerics::roots::brent;

pub const TOL_NULL: f64 = 1e-6;
pub const TOL_S: f64 = 1e-4;
pub const TOL_ORTH: f64 = 1e-6;
pub const S_MIN_FRAC: f64 = 1e-4;
pub const TOL_JAC: f64 = 1e-5;
pub const DEFAULT_CELLS: usize = 400;
pub const DEFAULT_SAMPLES: usize = 64;
const GAUSS_POINTS: usize = 4;
const SUBSTITUTED_CELLS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct MorseOptions {
    pub cells: usize,
    pub samples: usize,
    pub tol_null: f64,
    pub tol_s: f64,
}

impl Default for MorseOptions {
    fn default() -> Self {
        MorseOptions { cells: DEFAULT_CELLS, samples: DEFAULT_SAMPLES, tol_null: TOL_NULL, tol_s: TOL_S }
    }
}

/// Where the nodes of the piecewise-linear basis go.
#[derive(Debug, Clone)]
pub enum MeshSpec {
    /// `cells` equal steps in t.
    UniformTime(usize),
    /// Explicit arc-length nodes 0 = s_0 < … < s_m = s.
    Arc(Vec<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadratureRecord {
    pub cells: usize,
    pub points_per_cell: usize,
    pub min_gap: f64,
    pub max_speed: f64,
}

#[derive(Debug, Clone)]
pub struct IndexFormDiscretization {
    pub s: f64,
    pub t_end: f64,
    pub t_nodes: Vec<f64>,
    pub s_nodes: Vec<f64>,
    pub dim: usize,
    /// Columns span the tangent hyperplane of the level set at γ(0).
    pub tangent: Matrix,
    pub a: SymBand,
    pub b: SymBand,
    pub quadrature: QuadratureRecord,
    end_free: bool,
}

impl IndexFormDiscretization {
    pub fn dofs(&self) -> usize {
        self.a.dim()
    }

    fn layout(&self) -> Layout {
        Layout { n: self.dim, nodes: self.t_nodes.len(), end_free: self.end_free }
    }

    /// Node values X_j of the field with coefficient vector `c`.
    pub fn node_values(&self, c: &[f64]) -> Vec<Vector> {
        let lay = self.layout();
        let n = self.dim;
        (0..lay.nodes)
            .map(|j| {
                let (o, w) = (lay.offset(j), lay.width(j));
                if j == 0 {
                    &self.tangent * Vector::from_column_slice(&c[o..o + w])
                } else if w == 0 {
                    Vector::zeros(n)
                } else {
                    Vector::from_column_slice(&c[o..o + n])
                }
            })
            .collect()
    }

    pub fn field(&self, c: &[f64]) -> FeField {
        FeField { t: self.t_nodes.clone(), x: self.node_values(c) }
    }

    /// Largest g-norm of the node values.
    pub fn sup_norm(&self, sys: &PotentialSystem, gamma: &JacobiGeodesic, c: &[f64]) -> Result<f64> {
        let mut m: f64 = 0.0;
        for (t, x) in self.t_nodes.iter().zip(self.node_values(c)) {
            let st = gamma.state_at_time(sys, *t)?;
            m = m.max(sys.norm(&st.q, &x));
        }
        Ok(m)
    }
}

/// Continuous piecewise-linear field in t.
#[derive(Debug, Clone)]
pub struct FeField {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
}

impl FeField {
    /// Value and coordinate t-derivative.
    pub fn eval(&self, t: f64) -> (Vector, Vector) {
        let m = self.t.len();
        let j = self.t.partition_point(|&x| x <= t).clamp(1, m - 1) - 1;
        let h = self.t[j + 1] - self.t[j];
        let r = (t - self.t[j]) / h;
        let v = &self.x[j] * (1.0 - r) + &self.x[j + 1] * r;
        let d = (&self.x[j + 1] - &self.x[j]) / h;
        (v, d)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    nodes: usize,
    end_free: bool,
}

impl Layout {
    fn offset(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            (self.n - 1) + (j - 1) * self.n
        }
    }
    fn width(&self, j: usize) -> usize {
        if j == 0 {
            self.n - 1
        } else if j == self.nodes - 1 && !self.end_free {
            0
        } else {
            self.n
        }
    }
    fn dofs(&self) -> usize {
        let last = self.nodes - 1;
        self.offset(last) + self.width(last)
    }
}

/// Coefficients of the index form and the Jacobi operator at one state.
struct Coeffs {
    w: f64,
    dv: Vector,
    grad: Vector,
    /// G q̇
    a: Vector,
    g: Matrix,
    /// C ξ = Γ(q̇, ξ)
    c: Matrix,
    /// rv ξ = R(q̇, ξ)q̇
    rv: Matrix,
    /// bilinear g(R(q̇,ξ)q̇, η)
    m: Matrix,
    /// bilinear covariant Hessian of V
    h: Matrix,
    /// g⁻¹ H
    hop: Matrix,
}

fn coeffs(sys: &PotentialSystem, q: &Vector, v: &Vector) -> Coeffs {
    let n = sys.dim;
    let g = sys.metric_at(q);
    let a = &g * v;
    let w = 0.5 * a.dot(v);
    let dv = sys.differential(q);
    let grad = sys.grad(q);
    let h = sys.hessian(q);
    let (c, rv) = if sys.metric.is_flat() {
        (Matrix::zeros(n, n), Matrix::zeros(n, n))
    } else {
        let ch = sys.christoffel_unchecked(q);
        let c = Matrix::from_fn(n, n, |k, b| (0..n).map(|i| ch.get(k, i, b) * v[i]).sum());
        let r = sys.riemann_unchecked(q);
        let mut rv = Matrix::zeros(n, n);
        for b in 0..n {
            let mut e = Vector::zeros(n);
            e[b] = 1.0;
            rv.set_column(b, &r.apply(v, &e, v));
        }
        (c, rv)
    };
    let gm = (&g * &rv).transpose();
    let m = (&gm + gm.transpose()) * 0.5;
    let hop = g.clone().try_inverse().unwrap_or_else(|| Matrix::identity(n, n)) * &h;
    Coeffs { w, dv, grad, a, g, c, rv, m, h, hop }
}

/// Blocks (xx, xp, px, pp) of the index-form density [x;p]ᵀK[y;r] where x is
/// the field value and p its coordinate t-derivative.
fn index_kernel(k: &Coeffs) -> [Matrix; 4] {
    let ct = k.c.transpose();
    let gc = &k.g * &k.c;
    let ac = ct.clone() * &k.a;
    let mut xx = &ct * &gc + &k.m - &k.h;
    xx -= (&k.dv * ac.transpose() + &ac * k.dv.transpose()) / k.w;
    let xp = &ct * &k.g - &k.dv * k.a.transpose() / k.w;
    let px = xp.transpose();
    [xx, xp, px, k.g.clone()]
}

fn gram_kernel(k: &Coeffs) -> [Matrix; 4] {
    let ct = k.c.transpose();
    let gc = &k.g * &k.c;
    let xx = &ct * &gc;
    let xp = &ct * &k.g;
    let px = xp.transpose();
    [xx, xp, px, k.g.clone()]
}

fn bilinear(k: &[Matrix; 4], x: &Vector, p: &Vector, y: &Vector, r: &Vector) -> f64 {
    x.dot(&(&k[0] * y)) + x.dot(&(&k[1] * r)) + p.dot(&(&k[2] * y)) + p.dot(&(&k[3] * r))
}

struct CellBlocks {
    a: Matrix,
    b: Matrix,
    min_gap: f64,
    max_speed: f64,
}

fn cell_blocks(sys: &PotentialSystem, gamma: &JacobiGeodesic, t0: f64, t1: f64, rule: &Rule) -> Result<CellBlocks> {
    let n = sys.dim;
    let h = t1 - t0;
    let mut a = Matrix::zeros(2 * n, 2 * n);
    let mut b = Matrix::zeros(2 * n, 2 * n);
    let mut min_gap = f64::INFINITY;
    let mut max_speed: f64 = 0.0;
    let dphi = [-1.0 / h, 1.0 / h];
    for (t, wq) in rule.points(t0, t1) {
        let st = gamma.state_at_time(sys, t)?;
        let k = coeffs(sys, &st.q, &st.qdot);
        if !(k.w > 0.0) {
            return Err(Error::Quadrature(format!("zero gap at interior point t = {t}")));
        }
        min_gap = min_gap.min(k.w);
        max_speed = max_speed.max((2.0 / k.w).sqrt());
        let r = (t - t0) / h;
        let phi = [1.0 - r, r];
        let ki = index_kernel(&k);
        let kb = gram_kernel(&k);
        for ia in 0..2 {
            for ib in 0..2 {
                let (pa, pb, da, db) = (phi[ia], phi[ib], dphi[ia], dphi[ib]);
                for (dst, kk) in [(&mut a, &ki), (&mut b, &kb)] {
                    let blk = &kk[0] * (pa * pb) + &kk[1] * (pa * db) + &kk[2] * (da * pb) + &kk[3] * (da * db);
                    let mut view = dst.view_mut((ia * n, ib * n), (n, n));
                    view += blk * wq;
                }
            }
        }
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite cell contribution on [{t0}, {t1}]")));
    }
    Ok(CellBlocks { a, b, min_gap, max_speed })
}

fn node_map(lay: &Layout, tangent: &Matrix, j: usize) -> Matrix {
    if j == 0 {
        tangent.clone()
    } else if lay.width(j) == 0 {
        Matrix::zeros(lay.n, 0)
    } else {
        Matrix::identity(lay.n, lay.n)
    }
}

fn assemble_nodes(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    t_nodes: &[f64],
    end_free: bool,
) -> Result<IndexFormDiscretization> {
    let n = sys.dim;
    let cells = t_nodes.len() - 1;
    let lay = Layout { n, nodes: t_nodes.len(), end_free };
    let tangent = sys.tangent_basis(&gamma.points[0]);
    let rule = Rule::new(GAUSS_POINTS);
    let blocks: Vec<Result<CellBlocks>> =
        (0..cells).into_par_iter().map(|j| cell_blocks(sys, gamma, t_nodes[j], t_nodes[j + 1], &rule)).collect();
    let dofs = lay.dofs();
    let mut a = SymBand::zeros(dofs, 2 * n - 1);
    let mut b = SymBand::zeros(dofs, 2 * n - 1);
    let mut min_gap = f64::INFINITY;
    let mut max_speed: f64 = 0.0;
    for (j, blk) in blocks.into_iter().enumerate() {
        let blk = blk?;
        min_gap = min_gap.min(blk.min_gap);
        max_speed = max_speed.max(blk.max_speed);
        for ia in 0..2 {
            for ib in 0..2 {
                let (ja, jb) = (j + ia, j + ib);
                let (ea, eb) = (node_map(&lay, &tangent, ja), node_map(&lay, &tangent, jb));
                if ea.ncols() == 0 || eb.ncols() == 0 {
                    continue;
                }
                let (oa, ob) = (lay.offset(ja), lay.offset(jb));
                for (dst, src) in [(&mut a, &blk.a), (&mut b, &blk.b)] {
                    let local = ea.transpose() * src.view((ia * n, ib * n), (n, n)) * &eb;
                    for r in 0..local.nrows() {
                        for c in 0..local.ncols() {
                            let (gr, gc) = (oa + r, ob + c);
                            if gr >= gc {
                                dst.add(gr, gc, local[(r, c)]);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut s_nodes = Vec::with_capacity(t_nodes.len());
    for &t in t_nodes {
        s_nodes.push(gamma.state_at_time(sys, t)?.s);
    }
    Ok(IndexFormDiscretization {
        s: *s_nodes.last().unwrap(),
        t_end: *t_nodes.last().unwrap(),
        t_nodes: t_nodes.to_vec(),
        s_nodes,
        dim: n,
        tangent,
        a,
        b,
        quadrature: QuadratureRecord { cells, points_per_cell: GAUSS_POINTS, min_gap, max_speed },
        end_free,
    })
}

fn check_geodesic(gamma: &JacobiGeodesic, s: f64) -> Result<()> {
    if !gamma.boundary_start {
        return Err(Error::InvalidGeodesic("the index form needs a geodesic starting on the boundary".into()));
    }
    if !(s > 0.0) || s > gamma.arc_length() * (1.0 + 1e-12) + 1e-14 {
        return Err(Error::InvalidGeodesic(format!("s = {s} outside (0, {}]", gamma.arc_length())));
    }
    Ok(())
}

/// Time of arc-length s, snapping to the final node at the far end.
fn time_of(sys: &PotentialSystem, gamma: &JacobiGeodesic, s: f64) -> Result<f64> {
    if (s - gamma.arc_length()).abs() <= 1e-13 * (1.0 + s) {
        return Ok(gamma.duration());
    }
    Ok(gamma.state_at_arc(sys, s)?.t)
}

fn uniform(t_end: f64, cells: usize) -> Vec<f64> {
    (0..=cells).map(|j| t_end * j as f64 / cells as f64).collect()
}

pub fn assemble_index_form(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    s: f64,
    mesh: &MeshSpec,
) -> Result<IndexFormDiscretization> {
    check_geodesic(gamma, s)?;
    let t_nodes = match mesh {
        MeshSpec::UniformTime(cells) => {
            if *cells < 2 {
                return Err(Error::Config("at least two cells are needed".into()));
            }
            uniform(time_of(sys, gamma, s)?, *cells)
        }
        MeshSpec::Arc(nodes) => {
            let m = nodes.len();
            if m < 3 || nodes[0] != 0.0 || (nodes[m - 1] - s).abs() > 1e-12 * s.max(1.0) {
                return Err(Error::Config("arc mesh must run from 0 to s".into()));
            }
            if nodes.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config("arc mesh must be strictly increasing".into()));
            }
            let mean = s / (m - 1) as f64;
            if nodes[1] > 0.1 * mean {
                return Err(Error::MeshNotGraded(format!(
                    "first cell {:.3e} exceeds a tenth of the mean cell {:.3e}",
                    nodes[1], mean
                )));
            }
            let mut t = Vec::with_capacity(m);
            t.push(0.0);
            for &x in &nodes[1..m - 1] {
                t.push(gamma.state_at_arc(sys, x)?.t);
            }
            t.push(time_of(sys, gamma, s)?);
            t
        }
    };
    assemble_nodes(sys, gamma, &t_nodes, false)
}

fn discretize(sys: &PotentialSystem, gamma: &JacobiGeodesic, s: f64, cells: usize) -> Result<IndexFormDiscretization> {
    assemble_index_form(sys, gamma, s, &MeshSpec::UniformTime(cells))
}

fn count_below(disc: &IndexFormDiscretization, sigma: f64) -> usize {
    if disc.dofs() == 0 {
        return 0;
    }
    disc.a.count_below(&disc.b, sigma).negative
}

/// The k smallest generalized eigenvalues, by bisection on Sturm counts.
pub fn smallest_eigenvalues(disc: &IndexFormDiscretization, k: usize) -> Vec<f64> {
    let k = k.min(disc.dofs());
    if k == 0 {
        return Vec::new();
    }
    let mut lo = -1.0;
    while count_below(disc, lo) > 0 {
        lo *= 2.0;
    }
    let mut hi = 1.0;
    while count_below(disc, hi) < k {
        hi *= 2.0;
    }
    (1..=k)
        .map(|j| {
            let (mut a, mut b) = (lo, hi);
            while b - a > 1e-14 * (1.0 + a.abs().max(b.abs())) {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                if count_below(disc, m) >= j {
                    b = m;
                } else {
                    a = m;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

/// Eigenpairs by shifted inverse iteration from the Sturm eigenvalues.
/// Vectors are normalized to unit B-norm.
pub fn eigenpairs(disc: &IndexFormDiscretization, k: usize) -> Vec<(f64, Vec<f64>)> {
    let lams = smallest_eigenvalues(disc, k);
    let d = disc.dofs();
    lams.into_iter()
        .enumerate()
        .filter_map(|(j, lam)| {
            let sigma = lam - 1e-7 * (1.0 + lam.abs());
            let mut m = disc.a.clone();
            m.axpy(-sigma, &disc.b);
            let mut x: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + j * 13) % 11) as f64 * 0.1).collect();
            for _ in 0..6 {
                let rhs = disc.b.mul_vec(&x);
                x = m.solve(&rhs)?;
                let nrm = disc.b.quad(&x, &x).sqrt();
                x.iter_mut().for_each(|v| *v /= nrm);
            }
            let ax = disc.a.quad(&x, &x);
            Some((ax, x))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct IndexCount {
    pub index: usize,
    pub nullity: usize,
    /// Distance from the nearest eigenvalue to either threshold ±tol_null.
    pub gap: f64,
    pub ambiguous: bool,
}

pub fn morse_index(disc: &IndexFormDiscretization, tol_null: f64) -> IndexCount {
    let below = count_below(disc, -tol_null);
    let upto = count_below(disc, tol_null);
    let ambiguous = count_below(disc, -0.9 * tol_null) != count_below(disc, -1.1 * tol_null)
        || count_below(disc, 0.9 * tol_null) != count_below(disc, 1.1 * tol_null);
    let lams = smallest_eigenvalues(disc, upto + 1);
    let gap = lams.iter().map(|l| (l.abs() - tol_null).abs()).fold(f64::INFINITY, f64::min);
    IndexCount { index: below, nullity: upto - below, gap, ambiguous }
}

pub fn index_at(sys: &PotentialSystem, gamma: &JacobiGeodesic, s: f64, opts: &MorseOptions) -> Result<IndexCount> {
    Ok(morse_index(&discretize(sys, gamma, s, opts.cells)?, opts.tol_null))
}

fn eigenvalue_at(sys: &PotentialSystem, gamma: &JacobiGeodesic, s: f64, k: usize, cells: usize) -> Result<f64> {
    let disc = discretize(sys, gamma, s, cells)?;
    smallest_eigenvalues(&disc, k)
        .get(k - 1)
        .copied()
        .ok_or_else(|| Error::Sampling(format!("fewer than {k} eigenvalues at s = {s}")))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StaircaseSample {
    pub s: f64,
    pub index: usize,
    pub nullity: usize,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConjugatePoint {
    pub s: f64,
    pub multiplicity: usize,
    /// Nullity measured at the refined location.
    pub nullity: usize,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Staircase {
    pub samples: Vec<StaircaseSample>,
    pub conjugate: Vec<ConjugatePoint>,
    pub monotone: bool,
    pub consistent: bool,
    pub ambiguous: bool,
}

impl Staircase {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_staircase_csv(&self.samples, out)
    }

    pub fn multiplicity_below(&self, a: f64) -> usize {
        self.conjugate.iter().filter(|c| c.s < a).map(|c| c.multiplicity).sum()
    }
}

/// Columns s, index, nullity.
pub fn write_staircase_csv<W: Write>(samples: &[StaircaseSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "index", "nullity"])?;
    for p in samples {
        w.write_record([crate::dynamics::fmt_num(p.s), p.index.to_string(), p.nullity.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Locates the first index jump in (lo, hi] and refines it on the eigenvalue
/// that crosses zero.
fn refine_jump(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    mut lo: f64,
    mut hi: f64,
    i_lo: usize,
    opts: &MorseOptions,
) -> Result<(ConjugatePoint, f64)> {
    let mut i_hi = index_at(sys, gamma, hi, opts)?.index;
    while hi - lo > opts.tol_s * 0.5 {
        let mid = 0.5 * (lo + hi);
        let c = index_at(sys, gamma, mid, opts)?.index;
        if c > i_lo {
            hi = mid;
            i_hi = c;
        } else {
            lo = mid;
        }
    }
    let k = i_lo + 1;
    let f = |s: f64| eigenvalue_at(sys, gamma, s, k, opts.cells).unwrap_or(f64::NAN);
    let (flo, fhi) = (f(lo), f(hi));
    let root = if flo > 0.0 && fhi < 0.0 {
        brent(f, lo, hi, 1e-12 * (1.0 + hi), 100).unwrap_or(0.5 * (lo + hi))
    } else {
        0.5 * (lo + hi)
    };
    let at_root = index_at(sys, gamma, root, opts)?;
    let multiplicity = i_hi - i_lo;
    let cp = ConjugatePoint {
        s: root,
        multiplicity,
        nullity: at_root.nullity,
        consistent: at_root.nullity == multiplicity && !at_root.ambiguous,
    };
    Ok((cp, hi))
}

/// Index and nullity at `samples` equally spaced values of s in (0, a], with
/// every jump located by bisection and refined to a root of the crossing
/// eigenvalue.
pub fn conjugate_points(sys: &PotentialSystem, gamma: &JacobiGeodesic, a: f64, opts: &MorseOptions) -> Result<Staircase> {
    check_geodesic(gamma, a)?;
    let n = opts.samples.max(1);
    let mut grid: Vec<f64> = vec![S_MIN_FRAC * a];
    grid.extend((1..=n).map(|k| a * k as f64 / n as f64));
    let counts: Vec<Result<IndexCount>> = grid.par_iter().map(|&s| index_at(sys, gamma, s, opts)).collect();
    let mut samples = Vec::with_capacity(grid.len());
    for (&s, c) in grid.iter().zip(counts) {
        let c = c?;
        samples.push(StaircaseSample { s, index: c.index, nullity: c.nullity, ambiguous: c.ambiguous });
    }
    let monotone = samples.windows(2).all(|w| w[1].index >= w[0].index);
    let mut conjugate = Vec::new();
    for w in samples.windows(2) {
        let (mut lo, target) = (w[0].s, w[1].index);
        let mut i_lo = w[0].index;
        while i_lo < target {
            let (cp, hi) = refine_jump(sys, gamma, lo, w[1].s, i_lo, opts)?;
            i_lo += cp.multiplicity;
            lo = hi;
            conjugate.push(cp);
            if cp.multiplicity == 0 {
                break;
            }
        }
    }
    let ambiguous = samples.iter().any(|p| p.ambiguous);
    let total: usize = conjugate.iter().map(|c| c.multiplicity).sum();
    let rise = samples.last().unwrap().index.saturating_sub(samples[0].index);
    let consistent = monotone && conjugate.iter().all(|c| c.consistent) && total == rise;
    Ok(Staircase { samples, conjugate, monotone, consistent, ambiguous })
}

#[derive(Debug, Clone, Serialize)]
pub struct MorseReport {
    pub a: f64,
    pub index: usize,
    pub nullity: usize,
    pub gap: f64,
    pub ambiguous: bool,
    pub conjugate_points: Vec<ConjugatePoint>,
    pub staircase: Vec<StaircaseSample>,
    pub multiplicity_sum: usize,
    pub monotone: bool,
    pub jumps_match_nullity: bool,
    /// None when an eigenvalue sits too close to a threshold to decide.
    pub mit_consistent: Option<bool>,
    pub backends: Vec<String>,
    pub cells: usize,
}

pub fn mit_verify(sys: &PotentialSystem, gamma: &JacobiGeodesic, a: f64, opts: &MorseOptions) -> Result<MorseReport> {
    let disc = discretize(sys, gamma, a, opts.cells)?;
    let count = morse_index(&disc, opts.tol_null);
    let stairs = conjugate_points(sys, gamma, a, opts)?;
    let inside: Vec<ConjugatePoint> = stairs.conjugate.iter().copied().filter(|c| c.s < a).collect();
    let multiplicity_sum: usize = inside.iter().map(|c| c.multiplicity).sum();
    let ambiguous = count.ambiguous || stairs.ambiguous;
    let mit_consistent = if ambiguous { None } else { Some(count.index == multiplicity_sum) };
    Ok(MorseReport {
        a,
        index: count.index,
        nullity: count.nullity,
        gap: count.gap,
        ambiguous,
        conjugate_points: stairs.conjugate.clone(),
        staircase: stairs.samples.clone(),
        multiplicity_sum,
        monotone: stairs.monotone,
        jumps_match_nullity: stairs.consistent,
        mit_consistent,
        backends: vec!["eigencount".into(), "staircase".into()],
        cells: opts.cells,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Positivity {
    /// Largest s (up to a) below which the index form is positive definite.
    pub s_hat: f64,
    /// (s, smallest eigenvalue) checked below s_hat.
    pub samples: Vec<(f64, f64)>,
    pub positive_below: bool,
}

/// Finds ŝ by a scan and bisection on the smallest eigenvalue, then confirms
/// positivity at ten points below it.
pub fn positivity_threshold(sys: &PotentialSystem, gamma: &JacobiGeodesic, a: f64, opts: &MorseOptions) -> Result<Positivity> {
    check_geodesic(gamma, a)?;
    let lam = |s: f64| eigenvalue_at(sys, gamma, s, 1, opts.cells);
    let scan = 32;
    let mut s_hat = a;
    let mut prev = S_MIN_FRAC * a;
    for k in 1..=scan {
        let s = a * k as f64 / scan as f64;
        if lam(s)? <= 0.0 {
            let (mut lo, mut hi) = (prev, s);
            while hi - lo > opts.tol_s * 0.5 {
                let mid = 0.5 * (lo + hi);
                if lam(mid)? > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            s_hat = lo;
            break;
        }
        prev = s;
    }
    let mut samples = vec![(S_MIN_FRAC * a, lam(S_MIN_FRAC * a)?)];
    for j in 1..=10 {
        let s = s_hat * j as f64 / 10.0;
        samples.push((s, lam(s)?));
    }
    let positive_below = samples.iter().all(|&(_, l)| l > 0.0);
    Ok(Positivity { s_hat, samples, positive_below })
}

/// f''(γ)[ξ, ξ] by quadrature in arc length. `field(t)` returns the value
/// and coordinate t-derivative; `s_breaks` are the kinks of the field. The
/// first cells use s = u³.
pub fn hessian_quadratic(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    field: &(dyn Fn(f64) -> Result<(Vector, Vector)> + Sync),
    s_breaks: &[f64],
) -> Result<f64> {
    let rule = Rule::new(GAUSS_POINTS);
    let flat = sys.metric.is_flat();
    let density = |s: f64| -> Result<f64> {
        let st = gamma.state_at_arc(sys, s)?;
        let (xi, dxi) = field(st.t)?;
        let w = st.gap;
        let gdot = &st.qdot / w;
        let dt_xi = if flat { dxi } else { dxi + sys.christoffel_unchecked(&st.q).contract(&st.qdot, &xi) };
        let ds_xi = dt_xi / w;
        let g = sys.metric_at(&st.q);
        let h = sys.hessian(&st.q);
        let dv = sys.differential(&st.q);
        let speed2 = (&g * &gdot).dot(&gdot);
        let mut val = -0.5 * speed2 * xi.dot(&(&h * &xi)) - 2.0 * dv.dot(&xi) * (&g * &ds_xi).dot(&gdot)
            + w * (&g * &ds_xi).dot(&ds_xi);
        if !flat {
            val += w * sys.riemann_unchecked(&st.q).quadratic(&xi, &gdot, &xi, &gdot);
        }
        Ok(val)
    };
    let cells: Vec<Result<f64>> = (0..s_breaks.len().saturating_sub(1))
        .into_par_iter()
        .map(|j| {
            let (a, b) = (s_breaks[j], s_breaks[j + 1]);
            let mut acc = 0.0;
            if j < SUBSTITUTED_CELLS {
                for (u, wq) in rule.points(a.cbrt(), b.cbrt()) {
                    acc += wq * 3.0 * u * u * density(u * u * u)?;
                }
            } else {
                for (s, wq) in rule.points(a, b) {
                    acc += wq * density(s)?;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for c in cells {
        total += c?;
    }
    if !total.is_finite() {
        return Err(Error::Quadrature("Hessian integral is not finite".into()));
    }
    Ok(total)
}

/// State layout for Jacobi integration: [q, v, s, ξ, P], with
/// P = Dξ/dt − (dV·ξ)q̇/(E − V) the boundary vector.
fn jacobi_rhs(sys: &PotentialSystem) -> impl Fn(f64, &[f64], &mut [f64]) + Sync + '_ {
    let n = sys.dim;
    move |_t: f64, y: &[f64], dy: &mut [f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        let xi = Vector::from_column_slice(&y[2 * n + 1..3 * n + 1]);
        let p = Vector::from_column_slice(&y[3 * n + 1..4 * n + 1]);
        let k = coeffs(sys, &q, &v);
        let acc = -(&k.c * &v) - &k.grad;
        let (dxi, dp) = jacobi_linear(&k, &v, &xi, &p);
        dy[..n].copy_from_slice(v.as_slice());
        dy[n..2 * n].copy_from_slice(acc.as_slice());
        dy[2 * n] = k.w;
        dy[2 * n + 1..3 * n + 1].copy_from_slice(dxi.as_slice());
        dy[3 * n + 1..4 * n + 1].copy_from_slice(dp.as_slice());
    }
}

/// Coordinate derivatives (ξ̇, Ṗ) of the first-order Jacobi system.
fn jacobi_linear(k: &Coeffs, v: &Vector, xi: &Vector, p: &Vector) -> (Vector, Vector) {
    let d_xi = p + v * (k.dv.dot(xi) / k.w);
    let xi_dot = &d_xi - &k.c * xi;
    let d_p = &k.rv * xi - &k.grad * (k.a.dot(&d_xi) / k.w) - &k.hop * xi;
    let p_dot = d_p - &k.c * p;
    (xi_dot, p_dot)
}

#[derive(Debug, Clone)]
pub struct JacobiFieldSolution {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub xi: Vec<Vector>,
    /// Dξ/ds
    pub dxi: Vec<Vector>,
    /// (E−V) Dξ/ds − g(∇V, ξ) γ̇
    pub boundary: Vec<Vector>,
    /// Largest relative Jacobi-equation residual at interior nodes.
    pub residual: f64,
    rows: Vec<Vec<f64>>,
}

impl JacobiFieldSolution {
    /// Field value at time t by one integration step from the nearest node.
    pub fn xi_at(&self, sys: &PotentialSystem, t: f64) -> Result<Vector> {
        let n = sys.dim;
        let (lo, hi) = (self.t[0].min(*self.t.last().unwrap()), self.t[0].max(*self.t.last().unwrap()));
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(Error::Interpolation(format!("t = {t} outside [{lo}, {hi}]")));
        }
        let i = self
            .t
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let rhs = jacobi_rhs(sys);
        let y = Dopri5::advance(&rhs, self.t[i], &self.rows[i], t - self.t[i]);
        Ok(Vector::from_column_slice(&y[2 * n + 1..3 * n + 1]))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.xi.first().map_or(0, |x| x.len());
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["s".to_string(), "t".to_string()];
        head.extend((0..n).map(|i| format!("xi{i}")));
        head.extend((0..n).map(|i| format!("dxi{i}")));
        w.write_record(&head)?;
        for k in 0..self.s.len() {
            let mut row = vec![crate::dynamics::fmt_num(self.s[k]), crate::dynamics::fmt_num(self.t[k])];
            row.extend(self.xi[k].iter().map(|x| crate::dynamics::fmt_num(*x)));
            row.extend(self.dxi[k].iter().map(|x| crate::dynamics::fmt_num(*x)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrates the Jacobi equation from s_0 (data ξ_0 and Dξ/ds at s_0) to
/// s_end, in either direction.
pub fn jacobi_field_shoot(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    s0: f64,
    xi0: &Vector,
    dxi0: &Vector,
    s_end: f64,
) -> Result<JacobiFieldSolution> {
    let n = sys.dim;
    if !(s0 > 0.0) {
        return Err(Error::Config("the Jacobi equation is singular at s = 0; start at s_0 > 0".into()));
    }
    let len = gamma.arc_length();
    if s0 > len || !(s_end >= 0.0) || s_end > len * (1.0 + 1e-12) {
        return Err(Error::Interpolation(format!("[{s0}, {s_end}] is not inside [0, {len}]")));
    }
    let st = gamma.state_at_arc(sys, s0)?;
    let t_end = time_of(sys, gamma, s_end)?;
    let k = coeffs(sys, &st.q, &st.qdot);
    let dt_xi = dxi0 * k.w;
    let p0 = &dt_xi - &st.qdot * (k.dv.dot(xi0) / k.w);
    let mut y0 = Vec::with_capacity(4 * n + 1);
    y0.extend_from_slice(st.q.as_slice());
    y0.extend_from_slice(st.qdot.as_slice());
    y0.push(s0);
    y0.extend_from_slice(xi0.as_slice());
    y0.extend_from_slice(p0.as_slice());
    let stops: Vec<f64> = (1..200).map(|j| st.t + (t_end - st.t) * j as f64 / 200.0).collect();
    let rhs = jacobi_rhs(sys);
    let sol = Dopri5::default().integrate(&rhs, st.t, &y0, t_end, &stops, &[], &|_, _| Ok(()))?;
    let mut out = JacobiFieldSolution {
        s: Vec::new(),
        t: Vec::new(),
        xi: Vec::new(),
        dxi: Vec::new(),
        boundary: Vec::new(),
        residual: 0.0,
        rows: sol.y.clone(),
    };
    for (t, y) in sol.t.iter().zip(&sol.y) {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        let xi = Vector::from_column_slice(&y[2 * n + 1..3 * n + 1]);
        let p = Vector::from_column_slice(&y[3 * n + 1..4 * n + 1]);
        let k = coeffs(sys, &q, &v);
        let d_xi = &p + &v * (k.dv.dot(&xi) / k.w);
        out.t.push(*t);
        out.s.push(y[2 * n]);
        out.dxi.push(d_xi / k.w);
        out.xi.push(xi);
        out.boundary.push(p);
    }
    let (ta, tb) = (st.t.min(t_end), st.t.max(t_end));
    let h = 1e-3 * (tb - ta);
    let nodes: Vec<f64> = (0..=40).map(|j| ta + 5.0 * h + (tb - ta - 10.0 * h) * j as f64 / 40.0).collect();
    let field = |t: f64| out.xi_at(sys, t);
    let res = jacobi_residual(sys, gamma, &field, &nodes, h)?;
    out.residual = res.iter().map(|r| r.relative).fold(0.0, f64::max);
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualSample {
    pub t: f64,
    pub s: f64,
    pub absolute: f64,
    pub relative: f64,
}

/// Jacobi-equation residual of a field given as a function of t, using
/// fourth-order central differences with step h. The relative residual
/// divides by the sum of the magnitudes of the individual terms.
pub fn jacobi_residual(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    field: &dyn Fn(f64) -> Result<Vector>,
    t_nodes: &[f64],
    h: f64,
) -> Result<Vec<ResidualSample>> {
    let d4 = |f: &[Vector; 5]| (&f[0] - &f[1] * 8.0 + &f[3] * 8.0 - &f[4]) / (12.0 * h);
    let mut out = Vec::with_capacity(t_nodes.len());
    for &t in t_nodes {
        let xs: Vec<Vector> = (-4..=4).map(|k| field(t + k as f64 * h)).collect::<Result<_>>()?;
        let mut ps: Vec<Vector> = Vec::with_capacity(5);
        let mut centre = None;
        for (c, off) in (-2..=2).enumerate() {
            let tc = t + off as f64 * h;
            let st = gamma.state_at_time(sys, tc)?;
            let k = coeffs(sys, &st.q, &st.qdot);
            let i = c + 2;
            let xi = xs[i].clone();
            let xdot = d4(&[xs[i - 2].clone(), xs[i - 1].clone(), xs[i].clone(), xs[i + 1].clone(), xs[i + 2].clone()]);
            let d_xi = &xdot + &k.c * &xi;
            let p = &d_xi - &st.qdot * (k.dv.dot(&xi) / k.w);
            ps.push(p);
            if off == 0 {
                centre = Some((st, k, xi, d_xi));
            }
        }
        let (st, k, xi, d_xi) = centre.unwrap();
        let pdot = d4(&[ps[0].clone(), ps[1].clone(), ps[2].clone(), ps[3].clone(), ps[4].clone()]);
        let dp = &pdot + &k.c * &ps[2];
        let curv = &k.rv * &xi;
        let cross = &k.grad * (k.a.dot(&d_xi) / k.w);
        let hess = &k.hop * &xi;
        let r = &curv - &cross - &hess - &dp;
        let nrm = |x: &Vector| (&k.g * x).dot(x).max(0.0).sqrt();
        let scale = nrm(&dp) + nrm(&curv) + nrm(&cross) + nrm(&hess);
        let absolute = nrm(&r);
        let relative = if scale > 0.0 { absolute / scale } else { 0.0 };
        out.push(ResidualSample { t, s: st.s, absolute, relative });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryCheck {
    /// Extrapolated norm at s = 0 of the boundary vector with its ∇V(γ(0))
    /// component removed.
    pub residual: f64,
    pub inconclusive: bool,
    pub samples: Vec<(f64, f64)>,
}

fn boundary_extrapolate(sys: &PotentialSystem, gamma: &JacobiGeodesic, pts: &[(f64, Vector)]) -> BoundaryCheck {
    let x0 = &gamma.points[0];
    let gv = sys.grad(x0);
    let nhat = &gv / sys.norm(x0, &gv);
    let samples: Vec<(f64, f64)> = pts
        .iter()
        .map(|(s, p)| {
            let perp = p - &nhat * sys.inner(x0, p, &nhat);
            (*s, sys.norm(x0, &perp))
        })
        .collect();
    let m = samples.len() as f64;
    let (mut su, mut sr, mut suu, mut sur) = (0.0, 0.0, 0.0, 0.0);
    for &(s, r) in &samples {
        let u = s.cbrt();
        su += u;
        sr += r;
        suu += u * u;
        sur += u * r;
    }
    let den = m * suu - su * su;
    let c0 = if den.abs() > 0.0 { (suu * sr - su * sur) / den } else { sr / m };
    let scale = samples.iter().map(|x| x.1).fold(0.0, f64::max);
    let tol = 1e-12 * (1.0 + scale);
    let d: Vec<f64> = samples.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let monotone = d.iter().all(|&x| x >= -tol) || d.iter().all(|&x| x <= tol);
    BoundaryCheck { residual: c0.abs(), inconclusive: !monotone, samples }
}

/// Boundary-condition check on the five smallest nodes of a shot field.
pub fn null_boundary_check(sys: &PotentialSystem, gamma: &JacobiGeodesic, sol: &JacobiFieldSolution) -> BoundaryCheck {
    let mut idx: Vec<usize> = (0..sol.s.len()).collect();
    idx.sort_by(|&a, &b| sol.s[a].partial_cmp(&sol.s[b]).unwrap());
    let pts: Vec<(f64, Vector)> = idx.iter().take(5).map(|&i| (sol.s[i], sol.boundary[i].clone())).collect();
    boundary_extrapolate(sys, gamma, &pts)
}

/// Boundary-condition check for a field given as a function of t, sampled
/// at s_min·2^k, k = 0..4.
pub fn field_boundary_check(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    field: &dyn Fn(f64) -> Result<Vector>,
    s_min: f64,
) -> Result<BoundaryCheck> {
    let mut pts = Vec::with_capacity(5);
    for k in 0..5 {
        let s = s_min * (1u32 << k) as f64;
        let st = gamma.state_at_arc(sys, s)?;
        let h = 0.01 * st.t;
        let f: Vec<Vector> = (-2..=2).map(|j| field(st.t + j as f64 * h)).collect::<Result<_>>()?;
        let xdot = (&f[0] - &f[1] * 8.0 + &f[3] * 8.0 - &f[4]) / (12.0 * h);
        let k = coeffs(sys, &st.q, &st.qdot);
        let d_xi = &xdot + &k.c * &f[2];
        pts.push((s, &d_xi - &st.qdot * (k.dv.dot(&f[2]) / k.w)));
    }
    Ok(boundary_extrapolate(sys, gamma, &pts))
}

/// √(E − V(γ(t))) · dir as a field in t.
pub fn gap_root_field<'a>(
    sys: &'a PotentialSystem,
    gamma: &'a JacobiGeodesic,
    dir: Vector,
) -> impl Fn(f64) -> Result<Vector> + Sync + 'a {
    move |t: f64| {
        let st = gamma.state_at_time(sys, t.clamp(0.0, gamma.duration()))?;
        Ok(&dir * st.gap.max(0.0).sqrt())
    }
}

/// max_k |I_a(ξ, e_k)| / ‖e_k‖ over the basis fields of a uniform-in-t mesh.
pub fn null_certificate(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    a: f64,
    field: &(dyn Fn(f64) -> Result<Vector> + Sync),
    cells: usize,
) -> Result<f64> {
    let disc = discretize(sys, gamma, a, cells)?;
    let n = sys.dim;
    let lay = disc.layout();
    let rule = Rule::new(GAUSS_POINTS);
    let t_nodes = &disc.t_nodes;
    let parts: Vec<Result<[Vector; 2]>> = (0..cells)
        .into_par_iter()
        .map(|j| {
            let (t0, t1) = (t_nodes[j], t_nodes[j + 1]);
            let h = t1 - t0;
            let fd = 1e-3 * h;
            let mut acc = [Vector::zeros(n), Vector::zeros(n)];
            for (t, wq) in rule.points(t0, t1) {
                let st = gamma.state_at_time(sys, t)?;
                let k = coeffs(sys, &st.q, &st.qdot);
                let x = field(t)?;
                let f: Vec<Vector> = [-2.0, -1.0, 1.0, 2.0].iter().map(|o| field(t + o * fd)).collect::<Result<_>>()?;
                let p = (&f[0] - &f[1] * 8.0 + &f[2] * 8.0 - &f[3]) / (12.0 * fd);
                let kk = index_kernel(&k);
                let vx = &kk[0] * &x + &kk[1] * &p;
                let vp = &kk[2] * &x + &kk[3] * &p;
                let r = (t - t0) / h;
                acc[0] += (&vx * (1.0 - r) - &vp / h) * wq;
                acc[1] += (&vx * r + &vp / h) * wq;
            }
            Ok(acc)
        })
        .collect();
    let mut rhs = vec![0.0; disc.dofs()];
    for (j, part) in parts.into_iter().enumerate() {
        let part = part?;
        for (ia, v) in part.iter().enumerate() {
            let node = j + ia;
            let e = node_map(&lay, &disc.tangent, node);
            if e.ncols() == 0 {
                continue;
            }
            let local = e.transpose() * v;
            let o = lay.offset(node);
            for (r, x) in local.iter().enumerate() {
                rhs[o + r] += x;
            }
        }
    }
    Ok(rhs
        .iter()
        .enumerate()
        .map(|(k, r)| r.abs() / disc.b.get(k, k).sqrt())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct BrokenIndex {
    pub index: usize,
    pub nullity: usize,
    pub subdivision: Vec<f64>,
    pub dimension: usize,
    pub retries: usize,
    /// max |I_a(ξ, η)| / (‖ξ‖‖η‖) over sampled ξ ∈ V⁻ and bump fields η ∈ V⁺.
    pub orth_residual: f64,
    pub eigenvalues: Vec<f64>,
}

struct Transition {
    q0: Vector,
    v0: Vector,
    t0: f64,
    t1: f64,
    phi: Matrix,
    g0: Matrix,
    g1: Matrix,
}

/// Transition matrix of the (ξ, P) system over [t0, t1], with a check that
/// no Jacobi field vanishing at t0 vanishes again inside.
fn transition(sys: &PotentialSystem, gamma: &JacobiGeodesic, t0: f64, t1: f64) -> Result<Transition> {
    let n = sys.dim;
    let m = 2 * n;
    let st = gamma.state_at_time(sys, t0)?;
    let mut y0 = Vec::with_capacity(2 * n + m * m);
    y0.extend_from_slice(st.q.as_slice());
    y0.extend_from_slice(st.qdot.as_slice());
    let id = Matrix::identity(m, m);
    y0.extend_from_slice(id.as_slice());
    let rhs = move |_t: f64, y: &[f64], dy: &mut [f64]| {
        let q = Vector::from_column_slice(&y[..n]);
        let v = Vector::from_column_slice(&y[n..2 * n]);
        let k = coeffs(sys, &q, &v);
        let acc = -(&k.c * &v) - &k.grad;
        dy[..n].copy_from_slice(v.as_slice());
        dy[n..2 * n].copy_from_slice(acc.as_slice());
        for col in 0..m {
            let base = 2 * n + col * m;
            let xi = Vector::from_column_slice(&y[base..base + n]);
            let p = Vector::from_column_slice(&y[base + n..base + m]);
            let (dx, dp) = jacobi_linear(&k, &v, &xi, &p);
            dy[base..base + n].copy_from_slice(dx.as_slice());
            dy[base + n..base + m].copy_from_slice(dp.as_slice());
        }
    };
    let stops: Vec<f64> = (1..16).map(|j| t0 + (t1 - t0) * j as f64 / 16.0).collect();
    let sol = Dopri5::default().integrate(&rhs, t0, &y0, t1, &stops, &[], &|_, _| Ok(()))?;
    for (t, y) in sol.t.iter().zip(&sol.y).skip(1) {
        let phi = Matrix::from_column_slice(m, m, &y[2 * n..]);
        let b = phi.view((0, n), (n, n)).clone_owned();
        let smin = b.clone().svd(false, false).singular_values.min();
        if !(b.determinant() > 0.0) || !(smin > 0.1 * (t - t0)) {
            return Err(Error::SingularSubinterval(format!("Jacobi fields from t = {t0} degenerate near t = {t}")));
        }
    }
    let last = sol.y.last().unwrap();
    let phi = Matrix::from_column_slice(m, m, &last[2 * n..]);
    let q1 = Vector::from_column_slice(&last[..n]);
    Ok(Transition { g0: sys.metric_at(&st.q), g1: sys.metric_at(&q1), q0: st.q, v0: st.qdot, t0, t1, phi })
}

/// Blocks (K00, K01, K11) of the form X ↦ g(P,ξ)|_{t0}^{t1} on Jacobi fields
/// with end values X0, X1.
fn transition_form(tr: &Transition, n: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let p11 = tr.phi.view((0, 0), (n, n)).clone_owned();
    let p12 = tr.phi.view((0, n), (n, n)).clone_owned();
    let p21 = tr.phi.view((n, 0), (n, n)).clone_owned();
    let p22 = tr.phi.view((n, n), (n, n)).clone_owned();
    let sm = p12
        .try_inverse()
        .ok_or_else(|| Error::SingularSubinterval(format!("boundary-value problem on [{}, {}]", tr.t0, tr.t1)))?;
    let k00 = &tr.g0 * &sm * &p11;
    let k11 = &tr.g1 * &p22 * &sm;
    let k10 = (&tr.g1 * (&p21 - &p22 * &sm * &p11) - (&tr.g0 * &sm).transpose()) * 0.5;
    let sym = |m: Matrix| (&m + m.transpose()) * 0.5;
    Ok((sym(k00), k10.transpose(), sym(k11)))
}

/// Schur complement of the first-interval form onto (tangent dofs at 0,
/// values at the interval end).
fn first_interval_form(sys: &PotentialSystem, gamma: &JacobiGeodesic, t1: f64, cells: usize) -> Result<Matrix> {
    let n = sys.dim;
    let disc = assemble_nodes(sys, gamma, &uniform(t1, cells), true)?;
    let a = disc.a.to_dense();
    let d = a.nrows();
    let keep: Vec<usize> = (0..n - 1).chain(d - n..d).collect();
    let free: Vec<usize> = (n - 1..d - n).collect();
    let pick = |rows: &[usize], cols: &[usize]| Matrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])]);
    let aff = pick(&free, &free);
    let afk = pick(&free, &keep);
    let akk = pick(&keep, &keep);
    let chol = aff
        .cholesky()
        .ok_or_else(|| Error::SingularSubinterval("first interval is not positive definite".into()))?;
    let s = akk - afk.transpose() * chol.solve(&afk);
    Ok((&s + s.transpose()) * 0.5)
}

fn broken_attempt(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    sub: &[f64],
    opts: &MorseOptions,
) -> Result<(Matrix, Vec<Transition>, Vec<f64>)> {
    let n = sys.dim;
    let k = sub.len() - 1;
    let times: Vec<f64> = sub.iter().map(|&s| if s == 0.0 { Ok(0.0) } else { time_of(sys, gamma, s) }).collect::<Result<_>>()?;
    let dim = (k - 1) * n + (n - 1);
    let mut q = Matrix::zeros(dim, dim);
    let first = first_interval_form(sys, gamma, times[1], (opts.cells / 2).max(50))?;
    let w1 = if k > 1 { 2 * n - 1 } else { n - 1 };
    let f1 = first.view((0, 0), (w1, w1)).clone_owned();
    q.view_mut((0, 0), (w1, w1)).copy_from(&f1);
    let trs: Vec<Result<Transition>> = (1..k).into_par_iter().map(|i| transition(sys, gamma, times[i], times[i + 1])).collect();
    let mut out = Vec::with_capacity(k - 1);
    for (i, tr) in (1..k).zip(trs) {
        let tr = tr?;
        let (k00, k01, k11) = transition_form(&tr, n)?;
        let o0 = (n - 1) + (i - 1) * n;
        let mut add = |r: usize, c: usize, m: &Matrix| {
            let mut v = q.view_mut((r, c), (n, n));
            v += m;
        };
        add(o0, o0, &k00);
        if i + 1 < k {
            let o1 = o0 + n;
            add(o0, o1, &k01);
            add(o1, o0, &k01.transpose());
            add(o1, o1, &k11);
        }
        out.push(tr);
    }
    Ok((q, out, times))
}

fn perturbed(sub: &[f64], attempt: usize) -> Vec<f64> {
    let k = sub.len() - 1;
    let mut v = sub.to_vec();
    for i in 1..k {
        let shift = 0.01 * attempt as f64 * (sub[i + 1] - sub[i]).min(sub[i] - sub[i - 1]);
        v[i] = sub[i] - shift;
    }
    v
}

/// Default subdivision: s_1 halved until the first-interval form is positive
/// definite, the rest cut into equal pieces that are doubled until every
/// piece is free of conjugate points.
fn default_subdivision(sys: &PotentialSystem, gamma: &JacobiGeodesic, a: f64, pieces: usize, opts: &MorseOptions) -> Result<Vec<f64>> {
    let mut s1 = 0.25 * a;
    loop {
        let lam = eigenvalue_at(sys, gamma, s1, 1, (opts.cells / 2).max(50))?;
        if lam > 0.0 {
            break;
        }
        s1 *= 0.5;
        if s1 < S_MIN_FRAC * a {
            return Err(Error::SingularSubinterval("no positive first interval found".into()));
        }
    }
    let mut sub = vec![0.0, s1];
    sub.extend((1..=pieces).map(|j| s1 + (a - s1) * j as f64 / pieces as f64));
    Ok(sub)
}

pub fn broken_jacobi_index(
    sys: &PotentialSystem,
    gamma: &JacobiGeodesic,
    a: f64,
    subdivision: Option<&[f64]>,
    opts: &MorseOptions,
) -> Result<BrokenIndex> {
    check_geodesic(gamma, a)?;
    let n = sys.dim;
    let mut retries = 0;
    let mut pieces = 4;
    let mut sub = match subdivision {
        Some(s) => {
            if s.len() < 2 || s[0] != 0.0 || (s[s.len() - 1] - a).abs() > 1e-12 * a.max(1.0) || s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("subdivision must increase from 0 to a".into()));
            }
            s.to_vec()
        }
        None => default_subdivision(sys, gamma, a, pieces, opts)?,
    };
    let base = sub.clone();
    let (q, trs, times) = loop {
        match broken_attempt(sys, gamma, &sub, opts) {
            Ok(r) => break r,
            Err(Error::SingularSubinterval(msg)) => {
                if subdivision.is_none() && pieces < 256 {
                    pieces *= 2;
                    sub = default_subdivision(sys, gamma, a, pieces, opts)?;
                } else if retries < 3 {
                    retries += 1;
                    sub = perturbed(&base, retries);
                } else {
                    return Err(Error::SingularSubinterval(msg));
                }
            }
            Err(e) => return Err(e),
        }
    };
    let dimension = q.nrows();
    let eig = SymmetricEigen::new(q.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-8 * scale;
    let index = eig.eigenvalues.iter().filter(|&&l| l < -tol).count();
    let nullity = eig.eigenvalues.iter().filter(|&&l| l.abs() <= tol).count();
    let mut order: Vec<usize> = (0..dimension).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let fields: Vec<Vector> = order.iter().take(2).map(|&i| eig.eigenvectors.column(i).clone_owned()).collect();
    let orth_residual = orthogonality(sys, &trs, &times, &fields, n)?;
    Ok(BrokenIndex { index, nullity, subdivision: sub, dimension, retries, orth_residual, eigenvalues })
}

/// |I(ξ, η)| / (‖ξ‖‖η‖) on each Jacobi piece, with η = sin(mπr)e_c.
fn orthogonality(sys: &PotentialSystem, trs: &[Transition], times: &[f64], fields: &[Vector], n: usize) -> Result<f64> {
    let k = times.len() - 1;
    let rule = Rule::new(32);
    let rhs = jacobi_rhs(sys);
    let mut worst: f64 = 0.0;
    for f in fields {
        let node = |i: usize| -> Vector {
            if i == 0 || i == k {
                Vector::zeros(n)
            } else {
                let o = (n - 1) + (i - 1) * n;
                Vector::from_column_slice(&f.as_slice()[o..o + n])
            }
        };
        for (i, tr) in (1..k).zip(trs) {
            let (x0, x1) = (node(i), node(i + 1));
            let p11 = tr.phi.view((0, 0), (n, n)).clone_owned();
            let p12 = tr.phi.view((0, n), (n, n)).clone_owned();
            let p0 = p12.try_inverse().ok_or_else(|| Error::SingularSubinterval("orthogonality check".into()))? * (&x1 - &p11 * &x0);
            let (t0, t1) = (times[i], times[i + 1]);
            let pts: Vec<(f64, f64)> = rule.points(t0, t1).collect();
            let mut y0 = Vec::new();
            y0.extend_from_slice(tr.q0.as_slice());
            y0.extend_from_slice(tr.v0.as_slice());
            y0.push(0.0);
            y0.extend_from_slice(x0.as_slice());
            y0.extend_from_slice(p0.as_slice());
            let stops: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let sol = Dopri5::default().integrate(&rhs, t0, &y0, t1, &stops, &[], &|_, _| Ok(()))?;
            let mut rows = Vec::with_capacity(pts.len());
            for &(t, _) in &pts {
                let j = sol.t.iter().position(|&x| (x - t).abs() <= 1e-14 * (1.0 + t.abs())).ok_or_else(|| Error::Sampling("missing quadrature node".into()))?;
                rows.push(&sol.y[j]);
            }
            let dt = t1 - t0;
            let mut xi_norm = 0.0;
            let mut per = vec![(0.0, 0.0); 2 * n];
            for (&(t, wq), y) in pts.iter().zip(&rows) {
                let q = Vector::from_column_slice(&y[..n]);
                let v = Vector::from_column_slice(&y[n..2 * n]);
                let xi = Vector::from_column_slice(&y[2 * n + 1..3 * n + 1]);
                let p = Vector::from_column_slice(&y[3 * n + 1..4 * n + 1]);
                let kc = coeffs(sys, &q, &v);
                let (xdot, _) = jacobi_linear(&kc, &v, &xi, &p);
                let ki = index_kernel(&kc);
                let kb = gram_kernel(&kc);
                xi_norm += wq * bilinear(&kb, &xi, &xdot, &xi, &xdot);
                let r = (t - t0) / dt;
                for m in 1..=2 {
                    for c in 0..n {
                        let mut e = Vector::zeros(n);
                        e[c] = 1.0;
                        let arg = m as f64 * std::f64::consts::PI * r;
                        let eta = &e * arg.sin();
                        let eta_dot = &e * (m as f64 * std::f64::consts::PI / dt * arg.cos());
                        let slot = &mut per[(m - 1) * n + c];
                        slot.0 += wq * bilinear(&ki, &xi, &xdot, &eta, &eta_dot);
                        slot.1 += wq * bilinear(&kb, &eta, &eta_dot, &eta, &eta_dot);
                    }
                }
            }
            let xn = xi_norm.max(0.0).sqrt();
            if xn == 0.0 {
                continue;
            }
            for (iv, en) in per {
                worst = worst.max(iv.abs() / (xn * en.max(0.0).sqrt()));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobi_geodesic::boundary_start;
    use std::f64::consts::PI;

    fn harmonic(dim: usize, omega: Option<Vec<f64>>) -> PotentialSystem {
        let coeffs: Vec<serde_json::Value> = omega.map(|w| w.into_iter().map(serde_json::Value::from).collect()).unwrap_or_default();
        PotentialSystem::builtin("harmonic", dim, 0.5, &coeffs).unwrap()
    }

    fn radial(sys: &PotentialSystem, a: f64) -> JacobiGeodesic {
        let mut x0 = Vector::zeros(sys.dim);
        x0[0] = 1.0;
        boundary_start(sys, &x0, a).unwrap()
    }

    fn opts(cells: usize) -> MorseOptions {
        MorseOptions { cells, samples: 16, ..Default::default() }
    }

    #[test]
    fn assembled_matrices_are_symmetric_with_positive_gram() {
        let sys = harmonic(2, None);
        let g = radial(&sys, 0.9 * PI / 4.0);
        let d = discretize(&sys, &g, 0.5, 40).unwrap();
        let b = d.b.to_dense();
        assert!(b.clone().cholesky().is_some());
        let a = d.a.to_dense();
        assert!((&a - a.transpose()).amax() == 0.0);
    }

    #[test]
    fn transverse_eigenvalue_matches_closed_form() {
        // transverse fields decouple: λ_1 = 1 − (2 t_s / π)²
        let sys = harmonic(2, None);
        let g = radial(&sys, 0.9 * PI / 4.0);
        for &s in &[0.2, 0.5] {
            let d = discretize(&sys, &g, s, 200).unwrap();
            let ts = g.state_at_arc(&sys, s).unwrap().t;
            let want = 1.0 - (2.0 * ts / PI).powi(2);
            let got = smallest_eigenvalues(&d, 1)[0];
            assert!((got - want).abs() < 1e-3, "s={s} got {got} want {want}");
        }
    }

    #[test]
    fn index_before_and_after_centre() {
        let sys = harmonic(2, None);
        let g = radial(&sys, 0.9 * PI / 4.0);
        let o = opts(200);
        let s_star = PI / 8.0;
        assert_eq!(index_at(&sys, &g, 0.5 * s_star, &o).unwrap().index, 0);
        let c = index_at(&sys, &g, 1.05 * s_star, &o).unwrap();
        assert_eq!((c.index, c.nullity), (1, 0));
    }

    #[test]
    fn conjugate_point_of_2d_harmonic() {
        let sys = harmonic(2, None);
        let a = 0.9 * PI / 4.0;
        let g = radial(&sys, a);
        let st = conjugate_points(&sys, &g, a, &opts(200)).unwrap();
        assert_eq!(st.conjugate.len(), 1);
        let c = st.conjugate[0];
        assert_eq!(c.multiplicity, 1);
        assert!((c.s - PI / 8.0).abs() < 1e-3, "{}", c.s);
        assert!(st.consistent && st.monotone);
    }

    #[test]
    fn hessian_matches_assembled_form() {
        let sys = harmonic(2, None);
        let g = radial(&sys, 0.9 * PI / 4.0);
        let d = discretize(&sys, &g, 0.6, 60).unwrap();
        let c: Vec<f64> = (0..d.dofs()).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let fe = d.field(&c);
        let f = move |t: f64| Ok(fe.eval(t));
        let h = hessian_quadratic(&sys, &g, &f, &d.s_nodes).unwrap();
        let q = d.a.quad(&c, &c);
        assert!((h - q).abs() < 1e-6 * (1.0 + q.abs()), "{h} vs {q}");
    }

    #[test]
    fn velocity_field_solves_the_jacobi_equation() {
        let sys = harmonic(2, None);
        let a = 0.9 * PI / 4.0;
        let g = radial(&sys, a);
        let field = |t: f64| {
            let st = g.state_at_time(&sys, t)?;
            Ok(&st.qdot / st.gap)
        };
        let t0 = g.state_at_arc(&sys, 0.05).unwrap().t;
        let t1 = g.state_at_arc(&sys, 0.7).unwrap().t;
        let nodes: Vec<f64> = (0..=10).map(|j| t0 + (t1 - t0) * j as f64 / 10.0).collect();
        let r = jacobi_residual(&sys, &g, &field, &nodes, 1e-3).unwrap();
        let worst = r.iter().map(|x| x.relative).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn zero_data_shoots_zero_field() {
        let sys = harmonic(2, None);
        let g = radial(&sys, 0.7);
        let z = Vector::zeros(2);
        let sol = jacobi_field_shoot(&sys, &g, 0.01, &z, &z, 0.6).unwrap();
        assert!(sol.xi.iter().all(|x| x.norm() == 0.0));
        assert_eq!(null_boundary_check(&sys, &g, &sol).residual, 0.0);
    }

    #[test]
    fn broken_index_agrees_with_eigencount() {
        let sys = harmonic(2, None);
        let a = 0.9 * PI / 4.0;
        let g = radial(&sys, a);
        let b = broken_jacobi_index(&sys, &g, a, None, &opts(200)).unwrap();
        assert_eq!((b.index, b.nullity), (1, 0));
        assert!(b.orth_residual < TOL_ORTH, "{}", b.orth_residual);
        let b = broken_jacobi_index(&sys, &g, 0.3, None, &opts(200)).unwrap();
        assert_eq!((b.index, b.nullity), (0, 0));
    }
}
