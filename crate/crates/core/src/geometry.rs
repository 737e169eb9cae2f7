//! Pointwise geometry of a potential well: metric, connection, curvature,
//! potential derivatives, energy and projection onto the level set V = E.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub const TOL_PROJ: f64 = 1e-10;
pub const PROJ_MAX_ITER: usize = 50;

/// Scalar potential with coordinate derivatives.
pub trait Potential: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, q: &Vector) -> f64;
    /// Coordinate differential ∂V/∂q.
    fn differential(&self, q: &Vector) -> Vector;
    /// Matrix of second partials ∂²V/∂q∂q.
    fn second_partials(&self, q: &Vector) -> Matrix;
    fn name(&self) -> String;
}

pub trait Metric: Send + Sync + fmt::Debug {
    fn matrix(&self, q: &Vector) -> Matrix;
    /// Constant metrics skip all connection and curvature computations.
    fn is_flat(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Euclidean {
    pub dim: usize,
}

impl Metric for Euclidean {
    fn matrix(&self, _q: &Vector) -> Matrix {
        Matrix::identity(self.dim, self.dim)
    }
    fn is_flat(&self) -> bool {
        true
    }
}

/// Metric given by a closure, for curved test geometries.
#[derive(Clone)]
pub struct FnMetric {
    pub name: String,
    pub f: Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>,
}

impl fmt::Debug for FnMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnMetric({})", self.name)
    }
}

impl Metric for FnMetric {
    fn matrix(&self, q: &Vector) -> Matrix {
        (self.f)(q)
    }
}

/// V = ½ Σ ω_i² q_i². The isotropic well has all ω_i = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Harmonic {
    pub omega: Vec<f64>,
}

impl Harmonic {
    pub fn isotropic(dim: usize) -> Self {
        Harmonic { omega: vec![1.0; dim] }
    }
}

impl Potential for Harmonic {
    fn dim(&self) -> usize {
        self.omega.len()
    }
    fn value(&self, q: &Vector) -> f64 {
        0.5 * self.omega.iter().zip(q.iter()).map(|(w, x)| w * w * x * x).sum::<f64>()
    }
    fn differential(&self, q: &Vector) -> Vector {
        Vector::from_iterator(q.len(), self.omega.iter().zip(q.iter()).map(|(w, x)| w * w * x))
    }
    fn second_partials(&self, _q: &Vector) -> Matrix {
        Matrix::from_diagonal(&Vector::from_iterator(self.omega.len(), self.omega.iter().map(|w| w * w)))
    }
    fn name(&self) -> String {
        if self.omega.iter().all(|&w| w == 1.0) {
            "harmonic".into()
        } else {
            "anisotropic".into()
        }
    }
}

/// V = (q_1² − 1)² + c Σ_{i≥2} q_i².
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleWell {
    pub dim: usize,
    pub transverse: f64,
}

impl Potential for DoubleWell {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, q: &Vector) -> f64 {
        let a = q[0] * q[0] - 1.0;
        a * a + self.transverse * q.iter().skip(1).map(|x| x * x).sum::<f64>()
    }
    fn differential(&self, q: &Vector) -> Vector {
        let mut d = q.map(|x| 2.0 * self.transverse * x);
        d[0] = 4.0 * q[0] * (q[0] * q[0] - 1.0);
        d
    }
    fn second_partials(&self, q: &Vector) -> Matrix {
        let mut h = Matrix::identity(self.dim, self.dim) * (2.0 * self.transverse);
        h[(0, 0)] = 12.0 * q[0] * q[0] - 4.0;
        h
    }
    fn name(&self) -> String {
        "double-well".into()
    }
}

/// Σ_k c_k Π_i q_i^{p_ki}.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub dim: usize,
    pub terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    /// Terms given as rows `[c, p_1, …, p_N]`.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut terms = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() != dim + 1 {
                return Err(Error::Config(format!("polynomial term {:?} needs {} entries", r, dim + 1)));
            }
            let mut pows = Vec::with_capacity(dim);
            for &p in &r[1..] {
                if p < 0.0 || p.fract() != 0.0 {
                    return Err(Error::Config(format!("exponent {p} is not a non-negative integer")));
                }
                pows.push(p as u32);
            }
            terms.push((r[0], pows));
        }
        Ok(Polynomial { dim, terms })
    }
}

fn ipow(x: f64, p: u32) -> f64 {
    if p == 0 {
        1.0
    } else {
        x.powi(p as i32)
    }
}

impl Potential for Polynomial {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, q: &Vector) -> f64 {
        self.terms.iter().map(|(c, p)| c * p.iter().enumerate().map(|(i, &e)| ipow(q[i], e)).product::<f64>()).sum()
    }
    fn differential(&self, q: &Vector) -> Vector {
        let mut d = Vector::zeros(self.dim);
        for (c, p) in &self.terms {
            for j in 0..self.dim {
                if p[j] == 0 {
                    continue;
                }
                let mut m = c * p[j] as f64;
                for (i, &e) in p.iter().enumerate() {
                    m *= if i == j { ipow(q[i], e - 1) } else { ipow(q[i], e) };
                }
                d[j] += m;
            }
        }
        d
    }
    fn second_partials(&self, q: &Vector) -> Matrix {
        let n = self.dim;
        let mut h = Matrix::zeros(n, n);
        for (c, p) in &self.terms {
            for j in 0..n {
                for k in j..n {
                    let mut e = p.clone();
                    let mut m = *c;
                    for idx in [j, k] {
                        if e[idx] == 0 {
                            m = 0.0;
                            break;
                        }
                        m *= e[idx] as f64;
                        e[idx] -= 1;
                    }
                    if m == 0.0 {
                        continue;
                    }
                    m *= e.iter().enumerate().map(|(i, &ei)| ipow(q[i], ei)).product::<f64>();
                    h[(j, k)] += m;
                    if j != k {
                        h[(k, j)] += m;
                    }
                }
            }
        }
        h
    }
    fn name(&self) -> String {
        "polynomial".into()
    }
}

/// Christoffel symbols Γ^k_{ij}, stored as `data[k·n² + i·n + j]`.
#[derive(Debug, Clone)]
pub struct Christoffel {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel { n, data: vec![0.0; n * n * n] }
    }
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[k * self.n * self.n + i * self.n + j]
    }
    /// Γ(u, v)^k = Γ^k_{ij} u^i v^j.
    pub fn contract(&self, u: &Vector, v: &Vector) -> Vector {
        let n = self.n;
        Vector::from_fn(n, |k, _| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += self.get(k, i, j) * u[i] * v[j];
                }
            }
            acc
        })
    }
    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

/// Curvature components R^l_{ijk}, R(∂_i, ∂_j)∂_k = R^l_{ijk} ∂_l, with
/// R(X,Y)Z = ∇_X∇_Y Z − ∇_Y∇_X Z − ∇_{[X,Y]}Z.
#[derive(Debug, Clone)]
pub struct Riemann {
    pub n: usize,
    pub data: Vec<f64>,
    pub metric: Matrix,
}

impl Riemann {
    #[inline]
    fn get(&self, l: usize, i: usize, j: usize, k: usize) -> f64 {
        let n = self.n;
        self.data[((l * n + i) * n + j) * n + k]
    }
    /// Vector R(X, Y)Z.
    pub fn apply(&self, x: &Vector, y: &Vector, z: &Vector) -> Vector {
        let n = self.n;
        Vector::from_fn(n, |l, _| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let xy = x[i] * y[j];
                    if xy == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        acc += self.get(l, i, j, k) * xy * z[k];
                    }
                }
            }
            acc
        })
    }
    /// g(R(X,Y)Z, W).
    pub fn quadratic(&self, x: &Vector, y: &Vector, z: &Vector, w: &Vector) -> f64 {
        (self.metric.clone() * self.apply(x, y, z)).dot(w)
    }
    /// Matrix M with M_ab = g(R(v, e_a)v, e_b).
    pub fn jacobi_operator(&self, v: &Vector) -> Matrix {
        let n = self.n;
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            let mut ea = Vector::zeros(n);
            ea[a] = 1.0;
            let r = &self.metric * self.apply(v, &ea, v);
            for b in 0..n {
                m[(a, b)] = r[b];
            }
        }
        m
    }
}

/// The tuple (g, V, E, N) with a bounding box for the well and the width of
/// the band |V − E| < ε_reg in which E is required to be regular.
#[derive(Clone)]
pub struct PotentialSystem {
    pub dim: usize,
    pub metric: Arc<dyn Metric>,
    pub potential: Arc<dyn Potential>,
    pub energy: f64,
    pub domain_box: Vec<[f64; 2]>,
    pub reg_band: f64,
}

impl fmt::Debug for PotentialSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialSystem")
            .field("dim", &self.dim)
            .field("potential", &self.potential)
            .field("metric", &self.metric)
            .field("energy", &self.energy)
            .field("domain_box", &self.domain_box)
            .finish()
    }
}

pub fn default_reg_band(energy: f64) -> f64 {
    0.2 * energy.abs() + 0.05
}

/// Portable description of a potential well.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PotentialSpec {
    pub name: String,
    pub dim: usize,
    pub kind: String,
    #[serde(default)]
    pub coefficients: Vec<serde_json::Value>,
    pub energy: f64,
    #[serde(rename = "box", default)]
    pub domain_box: Option<Vec<[f64; 2]>>,
}

impl PotentialSystem {
    pub fn new(potential: Arc<dyn Potential>, energy: f64, domain_box: Vec<[f64; 2]>) -> Result<Self> {
        let dim = potential.dim();
        Self::with_metric(potential, Arc::new(Euclidean { dim }), energy, domain_box)
    }

    pub fn with_metric(
        potential: Arc<dyn Potential>,
        metric: Arc<dyn Metric>,
        energy: f64,
        domain_box: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let dim = potential.dim();
        if dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if domain_box.len() != dim || domain_box.iter().any(|b| !(b[0] < b[1])) {
            return Err(Error::Config(format!("domain box must have {dim} increasing intervals")));
        }
        if !energy.is_finite() {
            return Err(Error::Config("energy must be finite".into()));
        }
        Ok(PotentialSystem { dim, metric, potential, energy, domain_box, reg_band: default_reg_band(energy) })
    }

    /// Builtins: `harmonic`, `anisotropic` (coefficients ω, default ω_i = i),
    /// `double-well` (coefficient c, default 1), `polynomial` (rows [c, p…]).
    pub fn builtin(name: &str, dim: usize, energy: f64, coefficients: &[serde_json::Value]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        let nums = || -> Result<Vec<f64>> {
            coefficients
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| Error::Config(format!("coefficient {v} is not a number"))))
                .collect()
        };
        match name {
            "isotropic" => {
                if !coefficients.is_empty() {
                    return Err(Error::Config("isotropic takes no coefficients".into()));
                }
                let p = Harmonic::isotropic(dim);
                let r = (2.0 * energy.max(0.0)).sqrt() * 1.5 + 0.5;
                Self::new(Arc::new(p), energy, vec![[-r, r]; dim])
            }
            "harmonic" | "anisotropic" => {
                let mut omega = nums()?;
                if omega.is_empty() {
                    omega = if name == "harmonic" { vec![1.0; dim] } else { (1..=dim).map(|i| i as f64).collect() };
                }
                if omega.len() != dim || omega.iter().any(|&w| w <= 0.0) {
                    return Err(Error::Config(format!("anisotropic needs {dim} positive frequencies")));
                }
                let r = (2.0 * energy.max(0.0)).sqrt() / omega.iter().cloned().fold(f64::INFINITY, f64::min);
                let r = 1.5 * r + 0.5;
                Self::new(Arc::new(Harmonic { omega }), energy, vec![[-r, r]; dim])
            }
            "double-well" | "double_well" | "doublewell" => {
                let c = nums()?.first().copied().unwrap_or(1.0);
                if c <= 0.0 {
                    return Err(Error::Config("double-well transverse stiffness must be positive".into()));
                }
                let r1 = (1.0 + energy.max(0.0).sqrt()).sqrt() * 1.3 + 0.3;
                let rt = (energy.max(0.0) / c).sqrt() * 1.5 + 0.5;
                let mut bx = vec![[-rt, rt]; dim];
                bx[0] = [-r1, r1];
                Self::new(Arc::new(DoubleWell { dim, transverse: c }), energy, bx)
            }
            "polynomial" => {
                let rows: Vec<Vec<f64>> = coefficients
                    .iter()
                    .map(|row| {
                        row.as_array()
                            .ok_or_else(|| Error::Config("polynomial terms must be arrays".into()))?
                            .iter()
                            .map(|x| x.as_f64().ok_or_else(|| Error::Config("non-numeric polynomial entry".into())))
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()?;
                if rows.is_empty() {
                    return Err(Error::Config("polynomial needs at least one term".into()));
                }
                Self::new(Arc::new(Polynomial::from_rows(dim, &rows)?), energy, vec![[-10.0, 10.0]; dim])
            }
            other => Err(Error::Config(format!("unknown potential '{other}'"))),
        }
    }

    pub fn from_spec(spec: &PotentialSpec) -> Result<Self> {
        let name = match spec.kind.as_str() {
            "polynomial" => "polynomial",
            "builtin" => spec.name.as_str(),
            k => return Err(Error::Config(format!("unknown potential kind '{k}'"))),
        };
        let mut sys = Self::builtin(name, spec.dim, spec.energy, &spec.coefficients)?;
        if let Some(b) = &spec.domain_box {
            if b.len() != spec.dim || b.iter().any(|iv| !(iv[0] < iv[1])) {
                return Err(Error::Config("box must list one increasing interval per dimension".into()));
            }
            sys.domain_box = b.clone();
        }
        Ok(sys)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let spec: PotentialSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_spec(&spec)
    }

    pub fn in_box(&self, q: &Vector) -> bool {
        q.iter().zip(&self.domain_box).all(|(x, b)| *x >= b[0] && *x <= b[1])
    }

    pub fn check_domain(&self, q: &Vector) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::Domain(format!("expected {} coordinates, got {}", self.dim, q.len())));
        }
        if !q.iter().all(|x| x.is_finite()) || !self.in_box(q) {
            return Err(Error::Domain(format!("q = {:?} outside domain box", q.as_slice())));
        }
        Ok(())
    }

    pub fn metric_at(&self, q: &Vector) -> Matrix {
        self.metric.matrix(q)
    }

    pub fn inner(&self, q: &Vector, u: &Vector, v: &Vector) -> f64 {
        if self.metric.is_flat() {
            return u.dot(v);
        }
        (self.metric.matrix(q) * v).dot(u)
    }

    pub fn norm(&self, q: &Vector, v: &Vector) -> f64 {
        self.inner(q, v, v).max(0.0).sqrt()
    }

    pub fn potential_value(&self, q: &Vector) -> f64 {
        self.potential.value(q)
    }

    /// E − V(q).
    pub fn gap(&self, q: &Vector) -> f64 {
        self.energy - self.potential.value(q)
    }

    pub fn differential(&self, q: &Vector) -> Vector {
        self.potential.differential(q)
    }

    /// Metric gradient ∇V = g⁻¹ dV.
    pub fn grad(&self, q: &Vector) -> Vector {
        let dv = self.potential.differential(q);
        if self.metric.is_flat() {
            return self.metric.matrix(q).cholesky().map(|c| c.solve(&dv)).unwrap_or(dv);
        }
        let g = self.metric.matrix(q);
        g.cholesky().expect("metric must be positive definite").solve(&dv)
    }

    /// Smallest eigenvalue of g(q).
    pub fn metric_min_eigenvalue(&self, q: &Vector) -> f64 {
        self.metric.matrix(q).symmetric_eigenvalues().min()
    }

    fn fd_step(q: &Vector, scale: f64) -> f64 {
        scale * (1.0 + q.norm())
    }

    /// Central-difference Christoffel symbols with step 1e-5·(1 + |q|).
    pub fn christoffel(&self, q: &Vector) -> Result<Christoffel> {
        self.check_domain(q)?;
        Ok(self.christoffel_unchecked(q))
    }

    pub(crate) fn christoffel_unchecked(&self, q: &Vector) -> Christoffel {
        let n = self.dim;
        if self.metric.is_flat() {
            return Christoffel::zeros(n);
        }
        let h = Self::fd_step(q, 1e-5);
        // dg[l] = ∂_l g
        let dg: Vec<Matrix> = (0..n)
            .map(|l| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[l] += h;
                qm[l] -= h;
                (self.metric.matrix(&qp) - self.metric.matrix(&qm)) / (2.0 * h)
            })
            .collect();
        let ginv = self.metric.matrix(q).try_inverse().expect("metric must be invertible");
        let mut c = Christoffel::zeros(n);
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += ginv[(k, l)] * (dg[i][(l, j)] + dg[j][(l, i)] - dg[l][(i, j)]);
                    }
                    c.data[k * n * n + i * n + j] = 0.5 * acc;
                    c.data[k * n * n + j * n + i] = 0.5 * acc;
                }
            }
        }
        c
    }

    /// Curvature from central differences (step 1e-3·(1 + |q|)) of the Christoffel symbols.
    pub fn riemann(&self, q: &Vector) -> Result<Riemann> {
        self.check_domain(q)?;
        Ok(self.riemann_unchecked(q))
    }

    pub(crate) fn riemann_unchecked(&self, q: &Vector) -> Riemann {
        let n = self.dim;
        let metric = self.metric.matrix(q);
        if self.metric.is_flat() {
            return Riemann { n, data: vec![0.0; n * n * n * n], metric };
        }
        let h = Self::fd_step(q, 1e-3);
        let gam = self.christoffel_unchecked(q);
        let dgam: Vec<Christoffel> = (0..n)
            .map(|m| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[m] += h;
                qm[m] -= h;
                let (a, b) = (self.christoffel_unchecked(&qp), self.christoffel_unchecked(&qm));
                Christoffel { n, data: a.data.iter().zip(&b.data).map(|(x, y)| (x - y) / (2.0 * h)).collect() }
            })
            .collect();
        let mut data = vec![0.0; n * n * n * n];
        for l in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut r = dgam[i].get(l, j, k) - dgam[j].get(l, i, k);
                        for m in 0..n {
                            r += gam.get(l, i, m) * gam.get(m, j, k) - gam.get(l, j, m) * gam.get(m, i, k);
                        }
                        data[((l * n + i) * n + j) * n + k] = r;
                    }
                }
            }
        }
        Riemann { n, data, metric }
    }

    /// g(R(X,Y)Z, W).
    pub fn riemann_quadratic(&self, q: &Vector, x: &Vector, y: &Vector, z: &Vector, w: &Vector) -> Result<f64> {
        Ok(self.riemann(q)?.quadratic(x, y, z, w))
    }

    /// Covariant Hessian H^V_ij = ∂_i∂_j V − Γ^k_ij ∂_k V as a coordinate matrix.
    pub fn hessian(&self, q: &Vector) -> Matrix {
        let mut h = self.potential.second_partials(q);
        if !self.metric.is_flat() {
            let dv = self.potential.differential(q);
            let c = self.christoffel_unchecked(q);
            let n = self.dim;
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] -= (0..n).map(|k| c.get(k, i, j) * dv[k]).sum::<f64>();
                }
            }
        }
        h
    }

    /// ½ g(v, v) + V(q).
    pub fn energy_of(&self, q: &Vector, v: &Vector) -> f64 {
        0.5 * self.inner(q, v, v) + self.potential.value(q)
    }

    /// Newton iteration along ∇V onto V = E.
    pub fn project_to_boundary(&self, q: &Vector) -> Result<Vector> {
        self.check_domain(q)?;
        let r0 = self.potential.value(q) - self.energy;
        if r0.abs() >= self.reg_band {
            return Err(Error::Domain(format!("|V(q) − E| = {:.3e} outside the regular band {:.3e}", r0.abs(), self.reg_band)));
        }
        let mut x = q.clone();
        let mut r = r0;
        for it in 0..=PROJ_MAX_ITER {
            if r.abs() <= TOL_PROJ {
                return Ok(x);
            }
            if it == PROJ_MAX_ITER {
                break;
            }
            let gv = self.grad(&x);
            let dv = self.potential.differential(&x);
            let den = dv.dot(&gv);
            if !(den > 0.0) {
                return Err(Error::Domain(format!("critical point of V near {:?}", x.as_slice())));
            }
            x -= gv * (r / den);
            self.check_domain(&x)?;
            r = self.potential.value(&x) - self.energy;
        }
        Err(Error::Projection { iterations: PROJ_MAX_ITER, residual: r.abs() })
    }

    /// g-orthonormal basis of T_x V^{-1}(E) as matrix columns (N × (N−1)).
    pub fn tangent_basis(&self, x: &Vector) -> Matrix {
        let n = self.dim;
        let g = self.metric.matrix(x);
        let nrm = {
            let gv = self.grad(x);
            let l = (g.clone() * &gv).dot(&gv).sqrt();
            gv / l
        };
        let mut basis: Vec<Vector> = Vec::with_capacity(n - 1);
        let mut cands: Vec<Vector> = (0..n).map(|i| Vector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })).collect();
        // largest component of the normal goes last so the remaining axes span the tangent space well
        let imax = nrm.iamax();
        cands.swap(imax, n - 1);
        for c in cands.into_iter() {
            if basis.len() == n - 1 {
                break;
            }
            let mut v = c.clone();
            let p = (g.clone() * &nrm).dot(&v);
            v -= &nrm * p;
            for b in &basis {
                let p = (g.clone() * b).dot(&v);
                v -= b * p;
            }
            let l = (g.clone() * &v).dot(&v).sqrt();
            if l > 1e-8 {
                basis.push(v / l);
            }
        }
        let mut m = Matrix::zeros(n, n - 1);
        for (k, b) in basis.iter().enumerate() {
            m.set_column(k, b);
        }
        m
    }

    /// Boundary point along the ray from `from` in direction `dir`, or None if
    /// the ray leaves the box first.
    pub fn ray_to_boundary(&self, from: &Vector, dir: &Vector) -> Option<Vector> {
        let d = dir.normalize();
        if self.gap(from) <= 0.0 {
            return None;
        }
        let mut hi = 0.0;
        let step = self.domain_box.iter().map(|b| b[1] - b[0]).fold(0.0, f64::max) / 200.0;
        let mut lo;
        loop {
            lo = hi;
            hi += step;
            let p = from + &d * hi;
            if !self.in_box(&p) {
                return None;
            }
            if self.gap(&p) <= 0.0 {
                break;
            }
        }
        let f = |r: f64| self.gap(&(from + &d * r));
        let r = crate::numerics::roots::brent(f, lo, hi, 1e-14, 200)?;
        let p = from + &d * r;
        self.project_to_boundary(&p).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sys_metric(f: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> PotentialSystem {
        PotentialSystem::with_metric(
            Arc::new(Harmonic::isotropic(2)),
            Arc::new(FnMetric { name: "test".into(), f: Arc::new(f) }),
            0.5,
            vec![[-3.0, 3.0]; 2],
        )
        .unwrap()
    }

    #[test]
    fn euclidean_christoffel_vanishes() {
        let s = PotentialSystem::builtin("harmonic", 3, 0.5, &[]).unwrap();
        let c = s.christoffel(&Vector::from_vec(vec![0.1, 0.2, -0.3])).unwrap();
        assert!(c.is_zero());
    }

    #[test]
    fn exponential_metric_christoffel() {
        // g = diag(e^{2x}, 1): Γ^1_11 = 1 exactly, everything else zero
        let s = sys_metric(|q| Matrix::from_diagonal(&Vector::from_vec(vec![(2.0 * q[0]).exp(), 1.0])));
        let c = s.christoffel(&Vector::from_vec(vec![0.3, 0.0])).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let want = if (k, i, j) == (0, 0, 0) { 1.0 } else { 0.0 };
                    assert!((c.get(k, i, j) - want).abs() < 1e-8, "{k}{i}{j}: {}", c.get(k, i, j));
                }
            }
        }
    }

    #[test]
    fn quadratic_metric_christoffel_at_origin() {
        let s = sys_metric(|q| Matrix::from_diagonal(&Vector::from_vec(vec![1.0 + q[0] * q[0], 1.0])));
        let c = s.christoffel(&Vector::zeros(2)).unwrap();
        assert!(c.data.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn sphere_has_unit_curvature() {
        // chart (θ, φ) with g = diag(1, sin²θ)
        let s = sys_metric(|q| Matrix::from_diagonal(&Vector::from_vec(vec![1.0, q[0].sin().powi(2)])));
        let q = Vector::from_vec(vec![0.9, 0.4]);
        let x = Vector::from_vec(vec![1.0, 0.0]);
        let y = Vector::from_vec(vec![0.0, 1.0 / q[0].sin()]);
        let k = s.riemann_quadratic(&q, &x, &y, &y, &x).unwrap();
        assert!((k - 1.0).abs() < 1e-4, "K = {k}");
        let anti = s.riemann_quadratic(&q, &x, &x, &y, &x).unwrap();
        assert!(anti.abs() < 1e-6);
    }

    #[test]
    fn christoffel_outside_box_is_domain_error() {
        let s = PotentialSystem::builtin("harmonic", 2, 0.5, &[]).unwrap();
        assert!(matches!(s.christoffel(&Vector::from_vec(vec![100.0, 0.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn energy_examples() {
        let s = PotentialSystem::builtin("harmonic", 1, 0.5, &[]).unwrap();
        let one = Vector::from_vec(vec![1.0]);
        let zero = Vector::from_vec(vec![0.0]);
        assert_eq!(s.energy_of(&one, &zero), 0.5);
        assert_eq!(s.energy_of(&zero, &one), 0.5);
        let q = Vector::from_vec(vec![0.7]);
        assert_eq!(s.energy_of(&q, &zero), s.potential_value(&q));
    }

    #[test]
    fn projection_examples() {
        let s = PotentialSystem::builtin("harmonic", 1, 0.5, &[]).unwrap();
        let p = s.project_to_boundary(&Vector::from_vec(vec![0.9])).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-10);
        let on = Vector::from_vec(vec![1.0]);
        assert_eq!(s.project_to_boundary(&on).unwrap(), on);
        let s2 = PotentialSystem::builtin("harmonic", 2, 0.5, &[]).unwrap();
        let q = Vector::from_vec(vec![0.6, 0.6]);
        let p = s2.project_to_boundary(&q).unwrap();
        let want = &q / q.norm();
        assert!((p - want).norm() < 1e-10);
        assert!(matches!(s.project_to_boundary(&Vector::from_vec(vec![0.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn polynomial_spec_roundtrip() {
        let js = r#"{"name":"quartic","dim":2,"kind":"polynomial","coefficients":[[0.5,2,0],[1.5,0,2],[0.1,2,2]],"energy":0.4,"box":[[-3,3],[-3,3]]}"#;
        let spec: PotentialSpec = serde_json::from_str(js).unwrap();
        let s = PotentialSystem::from_spec(&spec).unwrap();
        let q = Vector::from_vec(vec![0.3, -0.2]);
        let want = 0.5 * 0.09 + 1.5 * 0.04 + 0.1 * 0.09 * 0.04;
        assert!((s.potential_value(&q) - want).abs() < 1e-15);
        assert_eq!(s.domain_box, vec![[-3.0, 3.0]; 2]);
    }

    #[test]
    fn tangent_basis_is_orthonormal_and_tangent() {
        let s = PotentialSystem::builtin("anisotropic", 3, 0.5, &[]).unwrap();
        let x = s.project_to_boundary(&Vector::from_vec(vec![0.5, 0.3, 0.15])).unwrap();
        let t = s.tangent_basis(&x);
        let dv = s.differential(&x);
        for a in 0..2 {
            assert!(dv.dot(&t.column(a).into_owned()).abs() < 1e-12);
            for b in 0..2 {
                let ip = t.column(a).dot(&t.column(b));
                assert!((ip - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
