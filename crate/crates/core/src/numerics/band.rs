//! Symmetric band matrices: LDLᵀ inertia (Sturm counts) and solves.

use nalgebra::DMatrix;

/// Lower band storage: entry (i, j) with i − kd ≤ j ≤ i.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    kd: usize,
    data: Vec<f64>,
}

/// Result of an LDLᵀ sweep: negative, zero-ish and positive pivot counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

impl SymBand {
    pub fn zeros(n: usize, kd: usize) -> Self {
        SymBand { n, kd, data: vec![0.0; n * (kd + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.kd
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.kd, "entry outside band");
        i * (self.kd + 1) + (i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        if a - b > self.kd {
            return 0.0;
        }
        self.data[self.idx(i, j)]
    }

    /// Adds `v` to the symmetric pair (i, j)/(j, i) (once on the diagonal).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn axpy(&mut self, alpha: f64, other: &SymBand) {
        assert_eq!((self.n, self.kd), (other.n, other.kd));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kd);
            for j in lo..=i {
                let a = self.data[i * (self.kd + 1) + (i - j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn quad(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// LDLᵀ factorization without pivoting. Pivots smaller than
    /// `guard · max|a|` are replaced by ±guard·max|a| and counted as zero.
    pub fn ldlt(&self, guard: f64) -> (SymBand, Vec<f64>, Inertia) {
        let n = self.n;
        let kd = self.kd;
        let floor = guard * self.max_abs().max(f64::MIN_POSITIVE);
        let mut l = self.clone();
        let mut d = vec![0.0; n];
        let mut inertia = Inertia { negative: 0, zero: 0, positive: 0 };
        // work[k] = L(j, k) * d[k] for the active row j
        let mut work = vec![0.0; kd + 1];
        for j in 0..n {
            let lo = j.saturating_sub(kd);
            let mut djj = l.data[j * (kd + 1)];
            for k in lo..j {
                let ljk = l.data[j * (kd + 1) + (j - k)];
                work[j - k] = ljk * d[k];
                djj -= ljk * work[j - k];
            }
            if djj.abs() < floor {
                inertia.zero += 1;
                djj = if djj < 0.0 { -floor } else { floor };
            } else if djj < 0.0 {
                inertia.negative += 1;
            } else {
                inertia.positive += 1;
            }
            d[j] = djj;
            l.data[j * (kd + 1)] = 1.0;
            let hi = (j + kd).min(n - 1);
            for i in (j + 1)..=hi {
                let mut aij = l.data[i * (kd + 1) + (i - j)];
                let lo_i = i.saturating_sub(kd).max(lo);
                for k in lo_i..j {
                    aij -= l.data[i * (kd + 1) + (i - k)] * work[j - k];
                }
                l.data[i * (kd + 1) + (i - j)] = aij / djj;
            }
        }
        (l, d, inertia)
    }

    /// Number of eigenvalues of the pencil (self, b) strictly below `sigma`,
    /// valid when `b` is positive definite (Sylvester's law of inertia).
    pub fn count_below(&self, b: &SymBand, sigma: f64) -> Inertia {
        let mut m = self.clone();
        m.axpy(-sigma, b);
        m.ldlt(1e-14).2
    }

    /// Solves self · x = rhs using the LDLᵀ factors.
    pub fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let (l, d, inertia) = self.ldlt(1e-15);
        if inertia.zero > 0 {
            return None;
        }
        let n = self.n;
        let kd = self.kd;
        let mut x = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(kd);
            for k in lo..i {
                x[i] -= l.data[i * (kd + 1) + (i - k)] * x[k];
            }
        }
        for i in 0..n {
            x[i] /= d[i];
        }
        for i in (0..n).rev() {
            let hi = (i + kd).min(n - 1);
            for k in (i + 1)..=hi {
                x[i] -= l.data[k * (kd + 1) + (k - i)] * x[k];
            }
        }
        Some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    fn tridiag(n: usize, diag: f64, off: f64) -> SymBand {
        let mut a = SymBand::zeros(n, 1);
        for i in 0..n {
            a.set(i, i, diag);
            if i > 0 {
                a.set(i, i - 1, off);
            }
        }
        a
    }

    #[test]
    fn inertia_matches_dense_eigenvalues() {
        let n = 30;
        let a = tridiag(n, 2.0, -1.0);
        let mut b = SymBand::zeros(n, 1);
        for i in 0..n {
            b.set(i, i, 1.0);
        }
        let eig = SymmetricEigen::new(a.to_dense()).eigenvalues;
        for sigma in [0.1, 0.5, 1.0, 2.0, 3.3] {
            let want = eig.iter().filter(|&&l| l < sigma).count();
            assert_eq!(a.count_below(&b, sigma).negative, want);
        }
    }

    #[test]
    fn solve_recovers_vector() {
        let a = tridiag(12, 4.0, 1.0);
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let rhs = a.mul_vec(&x);
        let got = a.solve(&rhs).unwrap();
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
