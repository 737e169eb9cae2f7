//! Gauss–Legendre rules.

/// Nodes and weights on [-1, 1], computed by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// A rule mapped onto [a, b].
#[derive(Debug, Clone)]
pub struct Rule {
    x: Vec<f64>,
    w: Vec<f64>,
}

impl Rule {
    pub fn new(n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        Rule { x, w }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// (point, weight) pairs on [a, b].
    pub fn points(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
        self.x.iter().zip(&self.w).map(move |(x, w)| (m + r * x, r * w))
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.points(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_high_degree() {
        for n in [1usize, 2, 4, 8] {
            let r = Rule::new(n);
            let deg = 2 * n - 1;
            let got = r.integrate(0.0, 2.0, |x| x.powi(deg as i32));
            let want = 2f64.powi(deg as i32 + 1) / (deg as f64 + 1.0);
            assert!((got - want).abs() < 1e-12 * want, "n={n}");
        }
    }
}
