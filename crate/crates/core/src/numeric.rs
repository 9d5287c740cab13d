//! Small numerical helpers: Gauss-Legendre rules and the modified Bessel function I₀.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Integral of `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Mean of `f` over `[a, b]`; the point value when `a == b`.
    pub fn mean<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        if a == b {
            return f(a);
        }
        self.integrate(a, b, f) / (b - a)
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Modified Bessel function of the first kind, order zero.
pub fn bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < 30.0 {
        // sum (x²/4)^k / (k!)²
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum
    } else {
        // asymptotic expansion
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..12 {
            let kf = k as f64;
            term *= (2.0 * kf - 1.0).powi(2) / (8.0 * kf * x);
            sum += term;
        }
        x.exp() / (2.0 * PI * x).sqrt() * sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_polynomials_exactly() {
        let gl = GaussLegendre::new(8);
        let w: f64 = gl.weights.iter().sum();
        assert_relative_eq!(w, 2.0, max_relative = 1e-14);
        // degree 15 is exact for 8 nodes
        let v = gl.integrate(0.0, 2.0, |x| x.powi(15));
        assert_relative_eq!(v, 2f64.powi(16) / 16.0, max_relative = 1e-13);
        let odd = GaussLegendre::new(7);
        assert!(odd.nodes[3].abs() < 1e-15);
        assert_relative_eq!(odd.integrate(-1.0, 1.0, |x| x * x), 2.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn bessel_matches_phase_average() {
        // I0(x) = (1/π) ∫_0^π e^{x cos θ} dθ
        let gl = GaussLegendre::new(120);
        for x in [0.0, 1e-3, 0.5, 2.0, 10.0, 35.0] {
            let avg = gl.mean(0.0, PI, |t| (x * t.cos()).exp());
            assert_relative_eq!(bessel_i0(x), avg, max_relative = 1e-11);
        }
    }
}
