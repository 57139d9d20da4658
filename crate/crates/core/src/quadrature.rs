//! Gauss rules shared by the resolvent, kernel and homogenization code.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a one-dimensional quadrature rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Affine map of a rule on `[-1, 1]` onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> Rule {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        Rule {
            nodes: self.nodes.iter().map(|&x| mid + half * x).collect(),
            weights: self.weights.iter().map(|&w| w * half).collect(),
        }
    }
}

/// Legendre `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

/// Gauss–Legendre rule on `[0, 1]`; weights sum to one.
pub fn gauss_legendre_unit(n: usize) -> Rule {
    gauss_legendre(n).mapped(0.0, 1.0)
}

/// Normalized probabilists' Hermite functions `He_k(x) / sqrt(k!)` for `k = 0..n`.
pub fn normalized_hermite(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(x);
    }
    for k in 1..n {
        let next = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
    out
}

/// Probabilists' Hermite polynomials `He_k(x)` for `k = 0..n`.
pub fn hermite_he(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(x);
    }
    for k in 1..n {
        out.push(x * out[k] - k as f64 * out[k - 1]);
    }
    out
}

/// Gauss–Hermite rule for the standard normal law: `sum w_i f(x_i) ~ E[f(Z)]`.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n >= 1);
    // Golub–Welsch for starting values, then Newton on the normalized recurrence.
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let mut weights = vec![0.0; n];
    for (x, w) in nodes.iter_mut().zip(weights.iter_mut()) {
        for _ in 0..4 {
            let h = normalized_hermite(n, *x);
            let dp = (n as f64).sqrt() * h[n - 1];
            if dp == 0.0 {
                break;
            }
            *x -= h[n] / dp;
        }
        let h = normalized_hermite(n - 1, *x);
        *w = 1.0 / h.iter().map(|v| v * v).sum::<f64>();
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    // Enforce exact symmetry.
    for i in 0..n / 2 {
        let x = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 0.5 * (weights[i] + weights[n - 1 - i]);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule { nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_unit_weights_and_exactness() {
        for n in [1, 2, 5, 8, 16, 64] {
            let r = gauss_legendre_unit(n);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(r.nodes.iter().all(|&x| x > 0.0 && x < 1.0));
            // Exact for degree 2n - 1.
            let deg = 2 * n - 1;
            let v = r.integrate(|x| x.powi(deg as i32));
            assert!((v - 1.0 / (deg + 1) as f64).abs() < 1e-14, "n={n}");
        }
    }

    #[test]
    fn hermite_moments() {
        let r = gauss_hermite(20);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((r.integrate(|x| x * x) - 1.0).abs() < 1e-13);
        assert!((r.integrate(|x| x.powi(4)) - 3.0).abs() < 1e-12);
        assert!((r.integrate(|x| x.powi(8)) - 105.0).abs() < 1e-10);
        assert!(r.integrate(|x| x.powi(3)).abs() < 1e-13);
        // E[exp(Z/2)] = exp(1/8)
        assert!((r.integrate(|x| (0.5 * x).exp()) - (0.125f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn hermite_orthonormality() {
        let r = gauss_hermite(30);
        for j in 0..10 {
            for k in 0..10 {
                let v = r.integrate(|x| {
                    let h = normalized_hermite(10, x);
                    h[j] * h[k]
                });
                let expected = if j == k { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-12, "{j} {k} {v}");
            }
        }
    }
}
