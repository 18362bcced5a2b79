//! Gauss–Hermite rule for the weight `exp(-x^2)`.

use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes by Newton iteration on the orthonormal Hermite recurrence,
    /// starting from the usual asymptotic guesses for the largest roots.
    pub fn new(n: usize) -> Self {
        assert!(n >= 4, "Gauss-Hermite order must be at least 4");
        let pim4 = PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        let mut z = 0.0;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        GaussHermite { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[g(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect_standard_normal(&self, g: impl Fn(f64) -> f64) -> f64 {
        let s2 = std::f64::consts::SQRT_2;
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(s2 * x))
            .sum();
        total / PI.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_and_moments() {
        for n in [8, 32, 128] {
            let gh = GaussHermite::new(n);
            let sum: f64 = gh.weights().iter().sum();
            assert!((sum - PI.sqrt()).abs() < 1e-12, "n={n} sum={sum}");
            assert!((gh.expect_standard_normal(|z| z * z) - 1.0).abs() < 1e-12);
            assert!((gh.expect_standard_normal(|z| z.powi(4)) - 3.0).abs() < 1e-11);
            assert!(gh.expect_standard_normal(|z| z.powi(3)).abs() < 1e-12);
        }
    }

    #[test]
    fn nodes_are_sorted_descending_and_symmetric() {
        let gh = GaussHermite::new(128);
        for w in gh.nodes().windows(2) {
            assert!(w[0] > w[1]);
        }
        for i in 0..64 {
            assert_eq!(gh.nodes()[i], -gh.nodes()[127 - i]);
        }
    }

    #[test]
    fn gaussian_mgf() {
        // E[exp(Z)] = exp(1/2)
        let gh = GaussHermite::new(128);
        assert!((gh.expect_standard_normal(f64::exp) - 0.5f64.exp()).abs() < 1e-12);
    }
}
