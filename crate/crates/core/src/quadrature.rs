//! Discretization of one-dimensional Gaussian variables.
//!
//! A [`QuadratureGrid`] is a uniform set of nodes on `mean ± c·σ`. Each node
//! carries the exact Gaussian probability of its cell (the half-way points
//! between neighbouring nodes, clipped to the truncation interval), so the
//! weights always add up to the truncated mass. Weights are never
//! renormalized.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// `1 / sqrt(2π)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    mean: f64,
    std_dev: f64,
    truncation: f64,
}

impl QuadratureGrid {
    /// Uniform grid of `n` nodes spanning `[mean − c·σ, mean + c·σ]`.
    pub fn gaussian(mean: f64, std_dev: f64, truncation: f64, n: usize) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::invalid("mean", "must be finite"));
        }
        if !(std_dev > 0.0 && std_dev.is_finite()) {
            return Err(Error::invalid("std_dev", format!("must be positive, got {std_dev}")));
        }
        if !(truncation > 0.0 && truncation.is_finite()) {
            return Err(Error::invalid(
                "truncation",
                format!("must be positive, got {truncation}"),
            ));
        }
        if n < 2 {
            return Err(Error::invalid("n", format!("need at least 2 nodes, got {n}")));
        }

        let half = truncation * std_dev;
        let spacing = 2.0 * half / (n - 1) as f64;
        // Nodes are built from the centre outward so the grid is exactly
        // symmetric about the mean.
        let centre = (n - 1) as f64 / 2.0;
        let nodes: Vec<f64> = (0..n)
            .map(|i| {
                if i == n - 1 {
                    mean + half
                } else if i == 0 {
                    mean - half
                } else {
                    mean + (i as f64 - centre) * spacing
                }
            })
            .collect();

        // Standardized cell edges: -c, midpoints, +c.
        let edge = |i: usize| -> f64 {
            if i == 0 {
                -truncation
            } else if i == n {
                truncation
            } else {
                (i as f64 - 0.5 - centre) * spacing / std_dev
            }
        };
        let weights = (0..n)
            .map(|i| standard_interval_mass(edge(i), edge(i + 1)))
            .collect();

        Ok(Self {
            nodes,
            weights,
            mean,
            std_dev,
            truncation,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std_dev(&self) -> f64 {
        self.std_dev
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn spacing(&self) -> f64 {
        self.nodes[1] - self.nodes[0]
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ wᵢ f(xᵢ)`.
    pub fn expect<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(f64) -> f64,
    {
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "integrand is {v} at node {x}"
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// Convenience wrapper around [`QuadratureGrid::gaussian`].
pub fn build_grid(mean: f64, std_dev: f64, truncation: f64, n: usize) -> Result<QuadratureGrid> {
    QuadratureGrid::gaussian(mean, std_dev, truncation, n)
}

pub fn gaussian_pdf(x: f64, mean: f64, std_dev: f64) -> Result<f64> {
    if !(std_dev > 0.0) {
        return Err(Error::invalid("std_dev", format!("must be positive, got {std_dev}")));
    }
    let z = (x - mean) / std_dev;
    Ok((-0.5 * z * z).exp() / (std_dev * (2.0 * PI).sqrt()))
}

/// Unit normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Unit normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// `P(a < Z < b)` for a unit normal `Z`, computed on the tail closest to
/// zero to avoid cancellation.
pub fn standard_interval_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (libm::erfc(a / SQRT_2) - libm::erfc(b / SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / SQRT_2) - libm::erfc(-a / SQRT_2))
    } else {
        0.5 * (libm::erf(b / SQRT_2) - libm::erf(a / SQRT_2))
    }
}

/// Linear interpolation of values tabulated at `origin + i·spacing`,
/// clamped to the end values outside the table.
pub fn interpolate_uniform(origin: f64, spacing: f64, values: &[f64], x: f64) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let t = (x - origin) / spacing;
    if !(t > 0.0) {
        return values[0];
    }
    let i = t.floor() as usize;
    if i >= n - 1 {
        return values[n - 1];
    }
    let frac = t - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}

/// Linear interpolation over sorted, possibly non-uniform abscissae, clamped
/// at both ends.
pub fn interpolate_sorted(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    let span = xs[hi] - xs[lo];
    if span <= 0.0 {
        return ys[hi];
    }
    ys[lo] + (x - xs[lo]) / span * (ys[hi] - ys[lo])
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn pdf_values() {
        assert_abs_diff_eq!(gaussian_pdf(0.0, 0.0, 1.0).unwrap(), 0.398_942_280_4, epsilon = 1e-10);
        assert_abs_diff_eq!(gaussian_pdf(1.0, 1.0, 2.0).unwrap(), 0.199_471_140_2, epsilon = 1e-10);
        assert_abs_diff_eq!(gaussian_pdf(5.0, 0.0, 1.0).unwrap(), 1.4867e-6, epsilon = 1e-10);
        assert!(gaussian_pdf(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_pdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn two_node_grid() {
        let g = build_grid(0.0, 1.0, 5.0, 2).unwrap();
        assert_eq!(g.nodes(), &[-5.0, 5.0]);
        assert_eq!(g.weights()[0], g.weights()[1]);
    }

    #[test]
    fn shifted_grid_is_symmetric() {
        let g = build_grid(3.0, 2.0, 4.0, 101).unwrap();
        assert_eq!(g.nodes()[0], -5.0);
        assert_eq!(g.nodes()[100], 11.0);
        assert_eq!(g.nodes()[50], 3.0);
        for i in 0..50 {
            assert_abs_diff_eq!(g.weights()[i], g.weights()[100 - i], epsilon = 1e-16);
            assert_abs_diff_eq!(g.nodes()[i] - 3.0, 3.0 - g.nodes()[100 - i], epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_grid(0.0, 0.0, 5.0, 10).is_err());
        assert!(build_grid(0.0, 1.0, 0.0, 10).is_err());
        assert!(build_grid(0.0, 1.0, -1.0, 10).is_err());
        assert!(build_grid(0.0, 1.0, 5.0, 1).is_err());
    }

    #[test]
    fn nodes_strictly_increasing_and_uniform() {
        let g = build_grid(-1.0, 0.7, 3.0, 57).unwrap();
        let h = g.spacing();
        for w in g.nodes().windows(2) {
            assert!(w[1] > w[0]);
            assert_abs_diff_eq!(w[1] - w[0], h, epsilon = 1e-12);
        }
        assert!(g.weights().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn expect_rejects_non_finite() {
        let g = build_grid(0.0, 1.0, 5.0, 11).unwrap();
        let err = g.expect(|x| if x > 4.0 { f64::NAN } else { 1.0 });
        assert!(matches!(err, Err(Error::NumericDomain(_))));
    }

    #[test]
    fn expect_moments() {
        let g = build_grid(0.0, 1.0, 5.0, 1001).unwrap();
        assert_abs_diff_eq!(g.expect(|x| x).unwrap(), 0.0, epsilon = 1e-12);
        let g = build_grid(0.0, 1.0, 5.0, 2001).unwrap();
        assert_abs_diff_eq!(g.expect(|x| x * x).unwrap(), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn interpolation_clamps() {
        let v = [0.0, 1.0, 4.0];
        assert_eq!(interpolate_uniform(0.0, 1.0, &v, -3.0), 0.0);
        assert_eq!(interpolate_uniform(0.0, 1.0, &v, 9.0), 4.0);
        assert_abs_diff_eq!(interpolate_uniform(0.0, 1.0, &v, 1.5), 2.5, epsilon = 1e-15);
        let xs = [0.0, 1.0, 3.0];
        assert_abs_diff_eq!(interpolate_sorted(&xs, &v, 2.0), 2.5, epsilon = 1e-15);
        assert_eq!(interpolate_sorted(&xs, &v, -1.0), 0.0);
        assert_eq!(interpolate_sorted(&xs, &v, 5.0), 4.0);
    }
}
