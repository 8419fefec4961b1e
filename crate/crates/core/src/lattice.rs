//! Symmetric integer lattices `y_k = k·Δ` used to tabulate estimators, and
//! the unit-noise stencils that integrate over them.
//!
//! Every expectation over an additive `N(0, 1)` observation noise is taken on
//! the estimator's own lattice: for a signal value `s`, the noise expectation
//! of `h(s + W)` is `Σ_k Δ·φ(kΔ − s)·h(kΔ)` over lattice points within
//! `±window` of `s`. Because the same stencil is used to build the
//! conditional-mean tables, a tabulated estimator is exactly the node-wise
//! minimizer of the cost that is evaluated with it.

use crate::quadrature::{interpolate_uniform, INV_SQRT_2PI};

/// Nodes `k·Δ` for `k = −half..=half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    spacing: f64,
    half: usize,
}

impl Lattice {
    /// Smallest lattice with the given spacing whose nodes cover `[−extent, extent]`.
    pub fn covering(spacing: f64, extent: f64) -> Self {
        assert!(spacing > 0.0, "lattice spacing must be positive");
        // The tolerance keeps an extent that is an exact multiple of the
        // spacing from gaining a node to rounding.
        let half = (extent.max(0.0) / spacing - 1e-9).ceil() as usize;
        Self { spacing, half: half.max(1) }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn len(&self) -> usize {
        2 * self.half + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn extent(&self) -> f64 {
        self.half as f64 * self.spacing
    }

    /// Coordinate of table slot `i` (slot 0 is the most negative node).
    pub fn node(&self, i: usize) -> f64 {
        (i as f64 - self.half as f64) * self.spacing
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    /// Table slot for lattice index `k`, clamped to the table.
    #[inline]
    pub fn slot(&self, k: i64) -> usize {
        let s = k + self.half as i64;
        s.clamp(0, 2 * self.half as i64) as usize
    }

    /// Whether lattice index `k` has its own table slot.
    #[inline]
    pub fn contains(&self, k: i64) -> bool {
        k.unsigned_abs() as usize <= self.half
    }

    /// Linear interpolation of a table on this lattice, clamped at the ends.
    pub fn interpolate(&self, values: &[f64], y: f64) -> f64 {
        interpolate_uniform(-self.extent(), self.spacing, values, y)
    }
}

/// Noise weights `Δ·φ(kΔ − centre)` for the lattice indices within
/// `±window` of `centre`, with the matching offsets `kΔ − centre`.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub first: i64,
    pub weights: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl Stencil {
    pub fn new() -> Self {
        Self::default()
    }

    /// Refill for a new centre.
    pub fn fill(&mut self, spacing: f64, window: f64, centre: f64) {
        self.weights.clear();
        self.offsets.clear();
        self.first = for_each_noise_node(spacing, window, centre, |_, w, d| {
            self.weights.push(w);
            self.offsets.push(d);
        });
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Visit `(k, Δ·φ(kΔ − centre), kΔ − centre)` for every lattice index `k`
/// with `|kΔ − centre| ≤ window`, in increasing `k`. Returns the first
/// index. Uses the product recurrence `φ(d + Δ) = φ(d)·exp(−dΔ − Δ²/2)`
/// instead of one `exp` per node.
#[inline]
pub fn for_each_noise_node<F>(spacing: f64, window: f64, centre: f64, mut f: F) -> i64
where
    F: FnMut(i64, f64, f64),
{
    let first = ((centre - window) / spacing).ceil() as i64;
    let last = ((centre + window) / spacing).floor() as i64;
    if last < first {
        return first;
    }
    let d0 = first as f64 * spacing - centre;
    let mut w = spacing * INV_SQRT_2PI * (-0.5 * d0 * d0).exp();
    let mut ratio = (-d0 * spacing - 0.5 * spacing * spacing).exp();
    let decay = (-spacing * spacing).exp();
    for k in first..=last {
        f(k, w, k as f64 * spacing - centre);
        w *= ratio;
        ratio *= decay;
    }
    first
}

/// A smooth function tabulated with its first two derivatives on a uniform
/// grid. Values and slopes come from the cubic Hermite interpolant of
/// `(f, f')`, so the returned slope is the exact derivative of the returned
/// value; the curvature is interpolated linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTable {
    origin: f64,
    step: f64,
    f: Vec<f64>,
    df: Vec<f64>,
    d2f: Vec<f64>,
}

impl SmoothTable {
    /// Sample `sample(x) = (f, f', f'')` at `origin + i·step` for `i < n`.
    pub fn build<F>(origin: f64, step: f64, n: usize, mut sample: F) -> Self
    where
        F: FnMut(f64) -> (f64, f64, f64),
    {
        let mut t = Self {
            origin,
            step,
            f: Vec::with_capacity(n),
            df: Vec::with_capacity(n),
            d2f: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (a, b, c) = sample(origin + i as f64 * step);
            t.f.push(a);
            t.df.push(b);
            t.d2f.push(c);
        }
        t
    }

    pub fn empty() -> Self {
        Self { origin: 0.0, step: 1.0, f: Vec::new(), df: Vec::new(), d2f: Vec::new() }
    }

    /// `(f, f', f'')` at `x`, or `None` outside the table.
    #[inline]
    pub fn eval(&self, x: f64) -> Option<(f64, f64, f64)> {
        let s = (x - self.origin) / self.step;
        if !(s >= 0.0) || self.f.len() < 2 {
            return None;
        }
        let i = s.floor() as usize;
        if i + 1 >= self.f.len() {
            return (i + 1 == self.f.len() && s == i as f64).then(|| (self.f[i], self.df[i], self.d2f[i]));
        }
        let t = s - i as f64;
        let h = self.step;
        let (f0, f1) = (self.f[i], self.f[i + 1]);
        let (m0, m1) = (self.df[i] * h, self.df[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * f0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * f1
            + (t3 - t2) * m1;
        let dv = ((6.0 * t2 - 6.0 * t) * f0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * f1
            + (3.0 * t2 - 2.0 * t) * m1)
            / h;
        let d2v = self.d2f[i] + t * (self.d2f[i + 1] - self.d2f[i]);
        Some((v, dv, d2v))
    }
}

/// `num / den` per slot of an `n1 × n3` table. Slots no mass can reach copy the nearest reached
/// slot in their row, and empty rows copy the nearest reached row, so the
/// table stays continuous where it is never used.
pub fn conditional_means(num: &[f64], den: &[f64], n1: usize, n3: usize) -> Vec<f64> {
    let mut values = vec![0.0; n1 * n3];
    let mut filled = vec![false; n1];
    for k in 0..n1 {
        let row = k * n3;
        let reached: Vec<usize> = (0..n3).filter(|&l| den[row + l] > 1e-300).collect();
        if reached.is_empty() {
            continue;
        }
        filled[k] = true;
        let mut r = 0;
        for l in 0..n3 {
            while r + 1 < reached.len() && reached[r + 1].abs_diff(l) <= reached[r].abs_diff(l) {
                r += 1;
            }
            let src = row + reached[r];
            values[row + l] = num[src] / den[src];
        }
    }
    let rows: Vec<usize> = (0..n1).filter(|&k| filled[k]).collect();
    if rows.is_empty() {
        return values;
    }
    let mut r = 0;
    for k in 0..n1 {
        while r + 1 < rows.len() && rows[r + 1].abs_diff(k) <= rows[r].abs_diff(k) {
            r += 1;
        }
        if !filled[k] {
            let (dst, src) = (k * n3, rows[r] * n3);
            values.copy_within(src..src + n3, dst);
        }
    }
    values
}
