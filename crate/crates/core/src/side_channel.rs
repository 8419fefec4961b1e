//! Witsenhausen's problem with a noisy side channel between the controllers.
//!
//! `U₁ = g₁(X₀)`, `U₂ = g₂(X₀)`, `X₁ = X₀ + U₁`,
//! `U₃ = g₃(X₁ + W₁, U₂ + W₂)`, `X₂ = X₁ − U₃`, and the Lagrangian cost
//! `J = E{k²U₁² + X₂² + λU₂²}`. The side-channel power is `b = E{U₂²}`.
//!
//! `g₁` and `g₂` share one partition: every local model carries an affine
//! map for each of them. `g₃ = E{X₁ | Y₁, Y₃}` is tabulated on a 2-D
//! lattice and noise expectations are lattice sums, as in [`crate::wce`].

use crate::engine::{
    anneal, AffineModel, AnnealOutcome, GradientMode, LocalModel, Problem, RandomizedController, Schedule,
};
use crate::error::{Error, Result};
use crate::lattice::{conditional_means, for_each_noise_node, Lattice, Stencil};
use crate::quadrature::QuadratureGrid;
use crate::wce::golden_section;

/// Associations below this do not contribute to the estimator table.
const NEGLIGIBLE_PROB: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideChannelParams {
    pub k: f64,
    pub sigma_x0: f64,
    /// Multiplier of the side-channel power in the cost.
    pub lambda: f64,
    /// Desired `E{U₂²}` for λ searches.
    pub target_b_snr: f64,
}

impl SideChannelParams {
    pub fn new(k: f64, sigma_x0: f64, lambda: f64) -> Result<Self> {
        let p = Self {
            k,
            sigma_x0,
            lambda,
            target_b_snr: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::invalid("k", format!("must be positive, got {}", self.k)));
        }
        if !(self.sigma_x0 > 0.0 && self.sigma_x0.is_finite()) {
            return Err(Error::invalid("sigma_x0", format!("must be positive, got {}", self.sigma_x0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        if !(self.target_b_snr >= 0.0 && self.target_b_snr.is_finite()) {
            return Err(Error::invalid(
                "target_b_snr",
                format!("must be non-negative, got {}", self.target_b_snr),
            ));
        }
        Ok(())
    }
}

/// `E{k²U₁² + X₂²}` split into its two terms, with the side power.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SideCostBreakdown {
    pub total: f64,
    pub control: f64,
    pub estimation: f64,
    pub b_snr: f64,
}

/// Discretization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideChannelGrids {
    pub x0_nodes: usize,
    /// `X₀` grid half-width in units of `σ`.
    pub truncation: f64,
    /// Noise expectations cover `±noise_window` standard deviations.
    pub noise_window: f64,
    /// Nodes of the `Y₁` lattice at its initial extent.
    pub y1_nodes: usize,
    /// Nodes of the `Y₃` lattice; its spacing is never finer than `Y₁`'s.
    pub y3_nodes: usize,
    /// Spacing of the interpolation table of the estimation error.
    pub table_step: f64,
}

impl Default for SideChannelGrids {
    fn default() -> Self {
        Self {
            x0_nodes: 1001,
            truncation: 5.0,
            noise_window: 8.0,
            y1_nodes: 201,
            y3_nodes: 201,
            table_step: 0.1,
        }
    }
}

impl SideChannelGrids {
    pub fn validate(&self) -> Result<()> {
        if self.x0_nodes < 2 {
            return Err(Error::invalid("x0_nodes", "need at least 2 nodes"));
        }
        for (name, n) in [("y1_nodes", self.y1_nodes), ("y3_nodes", self.y3_nodes)] {
            if n < 3 {
                return Err(Error::invalid(name, "need at least 3 nodes"));
            }
        }
        for (name, v) in [
            ("truncation", self.truncation),
            ("noise_window", self.noise_window),
            ("table_step", self.table_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One partition cell: an affine map for `g₁` and one for `g₂`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairedLocalModel {
    pub g1: LocalModel,
    pub g2: LocalModel,
}

impl PairedLocalModel {
    pub const fn new(g1: LocalModel, g2: LocalModel) -> Self {
        Self { g1, g2 }
    }
}

impl AffineModel for PairedLocalModel {
    const OUTPUTS: usize = 2;

    fn affine(&self, output: usize) -> &LocalModel {
        if output == 0 {
            &self.g1
        } else {
            &self.g2
        }
    }

    fn affine_mut(&mut self, output: usize) -> &mut LocalModel {
        if output == 0 {
            &mut self.g1
        } else {
            &mut self.g2
        }
    }
}

/// `g₃` tabulated on a `Y₁ × Y₃` lattice, row-major in `Y₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator2d {
    y1: Lattice,
    y3: Lattice,
    values: Vec<f64>,
}

impl Estimator2d {
    pub fn zeros(y1: Lattice, y3: Lattice) -> Self {
        Self {
            values: vec![0.0; y1.len() * y3.len()],
            y1,
            y3,
        }
    }

    pub fn y1(&self) -> &Lattice {
        &self.y1
    }

    pub fn y3(&self) -> &Lattice {
        &self.y3
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn slot(&self, k: i64, l: i64) -> usize {
        self.y1.slot(k) * self.y3.len() + self.y3.slot(l)
    }

    /// Value at lattice indices `(k, l)`, clamped outside the table.
    #[inline]
    pub fn at_index(&self, k: i64, l: i64) -> f64 {
        self.values[self.slot(k, l)]
    }

    pub fn node(&self, slot: usize) -> (f64, f64) {
        let n3 = self.y3.len();
        (self.y1.node(slot / n3), self.y3.node(slot % n3))
    }

    /// Bilinear interpolation, clamped at the edges.
    pub fn eval(&self, y1: f64, y3: f64) -> f64 {
        let locate = |l: &Lattice, y: f64| {
            let s = ((y + l.extent()) / l.spacing()).clamp(0.0, (l.len() - 1) as f64);
            let i = (s.floor() as usize).min(l.len() - 2);
            (i, s - i as f64)
        };
        let (i, t) = locate(&self.y1, y1);
        let (j, u) = locate(&self.y3, y3);
        let n3 = self.y3.len();
        let v = |a: usize, b: usize| self.values[a * n3 + b];
        (1.0 - t) * ((1.0 - u) * v(i, j) + u * v(i, j + 1)) + t * ((1.0 - u) * v(i + 1, j) + u * v(i + 1, j + 1))
    }

    /// `(y1, y3, g3)` for every node.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.values.len()).map(|s| {
            let (a, b) = self.node(s);
            (a, b, self.values[s])
        })
    }
}

/// Value, gradient and Hessian of the estimation error in `(x₁, u₂)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ErrorJet {
    e: f64,
    ex: f64,
    es: f64,
    exx: f64,
    exs: f64,
    ess: f64,
}

/// Bicubic Hermite table of the estimation error over `(x₁, u₂)`.
#[derive(Debug, Clone)]
struct ErrorTable {
    x_origin: f64,
    s_origin: f64,
    step: f64,
    nx: usize,
    ns: usize,
    jets: Vec<ErrorJet>,
}

impl ErrorTable {
    fn empty() -> Self {
        Self {
            x_origin: 0.0,
            s_origin: 0.0,
            step: 1.0,
            nx: 0,
            ns: 0,
            jets: Vec::new(),
        }
    }

    /// Interpolated `(E, E_x, E_s)` with the Hessian interpolated
    /// bilinearly, or `None` outside the table.
    #[inline]
    fn eval(&self, x: f64, s: f64) -> Option<ErrorJet> {
        let px = (x - self.x_origin) / self.step;
        let ps = (s - self.s_origin) / self.step;
        if !(px >= 0.0 && ps >= 0.0) || self.nx < 2 || self.ns < 2 {
            return None;
        }
        let (i, j) = (px.floor() as usize, ps.floor() as usize);
        if i + 1 >= self.nx || j + 1 >= self.ns {
            return None;
        }
        let (t, u) = (px - i as f64, ps - j as f64);
        let h = self.step;
        let basis = |t: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            (
                [2.0 * t3 - 3.0 * t2 + 1.0, -2.0 * t3 + 3.0 * t2],
                [t3 - 2.0 * t2 + t, t3 - t2],
                [6.0 * t2 - 6.0 * t, -6.0 * t2 + 6.0 * t],
                [3.0 * t2 - 4.0 * t + 1.0, 3.0 * t2 - 2.0 * t],
            )
        };
        let (hx, gx, dhx, dgx) = basis(t);
        let (hs, gs, dhs, dgs) = basis(u);
        let mut out = ErrorJet::default();
        for a in 0..2 {
            for b in 0..2 {
                let c = &self.jets[(i + a) * self.ns + j + b];
                let (fx, fs, fxs) = (c.ex * h, c.es * h, c.exs * h * h);
                out.e += hx[a] * hs[b] * c.e + gx[a] * hs[b] * fx + hx[a] * gs[b] * fs + gx[a] * gs[b] * fxs;
                out.ex += dhx[a] * hs[b] * c.e + dgx[a] * hs[b] * fx + dhx[a] * gs[b] * fs + dgx[a] * gs[b] * fxs;
                out.es += hx[a] * dhs[b] * c.e + gx[a] * dhs[b] * fx + hx[a] * dgs[b] * fs + gx[a] * dgs[b] * fxs;
                let w = [1.0 - t, t][a] * [1.0 - u, u][b];
                out.exx += w * c.exx;
                out.exs += w * c.exs;
                out.ess += w * c.ess;
            }
        }
        out.ex /= h;
        out.es /= h;
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct SideChannelProblem {
    params: SideChannelParams,
    grids: SideChannelGrids,
    x0_grid: QuadratureGrid,
    y1_spacing: f64,
    g3: Estimator2d,
    table: ErrorTable,
}

impl SideChannelProblem {
    pub fn new(params: SideChannelParams, grids: SideChannelGrids) -> Result<Self> {
        params.validate()?;
        grids.validate()?;
        let x0_grid = QuadratureGrid::gaussian(0.0, params.sigma_x0, grids.truncation, grids.x0_nodes)?;
        let y1_extent = grids.truncation * params.sigma_x0 + grids.noise_window;
        let y1_spacing = 2.0 * y1_extent / (grids.y1_nodes - 1) as f64;
        let y1 = Lattice::covering(y1_spacing, y1_extent);
        let y3 = Self::y3_lattice_for(&grids, y1_spacing, 0.0);
        let mut problem = Self {
            params,
            grids,
            x0_grid,
            y1_spacing,
            g3: Estimator2d::zeros(y1, y3),
            table: ErrorTable::empty(),
        };
        problem.refresh_table();
        Ok(problem)
    }

    fn y3_lattice_for(grids: &SideChannelGrids, y1_spacing: f64, max_u2: f64) -> Lattice {
        let extent = max_u2 + grids.noise_window;
        let spacing = (2.0 * extent / (grids.y3_nodes - 1) as f64).max(y1_spacing);
        Lattice::covering(spacing, extent)
    }

    pub fn params(&self) -> &SideChannelParams {
        &self.params
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("must be non-negative, got {lambda}")));
        }
        self.params.lambda = lambda;
        Ok(())
    }

    pub fn grids(&self) -> &SideChannelGrids {
        &self.grids
    }

    pub fn x0_grid(&self) -> &QuadratureGrid {
        &self.x0_grid
    }

    pub fn g3(&self) -> &Estimator2d {
        &self.g3
    }

    /// Replace `g₃` by a function sampled at the current lattice nodes.
    pub fn set_g3<F: Fn(f64, f64) -> f64>(&mut self, f: F) {
        for s in 0..self.g3.values.len() {
            let (a, b) = self.g3.node(s);
            self.g3.values[s] = f(a, b);
        }
        self.refresh_table();
    }

    pub fn set_g3_value(&mut self, slot: usize, value: f64) {
        self.g3.values[slot] = value;
        self.refresh_table();
    }

    /// Re-space the `Y₃` lattice for side-channel outputs up to `max_u2`.
    /// `g₃` is reset to zero.
    pub fn reshape_y3(&mut self, max_u2: f64) {
        let y3 = Self::y3_lattice_for(&self.grids, self.y1_spacing, max_u2);
        self.g3 = Estimator2d::zeros(self.g3.y1, y3);
        self.refresh_table();
    }

    fn stencils(&self, x1: f64, s: f64, a: &mut Stencil, b: &mut Stencil) {
        a.fill(self.g3.y1.spacing(), self.grids.noise_window, x1);
        b.fill(self.g3.y3.spacing(), self.grids.noise_window, s);
    }

    /// `E{(x₁ − g₃(x₁ + W₁, u₂ + W₂))²}` on the lattice.
    pub fn estimation_error(&self, x1: f64, u2: f64) -> f64 {
        let (mut a, mut b) = (Stencil::new(), Stencil::new());
        self.stencils(x1, u2, &mut a, &mut b);
        let mut acc = 0.0;
        for (i, &wa) in a.weights.iter().enumerate() {
            let k = a.first + i as i64;
            let mut inner = 0.0;
            for (j, &wb) in b.weights.iter().enumerate() {
                let r = x1 - self.g3.at_index(k, b.first + j as i64);
                inner += wb * r * r;
            }
            acc += wa * inner;
        }
        acc
    }

    /// Estimation error with first and second derivatives, exact.
    fn error_jet(&self, x1: f64, u2: f64) -> ErrorJet {
        let (mut a, mut b) = (Stencil::new(), Stencil::new());
        self.stencils(x1, u2, &mut a, &mut b);
        let mut out = ErrorJet::default();
        for (i, (&wa, &d)) in a.weights.iter().zip(&a.offsets).enumerate() {
            let k = a.first + i as i64;
            // Σ_l b_l·{1, e, e²−1}·{r², r}
            let mut q = [0.0; 6];
            for (j, (&wb, &e)) in b.weights.iter().zip(&b.offsets).enumerate() {
                let r = x1 - self.g3.at_index(k, b.first + j as i64);
                let r2 = r * r;
                q[0] += wb * r2;
                q[1] += wb * r;
                q[2] += wb * e * r2;
                q[3] += wb * e * r;
                q[4] += wb * (e * e - 1.0) * r2;
                q[5] += wb;
            }
            out.e += wa * q[0];
            out.ex += wa * (d * q[0] + 2.0 * q[1]);
            out.exx += wa * ((d * d - 1.0) * q[0] + 4.0 * d * q[1] + 2.0 * q[5]);
            out.es += wa * q[2];
            out.exs += wa * (d * q[2] + 2.0 * q[3]);
            out.ess += wa * q[4];
        }
        out
    }

    fn refresh_table(&mut self) {
        let step = self.grids.table_step;
        let x_extent = self.g3.y1.extent();
        // Large side-channel outputs fall back to the exact error.
        let s_extent = (self.g3.y3.extent() - self.grids.noise_window + 2.0).min(x_extent);
        let nx = (2.0 * x_extent / step).floor() as usize + 1;
        let ns = (2.0 * s_extent / step).floor() as usize + 1;
        let y1 = self.g3.y1;
        let n1 = y1.len();
        // For every s node and Y₁ slot: Σ_l b_l(s)·{1, e, e²−1}·{1, g, g²}.
        let mut sums = vec![[0.0; 9]; ns * n1];
        let mut b = Stencil::new();
        for j in 0..ns {
            let s = -s_extent + j as f64 * step;
            b.fill(self.g3.y3.spacing(), self.grids.noise_window, s);
            for slot in 0..n1 {
                let k = slot as i64 - y1.half() as i64;
                let acc = &mut sums[j * n1 + slot];
                for (l, (&wb, &e)) in b.weights.iter().zip(&b.offsets).enumerate() {
                    let g = self.g3.at_index(k, b.first + l as i64);
                    for (m, f) in [wb, wb * e, wb * (e * e - 1.0)].into_iter().enumerate() {
                        acc[3 * m] += f;
                        acc[3 * m + 1] += f * g;
                        acc[3 * m + 2] += f * g * g;
                    }
                }
            }
        }
        let mut jets = vec![ErrorJet::default(); nx * ns];
        let window = self.grids.noise_window;
        for i in 0..nx {
            let x = -x_extent + i as f64 * step;
            for j in 0..ns {
                let row = &sums[j * n1..(j + 1) * n1];
                let mut out = ErrorJet::default();
                for_each_noise_node(y1.spacing(), window, x, |k, wa, d| {
                    let c = &row[y1.slot(k)];
                    // Σ_l b_l·(x − g)² and friends from the moment sums.
                    let q0 = x * x * c[0] - 2.0 * x * c[1] + c[2];
                    let q1 = x * c[0] - c[1];
                    let qe = x * x * c[3] - 2.0 * x * c[4] + c[5];
                    let qe1 = x * c[3] - c[4];
                    let qee = x * x * c[6] - 2.0 * x * c[7] + c[8];
                    out.e += wa * q0;
                    out.ex += wa * (d * q0 + 2.0 * q1);
                    out.exx += wa * ((d * d - 1.0) * q0 + 4.0 * d * q1 + 2.0 * c[0]);
                    out.es += wa * qe;
                    out.exs += wa * (d * qe + 2.0 * qe1);
                    out.ess += wa * qee;
                });
                jets[i * ns + j] = out;
            }
        }
        self.table = ErrorTable {
            x_origin: -x_extent,
            s_origin: -s_extent,
            step,
            nx,
            ns,
            jets,
        };
    }

    #[inline]
    fn fast_jet(&self, x1: f64, u2: f64) -> ErrorJet {
        self.table.eval(x1, u2).unwrap_or_else(|| self.error_jet(x1, u2))
    }

    /// Exact association cost of outputs `(u1, u2)` at input node `node`.
    pub fn control_cost(&self, node: usize, u1: f64, u2: f64) -> f64 {
        let x1 = self.x0_grid.nodes()[node] + u1;
        let k2 = self.params.k * self.params.k;
        k2 * u1 * u1 + self.params.lambda * u2 * u2 + self.estimation_error(x1, u2)
    }

    pub fn association_cost(&self, node: usize, model: &PairedLocalModel) -> f64 {
        let x = self.x0_grid.nodes()[node];
        self.control_cost(node, model.g1.eval(x), model.g2.eval(x))
    }

    /// Exact expected Lagrangian cost with the current `g₃`.
    pub fn exact_cost(&self, controller: &RandomizedController<PairedLocalModel>) -> f64 {
        self.weighted_sum(controller, |i, m| self.association_cost(i, m))
    }

    /// Expected cost without the `λ·U₂²` term.
    pub fn control_objective(&self, controller: &RandomizedController<PairedLocalModel>) -> f64 {
        self.exact_cost(controller) - self.params.lambda * snr_of(&self.x0_grid, controller)
    }

    fn weighted_sum<F>(&self, controller: &RandomizedController<PairedLocalModel>, f: F) -> f64
    where
        F: Fn(usize, &PairedLocalModel) -> f64,
    {
        let mut total = 0.0;
        for (i, &w) in self.x0_grid.weights().iter().enumerate() {
            for (m, model) in controller.models().iter().enumerate() {
                let p = controller.prob(i, m);
                if p > 0.0 {
                    total += w * p * f(i, model);
                }
            }
        }
        total
    }

    /// Rebuild `g₃ = E{X₁ | Y₁, Y₃}` from weighted point masses
    /// `(x₁, u₂, q)`. Mass falling outside the lattice lands on the edge
    /// slots that the cost clamps to.
    pub fn update_g3_from_masses(&mut self, masses: &[(f64, f64, f64)]) {
        let reach = masses
            .iter()
            .filter(|m| m.2 > 0.0)
            .map(|m| m.0.abs())
            .fold(0.0, f64::max);
        let base = self.grids.truncation * self.params.sigma_x0;
        let extent = base.max(reach.min(10.0 * base)) + self.grids.noise_window;
        let y1 = Lattice::covering(self.y1_spacing, extent.max(self.g3.y1.extent()));
        let y3 = self.g3.y3;
        let n3 = y3.len();
        let mut num = vec![0.0; y1.len() * n3];
        let mut den = vec![0.0; y1.len() * n3];
        let (mut a, mut b) = (Stencil::new(), Stencil::new());
        for &(x1, s, q) in masses {
            if q <= 0.0 {
                continue;
            }
            a.fill(y1.spacing(), self.grids.noise_window, x1);
            b.fill(y3.spacing(), self.grids.noise_window, s);
            for (i, &wa) in a.weights.iter().enumerate() {
                let row = y1.slot(a.first + i as i64) * n3;
                let qa = q * wa;
                for (j, &wb) in b.weights.iter().enumerate() {
                    let slot = row + y3.slot(b.first + j as i64);
                    num[slot] += qa * wb * x1;
                    den[slot] += qa * wb;
                }
            }
        }
        let values = conditional_means(&num, &den, y1.len(), n3);
        self.g3 = Estimator2d { y1, y3, values };
        self.refresh_table();
    }

    fn masses(&self, controller: &RandomizedController<PairedLocalModel>) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.x0_grid.len() * controller.n_models());
        for (i, (&x, &w)) in self.x0_grid.nodes().iter().zip(self.x0_grid.weights()).enumerate() {
            for (m, model) in controller.models().iter().enumerate() {
                let p = controller.prob(i, m);
                if p > NEGLIGIBLE_PROB {
                    out.push((x + model.g1.eval(x), model.g2.eval(x), w * p));
                }
            }
        }
        out
    }

    pub fn update_g3(&mut self, controller: &RandomizedController<PairedLocalModel>) {
        let masses = self.masses(controller);
        self.update_g3_from_masses(&masses);
    }

    /// Largest `|u₂|` any model produces on the `X₀` grid.
    pub fn max_side_output(&self, controller: &RandomizedController<PairedLocalModel>) -> f64 {
        let (lo, hi) = (self.x0_grid.nodes()[0], self.x0_grid.nodes()[self.x0_grid.len() - 1]);
        controller
            .models()
            .iter()
            .map(|m| m.g2.eval(lo).abs().max(m.g2.eval(hi).abs()))
            .fold(0.0, f64::max)
    }

    /// Cost of a deterministic map given by `f₁(x₀)` and `u₂(x₀)` at the
    /// `X₀` nodes, with `g₃` set to the matching conditional mean.
    pub fn evaluate_mapping(&mut self, f1: &[f64], g2: &[f64]) -> Result<SideCostBreakdown> {
        self.evaluate_mapping_limits((f1, g2), (f1, g2))
    }

    /// One-sided version of [`SideChannelProblem::evaluate_mapping`]: half of
    /// each node's mass follows the left limits, half the right ones.
    pub fn evaluate_mapping_limits(
        &mut self,
        left: (&[f64], &[f64]),
        right: (&[f64], &[f64]),
    ) -> Result<SideCostBreakdown> {
        let n = self.x0_grid.len();
        for (name, v) in [("f1", left.0), ("g2", left.1), ("f1", right.0), ("g2", right.1)] {
            if v.len() != n {
                return Err(Error::invalid(name, format!("expected {n} values, got {}", v.len())));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NumericDomain(format!("mapping value {bad}")));
            }
        }
        let reach = left.1.iter().chain(right.1).fold(0.0, |a: f64, v| a.max(v.abs()));
        self.reshape_y3(reach);
        let w = self.x0_grid.weights().to_vec();
        let masses: Vec<(f64, f64, f64)> = (0..n)
            .flat_map(|i| [(left.0[i], left.1[i], 0.5 * w[i]), (right.0[i], right.1[i], 0.5 * w[i])])
            .collect();
        self.update_g3_from_masses(&masses);
        let k2 = self.params.k * self.params.k;
        let mut out = SideCostBreakdown::default();
        for (i, &x) in self.x0_grid.nodes().iter().enumerate() {
            for (f, u) in [(left.0[i], left.1[i]), (right.0[i], right.1[i])] {
                let q = 0.5 * w[i];
                out.control += q * k2 * (f - x) * (f - x);
                out.estimation += q * self.estimation_error(f, u);
                out.b_snr += q * u * u;
            }
        }
        out.total = out.control + out.estimation;
        Ok(out)
    }

    /// `(x0, f1, g2)` at every node with each node using its most
    /// probable model.
    pub fn hard_mapping(&self, controller: &RandomizedController<PairedLocalModel>) -> Vec<(f64, f64, f64)> {
        let assignment = controller.argmax_assignment();
        self.x0_grid
            .nodes()
            .iter()
            .zip(&assignment)
            .map(|(&x, &a)| {
                let m = &controller.models()[a];
                (x, x + m.g1.eval(x), m.g2.eval(x))
            })
            .collect()
    }
}

/// `E{U₂²}` of a (possibly randomized) controller.
pub fn snr_of(grid: &QuadratureGrid, controller: &RandomizedController<PairedLocalModel>) -> f64 {
    let mut total = 0.0;
    for (i, (&x, &w)) in grid.nodes().iter().zip(grid.weights()).enumerate() {
        for (m, model) in controller.models().iter().enumerate() {
            let p = controller.prob(i, m);
            if p > 0.0 {
                let u = model.g2.eval(x);
                total += w * p * u * u;
            }
        }
    }
    total
}

impl Problem for SideChannelProblem {
    type Model = PairedLocalModel;

    fn input_grid(&self) -> &QuadratureGrid {
        &self.x0_grid
    }

    fn initial_model(&self) -> PairedLocalModel {
        PairedLocalModel::new(LocalModel::new(-1.0, 0.0), LocalModel::new(0.0, 0.0))
    }

    fn reference_cost(&self) -> f64 {
        crate::wce::best_affine_cost(&crate::wce::WceParams {
            k: self.params.k,
            sigma_x0: self.params.sigma_x0,
        })
        .1
    }

    fn begin_temperature(&mut self, controller: &RandomizedController<PairedLocalModel>) {
        let max_u2 = self.max_side_output(controller);
        self.reshape_y3(max_u2);
    }

    fn update_dependents(&mut self, controller: &RandomizedController<PairedLocalModel>) {
        self.update_g3(controller);
    }

    fn reported_cost(&self, controller: &RandomizedController<PairedLocalModel>) -> f64 {
        self.exact_cost(controller)
    }

    // A side-output copy must stay affordable at large λ, or it never
    // gains mass.
    fn parameter_scales(&self) -> Option<Vec<f64>> {
        let side = (0.3 / self.params.lambda.sqrt()).min(1.0);
        Some(vec![0.0, self.params.sigma_x0, side, side])
    }

    fn output_cost(&self, node: usize, outputs: &[f64]) -> f64 {
        let (u1, u2) = (outputs[0], outputs[1]);
        let x1 = self.x0_grid.nodes()[node] + u1;
        let k2 = self.params.k * self.params.k;
        k2 * u1 * u1 + self.params.lambda * u2 * u2 + self.fast_jet(x1, u2).e
    }

    fn gradient_mode(&self) -> GradientMode {
        GradientMode::Analytic
    }

    fn output_derivatives(&self, node: usize, outputs: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let (u1, u2) = (outputs[0], outputs[1]);
        let x1 = self.x0_grid.nodes()[node] + u1;
        let k2 = self.params.k * self.params.k;
        let lambda = self.params.lambda;
        let j = self.fast_jet(x1, u2);
        grad[0] = 2.0 * k2 * u1 + j.ex;
        grad[1] = 2.0 * lambda * u2 + j.es;
        hess[0] = 2.0 * k2 + j.exx;
        hess[1] = j.exs;
        hess[2] = j.exs;
        hess[3] = 2.0 * lambda + j.ess;
        k2 * u1 * u1 + lambda * u2 * u2 + j.e
    }
}

/// Best linear scheme `f₁ = c·x₀`, `g₂ ∝ x₀` with power `b`:
/// `J(c) = k²(c−1)²σ² + c²σ²/(1 + b + c²σ²)`. Returns `(c*, J*)`.
pub fn best_linear_cost(k: f64, sigma_x0: f64, b_snr: f64) -> (f64, f64) {
    let s2 = sigma_x0 * sigma_x0;
    let k2 = k * k;
    let j = |c: f64| k2 * (c - 1.0).powi(2) * s2 + c * c * s2 / (1.0 + b_snr + c * c * s2);
    // The cost can have two local minima in c; search both sides of the
    // interior maximum.
    let candidates = [golden_section(j, 0.0, 0.5, 1e-12).0, golden_section(j, 0.5, 1.5, 1e-12).0, 0.0, 1.0];
    candidates
        .into_iter()
        .map(|c| (c, j(c)))
        .fold((0.0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Default λ ladder for [`sweep_lambda`].
pub const LAMBDA_LADDER: [f64; 9] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0];

/// One annealing run inside a λ search.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: f64,
    pub b_snr: f64,
    /// `E{k²U₁² + X₂²}` of the quenched controller.
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub lambda: f64,
    pub b_snr: f64,
    pub cost: f64,
    pub anneal: AnnealOutcome<PairedLocalModel>,
    pub problem: SideChannelProblem,
    pub evaluations: Vec<SweepPoint>,
    pub warning: Option<String>,
}

/// Anneal at a fixed λ and report the quenched power and cost.
pub fn run_at_lambda(
    params: &SideChannelParams,
    grids: &SideChannelGrids,
    schedule: &Schedule,
    lambda: f64,
    verbose: bool,
) -> Result<(SideChannelProblem, AnnealOutcome<PairedLocalModel>, SweepPoint)> {
    let mut p = *params;
    p.lambda = lambda;
    let mut problem = SideChannelProblem::new(p, *grids)?;
    let outcome = anneal(&mut problem, schedule, verbose)?;
    let point = SweepPoint {
        lambda,
        b_snr: snr_of(problem.x0_grid(), &outcome.controller),
        cost: problem.control_objective(&outcome.controller),
    };
    Ok((problem, outcome, point))
}

/// Search λ so that the quenched `E{U₂²}` hits `target_b_snr` within `tol`.
///
/// The ladder is scanned upwards from λ = 0 until the achieved power drops
/// to the target, then the bracket is bisected (geometrically once both
/// ends are positive). A non-monotone scan stops the search and returns
/// the closest ladder point with a warning. `tol = ∞` returns the single
/// anneal at the ladder midpoint.
pub fn sweep_lambda(
    params: &SideChannelParams,
    grids: &SideChannelGrids,
    schedule: &Schedule,
    target_b_snr: f64,
    tol: f64,
    ladder: &[f64],
) -> Result<SweepOutcome> {
    if !(target_b_snr >= 0.0 && target_b_snr.is_finite()) {
        return Err(Error::invalid("target_b_snr", format!("must be non-negative, got {target_b_snr}")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be positive, got {tol}")));
    }
    if ladder.is_empty() || ladder.windows(2).any(|w| !(w[0] < w[1])) || ladder[0] < 0.0 {
        return Err(Error::invalid("ladder", "must be non-empty, non-negative and increasing"));
    }
    let mut evaluations = Vec::new();
    let mut runs: Vec<(SideChannelProblem, AnnealOutcome<PairedLocalModel>, SweepPoint)> = Vec::new();
    let finish = |runs: Vec<(SideChannelProblem, AnnealOutcome<PairedLocalModel>, SweepPoint)>,
                  evaluations: Vec<SweepPoint>,
                  warning: Option<String>| {
        let best = runs
            .into_iter()
            .min_by(|a, b| {
                (a.2.b_snr - target_b_snr)
                    .abs()
                    .total_cmp(&(b.2.b_snr - target_b_snr).abs())
            })
            .expect("at least one run");
        SweepOutcome {
            lambda: best.2.lambda,
            b_snr: best.2.b_snr,
            cost: best.2.cost,
            anneal: best.1,
            problem: best.0,
            evaluations,
            warning,
        }
    };

    if tol.is_infinite() {
        let run = run_at_lambda(params, grids, schedule, ladder[ladder.len() / 2], false)?;
        evaluations.push(run.2.clone());
        return Ok(finish(vec![run], evaluations, None));
    }

    let mut bracket = None;
    for (i, &lambda) in ladder.iter().enumerate() {
        let run = run_at_lambda(params, grids, schedule, lambda, false)?;
        let b = run.2.b_snr;
        evaluations.push(run.2.clone());
        if i == 0 && b < target_b_snr - tol {
            return Err(Error::UnreachableTarget {
                target: target_b_snr,
                min: 0.0,
                max: b,
            });
        }
        let previous = runs.last().map(|r| r.2.b_snr);
        runs.push(run);
        if (b - target_b_snr).abs() <= tol {
            return Ok(finish(runs, evaluations, None));
        }
        if let Some(prev) = previous {
            if b > prev {
                let warning = format!("achieved b_SNR is not monotone in lambda ({prev} then {b} at lambda {lambda})");
                return Ok(finish(runs, evaluations, Some(warning)));
            }
        }
        if b < target_b_snr {
            bracket = Some((ladder[i - 1], lambda));
            break;
        }
    }
    let Some((mut lo, mut hi)) = bracket else {
        let warning = format!("ladder exhausted before b_SNR fell to {target_b_snr}");
        return Ok(finish(runs, evaluations, Some(warning)));
    };
    const MAX_BISECTIONS: usize = 12;
    for _ in 0..MAX_BISECTIONS {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        let run = run_at_lambda(params, grids, schedule, mid, false)?;
        let b = run.2.b_snr;
        evaluations.push(run.2.clone());
        runs.push(run);
        if (b - target_b_snr).abs() <= tol {
            return Ok(finish(runs, evaluations, None));
        }
        if b > target_b_snr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let warning = format!("no lambda within {MAX_BISECTIONS} bisections met the tolerance");
    Ok(finish(runs, evaluations, Some(warning)))
}
