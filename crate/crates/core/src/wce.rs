//! Witsenhausen's counterexample.
//!
//! `X₀ ~ N(0, σ²)`, `W ~ N(0, 1)`, `U₁ = g₁(X₀)`, `X₁ = X₀ + U₁`,
//! `U₂ = g₂(X₁ + W)`, `X₂ = X₁ − U₂`, cost `J = E{k²U₁² + X₂²}`.
//!
//! `g₁` is the randomized piecewise-affine controller; `g₂` is recomputed
//! as the conditional mean `E{X₁ | Y₂}` tabulated on a lattice of `Y₂`
//! values after every change of `g₁`.

use crate::engine::{GradientMode, LocalModel, Problem, RandomizedController};
use crate::error::{Error, Result};
use crate::lattice::{conditional_means, for_each_noise_node, Lattice, SmoothTable};
use crate::quadrature::QuadratureGrid;

/// Associations below this do not contribute to the estimator tables.
const NEGLIGIBLE_PROB: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WceParams {
    pub k: f64,
    pub sigma_x0: f64,
}

impl WceParams {
    pub fn new(k: f64, sigma_x0: f64) -> Result<Self> {
        let p = Self { k, sigma_x0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::invalid("k", format!("must be positive, got {}", self.k)));
        }
        if !(self.sigma_x0 > 0.0 && self.sigma_x0.is_finite()) {
            return Err(Error::invalid(
                "sigma_x0",
                format!("must be positive, got {}", self.sigma_x0),
            ));
        }
        Ok(())
    }
}

/// Discretization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WceGrids {
    /// Nodes of the `X₀` grid.
    pub x0_nodes: usize,
    /// `X₀` grid half-width in units of `σ`.
    pub truncation: f64,
    /// Noise expectations cover `±noise_window` standard deviations.
    pub noise_window: f64,
    /// Spacing of the `Y₂` lattice.
    pub y_spacing: f64,
    /// Spacing of the interpolation table of the estimation error used
    /// during optimization.
    pub table_step: f64,
}

impl Default for WceGrids {
    fn default() -> Self {
        Self {
            x0_nodes: 1001,
            truncation: 5.0,
            noise_window: 8.0,
            y_spacing: 0.05,
            table_step: 0.01,
        }
    }
}

impl WceGrids {
    pub fn validate(&self) -> Result<()> {
        if self.x0_nodes < 2 {
            return Err(Error::invalid("x0_nodes", "need at least 2 nodes"));
        }
        for (name, v) in [
            ("truncation", self.truncation),
            ("noise_window", self.noise_window),
            ("y_spacing", self.y_spacing),
            ("table_step", self.table_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar estimator tabulated on a symmetric lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedEstimator {
    lattice: Lattice,
    values: Vec<f64>,
}

impl TabulatedEstimator {
    pub fn zeros(lattice: Lattice) -> Self {
        Self {
            values: vec![0.0; lattice.len()],
            lattice,
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at lattice index `k` (clamped outside the table).
    #[inline]
    pub fn at_index(&self, k: i64) -> f64 {
        self.values[self.lattice.slot(k)]
    }

    /// Linear interpolation between nodes, clamped outside.
    pub fn eval(&self, y: f64) -> f64 {
        self.lattice.interpolate(&self.values, y)
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        self.lattice.nodes()
    }
}

/// Cost split of a deterministic mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    /// `k²·E{U₁²}`
    pub control: f64,
    /// `E{X₂²}`
    pub estimation: f64,
}

#[derive(Debug, Clone)]
pub struct WceProblem {
    params: WceParams,
    grids: WceGrids,
    x0_grid: QuadratureGrid,
    g2: TabulatedEstimator,
    error_table: SmoothTable,
    slope_floor: f64,
}

impl WceProblem {
    pub fn new(params: WceParams, grids: WceGrids) -> Result<Self> {
        params.validate()?;
        grids.validate()?;
        let x0_grid = QuadratureGrid::gaussian(0.0, params.sigma_x0, grids.truncation, grids.x0_nodes)?;
        let lattice = Lattice::covering(
            grids.y_spacing,
            grids.truncation * params.sigma_x0 + grids.noise_window,
        );
        let mut problem = Self {
            params,
            grids,
            x0_grid,
            g2: TabulatedEstimator::zeros(lattice),
            error_table: SmoothTable::empty(),
            slope_floor: 0.0,
        };
        problem.refresh_table();
        Ok(problem)
    }

    /// Lower bound on the size of slope perturbations when models are
    /// duplicated. Zero perturbs slopes relative to themselves, which
    /// leaves maps near the identity (`u1` slope near zero) unperturbed.
    pub fn with_slope_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor >= 0.0 && floor.is_finite()) {
            return Err(Error::invalid("slope_floor", format!("must be non-negative, got {floor}")));
        }
        self.slope_floor = floor;
        Ok(self)
    }

    pub fn params(&self) -> &WceParams {
        &self.params
    }

    pub fn grids(&self) -> &WceGrids {
        &self.grids
    }

    pub fn x0_grid(&self) -> &QuadratureGrid {
        &self.x0_grid
    }

    /// The second-stage controller `g₂`.
    pub fn g2(&self) -> &TabulatedEstimator {
        &self.g2
    }

    /// Replace `g₂` by an arbitrary function sampled on the current lattice.
    pub fn set_g2<F: Fn(f64) -> f64>(&mut self, f: F) {
        let lattice = *self.g2.lattice();
        for (i, v) in self.g2.values_mut().iter_mut().enumerate() {
            *v = f(lattice.node(i));
        }
        self.refresh_table();
    }

    pub fn set_g2_value(&mut self, slot: usize, value: f64) {
        self.g2.values_mut()[slot] = value;
        self.refresh_table();
    }

    fn refresh_table(&mut self) {
        let extent = self.g2.lattice().extent();
        let step = self.grids.table_step;
        let n = (2.0 * extent / step).floor() as usize + 1;
        self.error_table = SmoothTable::build(-extent, step, n, |x| self.estimation_error_derivatives(x));
    }

    /// Interpolated estimation error and derivatives, exact off the table.
    #[inline]
    fn fast_error(&self, x1: f64) -> (f64, f64, f64) {
        self.error_table
            .eval(x1)
            .unwrap_or_else(|| self.estimation_error_derivatives(x1))
    }

    /// `E_W{(x₁ − g₂(x₁ + W))²}` on the lattice.
    pub fn estimation_error(&self, x1: f64) -> f64 {
        let g = &self.g2;
        let mut acc = 0.0;
        for_each_noise_node(self.grids.y_spacing, self.grids.noise_window, x1, |k, w, _| {
            let e = x1 - g.at_index(k);
            acc += w * e * e;
        });
        acc
    }

    /// Estimation error with its first and second derivatives in `x₁`.
    fn estimation_error_derivatives(&self, x1: f64) -> (f64, f64, f64) {
        let g = &self.g2;
        let (mut e0, mut e1, mut e2) = (0.0, 0.0, 0.0);
        for_each_noise_node(self.grids.y_spacing, self.grids.noise_window, x1, |k, w, d| {
            let r = x1 - g.at_index(k);
            let r2 = r * r;
            e0 += w * r2;
            e1 += w * (d * r2 + 2.0 * r);
            e2 += w * ((d * d - 1.0) * r2 + 4.0 * d * r + 2.0);
        });
        (e0, e1, e2)
    }

    /// Association cost of producing control `u1` at input node `node`.
    pub fn control_cost(&self, node: usize, u1: f64) -> f64 {
        let x1 = self.x0_grid.nodes()[node] + u1;
        let k2 = self.params.k * self.params.k;
        k2 * u1 * u1 + self.estimation_error(x1)
    }

    /// [`Self::control_cost`] with the interpolated estimation error.
    pub fn control_cost_fast(&self, node: usize, u1: f64) -> f64 {
        let x1 = self.x0_grid.nodes()[node] + u1;
        let k2 = self.params.k * self.params.k;
        k2 * u1 * u1 + self.fast_error(x1).0
    }

    /// Exact expected cost of a randomized controller with the current `g₂`.
    pub fn exact_cost(&self, controller: &RandomizedController<LocalModel>) -> f64 {
        let mut total = 0.0;
        for (i, (&x, &w)) in self.x0_grid.nodes().iter().zip(self.x0_grid.weights()).enumerate() {
            for (m, model) in controller.models().iter().enumerate() {
                let p = controller.prob(i, m);
                if p > 0.0 {
                    total += w * p * self.control_cost(i, model.eval(x));
                }
            }
        }
        total
    }

    pub fn association_cost(&self, node: usize, model: &LocalModel) -> f64 {
        self.control_cost(node, model.eval(self.x0_grid.nodes()[node]))
    }

    /// Rebuild `g₂ = E{X₁ | Y₂}` from weighted point masses of `X₁`.
    pub fn update_g2_from_masses(&mut self, masses: &[(f64, f64)]) {
        let reach = masses
            .iter()
            .filter(|m| m.1 > 0.0)
            .map(|m| m.0.abs())
            .fold(0.0, f64::max);
        let base = self.grids.truncation * self.params.sigma_x0;
        let extent = base.max(reach.min(10.0 * base)) + self.grids.noise_window;
        let lattice = Lattice::covering(self.grids.y_spacing, extent);
        let mut num = vec![0.0; lattice.len()];
        let mut den = vec![0.0; lattice.len()];
        for &(x1, q) in masses {
            if q <= 0.0 {
                continue;
            }
            for_each_noise_node(self.grids.y_spacing, self.grids.noise_window, x1, |k, w, _| {
                let s = lattice.slot(k);
                num[s] += q * w * x1;
                den[s] += q * w;
            });
        }
        let values = conditional_means(&num, &den, lattice.len(), 1);
        self.g2 = TabulatedEstimator { lattice, values };
        self.refresh_table();
    }

    /// Point masses `(x₁, wₓ·p(m|x))` induced by a randomized controller.
    fn masses(&self, controller: &RandomizedController<LocalModel>) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.x0_grid.len() * controller.n_models());
        for (i, (&x, &w)) in self.x0_grid.nodes().iter().zip(self.x0_grid.weights()).enumerate() {
            for (m, model) in controller.models().iter().enumerate() {
                let p = controller.prob(i, m);
                if p > NEGLIGIBLE_PROB {
                    out.push((x + model.eval(x), w * p));
                }
            }
        }
        out
    }

    pub fn update_g2(&mut self, controller: &RandomizedController<LocalModel>) {
        let masses = self.masses(controller);
        self.update_g2_from_masses(&masses);
    }

    /// Cost of a deterministic first-stage map given by its values
    /// `f₁(x₀)` at the `X₀` nodes, with `g₂` set to the matching
    /// conditional mean.
    pub fn evaluate_mapping(&mut self, f1: &[f64]) -> Result<CostBreakdown> {
        self.evaluate_mapping_limits(f1, f1)
    }

    /// Like [`WceProblem::evaluate_mapping`] for a map with one-sided
    /// limits at the nodes: half of each node's mass goes to `left`, half
    /// to `right`. A jump sitting exactly on a node is split evenly.
    pub fn evaluate_mapping_limits(&mut self, left: &[f64], right: &[f64]) -> Result<CostBreakdown> {
        let n = self.x0_grid.len();
        for (name, v) in [("f1", left), ("f1", right)] {
            if v.len() != n {
                return Err(Error::invalid(name, format!("expected {n} values, got {}", v.len())));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NumericDomain(format!("mapping value {bad}")));
            }
        }
        let w = self.x0_grid.weights();
        let masses: Vec<(f64, f64)> = (0..n).flat_map(|i| [(left[i], 0.5 * w[i]), (right[i], 0.5 * w[i])]).collect();
        self.update_g2_from_masses(&masses);
        let (a, b) = (self.mapping_cost(left), self.mapping_cost(right));
        Ok(CostBreakdown {
            total: 0.5 * (a.total + b.total),
            control: 0.5 * (a.control + b.control),
            estimation: 0.5 * (a.estimation + b.estimation),
        })
    }

    /// Cost of a deterministic mapping with the current `g₂`.
    pub fn mapping_cost(&self, f1: &[f64]) -> CostBreakdown {
        let k2 = self.params.k * self.params.k;
        let mut control = 0.0;
        let mut estimation = 0.0;
        for ((&x, &w), &f) in self.x0_grid.nodes().iter().zip(self.x0_grid.weights()).zip(f1) {
            let u = f - x;
            control += w * k2 * u * u;
            estimation += w * self.estimation_error(f);
        }
        CostBreakdown {
            total: control + estimation,
            control,
            estimation,
        }
    }

    /// `f₁(x₀) = x₀ + g₁(x₀)` of a controller, with each node using its
    /// most probable model.
    pub fn hard_mapping(&self, controller: &RandomizedController<LocalModel>) -> Vec<f64> {
        hard_mapping(&self.x0_grid, controller.models(), &controller.argmax_assignment())
    }
}

/// `f₁` at every node for the given model assignment.
pub fn hard_mapping(grid: &QuadratureGrid, models: &[LocalModel], assignment: &[usize]) -> Vec<f64> {
    grid.nodes()
        .iter()
        .zip(assignment)
        .map(|(&x, &a)| x + models[a].eval(x))
        .collect()
}

impl Problem for WceProblem {
    type Model = LocalModel;

    fn input_grid(&self) -> &QuadratureGrid {
        &self.x0_grid
    }

    fn initial_model(&self) -> LocalModel {
        LocalModel::new(-1.0, 0.0)
    }

    fn reference_cost(&self) -> f64 {
        best_affine_cost(&self.params).1
    }

    fn update_dependents(&mut self, controller: &RandomizedController<LocalModel>) {
        self.update_g2(controller);
    }

    fn reported_cost(&self, controller: &RandomizedController<LocalModel>) -> f64 {
        self.exact_cost(controller)
    }

    fn parameter_scales(&self) -> Option<Vec<f64>> {
        Some(vec![self.slope_floor, self.params.sigma_x0])
    }

    fn output_cost(&self, node: usize, outputs: &[f64]) -> f64 {
        self.control_cost_fast(node, outputs[0])
    }

    fn gradient_mode(&self) -> GradientMode {
        GradientMode::Analytic
    }

    fn output_derivatives(&self, node: usize, outputs: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let u = outputs[0];
        let x1 = self.x0_grid.nodes()[node] + u;
        let k2 = self.params.k * self.params.k;
        let (e0, e1, e2) = self.fast_error(x1);
        grad[0] = 2.0 * k2 * u + e1;
        hess[0] = 2.0 * k2 + e2;
        k2 * u * u + e0
    }
}

/// Cost of the linear map `f₁(x₀) = c·x₀` with its (linear) MMSE `g₂`.
pub fn affine_cost(params: &WceParams, c: f64) -> f64 {
    let s2 = params.sigma_x0 * params.sigma_x0;
    let k2 = params.k * params.k;
    k2 * (c - 1.0).powi(2) * s2 + c * c * s2 / (c * c * s2 + 1.0)
}

/// Best linear first-stage gain on `[0, 1.5]` by golden-section search.
/// Returns `(c*, J*)`.
pub fn best_affine_cost(params: &WceParams) -> (f64, f64) {
    golden_section(|c| affine_cost(params, c), 0.0, 1.5, 1e-12)
}

pub(crate) fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        }
    }
    let c = 0.5 * (lo + hi);
    (c, f(c))
}

/// Splits the nodes of a mapping into steps. A new step starts where the
/// model assignment changes and `f₁` jumps by more than `jump_tol`.
fn step_segments(f1: &[f64], assignment: Option<&[usize]>, jump_tol: f64) -> Vec<usize> {
    let mut seg = vec![0; f1.len()];
    for i in 1..f1.len() {
        let switched = assignment.map_or(true, |a| a[i] != a[i - 1]);
        let jumped = (f1[i] - f1[i - 1]).abs() > jump_tol;
        seg[i] = seg[i - 1] + usize::from(switched && jumped);
    }
    seg
}

/// Number of steps of `f₁` on the positive half-line. A step that
/// continues across the origin counts one half, unless it is the only one.
pub fn count_steps_of_mapping(nodes: &[f64], f1: &[f64], assignment: Option<&[usize]>, jump_tol: f64) -> f64 {
    let seg = step_segments(f1, assignment, jump_tol);
    let Some(first_pos) = nodes.iter().position(|&x| x > 0.0) else {
        return 0.0;
    };
    if seg[nodes.len() - 1] == 0 {
        // One run over the whole line, e.g. a linear map.
        return 1.0;
    }
    let steps = (seg[nodes.len() - 1] - seg[first_pos] + 1) as f64;
    let straddles = nodes
        .iter()
        .zip(&seg)
        .any(|(&x, &s)| x < 0.0 && s == seg[first_pos]);
    if straddles {
        steps - 0.5
    } else {
        steps
    }
}

/// Default jump threshold separating steps: one noise standard deviation.
/// Smaller jumps cannot be told apart by the second stage.
pub fn default_jump_tol(_params: &WceParams) -> f64 {
    1.0
}

/// Step count of a (quenched) controller.
pub fn count_steps(problem: &WceProblem, controller: &RandomizedController<LocalModel>) -> f64 {
    let assignment = controller.argmax_assignment();
    let f1 = hard_mapping(problem.x0_grid(), controller.models(), &assignment);
    count_steps_of_mapping(
        problem.x0_grid().nodes(),
        &f1,
        Some(&assignment),
        default_jump_tol(problem.params()),
    )
}

/// Deviation of each positive-half step from the chord joining its end
/// points: `(x₀, f₁(x₀) − chord(x₀), step index)` per node.
pub fn step_deviation(nodes: &[f64], f1: &[f64], assignment: Option<&[usize]>, jump_tol: f64) -> Vec<(f64, f64, usize)> {
    let seg = step_segments(f1, assignment, jump_tol);
    let positive: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i] > 0.0).collect();
    let mut out = Vec::with_capacity(positive.len());
    for (step, run) in positive.chunk_by(|&a, &b| seg[a] == seg[b]).enumerate() {
        let (lo, hi) = (run[0], run[run.len() - 1]);
        let (xa, fa, xb, fb) = (nodes[lo], f1[lo], nodes[hi], f1[hi]);
        for &t in run {
            let chord = if xb > xa {
                fa + (fb - fa) * (nodes[t] - xa) / (xb - xa)
            } else {
                fa
            };
            out.push((nodes[t], f1[t] - chord, step));
        }
    }
    out
}
