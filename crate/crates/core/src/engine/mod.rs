//! Deterministic annealing over randomized piecewise-affine controllers.
//!
//! A controller's input space (a [`QuadratureGrid`]) is softly partitioned
//! among a set of local affine models. At temperature `T` the engine
//! minimizes the free energy `F = J − T·H`, where `J` is the expected cost
//! supplied by a [`Problem`] and `H` is the conditional entropy of the
//! association probabilities. The temperature is lowered geometrically;
//! models are duplicated and perturbed at every step so that phase
//! transitions can occur, and coincident models are merged back together.
//! At the end a zero-temperature quench yields a deterministic mapping.

mod anneal;
mod controller;

pub use anneal::{
    anneal, expected_cost, fill_costs, optimize_at_temperature, parameter_gradient,
    parameter_gradient_fd, quench, AnnealOutcome, AnnealTrace, InnerRecord, Schedule, Snapshot,
    TemperatureOutcome, TraceRecord,
};
pub use controller::{
    duplicate_and_perturb, duplicate_and_perturb_scaled, entropy, free_energy, gibbs_update, merge_models, model_masses,
    prune_light_models,
    CostMatrix, RandomizedController,
};

use std::fmt::Debug;

use crate::quadrature::QuadratureGrid;

/// One affine local model `u = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalModel {
    pub slope: f64,
    pub intercept: f64,
}

impl LocalModel {
    pub const fn new(slope: f64, intercept: f64) -> Self {
        Self { slope, intercept }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    pub fn is_finite(&self) -> bool {
        self.slope.is_finite() && self.intercept.is_finite()
    }
}

/// A partition-cell model made of one affine map per controller output.
///
/// Parameters are addressed as a flat vector
/// `[slope₀, intercept₀, slope₁, intercept₁, …]`.
pub trait AffineModel: Clone + Debug + PartialEq {
    const OUTPUTS: usize;

    fn affine(&self, output: usize) -> &LocalModel;
    fn affine_mut(&mut self, output: usize) -> &mut LocalModel;

    fn param_count() -> usize {
        2 * Self::OUTPUTS
    }

    fn param(&self, i: usize) -> f64 {
        let m = self.affine(i / 2);
        if i % 2 == 0 {
            m.slope
        } else {
            m.intercept
        }
    }

    fn set_param(&mut self, i: usize, value: f64) {
        let m = self.affine_mut(i / 2);
        if i % 2 == 0 {
            m.slope = value;
        } else {
            m.intercept = value;
        }
    }

    fn outputs(&self, x: f64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(Self::OUTPUTS) {
            *o = self.affine(k).eval(x);
        }
    }

    /// `max |Δθ|` over all parameters.
    fn distance(&self, other: &Self) -> f64 {
        (0..Self::param_count())
            .map(|i| (self.param(i) - other.param(i)).abs())
            .fold(0.0, f64::max)
    }
}

impl AffineModel for LocalModel {
    const OUTPUTS: usize = 1;

    fn affine(&self, _output: usize) -> &LocalModel {
        self
    }

    fn affine_mut(&mut self, _output: usize) -> &mut LocalModel {
        self
    }
}

/// How a problem provides derivatives of its association cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// A control problem whose first-stage controller is optimized by the engine.
///
/// The engine only ever sees per-node costs as functions of the model
/// outputs at that node. Any dependent controllers (conditional-mean
/// estimators and the like) live inside the problem and are refreshed by
/// [`Problem::update_dependents`].
pub trait Problem: Sized {
    type Model: AffineModel;

    /// Grid over the randomized controller's input.
    fn input_grid(&self) -> &QuadratureGrid;

    /// Starting model for the single-model high-temperature phase.
    fn initial_model(&self) -> Self::Model;

    /// A cost scale for the problem instance, used to place the initial
    /// temperature when the schedule does not fix one.
    fn reference_cost(&self) -> f64;

    /// Called once before the inner iterations at each temperature and
    /// before quenching.
    fn begin_temperature(&mut self, _controller: &RandomizedController<Self::Model>) {}

    /// Recompute the non-randomized controllers for the current controller.
    fn update_dependents(&mut self, controller: &RandomizedController<Self::Model>);

    /// Conditional cost of producing `outputs` at input node `node`.
    fn output_cost(&self, node: usize, outputs: &[f64]) -> f64;

    /// Cost reported for a finished controller. Problems that optimize a
    /// cheaper surrogate of [`Problem::output_cost`] evaluate the exact
    /// objective here.
    fn reported_cost(&self, controller: &RandomizedController<Self::Model>) -> f64 {
        expected_cost(self, controller)
    }

    /// Typical magnitude of each model parameter, used as the floor of the
    /// perturbation size. `None` uses the perturbation magnitude itself.
    fn parameter_scales(&self) -> Option<Vec<f64>> {
        None
    }

    fn gradient_mode(&self) -> GradientMode {
        GradientMode::FiniteDifference
    }

    /// Cost, gradient and Hessian (row-major, `OUTPUTS × OUTPUTS`) with
    /// respect to the outputs at `node`, dependents held fixed.
    ///
    /// The default uses central differences of [`Problem::output_cost`].
    fn output_derivatives(
        &self,
        node: usize,
        outputs: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64 {
        finite_difference_derivatives(|u| self.output_cost(node, u), outputs, grad, hess)
    }
}

/// Central-difference gradient and Hessian of a function of a few variables.
pub fn finite_difference_derivatives<F>(f: F, at: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let n = at.len();
    let f0 = f(at);
    let mut u = at.to_vec();
    let step = |v: f64| 1e-4 * (1.0 + v.abs());
    for i in 0..n {
        let hi = step(at[i]);
        u[i] = at[i] + hi;
        let fp = f(&u);
        u[i] = at[i] - hi;
        let fm = f(&u);
        u[i] = at[i];
        grad[i] = (fp - fm) / (2.0 * hi);
        hess[i * n + i] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = step(at[j]);
            let mut corner = |si: f64, sj: f64| {
                u[i] = at[i] + si * hi;
                u[j] = at[j] + sj * hj;
                let v = f(&u);
                u[i] = at[i];
                u[j] = at[j];
                v
            };
            let mixed = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                + corner(-1.0, -1.0))
                / (4.0 * hi * hj);
            hess[i * n + j] = mixed;
            hess[j * n + i] = mixed;
        }
    }
    f0
}
