use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::controller::{
    duplicate_and_perturb_scaled, entropy, free_energy, gibbs_update, merge_models, prune_light_models, CostMatrix,
    RandomizedController,
};
use super::{AffineModel, Problem};
use crate::error::{Error, Result};

/// Annealing schedule and inner-loop budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Starting temperature; `None` means five times the problem's
    /// reference cost.
    pub t_init: Option<f64>,
    /// Geometric cooling factor.
    pub alpha: f64,
    /// Final temperature; `None` means `1e-4 · t_init`.
    pub t_min: Option<f64>,
    pub perturb_eps: f64,
    pub merge_tol: f64,
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    pub max_models: usize,
    /// Models whose association mass falls below this are dropped before
    /// duplication.
    pub prune_mass: f64,
    pub rng_seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            t_init: None,
            alpha: 0.95,
            t_min: None,
            perturb_eps: 1e-2,
            merge_tol: 1e-3,
            inner_tol: 1e-7,
            max_inner_iters: 200,
            max_models: 64,
            prune_mass: 1e-6,
            rng_seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(t) = self.t_init {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("t_init", format!("must be positive, got {t}")));
            }
        }
        if let Some(t) = self.t_min {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("t_min", format!("must be positive, got {t}")));
            }
        }
        if let (Some(hi), Some(lo)) = (self.t_init, self.t_min) {
            if !(hi > lo) {
                return Err(Error::invalid("t_min", format!("must be below t_init ({lo} >= {hi})")));
            }
        }
        for (name, v) in [
            ("perturb_eps", self.perturb_eps),
            ("merge_tol", self.merge_tol),
            ("inner_tol", self.inner_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.max_inner_iters == 0 {
            return Err(Error::invalid("max_inner_iters", "must be at least 1"));
        }
        if self.max_models == 0 {
            return Err(Error::invalid("max_models", "must be at least 1"));
        }
        if !(self.prune_mass >= 0.0 && self.prune_mass < 1.0) {
            return Err(Error::invalid("prune_mass", format!("must lie in [0, 1), got {}", self.prune_mass)));
        }
        Ok(())
    }

    /// `(t_init, t_min)` for a problem with the given reference cost.
    pub fn temperatures(&self, reference_cost: f64) -> Result<(f64, f64)> {
        let t_init = self.t_init.unwrap_or(5.0 * reference_cost);
        let t_min = self.t_min.unwrap_or(1e-4 * t_init);
        if !(t_init > t_min && t_min > 0.0) {
            return Err(Error::invalid(
                "t_min",
                format!("need t_init > t_min > 0, got {t_init} and {t_min}"),
            ));
        }
        Ok((t_init, t_min))
    }
}

/// One per-temperature row of the annealing trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub temperature: f64,
    pub cost: f64,
    pub entropy: f64,
    pub free_energy: f64,
    pub models: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnealTrace {
    pub records: Vec<TraceRecord>,
}

/// Free energy after one inner cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerRecord {
    pub step: usize,
    pub temperature: f64,
    pub iteration: usize,
    pub cost: f64,
    pub free_energy: f64,
}

/// Models and most-probable assignment at the end of one temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<M> {
    pub temperature: f64,
    pub models: Vec<M>,
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureOutcome {
    pub cost: f64,
    pub entropy: f64,
    pub free_energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct AnnealOutcome<M> {
    pub controller: RandomizedController<M>,
    pub trace: AnnealTrace,
    pub inner: Vec<InnerRecord>,
    pub snapshots: Vec<Snapshot<M>>,
    /// Expected cost of the randomized controller entering the quench.
    pub pre_quench_cost: f64,
    /// Expected cost of the returned deterministic controller.
    pub cost: f64,
    pub t_init: f64,
    pub t_min: f64,
    /// Duplication was skipped at least once because of `max_models`.
    pub model_cap_hit: bool,
    /// Temperatures whose inner loop hit `max_inner_iters`.
    pub unconverged_temperatures: usize,
}

/// Association costs for every node × model pair.
pub fn fill_costs<P: Problem>(problem: &P, controller: &RandomizedController<P::Model>) -> CostMatrix {
    let grid = problem.input_grid();
    let m = controller.n_models();
    let mut out = vec![0.0; M_OUT_MAX];
    let n_out = <P::Model as AffineModel>::OUTPUTS;
    let mut values = Vec::with_capacity(grid.len() * m);
    for (i, &x) in grid.nodes().iter().enumerate() {
        for model in controller.models() {
            model.outputs(x, &mut out[..n_out]);
            values.push(problem.output_cost(i, &out[..n_out]));
        }
    }
    CostMatrix::new(grid.len(), m, values)
}

const M_OUT_MAX: usize = 4;

fn cost_of(costs: &CostMatrix, controller_assoc: &[f64], weights: &[f64]) -> f64 {
    let m = costs.n_models;
    let mut j = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        let mut row = 0.0;
        for k in 0..m {
            let p = controller_assoc[i * m + k];
            if p > 0.0 {
                row += p * costs.values[i * m + k];
            }
        }
        j += w * row;
    }
    j
}

/// `J = Σₓ wₓ Σₘ p(m|x)·d(x, m)` with the dependents as they currently are.
pub fn expected_cost<P: Problem>(problem: &P, controller: &RandomizedController<P::Model>) -> f64 {
    let costs = fill_costs(problem, controller);
    cost_of(&costs, controller.assoc(), problem.input_grid().weights())
}

/// Nodes that model `m` has non-zero association mass on, with that mass.
fn active_nodes<P: Problem>(
    problem: &P,
    controller: &RandomizedController<P::Model>,
    m: usize,
) -> Vec<(usize, f64)> {
    problem
        .input_grid()
        .weights()
        .iter()
        .enumerate()
        .filter_map(|(i, &w)| {
            let q = w * controller.prob(i, m);
            (q > 0.0).then_some((i, q))
        })
        .collect()
}

fn partial_cost<P: Problem>(problem: &P, active: &[(usize, f64)], model: &P::Model) -> f64 {
    let nodes = problem.input_grid().nodes();
    let n_out = <P::Model as AffineModel>::OUTPUTS;
    let mut out = [0.0; M_OUT_MAX];
    let mut j = 0.0;
    for &(i, q) in active {
        model.outputs(nodes[i], &mut out[..n_out]);
        j += q * problem.output_cost(i, &out[..n_out]);
    }
    j
}

/// Value, gradient and Hessian of one model's share of `J` in its
/// parameters.
fn partial_derivatives<P: Problem>(
    problem: &P,
    active: &[(usize, f64)],
    model: &P::Model,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let nodes = problem.input_grid().nodes();
    let n_out = <P::Model as AffineModel>::OUTPUTS;
    let n_par = 2 * n_out;
    let mut out = [0.0; M_OUT_MAX];
    let mut gu = [0.0; M_OUT_MAX];
    let mut hu = [0.0; M_OUT_MAX * M_OUT_MAX];
    let mut value = 0.0;
    let mut grad = DVector::zeros(n_par);
    let mut hess = DMatrix::zeros(n_par, n_par);
    for &(i, q) in active {
        let x = nodes[i];
        model.outputs(x, &mut out[..n_out]);
        value += q * problem.output_derivatives(i, &out[..n_out], &mut gu[..n_out], &mut hu[..n_out * n_out]);
        let feat = [x, 1.0];
        for k in 0..n_out {
            for s in 0..2 {
                grad[2 * k + s] += q * gu[k] * feat[s];
                for l in 0..n_out {
                    for t in 0..2 {
                        hess[(2 * k + s, 2 * l + t)] += q * hu[k * n_out + l] * feat[s] * feat[t];
                    }
                }
            }
        }
    }
    (value, grad, hess)
}

/// Gradient of `J` in the parameters of model `m` with associations and
/// dependents held fixed, from the problem's output derivatives.
pub fn parameter_gradient<P: Problem>(
    problem: &P,
    controller: &RandomizedController<P::Model>,
    m: usize,
) -> Vec<f64> {
    let active = active_nodes(problem, controller, m);
    let (_, g, _) = partial_derivatives(problem, &active, &controller.models()[m]);
    g.iter().copied().collect()
}

/// Central-difference version of [`parameter_gradient`].
pub fn parameter_gradient_fd<P: Problem>(
    problem: &P,
    controller: &RandomizedController<P::Model>,
    m: usize,
    step: f64,
) -> Vec<f64> {
    let active = active_nodes(problem, controller, m);
    let base = &controller.models()[m];
    (0..<P::Model as AffineModel>::param_count())
        .map(|p| {
            let mut hi = base.clone();
            hi.set_param(p, base.param(p) + step);
            let mut lo = base.clone();
            lo.set_param(p, base.param(p) - step);
            (partial_cost(problem, &active, &hi) - partial_cost(problem, &active, &lo)) / (2.0 * step)
        })
        .collect()
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 50;

/// Damped Newton direction followed by a halving Armijo line search on one
/// model's share of `J`. Returns the improved model, or `None` when no
/// descent step was found.
fn descend_model<P: Problem>(problem: &P, active: &[(usize, f64)], model: &P::Model) -> Option<P::Model> {
    if active.is_empty() {
        return None;
    }
    let (value, grad, hess) = partial_derivatives(problem, active, model);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) || grad.norm() == 0.0 {
        return None;
    }
    let n = grad.len();
    let diag: Vec<f64> = (0..n).map(|i| hess[(i, i)].abs().max(1e-300)).collect();
    let mut direction = None;
    for damping in [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6] {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += damping * diag[i];
        }
        if let Some(chol) = h.cholesky() {
            let d = chol.solve(&(-&grad));
            if grad.dot(&d) < 0.0 && d.iter().all(|v| v.is_finite()) {
                direction = Some(d);
                break;
            }
        }
    }
    // Diagonally scaled steepest descent as the last resort.
    let direction = direction.unwrap_or_else(|| {
        DVector::from_iterator(n, (0..n).map(|i| -grad[i] / diag[i].max(1e-12)))
    });
    let slope = grad.dot(&direction);
    let mut step = 1.0;
    for _ in 0..MAX_HALVINGS {
        let mut trial = model.clone();
        for p in 0..n {
            trial.set_param(p, model.param(p) + step * direction[p]);
        }
        let v = partial_cost(problem, active, &trial);
        if v.is_finite() && v <= value + ARMIJO * step * slope {
            return (v < value).then_some(trial);
        }
        step *= 0.5;
    }
    None
}

/// One descent step on every model with the associations fixed.
fn descend_all<P: Problem>(problem: &P, controller: &mut RandomizedController<P::Model>) {
    for m in 0..controller.n_models() {
        let active = active_nodes(problem, controller, m);
        if let Some(better) = descend_model(problem, &active, &controller.models()[m]) {
            controller.models_mut()[m] = better;
        }
    }
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericDomain(format!("{what} became {value}")))
    }
}

/// Minimize `F = J − T·H` at a fixed temperature by cycling
/// dependents → costs → Gibbs associations → parameter descent until the
/// relative change in `F` drops below `inner_tol`.
///
/// When `inner` is given, the free energy after every cycle is appended
/// to it (the first record is the state on entry).
pub fn optimize_at_temperature<P: Problem>(
    problem: &mut P,
    controller: &mut RandomizedController<P::Model>,
    temperature: f64,
    schedule: &Schedule,
    step: usize,
    mut inner: Option<&mut Vec<InnerRecord>>,
) -> Result<TemperatureOutcome> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature", format!("must be positive, got {temperature}")));
    }
    problem.begin_temperature(controller);
    problem.update_dependents(controller);
    let mut costs = fill_costs(problem, controller);
    let weights = problem.input_grid().weights().to_vec();
    let mut cost = check_finite(cost_of(&costs, controller.assoc(), &weights), "expected cost")?;
    let mut h = entropy(controller, problem.input_grid());
    let mut f = free_energy(cost, h, temperature);
    if let Some(log) = inner.as_deref_mut() {
        log.push(InnerRecord {
            step,
            temperature,
            iteration: 0,
            cost,
            free_energy: f,
        });
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < schedule.max_inner_iters {
        iterations += 1;
        controller.set_assoc(gibbs_update(&costs, temperature)?);
        descend_all(problem, controller);
        problem.update_dependents(controller);
        costs = fill_costs(problem, controller);
        cost = check_finite(cost_of(&costs, controller.assoc(), &weights), "expected cost")?;
        h = entropy(controller, problem.input_grid());
        let next = check_finite(free_energy(cost, h, temperature), "free energy")?;
        if let Some(log) = inner.as_deref_mut() {
            log.push(InnerRecord {
                step,
                temperature,
                iteration: iterations,
                cost,
                free_energy: next,
            });
        }
        let change = (f - next).abs();
        f = next;
        if change <= schedule.inner_tol * f.abs().max(1e-12) {
            converged = true;
            break;
        }
    }
    Ok(TemperatureOutcome {
        cost,
        entropy: h,
        free_energy: f,
        iterations,
        converged,
    })
}

/// Hard-assign every node to its cheapest model (ties to the lowest index).
fn hard_assignment(costs: &CostMatrix) -> Vec<usize> {
    (0..costs.n_nodes)
        .map(|i| {
            let row = costs.row(i);
            let mut best = 0;
            for (m, &c) in row.iter().enumerate() {
                if c < row[best] {
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Zero-temperature iteration: alternate hard assignment to the cheapest
/// model, dependent update and parameter descent until `J` stops
/// decreasing. Unused models are dropped from the result.
pub fn quench<P: Problem>(
    problem: &mut P,
    controller: &RandomizedController<P::Model>,
    schedule: &Schedule,
) -> Result<(RandomizedController<P::Model>, f64)> {
    problem.begin_temperature(controller);
    problem.update_dependents(controller);
    let mut costs = fill_costs(problem, controller);
    let weights = problem.input_grid().weights().to_vec();
    let mut cost = check_finite(cost_of(&costs, controller.assoc(), &weights), "expected cost")?;
    let mut current = controller.clone();

    for _ in 0..schedule.max_inner_iters {
        let assignment = hard_assignment(&costs);
        let mut next = RandomizedController::deterministic(current.models().to_vec(), &assignment);
        descend_all(problem, &mut next);
        problem.update_dependents(&next);
        let next_costs = fill_costs(problem, &next);
        let next_cost = check_finite(cost_of(&next_costs, next.assoc(), &weights), "expected cost")?;
        let improvement = cost - next_cost;
        if improvement < 0.0 && current.is_one_hot() {
            // Rounding noise at a fixed point; keep the previous state.
            break;
        }
        current = next;
        costs = next_costs;
        cost = next_cost;
        if improvement <= schedule.inner_tol * cost.abs().max(1e-12) {
            break;
        }
    }
    if !current.is_one_hot() {
        let assignment = hard_assignment(&costs);
        current = RandomizedController::deterministic(current.models().to_vec(), &assignment);
    }
    current.prune_unused();
    problem.update_dependents(&current);
    let cost = check_finite(problem.reported_cost(&current), "expected cost")?;
    Ok((current, cost))
}

/// Full annealing run: single model at `t_init`, then geometric cooling
/// with optimize → record → merge → duplicate at every temperature, and a
/// final merge + quench.
pub fn anneal<P: Problem>(problem: &mut P, schedule: &Schedule, verbose: bool) -> Result<AnnealOutcome<P::Model>> {
    schedule.validate()?;
    let (t_init, t_min) = schedule.temperatures(problem.reference_cost())?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.rng_seed);
    let n_nodes = problem.input_grid().len();
    let mut controller = RandomizedController::single(problem.initial_model(), n_nodes);

    let mut trace = AnnealTrace::default();
    let mut inner = Vec::new();
    let mut snapshots = Vec::new();
    let mut model_cap_hit = false;
    let mut unconverged = 0;

    let floor = problem
        .parameter_scales()
        .unwrap_or_else(|| vec![schedule.perturb_eps; P::Model::param_count()]);
    let mut temperature = t_init;
    let mut step = 0;
    loop {
        let outcome = optimize_at_temperature(
            problem,
            &mut controller,
            temperature,
            schedule,
            step,
            verbose.then_some(&mut inner),
        )?;
        if !outcome.converged {
            unconverged += 1;
        }
        trace.records.push(TraceRecord {
            temperature,
            cost: outcome.cost,
            entropy: outcome.entropy,
            free_energy: outcome.free_energy,
            models: controller.n_models(),
        });
        snapshots.push(Snapshot {
            temperature,
            models: controller.models().to_vec(),
            assignment: controller.argmax_assignment(),
        });

        controller = merge_models(&controller, problem.input_grid(), schedule.merge_tol);
        controller = prune_light_models(&controller, problem.input_grid(), schedule.prune_mass);
        let next = temperature * schedule.alpha;
        if next < t_min {
            break;
        }
        let (dup, duplicated) =
            duplicate_and_perturb_scaled(&controller, schedule.perturb_eps, &floor, schedule.max_models, &mut rng);
        model_cap_hit |= !duplicated;
        controller = dup;
        temperature = next;
        step += 1;
    }

    problem.update_dependents(&controller);
    let pre_quench_cost = problem.reported_cost(&controller);
    let (controller, cost) = quench(problem, &controller, schedule)?;
    Ok(AnnealOutcome {
        controller,
        trace,
        inner,
        snapshots,
        pre_quench_cost,
        cost,
        t_init,
        t_min,
        model_cap_hit,
        unconverged_temperatures: unconverged,
    })
}
