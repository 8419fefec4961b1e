use rand::Rng;

use super::AffineModel;
use crate::error::{Error, Result};
use crate::quadrature::QuadratureGrid;

/// Local models plus association probabilities `p(m | x)` over the nodes of
/// an input grid. `assoc` is row-major: one row per node, one column per
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedController<M> {
    models: Vec<M>,
    assoc: Vec<f64>,
    n_nodes: usize,
}

impl<M: AffineModel> RandomizedController<M> {
    /// Single model owning every node.
    pub fn single(model: M, n_nodes: usize) -> Self {
        Self {
            models: vec![model],
            assoc: vec![1.0; n_nodes],
            n_nodes,
        }
    }

    /// Every node associated uniformly with all models.
    pub fn uniform(models: Vec<M>, n_nodes: usize) -> Self {
        assert!(!models.is_empty());
        let p = 1.0 / models.len() as f64;
        let assoc = vec![p; n_nodes * models.len()];
        Self {
            models,
            assoc,
            n_nodes,
        }
    }

    /// Hard assignment of node `i` to model `assignment[i]`.
    pub fn deterministic(models: Vec<M>, assignment: &[usize]) -> Self {
        let m = models.len();
        let mut assoc = vec![0.0; assignment.len() * m];
        for (i, &a) in assignment.iter().enumerate() {
            assert!(a < m, "assignment refers to model {a} of {m}");
            assoc[i * m + a] = 1.0;
        }
        Self {
            models,
            assoc,
            n_nodes: assignment.len(),
        }
    }

    pub fn from_parts(models: Vec<M>, assoc: Vec<f64>, n_nodes: usize) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("models", "controller needs at least one model"));
        }
        if assoc.len() != n_nodes * models.len() {
            return Err(Error::invalid(
                "assoc",
                format!(
                    "expected {} entries for {} nodes × {} models, got {}",
                    n_nodes * models.len(),
                    n_nodes,
                    models.len(),
                    assoc.len()
                ),
            ));
        }
        let ctl = Self {
            models,
            assoc,
            n_nodes,
        };
        for i in 0..n_nodes {
            let row = ctl.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid("assoc", format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("assoc", format!("row {i} sums to {s}")));
            }
        }
        Ok(ctl)
    }

    pub fn models(&self) -> &[M] {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut [M] {
        &mut self.models
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn assoc(&self) -> &[f64] {
        &self.assoc
    }

    #[inline]
    pub fn prob(&self, node: usize, model: usize) -> f64 {
        self.assoc[node * self.models.len() + model]
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let m = self.models.len();
        &self.assoc[node * m..(node + 1) * m]
    }

    pub(crate) fn set_assoc(&mut self, assoc: Vec<f64>) {
        debug_assert_eq!(assoc.len(), self.n_nodes * self.models.len());
        self.assoc = assoc;
    }

    /// Most probable model at each node; ties go to the lowest index.
    pub fn argmax_assignment(&self) -> Vec<usize> {
        (0..self.n_nodes)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (m, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = m;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_one_hot(&self) -> bool {
        (0..self.n_nodes).all(|i| self.row(i).iter().all(|&p| p == 0.0 || p == 1.0))
    }

    /// Drop models that no node is associated with.
    pub fn prune_unused(&mut self) {
        let m = self.models.len();
        let keep: Vec<usize> = (0..m)
            .filter(|&j| (0..self.n_nodes).any(|i| self.assoc[i * m + j] > 0.0))
            .collect();
        if keep.len() == m || keep.is_empty() {
            return;
        }
        let models = keep.iter().map(|&j| self.models[j].clone()).collect();
        let mut assoc = Vec::with_capacity(self.n_nodes * keep.len());
        for i in 0..self.n_nodes {
            assoc.extend(keep.iter().map(|&j| self.assoc[i * m + j]));
        }
        self.models = models;
        self.assoc = assoc;
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.n_nodes)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Node × model matrix of association costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub n_nodes: usize,
    pub n_models: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_nodes: usize, n_models: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_nodes * n_models);
        Self {
            n_nodes,
            n_models,
            values,
        }
    }

    #[inline]
    pub fn get(&self, node: usize, model: usize) -> f64 {
        self.values[node * self.n_models + model]
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.n_models..(node + 1) * self.n_models]
    }
}

/// Gibbs association probabilities `p(m|x) ∝ exp(−d(x, m)/T)`, evaluated
/// with the row minimum subtracted.
pub fn gibbs_update(costs: &CostMatrix, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature", format!("must be positive, got {temperature}")));
    }
    let m = costs.n_models;
    let mut out = vec![0.0; costs.values.len()];
    for i in 0..costs.n_nodes {
        let row = costs.row(i);
        let mut min = f64::INFINITY;
        for &c in row {
            if !c.is_finite() {
                return Err(Error::NumericDomain(format!("cost {c} at node {i}")));
            }
            min = min.min(c);
        }
        let dst = &mut out[i * m..(i + 1) * m];
        let mut z = 0.0;
        for (d, &c) in dst.iter_mut().zip(row) {
            *d = (-(c - min) / temperature).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    Ok(out)
}

/// `H(M|X) = −Σₓ wₓ Σₘ p ln p`, natural log, `0·ln 0 = 0`.
pub fn entropy<M: AffineModel>(controller: &RandomizedController<M>, grid: &QuadratureGrid) -> f64 {
    let mut h = 0.0;
    for (i, &w) in grid.weights().iter().enumerate() {
        let row_h: f64 = controller
            .row(i)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h += w * row_h;
    }
    h
}

pub fn free_energy(cost: f64, entropy: f64, temperature: f64) -> f64 {
    cost - temperature * entropy
}

/// Total association mass `Σₓ wₓ p(m|x)` of each model.
pub fn model_masses<M: AffineModel>(controller: &RandomizedController<M>, grid: &QuadratureGrid) -> Vec<f64> {
    let mut mass = vec![0.0; controller.n_models()];
    for (i, &w) in grid.weights().iter().enumerate() {
        for (acc, &p) in mass.iter_mut().zip(controller.row(i)) {
            *acc += w * p;
        }
    }
    mass
}

/// Drop models whose total association mass is below `min_mass` and
/// renormalize the remaining rows. At least the heaviest model is kept.
pub fn prune_light_models<M: AffineModel>(
    controller: &RandomizedController<M>,
    grid: &QuadratureGrid,
    min_mass: f64,
) -> RandomizedController<M> {
    let mass = model_masses(controller, grid);
    let heaviest = (0..mass.len()).fold(0, |b, j| if mass[j] > mass[b] { j } else { b });
    let keep: Vec<usize> = (0..mass.len()).filter(|&j| j == heaviest || mass[j] >= min_mass).collect();
    if keep.len() == mass.len() {
        return controller.clone();
    }
    let models = keep.iter().map(|&j| controller.models()[j].clone()).collect();
    let mut assoc = Vec::with_capacity(controller.n_nodes() * keep.len());
    for i in 0..controller.n_nodes() {
        let row = controller.row(i);
        let start = assoc.len();
        assoc.extend(keep.iter().map(|&j| row[j]));
        let total: f64 = assoc[start..].iter().sum();
        if total > 0.0 {
            assoc[start..].iter_mut().for_each(|p| *p /= total);
        } else {
            let k = keep.iter().position(|&j| j == heaviest).unwrap_or(0);
            assoc[start + k] = 1.0;
        }
    }
    RandomizedController { models, assoc, n_nodes: controller.n_nodes() }
}

/// Copy every model, perturb each copy's parameters by independent uniform
/// draws in `±eps·(|θ| + eps)`, and split each association column evenly
/// between original and copy. Copies are appended after the originals.
///
/// Returns the input unchanged (and `false`) when doubling would exceed
/// `max_models`.
pub fn duplicate_and_perturb<M: AffineModel, R: Rng>(
    controller: &RandomizedController<M>,
    eps: f64,
    max_models: usize,
    rng: &mut R,
) -> (RandomizedController<M>, bool) {
    duplicate_and_perturb_scaled(controller, eps, &vec![eps; M::param_count()], max_models, rng)
}

/// [`duplicate_and_perturb`] with per-parameter floors: parameter `i`
/// moves by up to `eps·(|θᵢ| + floor[i])`.
pub fn duplicate_and_perturb_scaled<M: AffineModel, R: Rng>(
    controller: &RandomizedController<M>,
    eps: f64,
    floor: &[f64],
    max_models: usize,
    rng: &mut R,
) -> (RandomizedController<M>, bool) {
    let m = controller.n_models();
    if 2 * m > max_models {
        return (controller.clone(), false);
    }
    let mut models = controller.models.clone();
    for original in &controller.models {
        let mut copy = original.clone();
        for p in 0..M::param_count() {
            let v = copy.param(p);
            let u: f64 = rng.gen_range(-1.0..=1.0);
            copy.set_param(p, v + u * eps * (v.abs() + floor[p]));
        }
        models.push(copy);
    }
    let mut assoc = vec![0.0; controller.n_nodes * 2 * m];
    for i in 0..controller.n_nodes {
        let src = controller.row(i);
        let dst = &mut assoc[i * 2 * m..(i + 1) * 2 * m];
        for (j, &p) in src.iter().enumerate() {
            let half = 0.5 * p;
            dst[j] = half;
            // p − half rather than half again, so the row sum is unchanged
            // bit for bit.
            dst[m + j] = p - half;
        }
    }
    (
        RandomizedController {
            models,
            assoc,
            n_nodes: controller.n_nodes,
        },
        true,
    )
}

/// Coalesce models connected by the relation `distance < tol` (transitive
/// closure). Merged parameters are the association-mass weighted average;
/// merged columns are summed.
pub fn merge_models<M: AffineModel>(
    controller: &RandomizedController<M>,
    grid: &QuadratureGrid,
    tol: f64,
) -> RandomizedController<M> {
    let m = controller.n_models();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..m {
        for b in (a + 1)..m {
            if controller.models[a].distance(&controller.models[b]) < tol {
                let ra = find(&mut parent, a);
                let rb = find(&mut parent, b);
                if ra != rb {
                    let (lo, hi) = (ra.min(rb), ra.max(rb));
                    parent[hi] = lo;
                }
            }
        }
    }
    // Groups in order of their smallest member.
    let mut group_of = vec![usize::MAX; m];
    let mut roots = Vec::new();
    for j in 0..m {
        let r = find(&mut parent, j);
        if group_of[r] == usize::MAX {
            group_of[r] = roots.len();
            roots.push(r);
        }
        group_of[j] = group_of[r];
    }
    let g = roots.len();
    if g == m {
        return controller.clone();
    }

    let mass = model_masses(controller, grid);
    let n_params = M::param_count();
    let mut models = Vec::with_capacity(g);
    for &root in &roots {
        let members: Vec<usize> = (0..m).filter(|&j| group_of[j] == group_of[root]).collect();
        let total: f64 = members.iter().map(|&j| mass[j]).sum();
        let mut merged = controller.models[root].clone();
        for p in 0..n_params {
            let v = if total > 0.0 {
                members
                    .iter()
                    .map(|&j| mass[j] * controller.models[j].param(p))
                    .sum::<f64>()
                    / total
            } else {
                members.iter().map(|&j| controller.models[j].param(p)).sum::<f64>()
                    / members.len() as f64
            };
            merged.set_param(p, v);
        }
        models.push(merged);
    }

    let mut assoc = vec![0.0; controller.n_nodes * g];
    for i in 0..controller.n_nodes {
        for (j, &p) in controller.row(i).iter().enumerate() {
            assoc[i * g + group_of[j]] += p;
        }
    }
    RandomizedController {
        models,
        assoc,
        n_nodes: controller.n_nodes,
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::LocalModel;
    use crate::quadrature::build_grid;

    fn grid(n: usize) -> QuadratureGrid {
        build_grid(0.0, 1.0, 5.0, n).unwrap()
    }

    #[test]
    fn gibbs_examples() {
        let p = gibbs_update(&CostMatrix::new(1, 2, vec![1.0, 1.0]), 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = gibbs_update(&CostMatrix::new(1, 2, vec![0.0, 2f64.ln()]), 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = gibbs_update(&CostMatrix::new(1, 2, vec![0.1, 0.2]), 1e-6).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gibbs_rejects_bad_input() {
        assert!(gibbs_update(&CostMatrix::new(1, 2, vec![f64::NAN, 0.0]), 1.0).is_err());
        assert!(gibbs_update(&CostMatrix::new(1, 2, vec![f64::INFINITY, 0.0]), 1.0).is_err());
        assert!(gibbs_update(&CostMatrix::new(1, 2, vec![0.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn gibbs_survives_extreme_temperatures() {
        let p = gibbs_update(&CostMatrix::new(1, 3, vec![1e6, 1e6 + 1.0, 0.5e6]), 1e-8).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn entropy_examples() {
        let g = grid(101);
        let models = vec![LocalModel::default(); 4];
        let ctl = RandomizedController::uniform(models.clone(), g.len());
        assert_abs_diff_eq!(entropy(&ctl, &g), 4f64.ln() * g.total_mass(), epsilon = 1e-12);
        let assignment: Vec<usize> = (0..g.len()).map(|i| i % 4).collect();
        let ctl = RandomizedController::deterministic(models, &assignment);
        assert_eq!(entropy(&ctl, &g), 0.0);
        let ctl = RandomizedController::single(LocalModel::default(), g.len());
        assert_eq!(entropy(&ctl, &g), 0.0);
    }

    #[test]
    fn free_energy_examples() {
        assert_eq!(free_energy(2.0, 1.0, 0.5), 1.5);
        assert_eq!(free_energy(0.7, 0.0, 3.0), 0.7);
    }

    #[test]
    fn duplicate_single_model() {
        let g = grid(11);
        let ctl = RandomizedController::single(LocalModel::new(0.3, -2.0), g.len());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (dup, done) = duplicate_and_perturb(&ctl, 1e-2, 64, &mut rng);
        assert!(done);
        assert_eq!(dup.n_models(), 2);
        assert_eq!(dup.models()[0], ctl.models()[0]);
        let c = dup.models()[1];
        assert!((c.slope - 0.3).abs() <= 1e-2 * (0.3 + 1e-2));
        assert!((c.intercept + 2.0).abs() <= 1e-2 * (2.0 + 1e-2));
        for i in 0..g.len() {
            assert_eq!(dup.row(i), &[0.5, 0.5]);
        }
    }

    #[test]
    fn duplicate_is_deterministic_and_respects_cap() {
        let ctl = RandomizedController::uniform(
            vec![LocalModel::new(1.0, 2.0), LocalModel::new(-1.0, 0.5)],
            5,
        );
        let a = duplicate_and_perturb(&ctl, 1e-2, 64, &mut ChaCha8Rng::seed_from_u64(3)).0;
        let b = duplicate_and_perturb(&ctl, 1e-2, 64, &mut ChaCha8Rng::seed_from_u64(3)).0;
        assert_eq!(a, b);
        let (c, done) = duplicate_and_perturb(&ctl, 1e-2, 3, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(!done);
        assert_eq!(c, ctl);
    }

    #[test]
    fn merge_examples() {
        let g = grid(21);
        let eq = RandomizedController::uniform(vec![LocalModel::new(1.0, 0.0); 2], g.len());
        let merged = merge_models(&eq, &g, 1e-4);
        assert_eq!(merged.n_models(), 1);
        assert!(merged.max_row_error() == 0.0);

        let apart = RandomizedController::uniform(
            vec![LocalModel::new(1.0, 0.0), LocalModel::new(1.0, 5.0)],
            g.len(),
        );
        assert_eq!(merge_models(&apart, &g, 1e-4).n_models(), 2);

        // A chain: a~b and b~c but not a~c.
        let chain = RandomizedController::uniform(
            vec![
                LocalModel::new(0.0, 0.0),
                LocalModel::new(0.0, 0.6e-4),
                LocalModel::new(0.0, 1.2e-4),
            ],
            g.len(),
        );
        let merged = merge_models(&chain, &g, 1e-4);
        assert_eq!(merged.n_models(), 1);
        assert_abs_diff_eq!(merged.models()[0].intercept, 0.6e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(merged.max_row_error(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn prune_drops_empty_columns() {
        let models = vec![LocalModel::new(0.0, 1.0), LocalModel::new(0.0, 2.0), LocalModel::new(0.0, 3.0)];
        let mut ctl = RandomizedController::deterministic(models, &[0, 2, 2, 0]);
        ctl.prune_unused();
        assert_eq!(ctl.n_models(), 2);
        assert_eq!(ctl.argmax_assignment(), vec![0, 1, 1, 0]);
    }
}
