use approx::assert_abs_diff_eq;
use detanneal::engine::{
    anneal, parameter_gradient, parameter_gradient_fd, quench, LocalModel, Problem, RandomizedController, Schedule,
};
use detanneal::side_channel::*;
use detanneal::wce::{WceGrids, WceParams, WceProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem(lambda: f64) -> SideChannelProblem {
    SideChannelProblem::new(SideChannelParams::new(0.2, 5.0, lambda).unwrap(), SideChannelGrids::default()).unwrap()
}

fn paired(a1: f64, b1: f64, a2: f64, b2: f64) -> PairedLocalModel {
    PairedLocalModel::new(LocalModel::new(a1, b1), LocalModel::new(a2, b2))
}

fn random_controller(rng: &mut ChaCha8Rng, n: usize) -> RandomizedController<PairedLocalModel> {
    let m = rng.gen_range(1..4);
    let models: Vec<PairedLocalModel> = (0..m)
        .map(|_| {
            paired(
                rng.gen_range(-1.2..0.3),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-2.0..2.0),
            )
        })
        .collect();
    let mut assoc = Vec::with_capacity(n * m);
    for _ in 0..n {
        let r: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = r.iter().sum();
        assoc.extend(r.iter().map(|v| v / s));
    }
    RandomizedController::from_parts(models, assoc, n).unwrap()
}

/// Three cells split at ±4, side outputs mark the cell.
fn staircase(p: &SideChannelProblem, u2: f64) -> RandomizedController<PairedLocalModel> {
    let models = vec![paired(-1.0, -8.0, 0.0, -u2), paired(-1.0, 0.0, 0.0, 0.0), paired(-1.0, 8.0, 0.0, u2)];
    let assignment: Vec<usize> = p
        .x0_grid()
        .nodes()
        .iter()
        .map(|&x| if x < -4.0 { 0 } else if x > 4.0 { 2 } else { 1 })
        .collect();
    RandomizedController::deterministic(models, &assignment)
}

#[test]
fn gradients_match_finite_differences() {
    let mut p = SideChannelProblem::new(
        SideChannelParams::new(0.2, 5.0, 0.05).unwrap(),
        SideChannelGrids { x0_nodes: 401, ..SideChannelGrids::default() },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..100 {
        let ctl = random_controller(&mut rng, p.x0_grid().len());
        p.begin_temperature(&ctl);
        p.update_dependents(&ctl);
        for m in 0..ctl.n_models() {
            let g = parameter_gradient(&p, &ctl, m);
            let fd = parameter_gradient_fd(&p, &ctl, m, 1e-5);
            let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * scale, "analytic {a} vs numeric {b}");
            }
        }
    }
}

#[test]
fn estimator_is_node_wise_optimal() {
    let mut p = problem(0.1);
    let ctl = staircase(&p, 1.5);
    p.begin_temperature(&ctl);
    p.update_dependents(&ctl);
    let base = p.exact_cost(&ctl);
    let slots = p.g3().values().len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let s = rng.gen_range(0..slots);
        let v = p.g3().values()[s];
        let delta = if rng.gen::<bool>() { 1e-2 } else { -1e-2 };
        let mut q = p.clone();
        q.set_g3_value(s, v + delta);
        assert!(q.exact_cost(&ctl) >= base - 1e-10, "slot {s}");
    }
}

#[test]
fn heavy_power_price_reduces_to_wce() {
    let mut p = problem(1e6);
    let start = staircase(&p, 1.0);
    let (ctl, _) = quench(&mut p, &start, &Schedule::default()).unwrap();
    let b = snr_of(p.x0_grid(), &ctl);
    assert!(b < 1e-6, "side power {b}");

    let grids = WceGrids { x0_nodes: p.grids().x0_nodes, y_spacing: p.g3().y1().spacing(), ..WceGrids::default() };
    let mut w = WceProblem::new(WceParams::new(0.2, 5.0).unwrap(), grids).unwrap();
    let assignment = ctl.argmax_assignment();
    let wce_ctl = RandomizedController::deterministic(ctl.models().iter().map(|m| m.g1).collect(), &assignment);
    w.update_g2(&wce_ctl);
    assert!((p.control_objective(&ctl) - w.exact_cost(&wce_ctl)).abs() < 1e-3);
}

#[test]
fn mapping_evaluation_matches_the_controller() {
    let mut p = problem(0.0);
    let ctl = staircase(&p, 1.5);
    p.begin_temperature(&ctl);
    p.update_dependents(&ctl);
    let exact = p.control_objective(&ctl);
    let mapping = p.hard_mapping(&ctl);
    let f1: Vec<f64> = mapping.iter().map(|m| m.1).collect();
    let g2: Vec<f64> = mapping.iter().map(|m| m.2).collect();
    let c = p.evaluate_mapping(&f1, &g2).unwrap();
    assert_abs_diff_eq!(c.total, exact, epsilon = 1e-9);
    assert_abs_diff_eq!(c.b_snr, snr_of(p.x0_grid(), &ctl), epsilon = 1e-12);
}

#[test]
fn side_power_examples() {
    let p = problem(0.0);
    let grid = p.x0_grid();
    let n = grid.len();
    assert_eq!(snr_of(grid, &RandomizedController::single(paired(0.0, 0.0, 0.0, 0.0), n)), 0.0);
    let b = snr_of(grid, &RandomizedController::single(paired(0.0, 0.0, 0.0, 2.0), n));
    assert_abs_diff_eq!(b, 4.0 * grid.total_mass(), epsilon = 1e-12);
    let b = snr_of(grid, &RandomizedController::single(paired(0.0, 0.0, 1.0, 0.0), n));
    assert_abs_diff_eq!(b, 25.0, epsilon = 1e-2);
}

#[test]
fn discontinuities_of_both_controllers_coincide() {
    let params = SideChannelParams::new(0.2, 5.0, 0.3).unwrap();
    let grids = SideChannelGrids { x0_nodes: 201, y1_nodes: 121, y3_nodes: 61, table_step: 0.2, ..SideChannelGrids::default() };
    let schedule = Schedule { alpha: 0.6, perturb_eps: 0.3, ..Schedule::default() };
    let mut p = SideChannelProblem::new(params, grids).unwrap();
    let out = anneal(&mut p, &schedule, false).unwrap();
    let assignment = out.controller.argmax_assignment();
    let mapping = p.hard_mapping(&out.controller);
    for i in 1..mapping.len() {
        let (x, x_prev) = (mapping[i].0, mapping[i - 1].0);
        let dx = x - x_prev;
        let slope_bound = 2.0 * dx;
        let f1_jump = (mapping[i].1 - mapping[i - 1].1).abs() > 0.5 + slope_bound;
        let g2_jump = (mapping[i].2 - mapping[i - 1].2).abs() > 0.5 + slope_bound;
        if f1_jump || g2_jump {
            assert_ne!(assignment[i], assignment[i - 1], "jump between {x_prev} and {x}");
        }
    }
}

#[test]
fn best_linear_cost_examples() {
    let (_, j0) = best_linear_cost(0.2, 5.0, 0.0);
    assert_abs_diff_eq!(j0, 0.96, epsilon = 5e-3);
    let mut last = j0;
    for b in [1.0, 2.6, 4.7, 9.0] {
        let (_, j) = best_linear_cost(0.2, 5.0, b);
        assert!(j < last);
        last = j;
    }
}
