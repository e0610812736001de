use activebed::bayes_grid::NoiseModel;
use activebed::discrepancy_trainer::{adjoint_solve, solve_trajectory};
use activebed::experiment::gradcheck::{check_gradients, GradCheckConfig};
use activebed::experiment::Scenario;
use activebed::grid_pde::{
    integrate, observe, GridSpec, ObservationStencil, SolverConfig, SourceField, StateField,
    TimeGrid, VelocityModel,
};

#[test]
fn strength_gradient_matches_finite_differences() {
    let r = check_gradients(Scenario::Parametric, &GradCheckConfig::default()).unwrap();
    assert_eq!(r.parameters, 1);
    assert_eq!(r.draws.len(), 20);
    assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
}

#[test]
fn network_gradient_matches_finite_differences() {
    let r = check_gradients(Scenario::Structural, &GradCheckConfig::default()).unwrap();
    assert_eq!(r.parameters, 37);
    assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
    // Not vacuous: the gradient is far from zero.
    assert!(r.draws.iter().all(|d| d.adjoint.iter().any(|g| g.abs() > 1e-3)));
}

#[test]
fn initial_condition_gradient_matches_finite_differences() {
    let grid = GridSpec::new(-2.0, 3.0, 5).unwrap();
    let vel = VelocityModel::linear(20.0);
    let noise = NoiseModel::new(0.05).unwrap();
    let tg = TimeGrid::build(&grid, &vel, &SolverConfig::default(), 0.0, 0.3).unwrap();
    let src = SourceField::sample(grid, |x, y| (-(x - 0.5).powi(2) - y * y).exp()).unwrap();
    let loc = (0.7, 0.2);
    let y_obs = 0.9;
    let u0: Vec<f64> = (0..grid.node_count()).map(|k| 0.3 * (k as f64 * 0.7).cos()).collect();
    let objective = |u: &[f64]| {
        let s0 = StateField::new(grid, u.to_vec(), 0.0).unwrap();
        let end = integrate(&s0, &vel, &src, &tg).unwrap();
        noise.log_density(y_obs - observe(&end, loc).unwrap())
    };

    let s0 = StateField::new(grid, u0.clone(), 0.0).unwrap();
    let traj = solve_trajectory(&s0, &vel, &src, &tg).unwrap();
    let st = ObservationStencil::new(&grid, loc).unwrap();
    let r = y_obs - st.apply(traj.terminal());
    let mut terminal = vec![0.0; grid.node_count()];
    for (&k, &w) in st.nodes.iter().zip(&st.weights) {
        terminal[k] += w * r / noise.variance();
    }
    let adj = adjoint_solve(&traj, &vel, &grid, &terminal).unwrap();
    let h = 1e-5;
    let scale = adj.initial().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for k in 0..u0.len() {
        let mut up = u0.clone();
        let mut dn = u0.clone();
        up[k] += h;
        dn[k] -= h;
        let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
        let a = adj.initial()[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8 * scale);
        assert!(rel < 1e-4, "node {k}: adjoint {a} fd {fd}");
    }
}
