//! Likelihood-based calibration of the discrepancy parameters with
//! discrete-adjoint gradients.
//!
//! The forward map is linear in a time-independent source, so an observation
//! at design `d` is `y(d) = w_d · S` with source-sensitivity weights
//! `w_d = Σ_k dt_k λ_{k+1}`, where `λ` solves the transposed forward-Euler
//! recursion from the observation stencil. These weights are both the
//! adjoint-gradient kernel and an exact prediction operator; they are
//! computed once per design and reused for every parameter value.

use serde::{Deserialize, Serialize};

use crate::bayes_grid::{Measurement, NoiseModel};
use crate::bed_design::Design;
use crate::error::{Error, Result};
use crate::forward_models::SourceTerm;
use crate::grid_pde::{
    assemble_jacobian, GridSpec, ObservationStencil, SolverConfig, SourceField, StateField,
    TimeGrid, VelocityModel,
};

/// Forward states at every node of a time grid.
#[derive(Debug, Clone)]
pub struct ForwardTrajectory {
    pub time_grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
}

impl ForwardTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("non-empty")
    }
}

/// Solves forward over `time_grid`, storing every substep.
pub fn solve_trajectory(
    initial: &StateField,
    velocity: &VelocityModel,
    source: &SourceField,
    time_grid: &TimeGrid,
) -> Result<ForwardTrajectory> {
    let grid = initial.grid;
    let jac = assemble_jacobian(&grid, velocity, time_grid.start());
    let mut jac = jac;
    let mut states = Vec::with_capacity(time_grid.len() + 1);
    let mut u = initial.values.clone();
    let mut rate = vec![0.0; u.len()];
    states.push(u.clone());
    for k in 0..time_grid.len() {
        jac.retime(velocity, time_grid.time(k));
        jac.matrix().matvec_into(&u, &mut rate);
        let dt = time_grid.dt(k);
        for ((ui, ri), si) in u.iter_mut().zip(&rate).zip(source.values()) {
            *ui += dt * (ri + si);
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Unstable {
                substep: k,
                time: time_grid.time(k + 1),
            });
        }
        states.push(u.clone());
    }
    Ok(ForwardTrajectory {
        time_grid: time_grid.clone(),
        states,
    })
}

/// `λ` at every node of the forward time grid.
#[derive(Debug, Clone)]
pub struct AdjointState {
    lambdas: Vec<Vec<f64>>,
}

impl AdjointState {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// `λ` at time node `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        &self.lambdas[k]
    }

    /// `λ(t₀)`: the gradient with respect to the initial condition.
    pub fn initial(&self) -> &[f64] {
        &self.lambdas[0]
    }

    pub fn terminal(&self) -> &[f64] {
        self.lambdas.last().expect("non-empty")
    }

    /// `Σ_k dt_k λ_{k+1}`: sensitivity of the terminal functional to a
    /// constant source.
    pub fn source_weights(&self, time_grid: &TimeGrid) -> Vec<f64> {
        let mut w = vec![0.0; self.lambdas[0].len()];
        for k in 0..time_grid.len() {
            let dt = time_grid.dt(k);
            for (wi, li) in w.iter_mut().zip(&self.lambdas[k + 1]) {
                *wi += dt * li;
            }
        }
        w
    }
}

/// Backward sweep `λ_k = λ_{k+1} + dt_k (A − B(t_k))ᵀ λ_{k+1}` from
/// `λ_n = terminal`, on the trajectory's own time grid.
pub fn adjoint_solve(
    trajectory: &ForwardTrajectory,
    velocity: &VelocityModel,
    grid: &GridSpec,
    terminal: &[f64],
) -> Result<AdjointState> {
    let tg = &trajectory.time_grid;
    if trajectory.states.len() != tg.len() + 1 {
        return Err(Error::InvalidTrajectory(format!(
            "{} stored states for {} substeps",
            trajectory.states.len(),
            tg.len()
        )));
    }
    if terminal.len() != grid.node_count() {
        return Err(Error::DimensionMismatch {
            expected: grid.node_count(),
            got: terminal.len(),
        });
    }
    let mut jac = assemble_jacobian(grid, velocity, tg.start());
    let mut lambdas = vec![Vec::new(); tg.len() + 1];
    lambdas[tg.len()] = terminal.to_vec();
    let mut tmp = vec![0.0; terminal.len()];
    for k in (0..tg.len()).rev() {
        jac.retime(velocity, tg.time(k));
        let next = &lambdas[k + 1];
        jac.apply_transpose_into(next, &mut tmp);
        let dt = tg.dt(k);
        lambdas[k] = next.iter().zip(&tmp).map(|(l, t)| l + dt * t).collect();
    }
    Ok(AdjointState { lambdas })
}

/// Source-sensitivity weights of a point observation at the end of
/// `time_grid`, computed with a streaming adjoint sweep (no storage).
pub fn observation_weights(
    grid: &GridSpec,
    velocity: &VelocityModel,
    time_grid: &TimeGrid,
    stencil: &ObservationStencil,
) -> Vec<f64> {
    let size = grid.node_count();
    let mut lambda = vec![0.0; size];
    for (&node, &w) in stencil.nodes.iter().zip(&stencil.weights) {
        lambda[node] += w;
    }
    let mut weights = vec![0.0; size];
    let mut tmp = vec![0.0; size];
    let mut jac = assemble_jacobian(grid, velocity, time_grid.start());
    for k in (0..time_grid.len()).rev() {
        let dt = time_grid.dt(k);
        for (wi, li) in weights.iter_mut().zip(&lambda) {
            *wi += dt * li;
        }
        jac.retime(velocity, time_grid.time(k));
        jac.apply_transpose_into(&lambda, &mut tmp);
        for (li, ti) in lambda.iter_mut().zip(&tmp) {
            *li += dt * ti;
        }
    }
    weights
}

/// Substep grid from `0` to `t`, passing through every multiple of
/// `stage_dt` on the way so that all designs share one schedule.
pub fn schedule_time_grid(
    grid: &GridSpec,
    velocity: &VelocityModel,
    cfg: &SolverConfig,
    t: f64,
    stage_dt: f64,
) -> Result<TimeGrid> {
    TimeGrid::through(grid, velocity, cfg, &schedule_breakpoints(t, stage_dt))
}

/// `[0, Δt, 2Δt, …, t]`, with `t` itself as the last entry.
pub fn schedule_breakpoints(t: f64, stage_dt: f64) -> Vec<f64> {
    let mut b = vec![0.0];
    let mut i = 1usize;
    loop {
        let ti = i as f64 * stage_dt;
        if ti >= t * (1.0 - 1e-12) {
            break;
        }
        b.push(ti);
        i += 1;
    }
    if t > 0.0 {
        b.push(t);
    }
    b
}

/// One measurement with its precomputed sensitivity weights.
#[derive(Debug, Clone)]
pub struct WeightedObservation {
    pub design: Design,
    pub value: f64,
    pub weights: Vec<f64>,
}

/// Something to be maximized.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Gaussian log-likelihood of the data as a function of the trainable
/// parameters of `template` (whose location is already fixed at `θ_G*`).
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub grid: GridSpec,
    pub template: SourceTerm,
    pub observations: Vec<WeightedObservation>,
    pub noise: NoiseModel,
}

impl CalibrationProblem {
    pub fn new(
        grid: GridSpec,
        template: SourceTerm,
        observations: Vec<WeightedObservation>,
        noise: NoiseModel,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidArgument("no training data".into()));
        }
        for o in &observations {
            if o.weights.len() != grid.node_count() {
                return Err(Error::DimensionMismatch {
                    expected: grid.node_count(),
                    got: o.weights.len(),
                });
            }
        }
        Ok(Self {
            grid,
            template,
            observations,
            noise,
        })
    }

    fn source(&self, params: &[f64]) -> Result<SourceTerm> {
        self.template.with_trainable(params)
    }

    pub fn predictions(&self, params: &[f64]) -> Result<Vec<f64>> {
        let s = self.source(params)?;
        Ok(self
            .observations
            .iter()
            .map(|o| s.weighted_sum(&self.grid, &o.weights))
            .collect())
    }

    pub fn objective(&self, params: &[f64]) -> Result<f64> {
        Ok(self
            .predictions(params)?
            .iter()
            .zip(&self.observations)
            .map(|(p, o)| self.noise.log_density(o.value - p))
            .sum())
    }

    pub fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(params)?.1)
    }
}

impl Objective for CalibrationProblem {
    fn dim(&self) -> usize {
        self.template.trainable().len()
    }

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = self.source(params)?;
        let mut value = 0.0;
        let mut grad = vec![0.0; params.len()];
        for o in &self.observations {
            let (pred, dpred) = s.weighted_sum_with_gradient(&self.grid, &o.weights);
            let r = o.value - pred;
            value += self.noise.log_density(r);
            let scale = r / self.noise.variance();
            for (g, d) in grad.iter_mut().zip(&dpred) {
                *g += scale * d;
            }
        }
        Ok((value, grad))
    }
}

/// Log-likelihood recomputed from scratch: a fresh forward solve per
/// measurement, then interpolation and the Gaussian density.
pub fn objective_by_forward_solve(
    grid: &GridSpec,
    velocity: &VelocityModel,
    solver: &SolverConfig,
    source: &SourceTerm,
    data: &[Measurement],
    noise: &NoiseModel,
    stage_dt: f64,
) -> Result<f64> {
    let field = source.sample(grid)?;
    let mut total = 0.0;
    for m in data {
        let tg = schedule_time_grid(grid, velocity, solver, m.design.d_t, stage_dt)?;
        let end = crate::grid_pde::integrate(&StateField::zeros(*grid), velocity, &field, &tg)?;
        let pred = crate::grid_pde::observe(&end, m.design.location())?;
        total += noise.log_density(m.value - pred);
    }
    Ok(total)
}

/// Gradient via stored trajectories and a full adjoint sweep per
/// measurement, `Σ_k dt_k λ_{k+1}ᵀ ∂S/∂params`.
pub fn gradient_by_trajectory(
    grid: &GridSpec,
    velocity: &VelocityModel,
    solver: &SolverConfig,
    source: &SourceTerm,
    data: &[Measurement],
    noise: &NoiseModel,
    stage_dt: f64,
) -> Result<Vec<f64>> {
    let field = source.sample(grid)?;
    let mut grad = vec![0.0; source.trainable().len()];
    for m in data {
        let tg = schedule_time_grid(grid, velocity, solver, m.design.d_t, stage_dt)?;
        let traj = solve_trajectory(&StateField::zeros(*grid), velocity, &field, &tg)?;
        let stencil = ObservationStencil::new(grid, m.design.location())?;
        let residual = m.value - stencil.apply(traj.terminal());
        let mut terminal = vec![0.0; grid.node_count()];
        for (&node, &w) in stencil.nodes.iter().zip(&stencil.weights) {
            terminal[node] += w * residual / noise.variance();
        }
        let adj = adjoint_solve(&traj, velocity, grid, &terminal)?;
        let weights = adj.source_weights(&tg);
        let (_, g) = source.weighted_sum_with_gradient(grid, &weights);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    GradientAscent,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Train on every past winning measurement instead of the current one.
    pub accumulate_data: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            learning_rate: 5e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            accumulate_data: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Objective at the parameters entering this iteration.
    pub objective: f64,
    pub param_norm: f64,
    /// The first parameter when there is exactly one (the source strength).
    pub scalar: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub trace: Vec<TraceEntry>,
    /// Set when a non-finite objective or gradient stopped training early.
    pub aborted: bool,
}

/// Runs `cfg.iterations` ascent steps on `objective` starting at `params`.
pub fn train_stage<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            got: params.len(),
        });
    }
    let mut p = params.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut aborted = false;
    let mut last_good = p.clone();
    for it in 0..cfg.iterations {
        let (value, grad) = objective.value_and_gradient(&p)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            aborted = true;
            p = last_good;
            break;
        }
        last_good.clone_from(&p);
        trace.push(TraceEntry {
            iteration: it,
            objective: value,
            param_norm: p.iter().map(|x| x * x).sum::<f64>().sqrt(),
            scalar: (p.len() == 1).then(|| p[0]),
        });
        let mut next = p.clone();
        match cfg.optimizer {
            OptimizerKind::GradientAscent => {
                for (x, g) in next.iter_mut().zip(&grad) {
                    *x += cfg.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                let t = (it + 1) as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..next.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                    next[i] += cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
                }
            }
        }
        if next.iter().any(|x| !x.is_finite()) {
            aborted = true;
            break;
        }
        p = next;
    }
    Ok(TrainOutcome {
        params: p,
        trace,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes_grid::Provenance;
    use crate::forward_models::SourceParams;

    fn coarse() -> (GridSpec, VelocityModel, SolverConfig) {
        (
            GridSpec::new(-2.0, 3.0, 11).unwrap(),
            VelocityModel::linear(20.0),
            SolverConfig::default(),
        )
    }

    #[test]
    fn zero_terminal_gives_zero_adjoint() {
        let (grid, vel, cfg) = coarse();
        let tg = schedule_time_grid(&grid, &vel, &cfg, 0.1, 0.05).unwrap();
        let traj = solve_trajectory(
            &StateField::zeros(grid),
            &vel,
            &SourceField::zeros(grid),
            &tg,
        )
        .unwrap();
        let adj = adjoint_solve(&traj, &vel, &grid, &vec![0.0; grid.node_count()]).unwrap();
        assert!((0..adj.len()).all(|k| adj.at(k).iter().all(|&l| l == 0.0)));
    }

    #[test]
    fn one_step_recursion() {
        let (grid, vel, cfg) = coarse();
        let tg = TimeGrid::build(&grid, &vel, &cfg, 0.0, 1e-3).unwrap();
        assert_eq!(tg.len(), 1);
        let traj = solve_trajectory(
            &StateField::zeros(grid),
            &vel,
            &SourceField::zeros(grid),
            &tg,
        )
        .unwrap();
        let terminal: Vec<f64> = (0..grid.node_count()).map(|k| (k as f64).sin()).collect();
        let adj = adjoint_solve(&traj, &vel, &grid, &terminal).unwrap();
        let jt = assemble_jacobian(&grid, &vel, 0.0).apply_transpose(&terminal);
        for k in 0..terminal.len() {
            assert_eq!(adj.initial()[k], terminal[k] + 1e-3 * jt[k]);
        }
    }

    #[test]
    fn truncated_trajectory_is_rejected() {
        let (grid, vel, cfg) = coarse();
        let tg = schedule_time_grid(&grid, &vel, &cfg, 0.05, 0.05).unwrap();
        let mut traj = solve_trajectory(
            &StateField::zeros(grid),
            &vel,
            &SourceField::zeros(grid),
            &tg,
        )
        .unwrap();
        traj.states.pop();
        assert!(matches!(
            adjoint_solve(&traj, &vel, &grid, &vec![0.0; grid.node_count()]),
            Err(Error::InvalidTrajectory(_))
        ));
    }

    #[test]
    fn breakpoints_hit_stage_times() {
        assert_eq!(schedule_breakpoints(0.0, 0.05), vec![0.0]);
        let b = schedule_breakpoints(0.15000000000000002, 0.05);
        assert_eq!(b.len(), 4);
        assert_eq!(b[1], 0.05);
        assert_eq!(b[2], 0.1);
    }

    #[test]
    fn weights_reproduce_forward_observation() {
        let (grid, vel, cfg) = coarse();
        let p = SourceParams::new(0.45, 0.25, 0.3, 2.0).unwrap();
        let src = SourceTerm::TrueExponential(p);
        let field = src.sample(&grid).unwrap();
        let tg = schedule_time_grid(&grid, &vel, &cfg, 0.15, 0.05).unwrap();
        let end = crate::grid_pde::integrate(&StateField::zeros(grid), &vel, &field, &tg).unwrap();
        let stencil = ObservationStencil::new(&grid, (0.6, 0.4)).unwrap();
        let w = observation_weights(&grid, &vel, &tg, &stencil);
        let via_weights: f64 = w.iter().zip(field.values()).map(|(a, b)| a * b).sum();
        let direct = stencil.apply(&end.values);
        assert!((via_weights - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn exact_fit_attains_maximum() {
        let (grid, vel, cfg) = coarse();
        let p = SourceParams::new(0.45, 0.25, 0.3, 2.0).unwrap();
        let src = SourceTerm::ParametricStrength(p);
        let d = Design::new(0.5, 0.5, 0.1);
        let tg = schedule_time_grid(&grid, &vel, &cfg, d.d_t, 0.05).unwrap();
        let w = observation_weights(&grid, &vel, &tg, &ObservationStencil::new(&grid, (0.5, 0.5)).unwrap());
        let y = src.weighted_sum(&grid, &w);
        let noise = NoiseModel::new(0.05).unwrap();
        let prob = CalibrationProblem::new(
            grid,
            src.clone(),
            vec![WeightedObservation { design: d, value: y, weights: w.clone() }],
            noise,
        )
        .unwrap();
        let (val, g) = prob.value_and_gradient(&[2.0]).unwrap();
        let max = -(0.05 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((val - max).abs() < 1e-12);
        assert!(g[0].abs() < 1e-9);
        // one-sigma residual costs half a nat
        let shifted = CalibrationProblem::new(
            grid,
            src,
            vec![WeightedObservation { design: d, value: y + 0.05, weights: w }],
            noise,
        )
        .unwrap();
        assert!((shifted.objective(&[2.0]).unwrap() - (max - 0.5)).abs() < 1e-12);
        let m = Measurement::new(d, y, Provenance::TrueSystem).unwrap();
        let recomputed = objective_by_forward_solve(
            &grid,
            &vel,
            &cfg,
            &SourceTerm::ParametricStrength(p),
            &[m],
            &noise,
            0.05,
        )
        .unwrap();
        assert!((recomputed - max).abs() < 1e-10);
    }

    struct Quadratic {
        center: f64,
        curvature: f64,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            let r = p[0] - self.center;
            Ok((-0.5 * self.curvature * r * r, vec![-self.curvature * r]))
        }
    }

    #[test]
    fn ascent_on_quadratic_converges() {
        let q = Quadratic { center: 1.5, curvature: 2.0 };
        for optimizer in [OptimizerKind::GradientAscent, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                iterations: 2000,
                learning_rate: 0.05,
                optimizer,
                ..Default::default()
            };
            let out = train_stage(&q, &[-1.0], &cfg).unwrap();
            assert!((out.params[0] - 1.5).abs() < 1e-3, "{optimizer:?}: {:?}", out.params);
            assert!(!out.aborted);
            assert_eq!(out.trace.len(), 2000);
            assert_eq!(out.trace[0].scalar, Some(-1.0));
        }
    }

    struct Explodes;
    impl Objective for Explodes {
        fn dim(&self) -> usize {
            1
        }
        fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            if p[0] > 1.0 {
                Ok((f64::NAN, vec![1.0]))
            } else {
                Ok((p[0], vec![1.0]))
            }
        }
    }

    #[test]
    fn non_finite_objective_aborts_with_last_finite_params() {
        let cfg = TrainConfig {
            iterations: 100,
            learning_rate: 0.3,
            optimizer: OptimizerKind::GradientAscent,
            ..Default::default()
        };
        let out = train_stage(&Explodes, &[0.0], &cfg).unwrap();
        assert!(out.aborted);
        assert!((out.params[0] - 0.9).abs() < 1e-12);
        assert_eq!(out.trace.len(), 4);
    }
}
