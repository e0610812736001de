//! Finite-difference audit of the adjoint gradient on a coarse setup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{CampaignConfig, Scenario};
use crate::bayes_grid::{Measurement, NoiseModel, Provenance};
use crate::bed_design::Design;
use crate::discrepancy_trainer::{gradient_by_trajectory, objective_by_forward_solve};
use crate::error::Result;
use crate::forward_models::{DiscrepancyNet, SourceParams, SourceTerm};
use crate::grid_pde::{GridSpec, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub grid_points: usize,
    pub draws: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            grid_points: 21,
            draws: 20,
            step: 1e-5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DrawReport {
    pub draw: usize,
    pub adjoint: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub scenario: Scenario,
    pub parameters: usize,
    pub draws: Vec<DrawReport>,
    pub max_rel_error: f64,
}

/// Componentwise `|a − b| / max(|a|, |b|)`, with components far below the
/// gradient's scale compared against that scale instead.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-8 * scale.max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// One noisy measurement at `t = 2 Δt`, `draws` random parameter vectors,
/// adjoint gradient against central differences of a fresh forward solve.
pub fn check_gradients(scenario: Scenario, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let preset = CampaignConfig::preset(scenario);
    let grid = GridSpec::new(preset.model_grid.min, preset.model_grid.max, cfg.grid_points)?;
    let velocity = VelocityModel::linear(preset.velocity_coefficient);
    let solver = preset.solver;
    let stage_dt = preset.constraint.stage_dt;
    let noise = NoiseModel::new(preset.noise_sigma)?;
    // A wide source so the coarse mesh resolves it.
    let params = SourceParams {
        theta_h: 0.3,
        ..preset.model_source
    };
    let data = [Measurement::new(
        Design::new(0.5, 0.3, 2.0 * stage_dt),
        0.4,
        Provenance::TrueSystem,
    )?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draws = Vec::with_capacity(cfg.draws);
    let mut n_params = 0;
    for draw in 0..cfg.draws {
        let source = match scenario {
            Scenario::Parametric => SourceTerm::ParametricStrength(SourceParams {
                theta_s: rng.random_range(1.0..4.0),
                ..params
            }),
            Scenario::Structural => SourceTerm::NetworkAugmented {
                params,
                net: DiscrepancyNet::random(preset.network.gain, 0.5, &mut rng),
            },
        };
        let theta = source.trainable();
        n_params = theta.len();
        let adjoint = gradient_by_trajectory(&grid, &velocity, &solver, &source, &data, &noise, stage_dt)?;
        let objective = |p: &[f64]| -> Result<f64> {
            objective_by_forward_solve(
                &grid,
                &velocity,
                &solver,
                &source.with_trainable(p)?,
                &data,
                &noise,
                stage_dt,
            )
        };
        let mut fd = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += cfg.step;
            down[i] -= cfg.step;
            fd.push((objective(&up)? - objective(&down)?) / (2.0 * cfg.step));
        }
        draws.push(DrawReport {
            draw,
            max_rel_error: max_relative_error(&adjoint, &fd),
            adjoint,
            finite_difference: fd,
        });
    }
    let max_rel_error = draws.iter().map(|d| d.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        scenario,
        parameters: n_params,
        draws,
        max_rel_error,
    })
}
