//! Full three-parameter benchmark: a joint grid over `(θx, θy, θs)` with no
//! discrepancy learning. The parametric source is linear in `θs`, so one
//! set of unit-strength predictions per design covers every strength.

use serde::Serialize;

use super::config::{CampaignConfig, Scenario};
use super::predict::{node_predictions, ModelSetup};
use super::seeds::{Seeds, Stream};
use super::truth::TrueSystem;
use crate::bayes_grid::{kld_mass, log_likelihoods, NoiseModel, ParamGrid};
use crate::bed_design::{argmax_first, candidates, Measurer};
use crate::error::{Error, Result};
use crate::forward_models::SourceTerm;
use crate::grid_pde::VelocityModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Benchmark3dConfig {
    pub points: usize,
    pub strength_min: f64,
    pub strength_max: f64,
}

impl Default for Benchmark3dConfig {
    fn default() -> Self {
        Self {
            points: 21,
            strength_min: 1.0,
            strength_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Benchmark3dStage {
    pub stage: usize,
    pub design: (f64, f64, f64),
    pub measurement: f64,
    pub gain: f64,
    /// Joint-grid argmax `(θx, θy, θs)`.
    pub map: (f64, f64, f64),
    /// Mode of the `θs` marginal.
    pub strength_mode: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Benchmark3dResult {
    pub stages: Vec<Benchmark3dStage>,
    pub strengths: Vec<f64>,
    pub locations: ParamGrid,
    /// Final location posterior conditioned on the most probable `θs`.
    pub conditional: Vec<f64>,
}

fn normalize_log(log_post: &[f64]) -> Result<Vec<f64>> {
    let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::LikelihoodUnderflow);
    }
    let unnorm: Vec<f64> = log_post.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|m| m / total).collect())
}

/// Greedy design on the joint grid scored by realized information gain.
/// Uses the parametric scenario's truth, noise, constraint and seeds from
/// `cfg`; mass index is `s · n_loc + k`.
pub fn run_benchmark_3d(cfg: &CampaignConfig, bench: &Benchmark3dConfig) -> Result<Benchmark3dResult> {
    cfg.validate()?;
    if cfg.scenario != Scenario::Parametric {
        return Err(Error::Config("benchmark-3d needs the parametric scenario".into()));
    }
    if bench.points < 2 || !(bench.strength_max > bench.strength_min) {
        return Err(Error::Config("benchmark-3d needs ≥ 2 points and a nonempty strength range".into()));
    }
    let velocity = VelocityModel::linear(cfg.velocity_coefficient);
    let noise = NoiseModel::new(cfg.noise_sigma)?;
    let stage_dt = cfg.constraint.stage_dt;
    let model = ModelSetup {
        grid: cfg.model_grid.grid()?,
        velocity,
        solver: cfg.solver,
        stage_dt,
    };
    let truth = TrueSystem::new(
        cfg.truth_grid.grid()?,
        velocity,
        cfg.solver,
        cfg.true_source,
        noise,
        stage_dt,
        cfg.stages,
    )?;
    let locations = ParamGrid::uniform(cfg.param_grid.min, cfg.param_grid.max, bench.points)?;
    let n = bench.points;
    let strengths: Vec<f64> = (0..n)
        .map(|i| {
            bench.strength_min + (bench.strength_max - bench.strength_min) * i as f64 / (n - 1) as f64
        })
        .collect();
    let unit = SourceTerm::ParametricStrength(crate::forward_models::SourceParams {
        theta_s: 1.0,
        ..cfg.model_source
    });
    let seeds = Seeds::new(cfg.seed);
    let nl = locations.len();
    let mut mass = vec![1.0 / (nl * n) as f64; nl * n];
    let mut prev = cfg.constraint.initial_design();
    let mut stages = Vec::new();

    for stage in 1..=cfg.stages {
        let cands = candidates(&prev, &cfg.constraint, cfg.candidates_per_axis);
        let weights = model.weights_many(&cands)?;
        let unit_preds = node_predictions(
            &model,
            &unit,
            &locations,
            cfg.network.location_input,
            (0.0, 0.0),
            &weights,
        )?;
        let mut outcomes = Vec::with_capacity(cands.len());
        for (i, d) in cands.iter().enumerate() {
            let y = truth.measure(d, seeds.at(Stream::Noise, stage as u64, i as u64))?;
            let log_like: Vec<f64> = strengths
                .iter()
                .flat_map(|&s| {
                    let preds: Vec<f64> = unit_preds[i].iter().map(|p| s * p).collect();
                    log_likelihoods(y.value, &preds, &noise)
                })
                .collect();
            let log_post: Vec<f64> = log_like
                .iter()
                .zip(&mass)
                .map(|(l, &m)| if m > 0.0 { m.ln() + l } else { f64::NEG_INFINITY })
                .collect();
            let post = normalize_log(&log_post)?;
            let gain = kld_mass(&post, &mass)?;
            outcomes.push((gain, y.value, post));
        }
        let scores: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
        let best = argmax_first(&scores).ok_or(Error::EmptyCandidates)?;
        let (gain, value, post) = outcomes.swap_remove(best);
        mass = post;
        let top = argmax_first(&mass).expect("nonempty");
        let (x, y) = locations.node(top % nl);
        let marginal: Vec<f64> = mass.chunks(nl).map(|c| c.iter().sum()).collect();
        let s_mode = argmax_first(&marginal).expect("nonempty");
        let d = cands[best];
        stages.push(Benchmark3dStage {
            stage,
            design: (d.d_x, d.d_y, d.d_t),
            measurement: value,
            gain,
            map: (x, y, strengths[top / nl]),
            strength_mode: strengths[s_mode],
        });
        prev = d;
    }

    let marginal: Vec<f64> = mass.chunks(nl).map(|c| c.iter().sum()).collect();
    let s_mode = argmax_first(&marginal).unwrap_or(0);
    let slice = &mass[s_mode * nl..(s_mode + 1) * nl];
    let total: f64 = slice.iter().sum();
    Ok(Benchmark3dResult {
        stages,
        strengths,
        locations,
        conditional: slice.iter().map(|m| m / total).collect(),
    })
}
