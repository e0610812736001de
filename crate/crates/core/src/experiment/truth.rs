use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bayes_grid::{Measurement, NoiseModel, Provenance};
use crate::bed_design::{Design, Measurer};
use crate::discrepancy_trainer::schedule_time_grid;
use crate::error::{Error, Result};
use crate::forward_models::{SourceParams, SourceTerm};
use crate::grid_pde::{
    integrate, observe, simulate, GridSpec, SolverConfig, SourceField, StateField, VelocityModel,
};

/// The simulated "real" system: exponential source at the true parameters,
/// zero initial state, observed with additive Gaussian noise.
///
/// States at every stage time are computed once on construction and shared
/// by all measurements.
#[derive(Debug, Clone)]
pub struct TrueSystem {
    grid: GridSpec,
    velocity: VelocityModel,
    solver: SolverConfig,
    source: SourceField,
    noise: NoiseModel,
    stage_dt: f64,
    /// `stage_states[i]` is the field at `i · stage_dt`.
    stage_states: Vec<StateField>,
}

impl TrueSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: GridSpec,
        velocity: VelocityModel,
        solver: SolverConfig,
        params: SourceParams,
        noise: NoiseModel,
        stage_dt: f64,
        stages: usize,
    ) -> Result<Self> {
        let source = SourceTerm::TrueExponential(params).sample(&grid)?;
        let breakpoints: Vec<f64> = (0..=stages).map(|i| i as f64 * stage_dt).collect();
        let initial = StateField::zeros(grid);
        let mut stage_states = vec![initial.clone()];
        stage_states.extend(simulate(&initial, &velocity, &source, &solver, &breakpoints)?);
        Ok(Self {
            grid,
            velocity,
            solver,
            source,
            noise,
            stage_dt,
            stage_states,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn source(&self) -> &SourceField {
        &self.source
    }

    /// Noise-free field at time `t`.
    pub fn field_at(&self, t: f64) -> Result<StateField> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative time {t}")));
        }
        let i = (t / self.stage_dt).round() as usize;
        if i < self.stage_states.len() && (i as f64 * self.stage_dt - t).abs() <= 1e-12 {
            return Ok(self.stage_states[i].clone());
        }
        let tg = schedule_time_grid(&self.grid, &self.velocity, &self.solver, t, self.stage_dt)?;
        integrate(&StateField::zeros(self.grid), &self.velocity, &self.source, &tg)
    }

    /// Noise-free value at a design.
    pub fn exact(&self, d: &Design) -> Result<f64> {
        let i = (d.d_t / self.stage_dt).round() as usize;
        if i < self.stage_states.len() && (i as f64 * self.stage_dt - d.d_t).abs() <= 1e-12 {
            return observe(&self.stage_states[i], d.location());
        }
        observe(&self.field_at(d.d_t)?, d.location())
    }
}

impl Measurer for TrueSystem {
    fn measure(&self, design: &Design, stream: u64) -> Result<Measurement> {
        let exact = self.exact(design)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let eta: f64 = StandardNormal.sample(&mut rng);
        Measurement::new(
            *design,
            exact + self.noise.sigma() * eta,
            Provenance::TrueSystem,
        )
    }
}
