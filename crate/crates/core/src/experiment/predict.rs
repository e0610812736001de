//! Model predictions `u(d; θ_k)` at every parameter node.
//!
//! Two routes: the fast one contracts per-design sensitivity weights with
//! the source evaluated at each node (exact for a source that is constant
//! in time); the reference one runs a forward solve per node.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::config::LocationInput;
use crate::bayes_grid::ParamGrid;
use crate::bed_design::Design;
use crate::discrepancy_trainer::{observation_weights, schedule_breakpoints, schedule_time_grid};
use crate::error::{Error, Result};
use crate::forward_models::SourceTerm;
use crate::grid_pde::{
    integrate, observe, simulate, GridSpec, ObservationStencil, SolverConfig, SourceField,
    StateField, VelocityModel,
};

const CHUNK: usize = 128;

/// PDE setup of the modeled system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSetup {
    pub grid: GridSpec,
    pub velocity: VelocityModel,
    pub solver: SolverConfig,
    pub stage_dt: f64,
}

impl ModelSetup {
    /// Source-sensitivity weights of one design.
    pub fn weights(&self, d: &Design) -> Result<Vec<f64>> {
        let stencil = ObservationStencil::new(&self.grid, d.location())?;
        let tg = schedule_time_grid(&self.grid, &self.velocity, &self.solver, d.d_t, self.stage_dt)?;
        Ok(observation_weights(&self.grid, &self.velocity, &tg, &stencil))
    }

    pub fn weights_many(&self, designs: &[Design]) -> Result<Vec<Vec<f64>>> {
        designs.par_iter().map(|d| self.weights(d)).collect()
    }

    /// Source located at `theta`, with the network (if any) fed `nn_at`.
    pub fn source_field(
        &self,
        source: &SourceTerm,
        theta: (f64, f64),
        nn_at: (f64, f64),
    ) -> Result<SourceField> {
        let mut values = analytic_part(source).at_location(theta.0, theta.1).sample(&self.grid)?.values().to_vec();
        if let SourceTerm::NetworkAugmented { net, .. } = source {
            for (v, c) in values.iter_mut().zip(net.correction_field(&self.grid, nn_at)) {
                *v += c;
            }
        }
        SourceField::from_values(self.grid, values)
    }

    /// Modeled field at time `t` with the source at `theta` (network fed the
    /// same location).
    pub fn field(&self, source: &SourceTerm, theta: (f64, f64), t: f64) -> Result<StateField> {
        let s = self.source_field(source, theta, theta)?;
        let tg = schedule_time_grid(&self.grid, &self.velocity, &self.solver, t, self.stage_dt)?;
        integrate(&StateField::zeros(self.grid), &self.velocity, &s, &tg)
    }
}

/// The source without its network correction.
fn analytic_part(source: &SourceTerm) -> SourceTerm {
    match source {
        SourceTerm::NetworkAugmented { params, .. } => SourceTerm::ModeledRational(*params),
        other => other.clone(),
    }
}

/// `predictions[j][k] = w_j · S(θ_k)` for every design `j` and node `k`.
pub fn node_predictions(
    setup: &ModelSetup,
    source: &SourceTerm,
    params: &ParamGrid,
    input: LocationInput,
    estimate: (f64, f64),
    weights: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let size = setup.grid.node_count();
    if let Some(w) = weights.iter().find(|w| w.len() != size) {
        return Err(Error::DimensionMismatch {
            expected: size,
            got: w.len(),
        });
    }
    let nd = weights.len();
    let w = DMatrix::from_fn(nd, size, |j, z| weights[j][z]);
    let analytic = analytic_part(source);
    let net = match (source, input) {
        (SourceTerm::NetworkAugmented { net, .. }, LocationInput::Node) => Some(net),
        _ => None,
    };
    // With the network fed a fixed location its contribution is the same
    // for every node.
    let offset: Vec<f64> = match (source, input) {
        (SourceTerm::NetworkAugmented { net, .. }, LocationInput::Estimate) => weights
            .iter()
            .map(|wj| net.weighted_correction(&setup.grid, estimate, wj, None))
            .collect(),
        _ => vec![0.0; nd],
    };
    let nodes: Vec<(f64, f64)> = params.nodes().collect();
    let chunks: Vec<DMatrix<f64>> = nodes
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<DMatrix<f64>> {
            let mut s = DMatrix::zeros(size, chunk.len());
            for (c, &theta) in chunk.iter().enumerate() {
                let field = analytic.at_location(theta.0, theta.1).sample(&setup.grid)?;
                let mut col = s.column_mut(c);
                for (dst, v) in col.iter_mut().zip(field.values()) {
                    *dst = *v;
                }
                if let Some(net) = net {
                    for (dst, v) in col.iter_mut().zip(net.correction_field(&setup.grid, theta)) {
                        *dst += v;
                    }
                }
            }
            Ok(&w * s)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::with_capacity(nodes.len()); nd];
    for p in &chunks {
        for (j, row) in out.iter_mut().enumerate() {
            row.extend(p.row(j).iter().map(|v| v + offset[j]));
        }
    }
    Ok(out)
}

/// Reference route: one forward solve per node, observed at every design.
pub fn node_predictions_by_solves(
    setup: &ModelSetup,
    source: &SourceTerm,
    params: &ParamGrid,
    input: LocationInput,
    estimate: (f64, f64),
    designs: &[Design],
) -> Result<Vec<Vec<f64>>> {
    let t_max = designs.iter().map(|d| d.d_t).fold(0.0, f64::max);
    let breakpoints = schedule_breakpoints(t_max, setup.stage_dt);
    let slot = |t: f64| -> Result<usize> {
        breakpoints
            .iter()
            .position(|&b| (b - t).abs() <= 1e-12)
            .ok_or_else(|| Error::InvalidArgument(format!("design time {t} is off the schedule")))
    };
    let slots: Vec<usize> = designs.iter().map(|d| slot(d.d_t)).collect::<Result<_>>()?;
    let nodes: Vec<(f64, f64)> = params.nodes().collect();
    let per_node: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|&theta| -> Result<Vec<f64>> {
            let nn_at = match input {
                LocationInput::Node => theta,
                LocationInput::Estimate => estimate,
            };
            let s = setup.source_field(source, theta, nn_at)?;
            let initial = StateField::zeros(setup.grid);
            let mut states = vec![initial.clone()];
            states.extend(simulate(&initial, &setup.velocity, &s, &setup.solver, &breakpoints)?);
            designs
                .iter()
                .zip(&slots)
                .map(|(d, &k)| observe(&states[k], d.location()))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..designs.len())
        .map(|j| per_node.iter().map(|p| p[j]).collect())
        .collect())
}
