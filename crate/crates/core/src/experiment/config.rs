use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bed_design::{DesignConstraint, DesignMode};
use crate::discrepancy_trainer::{OptimizerKind, TrainConfig};
use crate::eki_indicator::{EkiConfig, ThresholdRule};
use crate::error::{Error, Result};
use crate::forward_models::SourceParams;
use crate::grid_pde::{GridSpec, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Correct source form, wrong strength `θs`.
    Parametric,
    /// Wrong source form, corrected by a small network.
    Structural,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(Scenario::Parametric),
            "structural" => Ok(Scenario::Structural),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected parametric or structural)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl AxisConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.min, self.max, self.points).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Which location the network sees as its `(θx, θy)` inputs when the
/// posterior is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationInput {
    /// Each parameter node feeds its own location.
    Node,
    /// Every node uses the current top-m estimate.
    Estimate,
}

/// How past measurements enter the location posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorUpdate {
    /// Carry the previous posterior forward as the next prior.
    Sequential,
    /// Rebuild it each stage from all past measurements under the current
    /// discrepancy parameters.
    Recondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub gain: f64,
    /// Initial weights are uniform in `[−init_range, init_range]`.
    pub init_range: f64,
    pub location_input: LocationInput,
}

/// Side experiment at one stage: train separately on the winner's data and
/// on a low-indicator alternative, and compare the resulting fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    pub stage: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Field metrics are taken over `[window_min, window_max]^2`.
    pub window_min: f64,
    pub window_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub scenario: Scenario,
    pub stages: usize,
    pub mode: DesignMode,
    pub seed: u64,
    /// PDE mesh used for model predictions.
    pub model_grid: AxisConfig,
    /// PDE mesh of the simulated true system.
    pub truth_grid: AxisConfig,
    pub solver: SolverConfig,
    /// Velocity is `coefficient · t` in both components.
    pub velocity_coefficient: f64,
    pub param_grid: AxisConfig,
    pub noise_sigma: f64,
    pub constraint: DesignConstraint,
    pub candidates_per_axis: usize,
    pub eig_samples: usize,
    pub top_m: usize,
    pub posterior_update: PosteriorUpdate,
    pub true_source: SourceParams,
    /// Width and strength of the model source (location is inferred).
    pub model_source: SourceParams,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eki: EkiConfig,
    pub indicator: ThresholdRule,
    pub comparison: Option<ComparisonConfig>,
    pub metrics: MetricsConfig,
    pub write_png: bool,
}

impl CampaignConfig {
    pub fn preset(scenario: Scenario) -> Self {
        let common = CampaignConfig {
            scenario,
            stages: 5,
            mode: DesignMode::Measured,
            seed: 20240601,
            model_grid: AxisConfig {
                min: -2.0,
                max: 3.0,
                points: 101,
            },
            truth_grid: AxisConfig {
                min: -2.0,
                max: 3.0,
                points: 101,
            },
            solver: SolverConfig::default(),
            velocity_coefficient: 20.0,
            param_grid: AxisConfig {
                min: 0.0,
                max: 1.0,
                points: 51,
            },
            noise_sigma: 0.05,
            constraint: DesignConstraint::default(),
            candidates_per_axis: 5,
            eig_samples: 64,
            top_m: 5,
            posterior_update: PosteriorUpdate::Recondition,
            true_source: SourceParams {
                theta_x: 0.45,
                theta_y: 0.25,
                theta_h: 0.05,
                theta_s: 2.0,
            },
            model_source: SourceParams {
                theta_x: 0.5,
                theta_y: 0.5,
                theta_h: 0.05,
                theta_s: 3.0,
            },
            network: NetworkConfig {
                gain: 100.0,
                init_range: 0.1,
                location_input: LocationInput::Estimate,
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                optimizer: OptimizerKind::Adam,
                accumulate_data: true,
                ..TrainConfig::default()
            },
            eki: EkiConfig::default(),
            indicator: ThresholdRule::default(),
            comparison: None,
            metrics: MetricsConfig {
                window_min: 0.0,
                window_max: 1.0,
            },
            write_png: true,
        };
        match scenario {
            Scenario::Parametric => common,
            Scenario::Structural => CampaignConfig {
                velocity_coefficient: 50.0,
                true_source: SourceParams {
                    theta_x: 0.25,
                    theta_y: 0.25,
                    ..common.true_source
                },
                model_source: SourceParams {
                    theta_s: 2.0,
                    ..common.model_source
                },
                train: TrainConfig {
                    learning_rate: 5e-3,
                    ..common.train
                },
                comparison: Some(ComparisonConfig { stage: 3 }),
                ..common
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CampaignConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.model_grid.grid()?;
        self.truth_grid.grid()?;
        let pg = self.param_grid;
        if pg.points < 2 || !(pg.max > pg.min) {
            return bad("param_grid needs at least two points and max > min");
        }
        if !(self.solver.stability_factor > 0.0) || !(self.solver.cfl_factor > 0.0) {
            return bad("solver factors must be positive");
        }
        if !self.velocity_coefficient.is_finite() {
            return bad("velocity_coefficient must be finite");
        }
        if !(self.noise_sigma > 0.0) {
            return bad("noise_sigma must be positive");
        }
        self.constraint
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.candidates_per_axis == 0 {
            return bad("candidates_per_axis must be at least 1");
        }
        if self.eig_samples == 0 {
            return bad("eig_samples must be at least 1");
        }
        if self.top_m == 0 || self.top_m > pg.points * pg.points {
            return bad("top_m must lie in [1, number of parameter nodes]");
        }
        self.true_source
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.model_source
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.network.gain.is_finite()) || !(self.network.init_range >= 0.0) {
            return bad("network gain must be finite and init_range nonnegative");
        }
        self.train.validate()?;
        self.eki.validate()?;
        self.indicator.validate()?;
        if let Some(c) = self.comparison {
            if c.stage == 0 {
                return bad("comparison.stage counts from 1");
            }
        }
        if !(self.metrics.window_max > self.metrics.window_min) {
            return bad("metrics window is empty");
        }
        let truth = self.truth_grid.grid()?;
        let model = self.model_grid.grid()?;
        for g in [truth, model] {
            if !g.contains(pg.min, pg.min) || !g.contains(pg.max, pg.max) {
                return bad("the parameter grid must lie inside the PDE domain");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_roundtrip_and_validate() {
        for s in [Scenario::Parametric, Scenario::Structural] {
            let cfg = CampaignConfig::preset(s);
            cfg.validate().unwrap();
            let back = CampaignConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let mut v: serde_json::Value =
            serde_json::from_str(&CampaignConfig::preset(Scenario::Parametric).to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        let err = CampaignConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = CampaignConfig::preset(Scenario::Structural);
        cfg.noise_sigma = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = CampaignConfig::preset(Scenario::Structural);
        cfg.train.iterations = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
