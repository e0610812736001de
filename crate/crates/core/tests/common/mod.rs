#![allow(dead_code)]

use activebed::experiment::config::{AxisConfig, ComparisonConfig};
use activebed::experiment::{CampaignConfig, Scenario};

/// A campaign small enough for debug-speed tests: coarse meshes, wide
/// sources, few iterations.
pub fn tiny(scenario: Scenario) -> CampaignConfig {
    let mut cfg = CampaignConfig::preset(scenario);
    let g = AxisConfig {
        min: -2.0,
        max: 3.0,
        points: 26,
    };
    cfg.model_grid = g;
    cfg.truth_grid = g;
    cfg.param_grid.points = 11;
    cfg.model_source.theta_h = 0.2;
    cfg.true_source.theta_h = 0.2;
    cfg.candidates_per_axis = 3;
    cfg.stages = 3;
    cfg.train.iterations = 5;
    cfg.eki.ensemble_size = 10;
    cfg.eki.iterations = 3;
    cfg.eig_samples = 4;
    cfg.comparison = Some(ComparisonConfig { stage: 2 });
    cfg
}
