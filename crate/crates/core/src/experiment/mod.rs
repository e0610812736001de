//! Campaign orchestration: configuration, the simulated true system, the
//! stage loop, metrics and artifacts.

pub mod artifacts;
pub mod benchmark;
pub mod campaign;
pub mod gradcheck;
pub mod config;
pub mod metrics;
pub mod predict;
pub mod seeds;
pub mod truth;

pub use artifacts::{write_artifacts, Manifest};
pub use benchmark::{run_benchmark_3d, Benchmark3dConfig, Benchmark3dResult};
pub use campaign::{run_campaign, run_campaign_with, CampaignResult, StageRecord};
pub use config::{CampaignConfig, Scenario};
