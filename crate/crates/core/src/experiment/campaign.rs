use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CampaignConfig, PosteriorUpdate, Scenario};
use super::metrics::{window_metrics, FieldMetrics};
use super::predict::{node_predictions, ModelSetup};
use super::seeds::{Seeds, Stream};
use super::truth::TrueSystem;
use crate::bayes_grid::{
    bayes_update_with_predictions, map_estimate, top_m_mean, Measurement, NoiseModel, ParamGrid,
    ParamPosterior, PredictionCache,
};
use crate::bed_design::{candidates, select_design, Design, Measurer, Scoring};
use crate::discrepancy_trainer::{
    train_stage, CalibrationProblem, TrainOutcome, WeightedObservation,
};
use crate::eki_indicator::{informativeness, Informativeness, ThresholdRule};
use crate::error::{Error, Result};
use crate::forward_models::{DiscrepancyNet, SourceTerm};
use crate::grid_pde::{StateField, VelocityModel};

#[derive(Debug, Clone)]
pub struct CandidateRow {
    pub design: Design,
    pub score: f64,
    pub measurement: Option<f64>,
    /// Final indicator divergence, when computed for this candidate.
    pub kld: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IndicatorRecord {
    pub trajectory: Vec<f64>,
    pub threshold: f64,
    pub accept: bool,
}

#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: usize,
    pub design: Design,
    pub measurement: Measurement,
    pub chosen: usize,
    pub candidates: Vec<CandidateRow>,
    pub posterior: ParamPosterior,
    pub map: (f64, f64),
    /// Top-m mean used as `θ_G*`.
    pub estimate: (f64, f64),
    pub indicator: Option<IndicatorRecord>,
    pub training: Option<TrainOutcome>,
    /// Trainable parameters after this stage.
    pub params: Vec<f64>,
    pub elapsed_s: f64,
}

/// Fields on the metrics window: node coordinates and one column per model.
#[derive(Debug, Clone)]
pub struct WindowFields {
    pub coords: Vec<(f64, f64)>,
    pub columns: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct ComparisonRecord {
    pub stage: usize,
    pub winner: usize,
    pub alternative: usize,
    pub winner_trajectory: Vec<f64>,
    pub alternative_trajectory: Vec<f64>,
    /// Whether the winner (rather than the alternative) had the larger
    /// final divergence.
    pub winner_is_informative: bool,
    pub estimate: (f64, f64),
    pub baseline: FieldMetrics,
    pub informative: FieldMetrics,
    pub uninformative: FieldMetrics,
    pub informative_training: TrainOutcome,
    pub uninformative_training: TrainOutcome,
    pub fields: WindowFields,
}

impl ComparisonRecord {
    pub fn informative_trajectory(&self) -> &[f64] {
        if self.winner_is_informative {
            &self.winner_trajectory
        } else {
            &self.alternative_trajectory
        }
    }

    pub fn uninformative_trajectory(&self) -> &[f64] {
        if self.winner_is_informative {
            &self.alternative_trajectory
        } else {
            &self.winner_trajectory
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinalMetrics {
    pub time: f64,
    pub estimate: (f64, f64),
    pub corrected: FieldMetrics,
    pub baseline: FieldMetrics,
    pub fields: WindowFields,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub records: Vec<StageRecord>,
    pub comparison: Option<ComparisonRecord>,
    pub initial_source: SourceTerm,
    pub final_source: SourceTerm,
    pub final_metrics: Option<FinalMetrics>,
}

impl CampaignResult {
    pub fn final_posterior(&self) -> Option<&ParamPosterior> {
        self.records.last().map(|r| &r.posterior)
    }

    /// Trainable parameters at the end of the run.
    pub fn final_params(&self) -> Vec<f64> {
        self.final_source.trainable()
    }
}

/// Everything a campaign needs, built once from the configuration.
pub struct CampaignContext {
    pub cfg: CampaignConfig,
    pub seeds: Seeds,
    pub model: ModelSetup,
    /// Modeled system on the truth mesh, for field comparisons.
    pub model_on_truth_grid: ModelSetup,
    pub truth: TrueSystem,
    pub params: ParamGrid,
    pub noise: NoiseModel,
}

impl CampaignContext {
    pub fn new(cfg: &CampaignConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = VelocityModel::linear(cfg.velocity_coefficient);
        let model_grid = cfg.model_grid.grid()?;
        let truth_grid = cfg.truth_grid.grid()?;
        let noise = NoiseModel::new(cfg.noise_sigma)?;
        let stage_dt = cfg.constraint.stage_dt;
        let truth = TrueSystem::new(
            truth_grid,
            velocity,
            cfg.solver,
            cfg.true_source,
            noise,
            stage_dt,
            cfg.stages,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            seeds: Seeds::new(cfg.seed),
            model: ModelSetup {
                grid: model_grid,
                velocity,
                solver: cfg.solver,
                stage_dt,
            },
            model_on_truth_grid: ModelSetup {
                grid: truth_grid,
                velocity,
                solver: cfg.solver,
                stage_dt,
            },
            truth,
            params: ParamGrid::uniform(cfg.param_grid.min, cfg.param_grid.max, cfg.param_grid.points)?,
            noise,
        })
    }

    /// The model source at the start of the campaign.
    pub fn initial_source(&self) -> SourceTerm {
        match self.cfg.scenario {
            Scenario::Parametric => SourceTerm::ParametricStrength(self.cfg.model_source),
            Scenario::Structural => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.root(Stream::NetInit));
                SourceTerm::NetworkAugmented {
                    params: self.cfg.model_source,
                    net: DiscrepancyNet::random(
                        self.cfg.network.gain,
                        self.cfg.network.init_range,
                        &mut rng,
                    ),
                }
            }
        }
    }

    fn noise_stream(&self, stage: usize, candidate: usize) -> u64 {
        self.seeds.at(Stream::Noise, stage as u64, candidate as u64)
    }

    /// Indicator run for one (design, measurement) pair.
    fn indicator(
        &self,
        source: &SourceTerm,
        estimate: (f64, f64),
        weights: &[f64],
        y: f64,
        stage: usize,
    ) -> Result<Informativeness> {
        let template = source.at_location(estimate.0, estimate.1);
        let grid = self.model.grid;
        let forward = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![template.with_trainable(p)?.weighted_sum(&grid, weights)])
        };
        informativeness(
            &template.trainable(),
            &forward,
            &[y],
            self.noise.variance(),
            &self.cfg.eki,
            0.0,
            // The same initial ensemble for every candidate of a stage.
            self.seeds.at(Stream::EkiPerturbations, stage as u64, 0),
        )
    }

    /// Posterior from a uniform prior and every past measurement, all
    /// evaluated under the current model.
    fn recondition(
        &self,
        history: &[WeightedObservation],
        source: &SourceTerm,
        estimate: (f64, f64),
    ) -> Result<ParamPosterior> {
        let weights: Vec<Vec<f64>> = history.iter().map(|o| o.weights.clone()).collect();
        let preds = node_predictions(
            &self.model,
            source,
            &self.params,
            self.cfg.network.location_input,
            estimate,
            &weights,
        )?;
        let mut post = ParamPosterior::uniform(self.params.clone());
        for (o, p) in history.iter().zip(&preds) {
            post = bayes_update_with_predictions(&post, o.value, p, &self.noise)?.posterior;
        }
        Ok(post)
    }

    fn train(
        &self,
        source: &SourceTerm,
        estimate: (f64, f64),
        data: Vec<WeightedObservation>,
    ) -> Result<(SourceTerm, TrainOutcome)> {
        let template = source.at_location(estimate.0, estimate.1);
        let problem = CalibrationProblem::new(self.model.grid, template.clone(), data, self.noise)?;
        let out = train_stage(&problem, &template.trainable(), &self.cfg.train)?;
        Ok((source.with_trainable(&out.params)?, out))
    }

    /// Window fields of the truth and of each model at time `t`, every
    /// model located at `estimate`.
    fn compare_fields(
        &self,
        t: f64,
        estimate: (f64, f64),
        models: &[(&str, &SourceTerm)],
    ) -> Result<(Vec<FieldMetrics>, WindowFields)> {
        let truth = self.truth.field_at(t)?;
        let (lo, hi) = (self.cfg.metrics.window_min, self.cfg.metrics.window_max);
        let (nodes, _) = truth.grid.window(lo, hi);
        let mut metrics = Vec::new();
        let mut columns = vec![(
            "true".to_string(),
            nodes.iter().map(|&k| truth.values[k]).collect(),
        )];
        for (name, s) in models {
            let u: StateField = self.model_on_truth_grid.field(s, estimate, t)?;
            metrics.push(window_metrics(&u, &truth, lo, hi)?);
            columns.push((name.to_string(), nodes.iter().map(|&k| u.values[k]).collect()));
        }
        Ok((
            metrics,
            WindowFields {
                coords: nodes.iter().map(|&k| truth.grid.node_position(k)).collect(),
                columns,
            },
        ))
    }
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult> {
    run_campaign_with(cfg, |_| Ok(()))
}

/// Runs the stage loop, handing each finished stage to `on_stage` before
/// starting the next one.
pub fn run_campaign_with(
    cfg: &CampaignConfig,
    mut on_stage: impl FnMut(&StageRecord) -> Result<()>,
) -> Result<CampaignResult> {
    let ctx = CampaignContext::new(cfg)?;
    let initial_source = ctx.initial_source();
    let mut source = initial_source.clone();
    let mut posterior = ParamPosterior::uniform(ctx.params.clone());
    let mut prev = cfg.constraint.initial_design();
    let mut estimate = (cfg.model_source.theta_x, cfg.model_source.theta_y);
    let mut history: Vec<WeightedObservation> = Vec::new();
    let mut records = Vec::with_capacity(cfg.stages);
    let mut comparison = None;

    for stage in 1..=cfg.stages {
        let clock = Instant::now();
        if cfg.posterior_update == PosteriorUpdate::Recondition && !history.is_empty() {
            posterior = ctx.recondition(&history, &source, estimate)?;
        }
        let cands = candidates(&prev, &cfg.constraint, cfg.candidates_per_axis);
        let weights = ctx.model.weights_many(&cands)?;
        let preds = node_predictions(
            &ctx.model,
            &source,
            &ctx.params,
            cfg.network.location_input,
            estimate,
            &weights,
        )?;
        let mut cache = PredictionCache::new();
        for (d, p) in cands.iter().zip(&preds) {
            cache.insert(*d, p.clone());
        }
        let noise_of = |i: usize| ctx.noise_stream(stage, i);
        let eig_of = |i: usize| ctx.seeds.at(Stream::EigSampling, stage as u64, i as u64);
        let selection = select_design(
            &posterior,
            &cands,
            &cache,
            &Scoring {
                mode: cfg.mode,
                noise: ctx.noise,
                measurer: &ctx.truth,
                measurement_stream: &noise_of,
                sampling_seed: &eig_of,
                eig_samples: cfg.eig_samples,
            },
        )?;
        let chosen = selection.index;
        let design = selection.design;
        let measurement = match selection.measurement {
            Some(m) => m,
            None => ctx.truth.measure(&design, noise_of(chosen))?,
        };
        posterior = bayes_update_with_predictions(&posterior, measurement.value, &preds[chosen], &ctx.noise)?
            .posterior;
        estimate = top_m_mean(&posterior, cfg.top_m)?;
        let (_, map) = map_estimate(&posterior);

        let mut rows: Vec<CandidateRow> = selection
            .scores
            .iter()
            .map(|s| CandidateRow {
                design: s.design,
                score: s.score,
                measurement: s.measurement.map(|m| m.value),
                kld: None,
            })
            .collect();

        let source_before = source.clone();
        let trainable = !source.trainable().is_empty();
        let is_comparison = trainable && cfg.comparison.is_some_and(|c| c.stage == stage);
        let wants_indicator = trainable && cfg.indicator != ThresholdRule::Never;
        let mut indicator = None;
        let mut training = None;
        let mut trajectories: Vec<Option<Vec<f64>>> = vec![None; cands.len()];

        if wants_indicator || is_comparison {
            if is_comparison {
                for (i, row) in rows.iter_mut().enumerate() {
                    if row.measurement.is_none() {
                        row.measurement = Some(ctx.truth.measure(&row.design, noise_of(i))?.value);
                    }
                }
            }
            rows[chosen].measurement = Some(measurement.value);
            let relative = matches!(cfg.indicator, ThresholdRule::Relative { .. });
            let all = is_comparison || (relative && rows.iter().all(|r| r.measurement.is_some()));
            for (i, row) in rows.iter_mut().enumerate() {
                if !all && i != chosen {
                    continue;
                }
                let y = row.measurement.expect("measured");
                let r = ctx.indicator(&source, estimate, &weights[i], y, stage)?;
                row.kld = Some(r.final_kld());
                trajectories[i] = Some(r.trajectory);
            }
            let table: Vec<f64> = rows.iter().filter_map(|r| r.kld).collect();
            let threshold = cfg
                .indicator
                .threshold((all && table.len() > 1).then_some(table.as_slice()));
            let trajectory = trajectories[chosen].clone().expect("winner evaluated");
            let accept = trajectory.last().is_some_and(|&k| k >= threshold);
            indicator = Some(IndicatorRecord {
                trajectory,
                threshold,
                accept,
            });
        }

        let winner_obs = WeightedObservation {
            design,
            value: measurement.value,
            weights: weights[chosen].clone(),
        };
        history.push(winner_obs.clone());
        if indicator.as_ref().is_some_and(|i| i.accept) && wants_indicator {
            let data = if cfg.train.accumulate_data {
                history.clone()
            } else {
                vec![winner_obs.clone()]
            };
            let (next, out) = ctx.train(&source, estimate, data)?;
            source = next;
            training = Some(out);
        }

        if is_comparison {
            let klds: Vec<f64> = rows.iter().map(|r| r.kld.unwrap_or(f64::INFINITY)).collect();
            let alternative = (0..rows.len())
                .filter(|&i| i != chosen)
                .min_by(|&a, &b| klds[a].total_cmp(&klds[b]).then(a.cmp(&b)));
            if let Some(alt) = alternative {
                let alt_obs = WeightedObservation {
                    design: rows[alt].design,
                    value: rows[alt].measurement.expect("measured"),
                    weights: weights[alt].clone(),
                };
                let (src_w, out_w) = ctx.train(&source_before, estimate, vec![winner_obs.clone()])?;
                let (src_a, out_a) = ctx.train(&source_before, estimate, vec![alt_obs])?;
                let winner_is_informative = klds[chosen] >= klds[alt];
                let t_final = cfg.constraint.stage_time(cfg.stages);
                let (inf_src, uninf_src, inf_out, uninf_out) = if winner_is_informative {
                    (src_w, src_a, out_w, out_a)
                } else {
                    (src_a, src_w, out_a, out_w)
                };
                let (m, fields) = ctx.compare_fields(
                    t_final,
                    estimate,
                    &[
                        ("baseline", &source_before),
                        ("informative", &inf_src),
                        ("uninformative", &uninf_src),
                    ],
                )?;
                comparison = Some(ComparisonRecord {
                    stage,
                    winner: chosen,
                    alternative: alt,
                    winner_trajectory: trajectories[chosen].clone().unwrap_or_default(),
                    alternative_trajectory: trajectories[alt].clone().unwrap_or_default(),
                    winner_is_informative,
                    estimate,
                    baseline: m[0],
                    informative: m[1],
                    uninformative: m[2],
                    informative_training: inf_out,
                    uninformative_training: uninf_out,
                    fields,
                });
            }
        }

        for (row, traj) in rows.iter_mut().zip(&trajectories) {
            if traj.is_none() && !is_comparison {
                row.kld = None;
            }
        }
        let record = StageRecord {
            stage,
            design,
            measurement,
            chosen,
            candidates: rows,
            posterior: posterior.clone(),
            map,
            estimate,
            indicator,
            training,
            params: source.trainable(),
            elapsed_s: clock.elapsed().as_secs_f64(),
        };
        on_stage(&record)?;
        records.push(record);
        prev = design;
    }

    let final_metrics = if cfg.stages > 0 {
        let t = cfg.constraint.stage_time(cfg.stages);
        let (m, fields) = ctx.compare_fields(
            t,
            estimate,
            &[("corrected", &source), ("baseline", &initial_source)],
        )?;
        Some(FinalMetrics {
            time: t,
            estimate,
            corrected: m[0],
            baseline: m[1],
            fields,
        })
    } else {
        None
    };

    if records.iter().any(|r| !r.posterior.mass().iter().all(|m| m.is_finite())) {
        return Err(Error::LikelihoodUnderflow);
    }
    Ok(CampaignResult {
        records,
        comparison,
        initial_source,
        final_source: source,
        final_metrics,
    })
}
