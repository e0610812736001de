//! Greedy stage-wise design selection.
//!
//! Candidates lie on a lattice inside the movement box around the previous
//! design. Each candidate is scored either by the realized information gain
//! of an actual (true-system) measurement taken there, or by a Monte Carlo
//! estimate of the expected information gain under the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes_grid::{
    bayes_update_with_predictions, kld_grid, Measurement, NoiseModel, ParamPosterior,
    PredictionCache,
};
use crate::error::{Error, Result};

/// Spatiotemporal measurement coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub d_x: f64,
    pub d_y: f64,
    pub d_t: f64,
}

impl Design {
    pub fn new(d_x: f64, d_y: f64, d_t: f64) -> Self {
        Self { d_x, d_y, d_t }
    }

    pub fn location(&self) -> (f64, f64) {
        (self.d_x, self.d_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignConstraint {
    pub max_move: f64,
    pub stage_dt: f64,
    pub initial: (f64, f64),
}

impl Default for DesignConstraint {
    fn default() -> Self {
        Self {
            max_move: 0.2,
            stage_dt: 0.05,
            initial: (0.5, 0.5),
        }
    }
}

impl DesignConstraint {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_move > 0.0) || !(self.stage_dt > 0.0) {
            return Err(Error::InvalidArgument(
                "max_move and stage_dt must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The starting point, at time zero.
    pub fn initial_design(&self) -> Design {
        Design::new(self.initial.0, self.initial.1, 0.0)
    }

    /// `i · Δt`.
    pub fn stage_time(&self, stage: usize) -> f64 {
        stage as f64 * self.stage_dt
    }

    pub fn stage_of(&self, t: f64) -> usize {
        (t / self.stage_dt).round() as usize
    }

    /// Whether `next` is a legal successor of `prev`.
    pub fn complies(&self, prev: &Design, next: &Design) -> bool {
        let tol = 1e-12;
        (next.d_x - prev.d_x).abs() <= self.max_move + tol
            && (next.d_y - prev.d_y).abs() <= self.max_move + tol
            && (0.0..=1.0).contains(&next.d_x)
            && (0.0..=1.0).contains(&next.d_y)
    }
}

/// `n × n` lattice of offsets spanning `[−max_move, max_move]^2` around
/// `prev`, clipped to the unit square and deduplicated (first occurrence
/// kept, y-major order), all at the next stage time.
pub fn candidates(prev: &Design, c: &DesignConstraint, n_per_axis: usize) -> Vec<Design> {
    let n = n_per_axis.max(1);
    let offsets: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n)
            .map(|i| c.max_move * (2 * i) as f64 / (n - 1) as f64 - c.max_move)
            .map(|o| if o.abs() < 1e-15 { 0.0 } else { o })
            .collect()
    };
    let t = c.stage_time(c.stage_of(prev.d_t) + 1);
    let mut out: Vec<Design> = Vec::with_capacity(n * n);
    for &oy in &offsets {
        for &ox in &offsets {
            let d = Design::new(
                (prev.d_x + ox).clamp(0.0, 1.0),
                (prev.d_y + oy).clamp(0.0, 1.0),
                t,
            );
            if !out
                .iter()
                .any(|e| e.d_x.to_bits() == d.d_x.to_bits() && e.d_y.to_bits() == d.d_y.to_bits())
            {
                out.push(d);
            }
        }
    }
    out
}

/// Something that can take a noisy measurement of the true system.
pub trait Measurer: Sync {
    /// Measurement at `design`, using noise stream `stream`. Repeated calls
    /// with the same stream return the same value.
    fn measure(&self, design: &Design, stream: u64) -> Result<Measurement>;
}

#[derive(Debug, Clone)]
pub struct RealizedGain {
    pub gain: f64,
    pub measurement: Measurement,
    pub posterior: ParamPosterior,
}

/// Measures at `d`, updates the prior, and returns `D_KL(posterior ‖ prior)`.
pub fn realized_ig<M: Measurer + ?Sized>(
    prior: &ParamPosterior,
    d: &Design,
    measurer: &M,
    stream: u64,
    predictions: &[f64],
    noise: &NoiseModel,
) -> Result<RealizedGain> {
    let measurement = measurer.measure(d, stream)?;
    let up = bayes_update_with_predictions(prior, measurement.value, predictions, noise)?;
    let gain = kld_grid(&up.posterior, prior)?;
    Ok(RealizedGain {
        gain,
        measurement,
        posterior: up.posterior,
    })
}

/// Monte Carlo expected information gain: draw `θ ~ prior`,
/// `y = u(d; θ) + η`, average the resulting posterior-to-prior divergence.
pub fn expected_ig(
    prior: &ParamPosterior,
    predictions: &[f64],
    noise: &NoiseModel,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if predictions.len() != prior.mass().len() {
        return Err(Error::DimensionMismatch {
            expected: prior.mass().len(),
            got: predictions.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cumulative: Vec<f64> = prior
        .mass()
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("non-empty");
    let mut sum = 0.0;
    for _ in 0..n_samples {
        let u: f64 = rng.random::<f64>() * total;
        let node = cumulative
            .partition_point(|&c| c <= u)
            .min(cumulative.len() - 1);
        let eta: f64 = StandardNormal.sample(&mut rng);
        let y = predictions[node] + noise.sigma() * eta;
        let up = bayes_update_with_predictions(prior, y, predictions, noise)?;
        sum += kld_grid(&up.posterior, prior)?;
    }
    Ok(sum / n_samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignMode {
    /// Score by realized gain of true-system measurements at each candidate.
    Measured,
    /// Score by Monte Carlo expected gain under the model.
    Predictive,
}

#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub design: Design,
    pub score: f64,
    pub measurement: Option<Measurement>,
}

#[derive(Debug, Clone)]
pub struct DesignSelection {
    pub index: usize,
    pub design: Design,
    /// The winner's measurement (measured mode only).
    pub measurement: Option<Measurement>,
    pub scores: Vec<CandidateScore>,
}

/// Index of the largest score; ties go to the smallest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if s > scores[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Options for [`select_design`].
pub struct Scoring<'a, M: Measurer + ?Sized> {
    pub mode: DesignMode,
    pub noise: NoiseModel,
    pub measurer: &'a M,
    /// Noise stream used for the measurement at candidate `i`.
    pub measurement_stream: &'a (dyn Fn(usize) -> u64 + Sync),
    /// Sampling seed for expected-gain scoring of candidate `i`.
    pub sampling_seed: &'a (dyn Fn(usize) -> u64 + Sync),
    pub eig_samples: usize,
}

/// Scores every candidate and returns the best one with the full table.
pub fn select_design<M: Measurer + ?Sized>(
    prior: &ParamPosterior,
    candidates: &[Design],
    cache: &PredictionCache,
    scoring: &Scoring<'_, M>,
) -> Result<DesignSelection> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scores: Vec<CandidateScore> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, d)| -> Result<CandidateScore> {
            let preds = cache.get(d)?;
            match scoring.mode {
                DesignMode::Measured => {
                    let r = realized_ig(
                        prior,
                        d,
                        scoring.measurer,
                        (scoring.measurement_stream)(i),
                        preds,
                        &scoring.noise,
                    )?;
                    Ok(CandidateScore {
                        design: *d,
                        score: r.gain,
                        measurement: Some(r.measurement),
                    })
                }
                DesignMode::Predictive => Ok(CandidateScore {
                    design: *d,
                    score: expected_ig(
                        prior,
                        preds,
                        &scoring.noise,
                        scoring.eig_samples,
                        (scoring.sampling_seed)(i),
                    )?,
                    measurement: None,
                }),
            }
        })
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let index = argmax_first(&raw).ok_or(Error::EmptyCandidates)?;
    Ok(DesignSelection {
        index,
        design: scores[index].design,
        measurement: scores[index].measurement,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes_grid::{ParamGrid, Provenance};

    #[test]
    fn centered_lattice() {
        let c = DesignConstraint::default();
        let cands = candidates(&c.initial_design(), &c, 3);
        assert_eq!(cands.len(), 9);
        let xs: Vec<f64> = cands.iter().take(3).map(|d| d.d_x).collect();
        assert!((xs[0] - 0.3).abs() < 1e-15 && xs[1] == 0.5 && (xs[2] - 0.7).abs() < 1e-15);
        assert!(cands.iter().all(|d| d.d_t == 0.05));
    }

    #[test]
    fn clipped_lattice_never_leaves_unit_square() {
        let c = DesignConstraint::default();
        let prev = Design::new(0.1, 0.1, 0.05);
        let cands = candidates(&prev, &c, 3);
        assert!(cands.iter().all(|d| d.d_x >= 0.0 && d.d_y >= 0.0));
        assert!(cands.iter().all(|d| c.complies(&prev, d)));
        assert!(cands.iter().all(|d| d.d_t == 0.1));
    }

    #[test]
    fn corner_dedup_count() {
        let c = DesignConstraint::default();
        // brute force: offsets in {-0.2,...,0.2}, clip, count distinct
        let prev = Design::new(0.0, 0.0, 0.0);
        let mut distinct = std::collections::BTreeSet::new();
        for i in 0..5 {
            for j in 0..5 {
                let ox = -0.2 + 0.1 * i as f64;
                let oy = -0.2 + 0.1 * j as f64;
                let x = (ox.max(0.0) * 1e6).round() as i64;
                let y = (oy.max(0.0) * 1e6).round() as i64;
                distinct.insert((x, y));
            }
        }
        assert_eq!(distinct.len(), 9);
        assert_eq!(candidates(&prev, &c, 5).len(), 9);
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_first(&[0.1, 0.9, 0.4]), Some(1));
        assert_eq!(argmax_first(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax_first(&[]), None);
        assert_eq!(argmax_first(&[7.0]), Some(0));
    }

    struct Fixed(f64);
    impl Measurer for Fixed {
        fn measure(&self, design: &Design, _stream: u64) -> Result<Measurement> {
            Measurement::new(*design, self.0, Provenance::TrueSystem)
        }
    }

    #[test]
    fn flat_predictions_carry_no_information() {
        let grid = ParamGrid::uniform(0.0, 1.0, 5).unwrap();
        let prior = ParamPosterior::uniform(grid);
        let noise = NoiseModel::new(0.05).unwrap();
        let d = Design::new(0.5, 0.5, 0.05);
        let preds = vec![0.3; 25];
        let r = realized_ig(&prior, &d, &Fixed(0.1), 0, &preds, &noise).unwrap();
        assert!(r.gain.abs() < 1e-15);
        let e = expected_ig(&prior, &preds, &noise, 16, 3).unwrap();
        assert!(e.abs() < 1e-15);
    }

    #[test]
    fn point_mass_prior_gains_nothing() {
        let grid = ParamGrid::uniform(0.0, 1.0, 5).unwrap();
        let prior = ParamPosterior::point_mass(grid, 12).unwrap();
        let noise = NoiseModel::new(0.05).unwrap();
        let preds: Vec<f64> = (0..25).map(|k| k as f64 * 0.01).collect();
        let d = Design::new(0.5, 0.5, 0.05);
        assert_eq!(
            realized_ig(&prior, &d, &Fixed(0.7), 0, &preds, &noise)
                .unwrap()
                .gain,
            0.0
        );
        assert_eq!(expected_ig(&prior, &preds, &noise, 8, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidate_list_faults() {
        let prior = ParamPosterior::uniform(ParamGrid::uniform(0.0, 1.0, 3).unwrap());
        let scoring = Scoring {
            mode: DesignMode::Measured,
            noise: NoiseModel::new(0.1).unwrap(),
            measurer: &Fixed(0.0),
            measurement_stream: &|i| i as u64,
            sampling_seed: &|i| i as u64,
            eig_samples: 4,
        };
        assert!(matches!(
            select_design(&prior, &[], &PredictionCache::new(), &scoring),
            Err(Error::EmptyCandidates)
        ));
    }
}
