//! Ensemble Kalman inversion over the discrepancy parameters, and the
//! Gaussian-ensemble KL divergence used to judge whether a measurement is
//! worth training on.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `J` parameter vectors of dimension `d`, stored as the columns of a
/// `d × J` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn from_columns(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidArgument(
                "an ensemble needs at least two members".into(),
            ));
        }
        if members.nrows() == 0 {
            return Err(Error::InvalidArgument("zero-dimensional ensemble".into()));
        }
        if members.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite ensemble member".into()));
        }
        Ok(Self { members })
    }

    pub fn from_members(members: &[Vec<f64>]) -> Result<Self> {
        let d = members.first().map_or(0, Vec::len);
        if members.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidArgument("ragged ensemble".into()));
        }
        Self::from_columns(DMatrix::from_fn(d, members.len(), |i, j| members[j][i]))
    }

    /// `center + N(0, spread²)` in every component.
    pub fn perturbed(center: &[f64], size: usize, spread: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, spread)
            .map_err(|e| Error::InvalidArgument(format!("ensemble spread: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(center.len(), size);
        for j in 0..size {
            for (i, c) in center.iter().enumerate() {
                m[(i, j)] = c + normal.sample(&mut rng);
            }
        }
        Self::from_columns(m)
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, j: usize) -> Vec<f64> {
        self.members.column(j).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Sample covariance with the `J − 1` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let dev = centered(&self.members);
        &dev * dev.transpose() / (self.size() as f64 - 1.0)
    }
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut dev = m.clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    dev
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkiConfig {
    pub ensemble_size: usize,
    pub iterations: usize,
    pub regularization: f64,
    /// Standard deviation of the initial perturbations.
    pub spread: f64,
}

impl Default for EkiConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 100,
            iterations: 10,
            regularization: 1e-8,
            spread: 0.1,
        }
    }
}

impl EkiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Config("eki.ensemble_size must be at least 2".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("eki.iterations must be at least 1".into()));
        }
        if !(self.regularization > 0.0) {
            return Err(Error::Config("eki.regularization must be positive".into()));
        }
        if !(self.spread > 0.0) {
            return Err(Error::Config("eki.spread must be positive".into()));
        }
        Ok(())
    }
}

/// How large a final divergence must be to count as informative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `kld ≥ factor × median(candidate klds)`; `fallback` nats when no
    /// candidate table is available.
    Relative { factor: f64, fallback: f64 },
    Absolute { tau: f64 },
    /// Never accept (training disabled).
    Never,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Relative {
            factor: 1.0,
            fallback: 0.5,
        }
    }
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ThresholdRule::Relative { factor, fallback } => factor >= 0.0 && fallback >= 0.0,
            ThresholdRule::Absolute { tau } => tau >= 0.0,
            ThresholdRule::Never => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("indicator thresholds must be nonnegative".into()))
        }
    }

    /// Threshold in nats given the stage's candidate divergences.
    pub fn threshold(&self, candidates: Option<&[f64]>) -> f64 {
        match *self {
            ThresholdRule::Relative { factor, fallback } => match candidates {
                Some(c) if !c.is_empty() => factor * median(c),
                _ => fallback,
            },
            ThresholdRule::Absolute { tau } => tau,
            ThresholdRule::Never => f64::INFINITY,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A parameter-to-observation map evaluated once per member.
pub type ForwardMap<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// One deterministic update
/// `θ_j ← θ_j + Σ^θg (Σ^gg + Γ)⁻¹ (y − g_j)`.
pub fn eki_step(
    ens: &Ensemble,
    forward: &ForwardMap<'_>,
    y: &[f64],
    gamma: &DMatrix<f64>,
) -> Result<Ensemble> {
    let j = ens.size();
    let outputs: Vec<Vec<f64>> = (0..j)
        .into_par_iter()
        .map(|m| forward(&ens.member(m)))
        .collect::<Result<_>>()?;
    for (m, g) in outputs.iter().enumerate() {
        if g.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteForward { member: m });
        }
    }
    if gamma.nrows() != y.len() || gamma.ncols() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: gamma.nrows(),
        });
    }
    let g = DMatrix::from_fn(y.len(), j, |i, m| outputs[m][i]);
    let dth = centered(ens.matrix());
    let dg = centered(&g);
    let norm = 1.0 / (j as f64 - 1.0);
    let c_tg = &dth * dg.transpose() * norm;
    let c_gg = &dg * dg.transpose() * norm + gamma;
    let chol = c_gg
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("Σgg + Γ is not positive definite".into()))?;
    let yv = DVector::from_column_slice(y);
    let mut innov = DMatrix::zeros(y.len(), j);
    for m in 0..j {
        innov.set_column(m, &(&yv - g.column(m)));
    }
    let update = c_tg * chol.solve(&innov);
    Ensemble::from_columns(ens.matrix() + update)
}

fn regularized(c: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    c + DMatrix::identity(c.nrows(), c.ncols()) * eps
}

/// `½[tr(Σ_K⁻¹Σ_0) − d + ln(det Σ_K / det Σ_0) + Δμᵀ Σ_K⁻¹ Δμ]` between the
/// Gaussian fits of `updated` (K) and `initial` (0), with `ε·I` added to
/// both covariances.
pub fn ensemble_kld(updated: &Ensemble, initial: &Ensemble, eps: f64) -> Result<f64> {
    if updated.dim() != initial.dim() {
        return Err(Error::DimensionMismatch {
            expected: initial.dim(),
            got: updated.dim(),
        });
    }
    gaussian_kld(
        &updated.mean(),
        &regularized(&updated.covariance(), eps),
        &initial.mean(),
        &regularized(&initial.covariance(), eps),
    )
}

/// The same closed form from explicit moments (`Σ_K`, `Σ_0` used as given).
pub fn gaussian_kld(
    mean_k: &DVector<f64>,
    cov_k: &DMatrix<f64>,
    mean_0: &DVector<f64>,
    cov_0: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean_k.len();
    if mean_0.len() != d || cov_k.nrows() != d || cov_0.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mean_0.len(),
        });
    }
    let not_pd = || Error::InvalidArgument("covariance is not positive definite".into());
    let ck = cov_k.clone().cholesky().ok_or_else(not_pd)?;
    let c0 = cov_0.clone().cholesky().ok_or_else(not_pd)?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let trace = ck.solve(cov_0).trace();
    let dm = mean_k - mean_0;
    let maha = dm.dot(&ck.solve(&dm));
    let kld = 0.5 * (trace - d as f64 + logdet(&ck.l()) - logdet(&c0.l()) + maha);
    // Round-off can leave tiny negatives when the ensembles coincide.
    Ok(kld.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Informativeness {
    /// Divergence after each of the K steps.
    pub trajectory: Vec<f64>,
    pub accept: bool,
}

impl Informativeness {
    pub fn final_kld(&self) -> f64 {
        *self.trajectory.last().unwrap_or(&0.0)
    }
}

/// Runs K EKI steps from a perturbed ensemble around `params` against the
/// observation `y` and records the divergence from the initial ensemble.
pub fn informativeness(
    params: &[f64],
    forward: &ForwardMap<'_>,
    y: &[f64],
    noise_variance: f64,
    cfg: &EkiConfig,
    threshold: f64,
    seed: u64,
) -> Result<Informativeness> {
    cfg.validate()?;
    let initial = Ensemble::perturbed(params, cfg.ensemble_size, cfg.spread, seed)?;
    let gamma = DMatrix::identity(y.len(), y.len()) * noise_variance;
    let mut ens = initial.clone();
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        ens = eki_step(&ens, forward, y, &gamma)?;
        trajectory.push(ensemble_kld(&ens, &initial, cfg.regularization)?);
    }
    let accept = trajectory.last().is_some_and(|&k| k >= threshold);
    Ok(Informativeness { trajectory, accept })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_members_do_not_move() {
        let ens = Ensemble::from_members(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let f = |p: &[f64]| Ok(vec![p[0] + p[1]]);
        let next = eki_step(&ens, &f, &[10.0], &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(next, ens);
    }

    #[test]
    fn matching_data_leaves_ensemble() {
        let ens = Ensemble::from_members(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        let f = |_: &[f64]| Ok(vec![3.0]);
        let next = eki_step(&ens, &f, &[3.0], &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(next, ens);
    }

    #[test]
    fn non_finite_forward_names_member() {
        let ens = Ensemble::from_members(&[vec![1.0], vec![-1.0], vec![2.0]]).unwrap();
        let f = |p: &[f64]| Ok(vec![p[0].ln()]);
        assert!(matches!(
            eki_step(&ens, &f, &[0.0], &DMatrix::identity(1, 1)),
            Err(Error::NonFiniteForward { member: 1 })
        ));
    }

    #[test]
    fn unit_gaussians_half_nat() {
        let k = gaussian_kld(
            &DVector::from_element(1, 1.0),
            &DMatrix::identity(1, 1),
            &DVector::from_element(1, 0.0),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!((k - 0.5).abs() < 1e-15);
    }

    #[test]
    fn self_divergence_is_zero() {
        let ens = Ensemble::perturbed(&[0.0, 1.0, 2.0], 10, 0.3, 5).unwrap();
        assert_eq!(ensemble_kld(&ens, &ens, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn flat_forward_map_is_uninformative() {
        let f = |_: &[f64]| Ok(vec![1.0]);
        let cfg = EkiConfig {
            ensemble_size: 20,
            ..Default::default()
        };
        let out = informativeness(&[0.0, 0.0], &f, &[5.0], 0.01, &cfg, 1e-12, 0).unwrap();
        assert!(out.trajectory.iter().all(|&k| k == 0.0));
        assert!(!out.accept);
        let always = informativeness(&[0.0, 0.0], &f, &[5.0], 0.01, &cfg, 0.0, 0).unwrap();
        assert!(always.accept);
    }

    #[test]
    fn threshold_rules() {
        let r = ThresholdRule::default();
        assert_eq!(r.threshold(Some(&[1.0, 5.0, 3.0])), 3.0);
        assert_eq!(r.threshold(None), 0.5);
        assert_eq!(ThresholdRule::Absolute { tau: 2.0 }.threshold(Some(&[9.0])), 2.0);
        assert_eq!(ThresholdRule::Never.threshold(None), f64::INFINITY);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn dimension_mismatch_faults() {
        let a = Ensemble::perturbed(&[0.0], 5, 0.1, 1).unwrap();
        let b = Ensemble::perturbed(&[0.0, 0.0], 5, 0.1, 1).unwrap();
        assert!(matches!(
            ensemble_kld(&a, &b, 1e-8),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
