//! Grid-discretized Bayesian inference over the source location.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bed_design::Design;
use crate::error::{Error, Result};

/// Tensor grid of candidate source locations. Node `k` is `(xs[k % nx], ys[k / nx])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl ParamGrid {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        for axis in [&xs, &ys] {
            if axis.len() < 2 {
                return Err(Error::InvalidArgument(
                    "parameter axes need at least 2 nodes".into(),
                ));
            }
            if !axis.windows(2).all(|w| w[1] > w[0]) {
                return Err(Error::InvalidArgument(
                    "parameter axes must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { xs, ys })
    }

    /// `n × n` nodes evenly spaced over `[lo, hi]^2`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(
                "parameter axes need at least 2 nodes".into(),
            ));
        }
        let axis: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        Self::new(axis.clone(), axis)
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn node(&self, k: usize) -> (f64, f64) {
        let nx = self.xs.len();
        (self.xs[k % nx], self.ys[k / nx])
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.len()).map(move |k| self.node(k))
    }

    /// Largest spacing along either axis.
    pub fn cell_size(&self) -> f64 {
        self.xs
            .windows(2)
            .chain(self.ys.windows(2))
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

impl Default for ParamGrid {
    /// 51 × 51 over `[0, 1]^2`.
    fn default() -> Self {
        Self::uniform(0.0, 1.0, 51).expect("default parameter grid is valid")
    }
}

/// Normalized probability mass over a [`ParamGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPosterior {
    grid: ParamGrid,
    mass: Vec<f64>,
}

impl ParamPosterior {
    pub fn uniform(grid: ParamGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(grid: ParamGrid, node: usize) -> Result<Self> {
        if node >= grid.len() {
            return Err(Error::InvalidArgument(format!("node {node} out of range")));
        }
        let mut mass = vec![0.0; grid.len()];
        mass[node] = 1.0;
        Ok(Self { grid, mass })
    }

    /// Normalizes nonnegative weights into a posterior.
    pub fn from_weights(grid: ParamGrid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::LikelihoodUnderflow);
        }
        Ok(Self {
            grid,
            mass: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn grid(&self) -> &ParamGrid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Writes `x,y,mass` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "mass"])?;
        for (k, m) in self.mass.iter().enumerate() {
            let (x, y) = self.grid.node(k);
            w.write_record([format!("{x:?}"), format!("{y:?}"), format!("{m:?}")])?;
        }
        w.flush().map_err(|e| Error::io("<posterior csv>", e))?;
        Ok(())
    }
}

/// Additive Gaussian measurement noise `η ~ N(0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    #[inline]
    pub fn log_density(&self, residual: f64) -> f64 {
        -0.5 * residual * residual / self.variance() - (self.sigma * (2.0 * PI).sqrt()).ln()
    }

    pub fn density(&self, residual: f64) -> f64 {
        self.log_density(residual).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    TrueSystem,
    ModelPredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub design: Design,
    pub value: f64,
    pub provenance: Provenance,
}

impl Measurement {
    pub fn new(design: Design, value: f64, provenance: Provenance) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument("non-finite measurement".into()));
        }
        Ok(Self {
            design,
            value,
            provenance,
        })
    }
}

/// Ordered record `I_i` of measurements at chosen designs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignHistory {
    entries: Vec<Measurement>,
}

impl DesignHistory {
    pub fn push(&mut self, m: Measurement) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if m.design.d_t < last.design.d_t {
                return Err(Error::InvalidArgument(
                    "design times must be nondecreasing".into(),
                ));
            }
        }
        self.entries.push(m);
        Ok(())
    }

    pub fn entries(&self) -> &[Measurement] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Model predictions `u(d; θ_k)` for every parameter node, keyed by design.
#[derive(Debug, Clone, Default)]
pub struct PredictionCache {
    entries: Vec<(Design, Vec<f64>)>,
}

impl PredictionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, design: Design, predictions: Vec<f64>) {
        if let Some(slot) = self.entries.iter_mut().find(|(d, _)| *d == design) {
            slot.1 = predictions;
        } else {
            self.entries.push((design, predictions));
        }
    }

    pub fn get(&self, design: &Design) -> Result<&[f64]> {
        self.entries
            .iter()
            .find(|(d, _)| d == design)
            .map(|(_, p)| p.as_slice())
            .ok_or(Error::MissingPrediction {
                x: design.d_x,
                y: design.d_y,
                t: design.d_t,
            })
    }

    pub fn designs(&self) -> impl Iterator<Item = &Design> {
        self.entries.iter().map(|(d, _)| d)
    }
}

/// Gaussian density of `y` given the cached prediction at node `node`.
pub fn likelihood(
    y: &Measurement,
    node: usize,
    cache: &PredictionCache,
    noise: &NoiseModel,
) -> Result<f64> {
    let preds = cache.get(&y.design)?;
    let pred = preds.get(node).ok_or(Error::DimensionMismatch {
        expected: node + 1,
        got: preds.len(),
    })?;
    Ok(noise.density(y.value - pred))
}

pub fn log_likelihoods(value: f64, predictions: &[f64], noise: &NoiseModel) -> Vec<f64> {
    predictions
        .iter()
        .map(|p| noise.log_density(value - p))
        .collect()
}

/// Result of one Bayes update.
#[derive(Debug, Clone)]
pub struct BayesUpdate {
    pub posterior: ParamPosterior,
    /// `ln p(y | d)`, the log normalizer.
    pub log_evidence: f64,
}

/// Multiplies the prior by `exp(log_likelihood)` and renormalizes in log space.
pub fn bayes_update_log(prior: &ParamPosterior, log_likelihood: &[f64]) -> Result<BayesUpdate> {
    if log_likelihood.len() != prior.mass.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.mass.len(),
            got: log_likelihood.len(),
        });
    }
    let log_post: Vec<f64> = prior
        .mass
        .iter()
        .zip(log_likelihood)
        .map(|(&p, &l)| if p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let max = log_post
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::LikelihoodUnderflow);
    }
    let unnorm: Vec<f64> = log_post
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { (v - max).exp() })
        .collect();
    let total: f64 = unnorm.iter().sum();
    if !(total > 0.0) {
        return Err(Error::LikelihoodUnderflow);
    }
    Ok(BayesUpdate {
        posterior: ParamPosterior {
            grid: prior.grid.clone(),
            mass: unnorm.into_iter().map(|m| m / total).collect(),
        },
        log_evidence: max + total.ln(),
    })
}

pub fn bayes_update_with_predictions(
    prior: &ParamPosterior,
    value: f64,
    predictions: &[f64],
    noise: &NoiseModel,
) -> Result<BayesUpdate> {
    bayes_update_log(prior, &log_likelihoods(value, predictions, noise))
}

/// Sequential Bayes update with a measurement whose predictions are cached.
pub fn bayes_update(
    prior: &ParamPosterior,
    y: &Measurement,
    cache: &PredictionCache,
    noise: &NoiseModel,
) -> Result<BayesUpdate> {
    bayes_update_with_predictions(prior, y.value, cache.get(&y.design)?, noise)
}

/// `Σ p ln(p/q)` over two mass vectors, with `0·ln(0/q) = 0`.
pub fn kld_mass(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut total = 0.0;
    for (k, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Err(Error::AbsoluteContinuity { node: k });
            }
            total += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(total)
}

/// Discrete KL divergence `D(p ‖ q)` in nats.
pub fn kld_grid(p: &ParamPosterior, q: &ParamPosterior) -> Result<f64> {
    if p.grid != q.grid {
        return Err(Error::GridMismatch);
    }
    kld_mass(&p.mass, &q.mass)
}

/// Highest-mass node; ties go to the lowest linear index.
pub fn map_estimate(post: &ParamPosterior) -> (usize, (f64, f64)) {
    let mut best = 0;
    for (k, &m) in post.mass.iter().enumerate() {
        if m > post.mass[best] {
            best = k;
        }
    }
    (best, post.grid.node(best))
}

/// Indices of the `m` largest masses (ties by lowest index), descending.
pub fn top_m_nodes(post: &ParamPosterior, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > post.mass.len() {
        return Err(Error::InvalidArgument(format!(
            "m must be in 1..={}, got {m}",
            post.mass.len()
        )));
    }
    let mut idx: Vec<usize> = (0..post.mass.len()).collect();
    idx.sort_by(|&a, &b| post.mass[b].total_cmp(&post.mass[a]).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}

/// Mean location of the `m` highest-mass nodes.
pub fn top_m_mean(post: &ParamPosterior, m: usize) -> Result<(f64, f64)> {
    let nodes = top_m_nodes(post, m)?;
    let (sx, sy) = nodes
        .iter()
        .map(|&k| post.grid.node(k))
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    Ok((sx / m as f64, sy / m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> ParamGrid {
        ParamGrid::uniform(0.0, 1.0, 4).unwrap()
    }

    fn design() -> Design {
        Design::new(0.5, 0.5, 0.05)
    }

    #[test]
    fn density_values() {
        let noise = NoiseModel::new(0.05).unwrap();
        let peak = 1.0 / (0.05 * (2.0 * PI).sqrt());
        assert!((noise.density(0.0) - peak).abs() < 1e-12 * peak);
        assert!((noise.density(0.05) - peak * (-0.5f64).exp()).abs() < 1e-12 * peak);
        let ratio = noise.density(0.03) / noise.density(0.08);
        let expect = (-(0.03f64.powi(2) - 0.08f64.powi(2)) / (2.0 * 0.0025)).exp();
        assert!((ratio - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn likelihood_reads_cache_and_faults_when_missing() {
        let noise = NoiseModel::new(0.1).unwrap();
        let mut cache = PredictionCache::new();
        cache.insert(design(), vec![0.2; 16]);
        let y = Measurement::new(design(), 0.2, Provenance::TrueSystem).unwrap();
        let l = likelihood(&y, 3, &cache, &noise).unwrap();
        assert!((l - noise.density(0.0)).abs() < 1e-15);
        let other = Measurement::new(Design::new(0.1, 0.1, 0.05), 0.2, Provenance::TrueSystem).unwrap();
        assert!(matches!(
            likelihood(&other, 0, &cache, &noise),
            Err(Error::MissingPrediction { .. })
        ));
    }

    #[test]
    fn constant_likelihood_keeps_uniform_prior() {
        let prior = ParamPosterior::uniform(small_grid());
        let up = bayes_update_log(&prior, &[-3.2; 16]).unwrap();
        for m in up.posterior.mass() {
            assert!((m - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_prior_is_fixed() {
        let prior = ParamPosterior::point_mass(small_grid(), 6).unwrap();
        let ll: Vec<f64> = (0..16).map(|k| -(k as f64)).collect();
        let up = bayes_update_log(&prior, &ll).unwrap();
        assert_eq!(up.posterior.mass()[6], 1.0);
        assert_eq!(up.posterior.mass().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn underflow_is_a_fault() {
        let prior = ParamPosterior::point_mass(small_grid(), 0).unwrap();
        let mut ll = vec![0.0; 16];
        ll[0] = f64::NEG_INFINITY;
        assert!(matches!(
            bayes_update_log(&prior, &ll),
            Err(Error::LikelihoodUnderflow)
        ));
    }

    #[test]
    fn kld_basics() {
        let g = small_grid();
        let u = ParamPosterior::uniform(g.clone());
        assert_eq!(kld_grid(&u, &u).unwrap(), 0.0);
        let pm = ParamPosterior::point_mass(g.clone(), 5).unwrap();
        assert!((kld_grid(&pm, &u).unwrap() - 16f64.ln()).abs() < 1e-14);
        assert!(matches!(
            kld_grid(&u, &pm),
            Err(Error::AbsoluteContinuity { .. })
        ));
        let other = ParamPosterior::uniform(ParamGrid::uniform(0.0, 2.0, 4).unwrap());
        assert!(matches!(kld_grid(&u, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn map_and_top_m() {
        let g = small_grid();
        let pm = ParamPosterior::point_mass(g.clone(), 9).unwrap();
        assert_eq!(map_estimate(&pm).0, 9);
        assert_eq!(top_m_mean(&pm, 1).unwrap(), g.node(9));
        let mut w = vec![0.0; 16];
        w[1] = 1.0;
        w[7] = 1.0;
        let two = ParamPosterior::from_weights(g.clone(), w).unwrap();
        // tie broken by lowest index
        assert_eq!(map_estimate(&two).0, 1);
        let (mx, my) = top_m_mean(&two, 2).unwrap();
        let (a, b) = (g.node(1), g.node(7));
        assert!((mx - 0.5 * (a.0 + b.0)).abs() < 1e-15);
        assert!((my - 0.5 * (a.1 + b.1)).abs() < 1e-15);
        assert!(top_m_mean(&two, 0).is_err());
        assert!(top_m_mean(&two, 17).is_err());
    }

    #[test]
    fn history_rejects_time_reversal() {
        let mut h = DesignHistory::default();
        h.push(Measurement::new(Design::new(0.5, 0.5, 0.1), 0.0, Provenance::TrueSystem).unwrap())
            .unwrap();
        assert!(h
            .push(Measurement::new(Design::new(0.5, 0.5, 0.05), 0.0, Provenance::TrueSystem).unwrap())
            .is_err());
    }

    #[test]
    fn posterior_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        ParamPosterior::uniform(small_grid()).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,mass\n"));
        assert_eq!(text.lines().count(), 17);
    }
}
