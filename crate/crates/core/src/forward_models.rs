//! Source terms for the true and modeled systems, and the small correction
//! network with hand-written forward and parameter-gradient passes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_pde::{GridSpec, SourceField};

/// Location, width and strength of a contaminant source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_h: f64,
    pub theta_s: f64,
}

impl SourceParams {
    pub fn new(theta_x: f64, theta_y: f64, theta_h: f64, theta_s: f64) -> Result<Self> {
        let p = Self {
            theta_x,
            theta_y,
            theta_h,
            theta_s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_h > 0.0) || !self.theta_h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "source width must be positive, got {}",
                self.theta_h
            )));
        }
        if ![self.theta_x, self.theta_y, self.theta_s]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite source parameter".into()));
        }
        Ok(())
    }

    pub fn at_location(&self, theta_x: f64, theta_y: f64) -> Self {
        Self {
            theta_x,
            theta_y,
            ..*self
        }
    }

    #[inline]
    fn r2(&self, z: (f64, f64)) -> f64 {
        let dx = self.theta_x - z.0;
        let dy = self.theta_y - z.1;
        dx * dx + dy * dy
    }
}

/// Gaussian bump `θs/(2πθh²)·exp(−r²/(2θh²))`.
#[inline]
pub fn eval_true_source(z: (f64, f64), p: &SourceParams) -> f64 {
    p.theta_s * unit_true_source(z, p)
}

/// The Gaussian bump with unit strength, i.e. `∂S/∂θs`.
#[inline]
pub fn unit_true_source(z: (f64, f64), p: &SourceParams) -> f64 {
    let h2 = p.theta_h * p.theta_h;
    (-p.r2(z) / (2.0 * h2)).exp() / (2.0 * PI * h2)
}

/// Misspecified rational source `3θs / (π(r²/(2θh²) + 2θh²))`.
#[inline]
pub fn eval_modeled_source(z: (f64, f64), p: &SourceParams) -> f64 {
    let h2 = p.theta_h * p.theta_h;
    3.0 * p.theta_s / (PI * (p.r2(z) / (2.0 * h2) + 2.0 * h2))
}

pub const NET_INPUTS: usize = 4;
pub const NET_HIDDEN: usize = 6;
/// 4·6 + 6 + 6·1 + 1.
pub const NET_PARAMS: usize = NET_INPUTS * NET_HIDDEN + NET_HIDDEN + NET_HIDDEN + 1;

const B1: usize = NET_INPUTS * NET_HIDDEN;
const W2: usize = B1 + NET_HIDDEN;
const B2: usize = W2 + NET_HIDDEN;

/// Fully connected 4-6-1 network with a tanh hidden layer and linear output.
///
/// Parameter layout (37 values): input weights row-major by hidden unit
/// (`w1[h][i]` at `4h + i`), hidden biases, output weights, output bias.
/// The raw output is multiplied by `gain` when used as a source correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyNet {
    params: Vec<f64>,
    gain: f64,
}

impl DiscrepancyNet {
    pub fn new(params: Vec<f64>, gain: f64) -> Result<Self> {
        if params.len() != NET_PARAMS {
            return Err(Error::DimensionMismatch {
                expected: NET_PARAMS,
                got: params.len(),
            });
        }
        if !gain.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network parameter".into()));
        }
        Ok(Self { params, gain })
    }

    pub fn zeros(gain: f64) -> Self {
        Self {
            params: vec![0.0; NET_PARAMS],
            gain,
        }
    }

    /// Parameters drawn uniformly from `[-range, range]`.
    pub fn random<R: Rng + ?Sized>(gain: f64, range: f64, rng: &mut R) -> Self {
        let params = (0..NET_PARAMS)
            .map(|_| rng.random_range(-range..=range))
            .collect();
        Self { params, gain }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(params, self.gain)
    }

    #[inline]
    fn hidden(&self, input: [f64; 4]) -> [f64; NET_HIDDEN] {
        let p = &self.params;
        let mut a = [0.0; NET_HIDDEN];
        for (h, ah) in a.iter_mut().enumerate() {
            let w = &p[NET_INPUTS * h..NET_INPUTS * h + NET_INPUTS];
            *ah = (w[0] * input[0] + w[1] * input[1] + w[2] * input[2] + w[3] * input[3]
                + p[B1 + h])
                .tanh();
        }
        a
    }

    /// Raw (unscaled) network output for `(z_x, z_y, θ_x, θ_y)`.
    pub fn forward(&self, input: [f64; 4]) -> f64 {
        let a = self.hidden(input);
        let p = &self.params;
        a.iter()
            .zip(&p[W2..B2])
            .map(|(ah, w)| ah * w)
            .sum::<f64>()
            + p[B2]
    }

    /// Gain-scaled correction added to the modeled source.
    pub fn correction(&self, input: [f64; 4]) -> f64 {
        self.gain * self.forward(input)
    }

    /// Exact `∂forward/∂params` (raw output, no gain).
    pub fn param_gradient(&self, input: [f64; 4]) -> [f64; NET_PARAMS] {
        let mut g = [0.0; NET_PARAMS];
        self.accumulate_param_gradient(input, 1.0, &mut g);
        g
    }

    /// `out += scale · ∂forward/∂params`.
    pub fn accumulate_param_gradient(&self, input: [f64; 4], scale: f64, out: &mut [f64]) {
        let a = self.hidden(input);
        let p = &self.params;
        for h in 0..NET_HIDDEN {
            let back = scale * p[W2 + h] * (1.0 - a[h] * a[h]);
            for i in 0..NET_INPUTS {
                out[NET_INPUTS * h + i] += back * input[i];
            }
            out[B1 + h] += back;
            out[W2 + h] += scale * a[h];
        }
        out[B2] += scale;
    }

    /// Gain-scaled correction sampled at every node, with the network's
    /// location inputs fixed to `(theta_x, theta_y)`.
    pub fn correction_field(&self, grid: &GridSpec, theta: (f64, f64)) -> Vec<f64> {
        let n = grid.n_points();
        let coords: Vec<f64> = (0..n).map(|i| grid.coord(i)).collect();
        let p = &self.params;
        // Hidden pre-activation split into x-, y- and constant parts.
        let mut base = [0.0; NET_HIDDEN];
        for (h, b) in base.iter_mut().enumerate() {
            *b = p[4 * h + 2] * theta.0 + p[4 * h + 3] * theta.1 + p[B1 + h];
        }
        let mut out = vec![0.0; grid.node_count()];
        let mut row_part = [0.0; NET_HIDDEN];
        for iy in 0..n {
            for h in 0..NET_HIDDEN {
                row_part[h] = base[h] + p[4 * h + 1] * coords[iy];
            }
            for ix in 0..n {
                let mut acc = p[B2];
                for h in 0..NET_HIDDEN {
                    acc += p[W2 + h] * (p[4 * h] * coords[ix] + row_part[h]).tanh();
                }
                out[iy * n + ix] = self.gain * acc;
            }
        }
        out
    }

    /// `Σ_z w(z)·correction(z, θ)` and, if requested, its gradient with
    /// respect to the 37 parameters.
    pub fn weighted_correction(
        &self,
        grid: &GridSpec,
        theta: (f64, f64),
        weights: &[f64],
        gradient: Option<&mut [f64]>,
    ) -> f64 {
        let n = grid.n_points();
        let p = &self.params;
        let mut base = [0.0; NET_HIDDEN];
        for (h, b) in base.iter_mut().enumerate() {
            *b = p[4 * h + 2] * theta.0 + p[4 * h + 3] * theta.1 + p[B1 + h];
        }
        let mut value = 0.0;
        match gradient {
            None => {
                let mut row_part = [0.0; NET_HIDDEN];
                for iy in 0..n {
                    let y = grid.coord(iy);
                    for h in 0..NET_HIDDEN {
                        row_part[h] = base[h] + p[4 * h + 1] * y;
                    }
                    for ix in 0..n {
                        let w = weights[iy * n + ix];
                        if w == 0.0 {
                            continue;
                        }
                        let x = grid.coord(ix);
                        let mut acc = p[B2];
                        for h in 0..NET_HIDDEN {
                            acc += p[W2 + h] * (p[4 * h] * x + row_part[h]).tanh();
                        }
                        value += w * acc;
                    }
                }
            }
            Some(grad) => {
                let mut g = [0.0; NET_PARAMS];
                for iy in 0..n {
                    let y = grid.coord(iy);
                    for ix in 0..n {
                        let w = weights[iy * n + ix];
                        if w == 0.0 {
                            continue;
                        }
                        let input = [grid.coord(ix), y, theta.0, theta.1];
                        value += w * self.forward(input);
                        self.accumulate_param_gradient(input, w, &mut g);
                    }
                }
                for (o, gi) in grad.iter_mut().zip(g) {
                    *o += self.gain * gi;
                }
            }
        }
        self.gain * value
    }

    /// Writes a one-line header (`# layers=4,6,1 gain=<g>`) followed by one
    /// CSV row of the 37 parameters.
    pub fn to_csv_string(&self) -> String {
        let mut s = format!(
            "# layers={},{},1 gain={}\n",
            NET_INPUTS, NET_HIDDEN, self.gain
        );
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{p:?}");
        }
        s.push('\n');
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty network file".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::InvalidArgument("missing network header".into()))?;
        let mut gain = None;
        for field in header.split_whitespace() {
            if let Some(v) = field.strip_prefix("layers=") {
                if v != format!("{NET_INPUTS},{NET_HIDDEN},1") {
                    return Err(Error::InvalidArgument(format!("unsupported layer sizes {v}")));
                }
            } else if let Some(v) = field.strip_prefix("gain=") {
                gain = Some(v.parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("bad gain {v}: {e}"))
                })?);
            }
        }
        let gain = gain.ok_or_else(|| Error::InvalidArgument("header lacks gain".into()))?;
        let params = lines
            .flat_map(|l| l.split(','))
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad parameter {t}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(params, gain)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_csv_str(&text)
    }
}

/// A complete source term: which functional form, its parameters, and the
/// optional correction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceTerm {
    TrueExponential(SourceParams),
    ModeledRational(SourceParams),
    /// Rational source plus `gain · NN(z_x, z_y, θ_x, θ_y)`.
    NetworkAugmented {
        params: SourceParams,
        net: DiscrepancyNet,
    },
    /// Exponential source whose strength `θs` is the trainable parameter.
    ParametricStrength(SourceParams),
}

impl SourceTerm {
    pub fn params(&self) -> &SourceParams {
        match self {
            SourceTerm::TrueExponential(p)
            | SourceTerm::ModeledRational(p)
            | SourceTerm::ParametricStrength(p) => p,
            SourceTerm::NetworkAugmented { params, .. } => params,
        }
    }

    pub fn eval(&self, z: (f64, f64)) -> f64 {
        match self {
            SourceTerm::TrueExponential(p) | SourceTerm::ParametricStrength(p) => {
                eval_true_source(z, p)
            }
            SourceTerm::ModeledRational(p) => eval_modeled_source(z, p),
            SourceTerm::NetworkAugmented { params, net } => {
                eval_modeled_source(z, params)
                    + net.correction([z.0, z.1, params.theta_x, params.theta_y])
            }
        }
    }

    pub fn sample(&self, grid: &GridSpec) -> Result<SourceField> {
        match self {
            SourceTerm::NetworkAugmented { params, net } => {
                let mut values = net.correction_field(grid, (params.theta_x, params.theta_y));
                for (k, v) in values.iter_mut().enumerate() {
                    *v += eval_modeled_source(grid.node_position(k), params);
                }
                SourceField::from_values(*grid, values)
            }
            _ => SourceField::sample(*grid, |x, y| self.eval((x, y))),
        }
    }

    /// The trainable discrepancy parameters of this source (empty for the
    /// fixed analytic forms).
    pub fn trainable(&self) -> Vec<f64> {
        match self {
            SourceTerm::ParametricStrength(p) => vec![p.theta_s],
            SourceTerm::NetworkAugmented { net, .. } => net.params().to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn with_trainable(&self, values: &[f64]) -> Result<Self> {
        match self {
            SourceTerm::ParametricStrength(p) => {
                if values.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: values.len(),
                    });
                }
                Ok(SourceTerm::ParametricStrength(SourceParams {
                    theta_s: values[0],
                    ..*p
                }))
            }
            SourceTerm::NetworkAugmented { params, net } => Ok(SourceTerm::NetworkAugmented {
                params: *params,
                net: net.with_params(values.to_vec())?,
            }),
            _ if values.is_empty() => Ok(self.clone()),
            _ => Err(Error::DimensionMismatch {
                expected: 0,
                got: values.len(),
            }),
        }
    }

    pub fn at_location(&self, theta_x: f64, theta_y: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            SourceTerm::TrueExponential(p)
            | SourceTerm::ModeledRational(p)
            | SourceTerm::ParametricStrength(p) => *p = p.at_location(theta_x, theta_y),
            SourceTerm::NetworkAugmented { params, .. } => {
                *params = params.at_location(theta_x, theta_y)
            }
        }
        out
    }

    /// `Σ_z w(z)·S(z)` together with its gradient with respect to the
    /// trainable parameters.
    pub fn weighted_sum_with_gradient(&self, grid: &GridSpec, weights: &[f64]) -> (f64, Vec<f64>) {
        match self {
            SourceTerm::ParametricStrength(p) | SourceTerm::TrueExponential(p) => {
                let unit: f64 = weights
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(k, w)| w * unit_true_source(grid.node_position(k), p))
                    .sum();
                let grad = if matches!(self, SourceTerm::ParametricStrength(_)) {
                    vec![unit]
                } else {
                    Vec::new()
                };
                (p.theta_s * unit, grad)
            }
            SourceTerm::ModeledRational(p) => (weighted_rational(grid, p, weights), Vec::new()),
            SourceTerm::NetworkAugmented { params, net } => {
                let mut grad = vec![0.0; NET_PARAMS];
                let corr = net.weighted_correction(
                    grid,
                    (params.theta_x, params.theta_y),
                    weights,
                    Some(&mut grad),
                );
                (weighted_rational(grid, params, weights) + corr, grad)
            }
        }
    }

    /// `Σ_z w(z)·S(z)`.
    pub fn weighted_sum(&self, grid: &GridSpec, weights: &[f64]) -> f64 {
        match self {
            SourceTerm::NetworkAugmented { params, net } => {
                weighted_rational(grid, params, weights)
                    + net.weighted_correction(grid, (params.theta_x, params.theta_y), weights, None)
            }
            _ => self.weighted_sum_with_gradient(grid, weights).0,
        }
    }
}

fn weighted_rational(grid: &GridSpec, p: &SourceParams, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(k, w)| w * eval_modeled_source(grid.node_position(k), p))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p0() -> SourceParams {
        SourceParams::new(0.3, 0.4, 0.05, 2.0).unwrap()
    }

    #[test]
    fn true_source_peak_and_tails() {
        let p = p0();
        let peak = eval_true_source((0.3, 0.4), &p);
        assert!((peak - 127.32395447351627).abs() < 1e-9);
        let at_width = eval_true_source((0.35, 0.4), &p);
        assert!((at_width - peak * (-0.5f64).exp()).abs() < 1e-12 * peak);
        let far = eval_true_source((0.3, 0.9), &p);
        assert!((far - peak * (-50.0f64).exp()).abs() < 1e-12 * far);
    }

    #[test]
    fn modeled_source_peak_and_decay() {
        let p = p0();
        let peak = eval_modeled_source((0.3, 0.4), &p);
        assert!((peak - 6.0 / (PI * 2.0 * 0.0025)).abs() < 1e-9);
        assert!((peak - 381.9718634205488).abs() < 1e-9);
        let r = 10.0 * p.theta_h;
        let ratio = eval_modeled_source((0.3 + r, 0.4), &p) / eval_modeled_source((0.3 + 2.0 * r, 0.4), &p);
        assert!((ratio - 4.0).abs() < 0.05 * 4.0);
        let a = eval_modeled_source((0.3 + 0.06, 0.4 + 0.08), &p);
        let b = eval_modeled_source((0.3 - 0.1, 0.4), &p);
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn invalid_width_rejected() {
        assert!(SourceParams::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(SourceParams::new(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn net_has_37_params() {
        assert_eq!(NET_PARAMS, 37);
    }

    #[test]
    fn zero_net_outputs_zero_and_output_bias_passes_through() {
        let net = DiscrepancyNet::zeros(100.0);
        assert_eq!(net.forward([0.3, -1.0, 0.2, 0.7]), 0.0);
        let mut params = vec![0.0; NET_PARAMS];
        params[B2] = 0.37;
        params[B1 + 2] = 0.5; // hidden bias alone does not reach the output
        let net = DiscrepancyNet::new(params, 1.0).unwrap();
        assert_eq!(net.forward([1.0, 2.0, 3.0, 4.0]), 0.37);
        assert_eq!(net.forward([-1.0, 0.0, 0.5, 0.0]), 0.37);
    }

    #[test]
    fn output_bias_gradient_is_one_and_zero_input_kills_input_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DiscrepancyNet::random(100.0, 0.5, &mut rng);
        let g = net.param_gradient([0.1, 0.2, 0.3, 0.4]);
        assert_eq!(g[B2], 1.0);
        let mut params = net.params().to_vec();
        params[B1..W2].iter_mut().for_each(|b| *b = 0.0);
        params[B2] = 0.0;
        let net = DiscrepancyNet::new(params, 1.0).unwrap();
        let g = net.param_gradient([0.0; 4]);
        assert!(g[..B1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn network_csv_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DiscrepancyNet::random(100.0, 0.1, &mut rng);
        let text = net.to_csv_string();
        assert!(text.starts_with("# layers=4,6,1 gain=100\n"));
        let back = DiscrepancyNet::from_csv_str(&text).unwrap();
        assert_eq!(back, net);
        assert!(DiscrepancyNet::from_csv_str("# layers=4,5,1 gain=1\n0").is_err());
    }

    #[test]
    fn correction_field_matches_pointwise_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DiscrepancyNet::random(7.0, 0.8, &mut rng);
        let grid = GridSpec::new(-1.0, 2.0, 9).unwrap();
        let field = net.correction_field(&grid, (0.2, 0.6));
        for (k, v) in field.iter().enumerate() {
            let (x, y) = grid.node_position(k);
            let direct = net.correction([x, y, 0.2, 0.6]);
            assert!((v - direct).abs() < 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn trainable_roundtrip() {
        let s = SourceTerm::ParametricStrength(p0());
        assert_eq!(s.trainable(), vec![2.0]);
        let t = s.with_trainable(&[3.0]).unwrap();
        assert_eq!(t.params().theta_s, 3.0);
        assert!(SourceTerm::TrueExponential(p0()).with_trainable(&[1.0]).is_err());
    }
}
