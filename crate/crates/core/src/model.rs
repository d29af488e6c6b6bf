//! Small differentiable predictors with closed-form cross-entropy gradients.
//!
//! Both architectures end in a dense last layer `f_L(z) = W_L z + b_L` acting
//! on a latent representation `z(x)`:
//!
//! * `Linear`: `z(x) = x` (depth-one degenerate case).
//! * `Mlp1`: `z(x) = relu(W_1 x + b_1)`.
//!
//! Gradients are derived by hand; `tests/gradients.rs` checks them against
//! central finite differences.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, HdroError, Result};
use crate::linalg;

pub const DEFAULT_HIDDEN_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp1,
}

/// How the parameter gradient treats a perturbed latent `z' != z(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePath {
    /// `z'` is a constant input to the last layer; hidden layers get no gradient.
    #[default]
    Detached,
    /// `z' = z(x) + delta` with `delta` held constant, so the hidden layer
    /// receives the gradient along the unperturbed feature path.
    ThroughFeature,
}

/// Architecture choice plus hidden width, as stored in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN_WIDTH
}

impl ModelSpec {
    pub fn linear() -> Self {
        Self {
            architecture: Architecture::Linear,
            hidden: DEFAULT_HIDDEN_WIDTH,
        }
    }

    pub fn mlp1(hidden: usize) -> Self {
        Self {
            architecture: Architecture::Mlp1,
            hidden,
        }
    }

    pub fn build(&self, input_dim: usize, num_classes: usize, seed: u64) -> ModelParams {
        ModelParams::init(self.architecture, input_dim, self.hidden, num_classes, seed)
    }
}

/// Dense layer `y = W x + b`, weights row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| linalg::dot(self.row(r), x) + self.bias[r])
            .collect()
    }

    /// `W^T v`
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr != 0.0 {
                linalg::axpy(vr, self.row(r), &mut out);
            }
        }
        out
    }

    /// Gradient of `v . (W x + b)` w.r.t. `(W, b)`: `W = v x^T`, `b = v`.
    fn outer(v: &[f64], x: &[f64]) -> Self {
        let mut weights = Vec::with_capacity(v.len() * x.len());
        for &vr in v {
            weights.extend(x.iter().map(|&xj| vr * xj));
        }
        Self {
            rows: v.len(),
            cols: x.len(),
            weights,
            bias: v.to_vec(),
        }
    }

    fn validate(&self, what: &'static str) -> Result<()> {
        check_len(what, self.rows * self.cols, self.weights.len())?;
        check_len(what, self.rows, self.bias.len())?;
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(HdroError::param("theta", format!("{what} has non-finite entries")));
        }
        Ok(())
    }
}

/// Model parameters `theta`; also used as the shape of parameter gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub hidden: Option<DenseLayer>,
    pub output: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub loss: f64,
    pub grad_z: Option<Vec<f64>>,
    pub grad_theta: Option<ModelParams>,
}

impl ModelParams {
    pub fn linear_zeros(input_dim: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Linear,
            hidden: None,
            output: DenseLayer::zeros(num_classes, input_dim),
        }
    }

    pub fn mlp1_zeros(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp1,
            hidden: Some(DenseLayer::zeros(hidden, input_dim)),
            output: DenseLayer::zeros(num_classes, hidden),
        }
    }

    /// Seeded `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization of weights and biases.
    pub fn init(architecture: Architecture, input_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut params = match architecture {
            Architecture::Linear => Self::linear_zeros(input_dim, num_classes),
            Architecture::Mlp1 => Self::mlp1_zeros(input_dim, hidden, num_classes),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |layer: &mut DenseLayer| {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        };
        if let Some(h) = params.hidden.as_mut() {
            fill(h);
        }
        fill(&mut params.output);
        params
    }

    pub fn validate(&self) -> Result<()> {
        match (self.architecture, &self.hidden) {
            (Architecture::Linear, None) => {}
            (Architecture::Mlp1, Some(h)) => {
                h.validate("hidden layer")?;
                check_len("last-layer input width", h.rows, self.output.cols)?;
            }
            (arch, _) => {
                return Err(HdroError::param(
                    "theta",
                    format!("{arch:?} architecture with inconsistent hidden layer"),
                ))
            }
        }
        self.output.validate("last layer")
    }

    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.cols,
            None => self.output.cols,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.output.cols
    }

    pub fn num_classes(&self) -> usize {
        self.output.rows
    }

    /// Hidden pre-activations (MLP only).
    fn preactivation(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.hidden.as_ref().map(|h| h.apply(x))
    }

    /// The penultimate representation `z(x)`.
    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("input features", self.input_dim(), x.len())?;
        Ok(match self.preactivation(x) {
            Some(pre) => pre.into_iter().map(|v| v.max(0.0)).collect(),
            None => x.to_vec(),
        })
    }

    pub fn logits_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("latent", self.latent_dim(), z.len())?;
        Ok(self.output.apply(z))
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(HdroError::param(
                "label",
                format!("{y} >= number of classes {}", self.num_classes()),
            ));
        }
        Ok(())
    }

    /// Cross-entropy of the last layer evaluated at latent `z`.
    pub fn loss_at_latent(&self, z: &[f64], y: usize) -> Result<f64> {
        self.check_label(y)?;
        let logits = self.logits_at(z)?;
        Ok(cross_entropy(&logits, y))
    }

    pub fn forward(&self, x: &[f64], y: usize) -> Result<ForwardRecord> {
        self.check_label(y)?;
        let z = self.latent(x)?;
        let logits = self.output.apply(&z);
        let loss = cross_entropy(&logits, y);
        Ok(ForwardRecord {
            z,
            logits,
            loss,
            grad_z: None,
            grad_theta: None,
        })
    }

    /// Forward pass with both gradients at the unperturbed latent.
    pub fn forward_with_grads(&self, x: &[f64], y: usize) -> Result<ForwardRecord> {
        let mut rec = self.forward(x, y)?;
        rec.grad_z = Some(self.grad_wrt_latent(&rec.z, y)?);
        rec.grad_theta = Some(self.grad_wrt_params(&rec.z, x, y, FeaturePath::Detached)?);
        Ok(rec)
    }

    /// `argmax` of the logits, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.latent(x)?;
        Ok(argmax(&self.output.apply(&z)))
    }

    /// `W_L^T (softmax(W_L z + b_L) - onehot(y))`.
    pub fn grad_wrt_latent(&self, z: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_label(y)?;
        let residual = self.residual(z, y)?;
        Ok(self.output.transpose_apply(&residual))
    }

    fn residual(&self, z: &[f64], y: usize) -> Result<Vec<f64>> {
        let mut p = linalg::softmax(&self.logits_at(z)?);
        p[y] -= 1.0;
        Ok(p)
    }

    /// Parameter gradient of the loss evaluated at the (possibly perturbed)
    /// latent `z_perturbed` of example `x`.
    ///
    /// When `z_perturbed == z(x)` this is ordinary backprop. Otherwise hidden
    /// parameters follow `path`.
    pub fn grad_wrt_params(&self, z_perturbed: &[f64], x: &[f64], y: usize, path: FeaturePath) -> Result<ModelParams> {
        self.check_label(y)?;
        check_len("input features", self.input_dim(), x.len())?;
        let residual = self.residual(z_perturbed, y)?;
        let output = DenseLayer::outer(&residual, z_perturbed);
        let hidden = match &self.hidden {
            None => None,
            Some(h) => {
                let pre = h.apply(x);
                let unperturbed = pre.iter().zip(z_perturbed).all(|(&p, &zp)| p.max(0.0) == zp);
                if unperturbed || path == FeaturePath::ThroughFeature {
                    let gz = self.output.transpose_apply(&residual);
                    let gpre: Vec<f64> = gz
                        .iter()
                        .zip(&pre)
                        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                        .collect();
                    Some(DenseLayer::outer(&gpre, x))
                } else {
                    Some(DenseLayer::zeros(h.rows, h.cols))
                }
            }
        };
        Ok(ModelParams {
            architecture: self.architecture,
            hidden,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            architecture: self.architecture,
            hidden: self.hidden.as_ref().map(|h| DenseLayer::zeros(h.rows, h.cols)),
            output: DenseLayer::zeros(self.output.rows, self.output.cols),
        }
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        let hidden = self
            .hidden
            .iter()
            .flat_map(|h| [h.weights.as_slice(), h.bias.as_slice()]);
        hidden.chain([self.output.weights.as_slice(), self.output.bias.as_slice()])
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        let hidden = self.hidden.iter_mut().flat_map(|h| [&mut h.weights, &mut h.bias]);
        hidden.chain([&mut self.output.weights, &mut self.output.bias])
    }

    pub fn num_params(&self) -> usize {
        self.slices().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    /// Same shape as `self`, values from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_len("flat parameter vector", self.num_params(), flat.len())?;
        let mut out = self.clone();
        let mut offset = 0;
        for s in out.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// `self += alpha * other` (shapes must agree).
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            linalg::axpy(alpha, src, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().flat_map(|s| s.iter()).all(|v| v.is_finite())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| HdroError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HdroError::io(path, e))?;
        let params: ModelParams = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }
}

/// `-log softmax(logits)[y]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    (linalg::log_sum_exp(logits) - logits[y]).max(0.0)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_linear_model_has_uniform_loss() {
        let m = ModelParams::linear_zeros(4, 2);
        for (x, y) in [([1.0, -2.0, 3.0, 0.5], 0), ([9.0, 9.0, -9.0, 0.0], 1)] {
            let rec = m.forward(&x, y).unwrap();
            assert!((rec.loss - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_hidden_layer_gives_zero_latent() {
        let mut m = ModelParams::init(Architecture::Mlp1, 3, 5, 2, 1);
        let h = m.hidden.as_mut().unwrap();
        h.weights.iter_mut().for_each(|v| *v = 0.0);
        h.bias.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(m.latent(&[1.0, 2.0, -3.0]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn uniform_logits_latent_gradient() {
        let mut m = ModelParams::linear_zeros(2, 2);
        m.output.weights = vec![1.0, 2.0, 3.0, 4.0];
        // uniform logits at z = 0; W^T (0.5, -0.5) = (-1, -1) for y = 1
        let g1 = m.grad_wrt_latent(&[0.0, 0.0], 1).unwrap();
        assert_eq!(g1, vec![-1.0, -1.0]);
        let g0 = m.grad_wrt_latent(&[0.0, 0.0], 0).unwrap();
        assert_eq!(g0, vec![1.0, 1.0]);
        assert_eq!(
            ModelParams::linear_zeros(3, 2)
                .grad_wrt_latent(&[1.0, 2.0, 3.0], 1)
                .unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn loss_is_finite_for_huge_logits() {
        let mut m = ModelParams::linear_zeros(1, 3);
        m.output.weights = vec![1000.0, -1000.0, 0.0];
        let l = m.forward(&[1.0], 1).unwrap().loss;
        assert!(l.is_finite() && (l - 2000.0).abs() < 1e-9);
        assert_eq!(m.forward(&[1.0], 0).unwrap().loss, 0.0);
    }

    #[test]
    fn shape_errors() {
        let m = ModelParams::linear_zeros(3, 2);
        assert!(matches!(m.forward(&[1.0], 0), Err(HdroError::Shape { .. })));
        assert!(matches!(
            m.grad_wrt_latent(&[1.0, 2.0], 0),
            Err(HdroError::Shape { .. })
        ));
        assert!(m.forward(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn unperturbed_parameter_gradient_matches_full_backprop_for_mlp() {
        let m = ModelParams::init(Architecture::Mlp1, 3, 6, 3, 7);
        let x = [0.3, -1.2, 0.8];
        let z = m.latent(&x).unwrap();
        let detached = m.grad_wrt_params(&z, &x, 2, FeaturePath::Detached).unwrap();
        let through = m.grad_wrt_params(&z, &x, 2, FeaturePath::ThroughFeature).unwrap();
        assert_eq!(detached, through);
        assert!(detached.hidden.as_ref().unwrap().weights.iter().any(|&v| v != 0.0));

        let mut zp = z.clone();
        zp[0] += 0.1;
        let g = m.grad_wrt_params(&zp, &x, 2, FeaturePath::Detached).unwrap();
        assert!(g.hidden.unwrap().weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_logits_have_vanishing_gradient() {
        let mut m = ModelParams::linear_zeros(2, 2);
        m.output.weights = vec![-50.0, 0.0, 50.0, 0.0];
        let g = m
            .grad_wrt_params(&[1.0, 0.3], &[1.0, 0.3], 1, FeaturePath::Detached)
            .unwrap();
        assert!(g.norm() < 1e-40);
    }

    #[test]
    fn flat_round_trip_and_checkpoint() {
        let m = ModelParams::init(Architecture::Mlp1, 4, 3, 2, 2);
        let flat = m.to_flat();
        assert_eq!(flat.len(), m.num_params());
        assert_eq!(m.zeros_like().with_flat(&flat).unwrap(), m);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("theta.json");
        m.save_json(&p).unwrap();
        assert_eq!(ModelParams::load_json(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"architecture\": \"mlp1\""));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = ModelParams::init(Architecture::Linear, 16, 0, 2, 3);
        assert!(m.to_flat().iter().all(|v| v.abs() < 0.25));
        assert_eq!(m, ModelParams::init(Architecture::Linear, 16, 0, 2, 3));
    }
}
