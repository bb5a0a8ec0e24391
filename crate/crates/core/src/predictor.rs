//! Epsilon predictors.
//!
//! [`GmmModel`] is the Bayes-optimal noise predictor for a diagonal Gaussian
//! mixture observed through the variance-preserving forward process:
//!
//! ```text
//! p_t(z | w) = sum_i w_i N(z; sqrt(abar) m_i, abar v_i + (1 - abar))
//! eps*(z)    = -sqrt(1 - abar) * grad_z log p_t(z | w)
//! ```
//!
//! A condition embedding is a weight vector over mixture components; the
//! null condition used by classifier-free guidance is the model's marginal
//! weight vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Categorical belief over the mixture components of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConditionEmbedding(Vec<f64>);

impl ConditionEmbedding {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidCondition("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidCondition(format!(
                "weights must be finite and nonnegative: {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidCondition(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(Self(weights))
    }

    /// All mass on component `index` of `n`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::InvalidCondition(format!(
                "component {index} out of range for {n} components"
            )));
        }
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the heaviest component (first one on ties).
    pub fn dominant_component(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ConditionEmbedding {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConditionEmbedding> for Vec<f64> {
    fn from(c: ConditionEmbedding) -> Self {
        c.0
    }
}

/// Noise predictor `eps_theta(z, abar_t, condition)`.
///
/// Implementations must be deterministic and re-entrant.
pub trait EpsilonPredictor: Send + Sync {
    fn predict(&self, z: &[f64], alpha_bar: f64, cond: &ConditionEmbedding) -> Result<Vec<f64>>;
}

impl<P: EpsilonPredictor + ?Sized> EpsilonPredictor for &P {
    fn predict(&self, z: &[f64], alpha_bar: f64, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        (**self).predict(z, alpha_bar, cond)
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlphaBar(alpha_bar))
    }
}

/// Classifier-free guidance: `omega * eps(cond) + (1 - omega) * eps(null)`.
///
/// Returns the combined prediction and the number of predictor evaluations
/// spent (1 when `omega == 1`, since the null branch drops out, else 2).
pub fn guided_epsilon<P: EpsilonPredictor + ?Sized>(
    predictor: &P,
    z: &[f64],
    alpha_bar: f64,
    cond: &ConditionEmbedding,
    null_cond: &ConditionEmbedding,
    omega: f64,
) -> Result<(Vec<f64>, usize)> {
    if !omega.is_finite() {
        return Err(Error::NonFinite("guidance scale"));
    }
    let conditional = predictor.predict(z, alpha_bar, cond)?;
    if omega == 1.0 {
        return Ok((conditional, 1));
    }
    let unconditional = predictor.predict(z, alpha_bar, null_cond)?;
    let combined = conditional
        .iter()
        .zip(&unconditional)
        .map(|(c, u)| omega * c + (1.0 - omega) * u)
        .collect();
    Ok((combined, 2))
}

/// Returns a fixed vector regardless of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEpsilon(Vec<f64>);

pub fn constant_epsilon(c: Vec<f64>) -> ConstantEpsilon {
    ConstantEpsilon(c)
}

impl EpsilonPredictor for ConstantEpsilon {
    fn predict(&self, z: &[f64], _alpha_bar: f64, _cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        if z.len() != self.0.len() {
            return Err(Error::DimensionMismatch {
                expected: self.0.len(),
                got: z.len(),
            });
        }
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub mean: Vec<f64>,
    /// Diagonal covariance.
    pub var: Vec<f64>,
}

/// JSON-facing description of a diagonal Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModelSpec {
    pub dim: usize,
    pub components: Vec<GmmComponent>,
    pub null_weights: ConditionEmbedding,
}

impl GmmModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidModel("dim must be positive".into()));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidModel("no components".into()));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != self.dim || c.var.len() != self.dim {
                return Err(Error::InvalidModel(format!(
                    "component {i}: mean/var length must equal dim={}",
                    self.dim
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "component {i}: non-finite mean"
                )));
            }
            if c.var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidModel(format!(
                    "component {i}: variances must be finite and positive"
                )));
            }
        }
        if self.null_weights.len() != self.components.len() {
            return Err(Error::InvalidModel(format!(
                "null_weights has {} entries for {} components",
                self.null_weights.len(),
                self.components.len()
            )));
        }
        Ok(())
    }

    /// Single-component model; its only condition is `[1.0]`.
    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let spec = Self {
            dim: mean.len(),
            components: vec![GmmComponent { mean, var }],
            null_weights: ConditionEmbedding::new(vec![1.0])?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Validated mixture model, usable as an [`EpsilonPredictor`].
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    spec: GmmModelSpec,
}

/// Per-component log joint terms and the shared pieces of the score.
struct Posterior {
    log_joint: Vec<f64>,
    log_norm: f64,
}

impl GmmModel {
    pub fn new(spec: GmmModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &GmmModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n_components(&self) -> usize {
        self.spec.components.len()
    }

    pub fn null_condition(&self) -> &ConditionEmbedding {
        &self.spec.null_weights
    }

    pub fn component(&self, i: usize) -> &GmmComponent {
        &self.spec.components[i]
    }

    fn check(&self, z: &[f64], alpha_bar: f64, cond: &ConditionEmbedding) -> Result<()> {
        check_alpha_bar(alpha_bar)?;
        if z.len() != self.spec.dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dim,
                got: z.len(),
            });
        }
        if cond.len() != self.n_components() {
            return Err(Error::DimensionMismatch {
                expected: self.n_components(),
                got: cond.len(),
            });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(())
    }

    /// `log w_i + log N_i(z)` for every component with nonzero weight;
    /// zero-weight components get `-inf` and are skipped downstream.
    fn posterior(&self, z: &[f64], alpha_bar: f64, cond: &ConditionEmbedding) -> Posterior {
        let sqrt_ab = alpha_bar.sqrt();
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        let log_joint: Vec<f64> = self
            .spec
            .components
            .iter()
            .zip(cond.weights())
            .map(|(c, &w)| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut acc = 0.0;
                for ((&x, &m), &v) in z.iter().zip(&c.mean).zip(&c.var) {
                    let s = alpha_bar * v + (1.0 - alpha_bar);
                    let d = x - sqrt_ab * m;
                    acc += d * d / s + (log_2pi + s.ln());
                }
                w.ln() - 0.5 * acc
            })
            .collect();
        let max = log_joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = log_joint.iter().map(|l| (l - max).exp()).sum();
        Posterior {
            log_norm: max + sum.ln(),
            log_joint,
        }
    }

    /// `log p_t(z | cond)` at noise level `alpha_bar`.
    pub fn log_density(&self, z: &[f64], alpha_bar: f64, cond: &ConditionEmbedding) -> Result<f64> {
        self.check(z, alpha_bar, cond)?;
        Ok(self.posterior(z, alpha_bar, cond).log_norm)
    }

    /// Optimal noise prediction `-sqrt(1 - abar) * grad log p_t(z | cond)`.
    pub fn epsilon(
        &self,
        z: &[f64],
        alpha_bar: f64,
        cond: &ConditionEmbedding,
    ) -> Result<Vec<f64>> {
        self.check(z, alpha_bar, cond)?;
        let post = self.posterior(z, alpha_bar, cond);
        let sqrt_ab = alpha_bar.sqrt();
        let noise_scale = (1.0 - alpha_bar).sqrt();
        let mut eps = vec![0.0; z.len()];
        for (c, &lj) in self.spec.components.iter().zip(&post.log_joint) {
            if lj == f64::NEG_INFINITY {
                continue;
            }
            let r = (lj - post.log_norm).exp();
            for (k, e) in eps.iter_mut().enumerate() {
                let s = alpha_bar * c.var[k] + (1.0 - alpha_bar);
                *e += r * (z[k] - sqrt_ab * c.mean[k]) / s;
            }
        }
        for e in &mut eps {
            *e *= noise_scale;
        }
        Ok(eps)
    }
}

impl EpsilonPredictor for GmmModel {
    fn predict(&self, z: &[f64], alpha_bar: f64, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        self.epsilon(z, alpha_bar, cond)
    }
}
