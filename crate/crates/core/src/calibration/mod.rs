//! Quality-conditioned Gaussian calibration of detector logits.
//!
//! For each class the logit is modelled as `N(mu(q), sigma^2(q))` with a
//! linear mean and a log-linear variance in the normalized quality `q`. The
//! corrected logit of an instance is the log-likelihood ratio of the two class
//! Gaussians at that instance's (logit, quality) point, and a query set is
//! decided by the sign of the sum of its corrected logits.

mod fit;

pub use fit::{fit, loo_fit, ClassObjective, FitConfig, VarianceModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{InstanceRecord, Label, QuerySet};

pub const MODEL_SCHEMA_VERSION: &str = "quad-model/1";

/// Lower bound applied to every evaluated variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub(crate) fn ln_variance_floor() -> f64 {
    VARIANCE_FLOOR.ln()
}

/// Per-class coefficients: `mu = a*q + b`, `ln sigma^2 = alpha*q + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCoefficients {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl ClassCoefficients {
    pub const fn new(a: f64, b: f64, alpha: f64, beta: f64) -> Self {
        ClassCoefficients { a, b, alpha, beta }
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.a, self.b, self.alpha, self.beta]
            .iter()
            .all(|v| v.is_finite());
        // log-variance is linear in q, so checking both ends of [0,1] covers the interval.
        finite
            && [self.beta, self.alpha + self.beta]
                .iter()
                .all(|s| s.exp().is_finite())
    }

    fn log_variance(&self, q_norm: f64) -> f64 {
        (self.alpha * q_norm + self.beta).max(ln_variance_floor())
    }
}

/// Quadratic mean terms used when `model_order == 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTerms {
    pub real: f64,
    pub fake: f64,
}

impl QuadraticTerms {
    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Real => self.real,
            Label::Fake => self.fake,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassFitMeta {
    pub n_samples: usize,
    /// Negative log-likelihood (sum over samples, constant term dropped) at the optimum.
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub real: ClassFitMeta,
    pub fake: ClassFitMeta,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dev_sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub schema_version: String,
    pub model_order: u8,
    pub q_min: f64,
    pub q_max: f64,
    pub real: ClassCoefficients,
    pub fake: ClassCoefficients,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticTerms>,
    #[serde(default)]
    pub fit_meta: FitMeta,
}

impl CalibrationModel {
    /// First-order model with the given coefficients and quality range.
    pub fn new(real: ClassCoefficients, fake: ClassCoefficients, q_min: f64, q_max: f64) -> Self {
        CalibrationModel {
            schema_version: MODEL_SCHEMA_VERSION.to_string(),
            model_order: 1,
            q_min,
            q_max,
            real,
            fake,
            quadratic: None,
            fit_meta: FitMeta::default(),
        }
    }

    pub fn with_quadratic(mut self, terms: QuadraticTerms) -> Self {
        self.model_order = 2;
        self.quadratic = Some(terms);
        self
    }

    pub fn coefficients(&self, label: Label) -> &ClassCoefficients {
        match label {
            Label::Real => &self.real,
            Label::Fake => &self.fake,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_min.is_finite() && self.q_max.is_finite() && self.q_min < self.q_max) {
            return Err(Error::invalid(format!(
                "model quality range [{}, {}] is not a proper interval",
                self.q_min, self.q_max
            )));
        }
        if !self.real.is_valid() || !self.fake.is_valid() {
            return Err(Error::invalid("model coefficients are not finite"));
        }
        match (self.model_order, self.quadratic) {
            (1, None) => Ok(()),
            (2, Some(t)) if t.real.is_finite() && t.fake.is_finite() => Ok(()),
            (order, _) => Err(Error::invalid(format!(
                "model_order {order} does not match the stored quadratic terms"
            ))),
        }
    }

    /// Mean and standard deviation of the class logit at a normalized quality.
    pub fn stats(&self, label: Label, q_norm: f64) -> (f64, f64) {
        let (mu, sigma) = class_stats(q_norm, self.coefficients(label));
        let quad = self.quadratic.map_or(0.0, |t| t.for_label(label));
        (mu + quad * q_norm * q_norm, sigma)
    }

    fn log_variance(&self, label: Label, q_norm: f64) -> f64 {
        self.coefficients(label).log_variance(q_norm)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: CalibrationModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }
}

/// Min-max normalization against the model's development range, clamped to [0, 1].
pub fn normalize_quality(q: f64, model: &CalibrationModel) -> Result<f64> {
    if !q.is_finite() {
        return Err(Error::invalid(format!("quality {q} is not finite")));
    }
    Ok(((q - model.q_min) / (model.q_max - model.q_min)).clamp(0.0, 1.0))
}

/// `(mu, sigma)` for one class at a normalized quality.
pub fn class_stats(q_norm: f64, c: &ClassCoefficients) -> (f64, f64) {
    let mu = c.a * q_norm + c.b;
    let sigma = (c.log_variance(q_norm) / 2.0).exp();
    (mu, sigma)
}

/// Log-likelihood ratio `ln N(l; mu1, s1^2) - ln N(l; mu0, s0^2)` at a normalized quality.
pub fn corrected_logit(logit: f64, q_norm: f64, model: &CalibrationModel) -> f64 {
    let (mu0, _) = model.stats(Label::Real, q_norm);
    let (mu1, _) = model.stats(Label::Fake, q_norm);
    let s0 = model.log_variance(Label::Real, q_norm);
    let s1 = model.log_variance(Label::Fake, q_norm);
    let d0 = logit - mu0;
    let d1 = logit - mu1;
    // ln(sigma0 / sigma1) = (s0 - s1) / 2
    d0 * d0 / (2.0 * s0.exp()) - d1 * d1 / (2.0 * s1.exp()) + (s0 - s1) / 2.0
}

/// Fused decision for one source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub score: f64,
    pub decision: Label,
    /// Per-instance contributions in input order.
    pub per_instance: Vec<f64>,
}

impl FusedScore {
    pub(crate) fn from_parts(score: f64, per_instance: Vec<f64>) -> Self {
        FusedScore {
            score,
            decision: Label::from_score(score),
            per_instance,
        }
    }
}

/// Sum that does not depend on the order of `values`.
pub(crate) fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

pub fn fuse_corrected(set: &QuerySet, model: &CalibrationModel) -> Result<FusedScore> {
    fuse_corrected_instances(&set.instances, model).map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("source {}: {m}", set.source_id)),
        other => other,
    })
}

pub fn fuse_corrected_instances(
    instances: &[InstanceRecord],
    model: &CalibrationModel,
) -> Result<FusedScore> {
    if instances.is_empty() {
        return Err(Error::invalid("cannot fuse an empty instance list"));
    }
    let per_instance = instances
        .iter()
        .map(|r| {
            if !r.logit.is_finite() {
                return Err(Error::invalid(format!(
                    "logit of {} is not finite",
                    r.instance_id
                )));
            }
            Ok(corrected_logit(
                r.logit,
                normalize_quality(r.quality, model)?,
                model,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let score = order_free_sum(&per_instance);
    if !score.is_finite() {
        return Err(Error::Numerical(format!(
            "fused score {score} is not finite"
        )));
    }
    Ok(FusedScore::from_parts(score, per_instance))
}
