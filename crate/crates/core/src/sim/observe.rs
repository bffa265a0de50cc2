//! Synthetic detector/IQA observations for the nodes of a degradation tree.
//!
//! Quality drops with the severity accumulated along the root path, and each
//! logit is drawn from the class Gaussian at that quality using known
//! coefficients, so a fitted calibration model can be checked against truth.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{Codec, DegradationOp};
use super::tree::{DegradationTree, SeverityWeights};
use crate::calibration::{class_stats, ClassCoefficients};
use crate::error::{Error, Result};
use crate::types::{ImageFormat, InstanceMeta, InstanceRecord, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationModelConfig {
    /// Generating coefficients, on quality normalized by `q_clean`.
    pub true_real: ClassCoefficients,
    pub true_fake: ClassCoefficients,
    /// Quality of the undegraded image; observed quality lies in `[0, q_clean]`.
    pub q_clean: f64,
    pub severity_weights: SeverityWeights,
    pub quality_noise_sd: f64,
    /// Standard deviation of a logit shift shared by all instances of a source.
    pub source_offset_sd: f64,
    pub clean_width: u32,
    pub clean_height: u32,
    /// Upload time of the clean image, seconds since the epoch.
    pub start_timestamp: i64,
    /// Each repost happens this many seconds (uniform range) after its parent.
    pub repost_delay: (i64, i64),
}

impl Default for ObservationModelConfig {
    fn default() -> Self {
        ObservationModelConfig {
            true_real: ClassCoefficients::new(1.0, -1.5, -1.5, 2.5),
            true_fake: ClassCoefficients::new(3.0, -0.8, -1.5, 2.5),
            q_clean: 1.0,
            severity_weights: SeverityWeights::default(),
            quality_noise_sd: 0.05,
            source_offset_sd: 0.3,
            clean_width: 4928,
            clean_height: 3264,
            start_timestamp: 1_600_000_000,
            repost_delay: (600, 7 * 24 * 3600),
        }
    }
}

impl ObservationModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.severity_weights.validate()?;
        if !(self.q_clean.is_finite() && self.q_clean > 0.0) {
            return Err(Error::invalid("q_clean must be finite and positive"));
        }
        if !(self.quality_noise_sd.is_finite() && self.quality_noise_sd >= 0.0) {
            return Err(Error::invalid(
                "quality_noise_sd must be finite and non-negative",
            ));
        }
        if !self.true_real.is_valid() || !self.true_fake.is_valid() {
            return Err(Error::invalid("true coefficients must be finite"));
        }
        if !(self.source_offset_sd.is_finite() && self.source_offset_sd >= 0.0) {
            return Err(Error::invalid(
                "source_offset_sd must be finite and non-negative",
            ));
        }
        if self.clean_width == 0 || self.clean_height == 0 {
            return Err(Error::invalid("clean image size must be positive"));
        }
        if self.repost_delay.0 < 0 || self.repost_delay.0 > self.repost_delay.1 {
            return Err(Error::invalid("repost_delay must be a non-negative range"));
        }
        Ok(())
    }

    pub fn coefficients(&self, label: Label) -> &ClassCoefficients {
        match label {
            Label::Real => &self.true_real,
            Label::Fake => &self.true_fake,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NodeState {
    severity: f64,
    width: u32,
    height: u32,
    last_codec: Option<(Codec, u8)>,
    timestamp: i64,
}

impl NodeState {
    fn apply(mut self, op: &DegradationOp) -> Self {
        match *op {
            DegradationOp::Crop {
                axis,
                keep_fraction,
                ..
            } => {
                let shrink = |d: u32| ((f64::from(d) * keep_fraction).round() as u32).max(1);
                match axis {
                    super::ops::Axis::W => self.width = shrink(self.width),
                    super::ops::Axis::H => self.height = shrink(self.height),
                }
            }
            DegradationOp::Resize { short_side, .. } => {
                let (w, h) = (f64::from(self.width), f64::from(self.height));
                let scale = f64::from(short_side) / w.min(h);
                self.width = ((w * scale).round() as u32).max(1);
                self.height = ((h * scale).round() as u32).max(1);
            }
            DegradationOp::Compress { format, qf, .. } => self.last_codec = Some((format, qf)),
        }
        self
    }
}

/// One labeled record per non-root node, in tree order.
pub fn simulate_observations<R: Rng + ?Sized>(
    tree: &DegradationTree,
    label: Label,
    cfg: &ObservationModelConfig,
    rng: &mut R,
) -> Result<Vec<InstanceRecord>> {
    cfg.validate()?;
    let quality_noise =
        Normal::new(0.0, cfg.quality_noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let coeffs = cfg.coefficients(label);
    let offset = Normal::new(0.0, cfg.source_offset_sd)
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng);

    let mut states: Vec<NodeState> = Vec::with_capacity(tree.nodes.len());
    states.push(NodeState {
        severity: 0.0,
        width: cfg.clean_width,
        height: cfg.clean_height,
        last_codec: None,
        timestamp: cfg.start_timestamp,
    });
    let mut out = Vec::with_capacity(tree.nodes.len().saturating_sub(1));

    for i in 1..tree.nodes.len() {
        let node = &tree.nodes[i];
        let parent = tree.parent_index(i).ok_or_else(|| {
            Error::invalid(format!("node {} has no parent in the tree", node.node_id))
        })?;
        let mut state = states[parent];
        for op in &node.ops_from_parent {
            state = state.apply(op);
        }
        state.severity += cfg.severity_weights.edge_severity(&node.ops_from_parent);
        state.timestamp += rng.random_range(cfg.repost_delay.0..=cfg.repost_delay.1);
        states.push(state);

        let q = (cfg.q_clean - state.severity + quality_noise.sample(rng)).clamp(0.0, cfg.q_clean);
        let (mu, sigma) = class_stats(q / cfg.q_clean, coeffs);
        let logit = Normal::new(mu, sigma)
            .map_err(|e| Error::Numerical(format!("logit distribution: {e}")))?
            .sample(rng)
            + offset;

        let (format, jpeg_qf) = match state.last_codec {
            Some((Codec::Jpeg, qf)) => (ImageFormat::Jpeg, Some(qf)),
            Some((Codec::Webp, qf)) => (ImageFormat::Webp, Some(qf)),
            None => (ImageFormat::Png, None),
        };
        out.push(InstanceRecord {
            source_id: tree.source_id.clone(),
            instance_id: node.node_id.clone(),
            logit,
            quality: q,
            label: Some(label),
            meta: InstanceMeta {
                width: Some(state.width),
                height: Some(state.height),
                jpeg_qf,
                format: Some(format),
                timestamp: Some(state.timestamp),
                tree_level: Some(node.level),
            },
        });
    }
    Ok(out)
}

/// Uniform random subset of `n_available` records, kept in input order.
pub fn subsample_availability<R: Rng + ?Sized>(
    records: &[InstanceRecord],
    n_available: usize,
    rng: &mut R,
) -> Result<Vec<InstanceRecord>> {
    if n_available == 0 || n_available > records.len() {
        return Err(Error::invalid(format!(
            "n_available {n_available} outside [1, {}]",
            records.len()
        )));
    }
    if n_available == records.len() {
        return Ok(records.to_vec());
    }
    let mut picked = index::sample(rng, records.len(), n_available).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| records[i].clone()).collect())
}
