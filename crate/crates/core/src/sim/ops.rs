//! Per-edge processing pipelines: optional crop, resize and lossy compression,
//! always applied in that order.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Crop,
    Resize,
    Compress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    W,
    H,
}

/// Opaque resampling-library tag, so an external materializer can pick the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResizeBackend {
    LibA,
    LibB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Interpolation {
    Bilinear,
    Bicubic,
    Lanczos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Codec {
    Jpeg,
    Webp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Encoder {
    EncA,
    EncB,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum DegradationOp {
    Crop {
        axis: Axis,
        /// Fraction of the cropped axis (and so of the area) that is kept.
        keep_fraction: f64,
        offset_fraction: f64,
    },
    Resize {
        short_side: u32,
        backend: ResizeBackend,
        interpolation: Interpolation,
    },
    Compress {
        format: Codec,
        qf: u8,
        /// Set for JPEG only.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        encoder: Option<Encoder>,
    },
}

impl DegradationOp {
    pub fn kind(&self) -> OpKind {
        match self {
            DegradationOp::Crop { .. } => OpKind::Crop,
            DegradationOp::Resize { .. } => OpKind::Resize,
            DegradationOp::Compress { .. } => OpKind::Compress,
        }
    }

    /// Unweighted strength of the operation, zero for a no-op.
    pub fn intensity(&self) -> f64 {
        match *self {
            DegradationOp::Crop { keep_fraction, .. } => 1.0 - keep_fraction,
            DegradationOp::Resize { short_side, .. } => {
                (f64::from(short_side) / 1024.0).log2().abs()
            }
            DegradationOp::Compress { qf, .. } => f64::from(100 - qf) / 100.0,
        }
    }
}

/// Discrete distribution over quality factors 1..=100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QfHistogram {
    /// `weights[i]` is the relative mass of quality factor `i + 1`.
    pub weights: Vec<f64>,
}

impl QfHistogram {
    /// Triangular density on `[low, high]` with the given mode, integrated over
    /// each unit bin centred on an integer quality factor.
    pub fn triangular(low: f64, mode: f64, high: f64) -> Self {
        let cdf = |x: f64| {
            let x = x.clamp(low, high);
            if x <= mode {
                (x - low).powi(2) / ((high - low) * (mode - low))
            } else {
                1.0 - (high - x).powi(2) / ((high - low) * (high - mode))
            }
        };
        let weights = (1..=100)
            .map(|qf| {
                let q = f64::from(qf);
                cdf(q + 0.5) - cdf(q - 0.5)
            })
            .collect();
        QfHistogram { weights }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != 100 || self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(
                "qf histogram needs 100 finite non-negative weights",
            ));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("qf histogram has no mass"));
        }
        Ok(())
    }
}

impl Default for QfHistogram {
    fn default() -> Self {
        QfHistogram::triangular(50.0, 88.0, 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub p_crop: f64,
    pub p_resize: f64,
    pub p_compress: f64,
    pub keep_fraction_range: (f64, f64),
    pub short_side_range: (u32, u32),
    /// Share of compressions that use WebP; the rest are JPEG.
    pub webp_fraction: f64,
    pub qf: QfHistogram,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            p_crop: 0.5,
            p_resize: 0.6,
            p_compress: 0.95,
            keep_fraction_range: (0.6, 0.999),
            short_side_range: (256, 2048),
            webp_fraction: 0.15,
            qf: QfHistogram::default(),
        }
    }
}

/// Validated pipeline configuration with its quality-factor sampler prepared.
#[derive(Debug, Clone)]
pub struct PipelineSampler {
    cfg: PipelineConfig,
    qf: WeightedIndex<f64>,
}

impl PipelineSampler {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        for (name, p) in [
            ("p_crop", cfg.p_crop),
            ("p_resize", cfg.p_resize),
            ("p_compress", cfg.p_compress),
            ("webp_fraction", cfg.webp_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = cfg.keep_fraction_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(
                "keep_fraction_range must satisfy 0 < lo <= hi <= 1",
            ));
        }
        let (lo, hi) = cfg.short_side_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("short_side_range must satisfy 0 < lo <= hi"));
        }
        cfg.qf.validate()?;
        let qf = WeightedIndex::new(&cfg.qf.weights)
            .map_err(|e| Error::invalid(format!("qf histogram: {e}")))?;
        Ok(PipelineSampler { cfg, qf })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Draws one edge pipeline. Every probability gate consumes one draw, so the
    /// stream layout does not depend on which operations fire.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DegradationOp> {
        let c = &self.cfg;
        let mut ops = Vec::with_capacity(3);

        if rng.random_bool(c.p_crop) {
            let (lo, hi) = c.keep_fraction_range;
            ops.push(DegradationOp::Crop {
                axis: if rng.random_bool(0.5) {
                    Axis::W
                } else {
                    Axis::H
                },
                keep_fraction: if lo < hi {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                },
                offset_fraction: rng.random_range(0.0..=1.0),
            });
        }
        if rng.random_bool(c.p_resize) {
            let (lo, hi) = c.short_side_range;
            ops.push(DegradationOp::Resize {
                short_side: rng.random_range(lo..=hi),
                backend: if rng.random_bool(0.5) {
                    ResizeBackend::LibA
                } else {
                    ResizeBackend::LibB
                },
                interpolation: match rng.random_range(0..3) {
                    0 => Interpolation::Bilinear,
                    1 => Interpolation::Bicubic,
                    _ => Interpolation::Lanczos,
                },
            });
        }
        if rng.random_bool(c.p_compress) {
            let format = if rng.random_bool(c.webp_fraction) {
                Codec::Webp
            } else {
                Codec::Jpeg
            };
            let qf = (self.qf.sample(rng) + 1) as u8;
            let encoder = match format {
                Codec::Jpeg => Some(if rng.random_bool(0.5) {
                    Encoder::EncA
                } else {
                    Encoder::EncB
                }),
                Codec::Webp => None,
            };
            ops.push(DegradationOp::Compress {
                format,
                qf,
                encoder,
            });
        }
        ops
    }
}

/// Draws one edge pipeline under `cfg`.
pub fn sample_pipeline<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &PipelineConfig,
) -> Result<Vec<DegradationOp>> {
    Ok(PipelineSampler::new(cfg.clone())?.sample(rng))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    #[test]
    fn forced_pipeline_has_fixed_order() {
        let cfg = PipelineConfig {
            p_crop: 1.0,
            p_resize: 1.0,
            p_compress: 1.0,
            ..PipelineConfig::default()
        };
        let sampler = PipelineSampler::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let kinds: Vec<OpKind> = sampler
                .sample(&mut rng)
                .iter()
                .map(DegradationOp::kind)
                .collect();
            assert_eq!(kinds, [OpKind::Crop, OpKind::Resize, OpKind::Compress]);
        }
    }

    #[test]
    fn triangular_histogram_shape() {
        let p = QfHistogram::default().probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[..49].iter().all(|&x| x == 0.0));
        let mode = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
            + 1;
        assert_eq!(mode, 88);
        let high: f64 = p[69..95].iter().sum();
        assert!(high > 0.7, "mass on [70,95] = {high}");
    }

    #[test]
    fn qf_samples_follow_histogram() {
        let sampler = PipelineSampler::new(PipelineConfig {
            p_compress: 1.0,
            ..PipelineConfig::default()
        })
        .unwrap();
        let probs = QfHistogram::default().probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = [0u64; 100];
        for _ in 0..n {
            for op in sampler.sample(&mut rng) {
                if let DegradationOp::Compress { qf, .. } = op {
                    counts[usize::from(qf) - 1] += 1;
                }
            }
        }
        let mut chi2 = 0.0;
        let mut bins = 0;
        for (c, p) in counts.iter().zip(&probs) {
            if *p > 0.0 {
                let e = p * n as f64;
                chi2 += (*c as f64 - e).powi(2) / e;
                bins += 1;
            } else {
                assert_eq!(*c, 0);
            }
        }
        let p_value = 1.0 - ChiSquared::new(f64::from(bins - 1)).unwrap().cdf(chi2);
        assert!(
            p_value > 0.01,
            "chi2 {chi2} over {bins} bins, p = {p_value}"
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PipelineSampler::new(PipelineConfig {
            p_crop: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(PipelineSampler::new(PipelineConfig {
            keep_fraction_range: (0.9, 0.5),
            ..Default::default()
        })
        .is_err());
        assert!(PipelineSampler::new(PipelineConfig {
            qf: QfHistogram {
                weights: vec![0.0; 100]
            },
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn op_json_is_tagged() {
        let op = DegradationOp::Resize {
            short_side: 512,
            backend: ResizeBackend::LibB,
            interpolation: Interpolation::Lanczos,
        };
        let json = serde_json::to_string(&op).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"RESIZE","short_side":512,"backend":"LIB_B","interpolation":"LANCZOS"}"#
        );
        assert_eq!(op.intensity(), 1.0);
    }
}
