//! Seeded simulator: per-source degradation trees and synthetic observations.

mod observe;
mod ops;
mod tree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use observe::{simulate_observations, subsample_availability, ObservationModelConfig};
pub use ops::{
    sample_pipeline, Axis, Codec, DegradationOp, Encoder, Interpolation, OpKind, PipelineConfig,
    PipelineSampler, QfHistogram, ResizeBackend,
};
pub use tree::{generate_tree, DegradationTree, SeverityWeights, TreeConfig, TreeNode, ROOT_ID};

use crate::error::{Error, Result};
use crate::types::{Dataset, Label, QuerySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
    pub tree: TreeConfig,
    pub pipeline: PipelineConfig,
    pub observation: ObservationModelConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_real: 100,
            n_fake: 100,
            seed: 0,
            tree: TreeConfig::default(),
            pipeline: PipelineConfig::default(),
            observation: ObservationModelConfig::default(),
        }
    }
}

/// Source ids are `src-00000`, ... ; the first `n_real` sources are real.
pub fn source_id(i: usize) -> String {
    format!("src-{i:05}")
}

pub struct Simulation {
    pub dataset: Dataset,
    pub trees: Vec<DegradationTree>,
}

/// Simulates every source in parallel. Each source draws from its own stream,
/// so the output depends only on the config.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Simulation> {
    if cfg.n_real + cfg.n_fake == 0 {
        return Err(Error::invalid("at least one source is required"));
    }
    cfg.observation.validate()?;
    let sampler = PipelineSampler::new(cfg.pipeline.clone())?;
    let mut tree_cfg = cfg.tree.clone();
    tree_cfg.severity = cfg.observation.severity_weights;

    let per_source: Vec<(DegradationTree, QuerySet)> = (0..cfg.n_real + cfg.n_fake)
        .into_par_iter()
        .map(|i| {
            let label = if i < cfg.n_real {
                Label::Real
            } else {
                Label::Fake
            };
            let id = source_id(i);
            let tree = generate_tree(&id, label, cfg.seed, &tree_cfg, &sampler)?;
            let mut rng = crate::rng::stream(cfg.seed, &format!("obs/{id}"));
            let records = simulate_observations(&tree, label, &cfg.observation, &mut rng)?;
            Ok((tree, QuerySet::new(id, Some(label), records)))
        })
        .collect::<Result<_>>()?;

    let (trees, sets): (Vec<_>, Vec<_>) = per_source.into_iter().unzip();
    let mut dataset = Dataset::new(sets);
    dataset.tree_depth = Some(tree_cfg.depth());
    Ok(Simulation { dataset, trees })
}
