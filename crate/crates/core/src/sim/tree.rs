use serde::{Deserialize, Serialize};

use super::ops::{DegradationOp, OpKind, PipelineSampler};
use crate::error::{Error, Result};
use crate::types::Label;

pub const ROOT_ID: &str = "0";

/// Severity weight per operation kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityWeights {
    pub crop: f64,
    pub resize: f64,
    pub compress: f64,
}

impl SeverityWeights {
    pub fn weight(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Crop => self.crop,
            OpKind::Resize => self.resize,
            OpKind::Compress => self.compress,
        }
    }

    pub fn edge_severity(&self, ops: &[DegradationOp]) -> f64 {
        ops.iter()
            .map(|op| self.weight(op.kind()) * op.intensity())
            .sum()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if [self.crop, self.resize, self.compress]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::invalid(
                "severity weights must be finite and non-negative",
            ))
        }
    }
}

impl Default for SeverityWeights {
    fn default() -> Self {
        SeverityWeights {
            crop: 0.3,
            resize: 0.12,
            compress: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    /// Children per node at each level; its length is the tree depth.
    pub branching: Vec<usize>,
    /// Weights used for the `cumulative_severity` stored on each node.
    pub severity: SeverityWeights,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            branching: vec![4, 2, 2, 2, 2],
            severity: SeverityWeights::default(),
        }
    }
}

impl TreeConfig {
    pub fn depth(&self) -> u32 {
        self.branching.len() as u32
    }

    /// Node count per level 1..=depth.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.branching
            .iter()
            .scan(1usize, |width, b| {
                *width *= b;
                Some(*width)
            })
            .collect()
    }

    /// Nodes excluding the root.
    pub fn node_count(&self) -> usize {
        self.level_sizes().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Dotted path from the root, e.g. `0.3.1`.
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub level: u32,
    pub ops_from_parent: Vec<DegradationOp>,
    pub cumulative_severity: f64,
}

/// One source image's degradation tree. `nodes[0]` is the root and nodes are
/// stored level by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationTree {
    pub source_id: String,
    pub label: Label,
    pub seed: u64,
    pub depth: u32,
    pub branching: Vec<usize>,
    pub nodes: Vec<TreeNode>,
}

impl DegradationTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// The near-duplicates: every node but the root.
    pub fn instances(&self) -> &[TreeNode] {
        &self.nodes[1..]
    }

    pub fn parent_index(&self, i: usize) -> Option<usize> {
        let pid = self.nodes[i].parent_id.as_deref()?;
        self.nodes[..i].iter().rposition(|n| n.node_id == pid)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds a tree with one independent pipeline per edge. The random stream is
/// derived from `(seed, source_id)`.
pub fn generate_tree(
    source_id: &str,
    label: Label,
    seed: u64,
    tree: &TreeConfig,
    pipeline: &PipelineSampler,
) -> Result<DegradationTree> {
    if tree.branching.is_empty() || tree.branching.contains(&0) {
        return Err(Error::invalid(
            "branching factors must be positive and non-empty",
        ));
    }
    tree.severity.validate()?;
    let mut rng = crate::rng::stream(seed, &format!("tree/{source_id}"));

    let mut nodes = Vec::with_capacity(tree.node_count() + 1);
    nodes.push(TreeNode {
        node_id: ROOT_ID.to_string(),
        parent_id: None,
        level: 0,
        ops_from_parent: Vec::new(),
        cumulative_severity: 0.0,
    });
    let mut frontier = 0..1;
    for (depth, &branches) in tree.branching.iter().enumerate() {
        let start = nodes.len();
        for parent in frontier.clone() {
            for child in 0..branches {
                let ops = pipeline.sample(&mut rng);
                let p = &nodes[parent];
                let node = TreeNode {
                    node_id: format!("{}.{child}", p.node_id),
                    parent_id: Some(p.node_id.clone()),
                    level: depth as u32 + 1,
                    cumulative_severity: p.cumulative_severity + tree.severity.edge_severity(&ops),
                    ops_from_parent: ops,
                };
                nodes.push(node);
            }
        }
        frontier = start..nodes.len();
    }

    Ok(DegradationTree {
        source_id: source_id.to_string(),
        label,
        seed,
        depth: tree.depth(),
        branching: tree.branching.clone(),
        nodes,
    })
}
