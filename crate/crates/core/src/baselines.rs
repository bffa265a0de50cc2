//! Comparison strategies: rank the near-duplicates of a source by some
//! attribute and average the raw logits of the top `k`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calibration::{order_free_sum, FusedScore};
use crate::error::{Error, Result};
use crate::types::{ImageFormat, InstanceRecord, QuerySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingKind {
    Random,
    /// Last known compression quality factor, lossless formats first.
    Qf,
    /// Pixel count.
    Size,
    /// Earliest upload first.
    Date,
    /// No-reference quality index.
    Iqa,
}

impl RankingKind {
    pub const ALL: [RankingKind; 5] = [
        RankingKind::Random,
        RankingKind::Qf,
        RankingKind::Size,
        RankingKind::Date,
        RankingKind::Iqa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RankingKind::Random => "random",
            RankingKind::Qf => "qf",
            RankingKind::Size => "size",
            RankingKind::Date => "date",
            RankingKind::Iqa => "iqa",
        }
    }
}

impl fmt::Display for RankingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RankingKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown ranking strategy {s:?}")))
    }
}

/// How many top-ranked instances to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    K(usize),
    All,
}

impl TopK {
    pub fn take(self, n: usize) -> usize {
        match self {
            TopK::K(k) => k.min(n),
            TopK::All => n,
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::K(k) => write!(f, "{k}"),
            TopK::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingStrategy {
    pub kind: RankingKind,
    pub k: TopK,
}

impl RankingStrategy {
    pub fn new(kind: RankingKind, k: TopK) -> Result<Self> {
        if k == TopK::K(0) {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(RankingStrategy { kind, k })
    }
}

fn has_attribute(kind: RankingKind, r: &InstanceRecord) -> bool {
    match kind {
        RankingKind::Random | RankingKind::Iqa => true,
        RankingKind::Qf => {
            r.meta.jpeg_qf.is_some()
                || r.meta
                    .format
                    .is_some_and(|f| !f.is_lossy() && f != ImageFormat::Other)
        }
        RankingKind::Size => r.meta.pixel_count().is_some(),
        RankingKind::Date => r.meta.timestamp.is_some(),
    }
}

/// Compare two optional keys so that present values come first.
fn present_first<T: Ord>(a: Option<T>, b: Option<T>, cmp: impl Fn(&T, &T) -> Ordering) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => cmp(&x, &y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

fn qf_rank(r: &InstanceRecord) -> Option<(u8, i32)> {
    match (r.meta.format, r.meta.jpeg_qf) {
        (Some(ImageFormat::Png), _) => Some((0, 0)),
        (_, Some(qf)) => Some((1, -i32::from(qf))),
        _ => None,
    }
}

/// Instance indices in ranked order.
pub fn rank_indices(set: &QuerySet, kind: RankingKind, seed: u64) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::invalid(format!(
            "source {} has no instances",
            set.source_id
        )));
    }
    if !set.instances.iter().any(|r| has_attribute(kind, r)) {
        return Err(Error::MissingMetadata(format!(
            "no instance of source {} carries the attribute needed for {kind} ranking",
            set.source_id
        )));
    }
    let inst = &set.instances;
    let mut idx: Vec<usize> = (0..inst.len()).collect();
    let by_id = |a: &usize, b: &usize| inst[*a].instance_id.cmp(&inst[*b].instance_id);
    match kind {
        RankingKind::Random => {
            idx.sort_by(by_id);
            idx.shuffle(&mut crate::rng::stream(seed, &set.source_id));
        }
        RankingKind::Iqa => idx.sort_by(|a, b| {
            inst[*b]
                .quality
                .total_cmp(&inst[*a].quality)
                .then_with(|| by_id(a, b))
        }),
        RankingKind::Qf => idx.sort_by(|a, b| {
            present_first(qf_rank(&inst[*a]), qf_rank(&inst[*b]), Ord::cmp)
                .then_with(|| by_id(a, b))
        }),
        RankingKind::Size => idx.sort_by(|a, b| {
            present_first(
                inst[*a].meta.pixel_count(),
                inst[*b].meta.pixel_count(),
                |x, y| y.cmp(x),
            )
            .then_with(|| by_id(a, b))
        }),
        RankingKind::Date => idx.sort_by(|a, b| {
            present_first(inst[*a].meta.timestamp, inst[*b].meta.timestamp, Ord::cmp)
                .then_with(|| by_id(a, b))
        }),
    }
    Ok(idx)
}

/// Instance ids in ranked order, best first.
pub fn rank_instances(set: &QuerySet, strategy: RankingStrategy, seed: u64) -> Result<Vec<String>> {
    Ok(rank_indices(set, strategy.kind, seed)?
        .into_iter()
        .map(|i| set.instances[i].instance_id.clone())
        .collect())
}

fn mean_score(logits: Vec<f64>) -> FusedScore {
    let score = order_free_sum(&logits) / logits.len() as f64;
    FusedScore::from_parts(score, logits)
}

/// Mean raw logit of the top `k` ranked instances.
pub fn aggregate_topk(set: &QuerySet, strategy: RankingStrategy, seed: u64) -> Result<FusedScore> {
    let order = rank_indices(set, strategy.kind, seed)?;
    let take = strategy.k.take(order.len());
    Ok(mean_score(
        order[..take]
            .iter()
            .map(|&i| set.instances[i].logit)
            .collect(),
    ))
}

/// Mean raw logit over every instance, the unranked "naive" fusion.
pub fn naive_mean(set: &QuerySet) -> Result<FusedScore> {
    if set.is_empty() {
        return Err(Error::invalid(format!(
            "source {} has no instances",
            set.source_id
        )));
    }
    Ok(mean_score(set.instances.iter().map(|r| r.logit).collect()))
}

/// Mean raw logit over the instances at one degradation-tree level.
pub fn oracle_level(set: &QuerySet, level: u32) -> Result<FusedScore> {
    let logits: Vec<f64> = set
        .instances
        .iter()
        .filter(|r| r.meta.tree_level == Some(level))
        .map(|r| r.logit)
        .collect();
    if logits.is_empty() {
        return Err(Error::MissingMetadata(format!(
            "source {} has no instance at tree level {level}",
            set.source_id
        )));
    }
    Ok(mean_score(logits))
}
