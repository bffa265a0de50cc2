//! Score-level data model: one record per near-duplicate, grouped per source image.
//!
//! Records are immutable once built. Raw quality values are stored as ingested;
//! normalization belongs to [`CalibrationModel`](crate::calibration::CalibrationModel).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "quad-dataset/1";

/// Binary ground truth: real (0) or synthetic (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    /// Decision rule shared by every fused score: fake iff strictly positive.
    pub fn from_score(score: f64) -> Label {
        if score > 0.0 {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "0" => Ok(Label::Real),
            "fake" | "1" => Ok(Label::Fake),
            other => Err(Error::invalid(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImageFormat {
    Jpeg,
    Webp,
    Png,
    Other,
}

impl ImageFormat {
    pub fn is_lossy(self) -> bool {
        matches!(self, ImageFormat::Jpeg | ImageFormat::Webp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImageFormat::Jpeg => "JPEG",
            ImageFormat::Webp => "WEBP",
            ImageFormat::Png => "PNG",
            ImageFormat::Other => "OTHER",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "JPEG" | "JPG" => Ok(ImageFormat::Jpeg),
            "WEBP" => Ok(ImageFormat::Webp),
            "PNG" => Ok(ImageFormat::Png),
            "OTHER" => Ok(ImageFormat::Other),
            other => Err(Error::invalid(format!("unknown image format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jpeg_qf: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<ImageFormat>,
    /// Seconds since the Unix epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_level: Option<u32>,
}

impl InstanceMeta {
    pub fn pixel_count(&self) -> Option<u64> {
        Some(u64::from(self.width?) * u64::from(self.height?))
    }

    pub fn short_side(&self) -> Option<u32> {
        Some(self.width?.min(self.height?))
    }
}

/// One detector observation of one near-duplicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub source_id: String,
    pub instance_id: String,
    /// Detector log posterior ratio, fake vs real.
    pub logit: f64,
    /// Raw no-reference quality index.
    pub quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default)]
    pub meta: InstanceMeta,
}

/// All near-duplicates retrieved for a single source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub instances: Vec<InstanceRecord>,
}

impl QuerySet {
    pub fn new(
        source_id: impl Into<String>,
        label: Option<Label>,
        instances: Vec<InstanceRecord>,
    ) -> Self {
        QuerySet {
            source_id: source_id.into(),
            label,
            instances,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn require_label(&self) -> Result<Label> {
        self.label
            .ok_or_else(|| Error::LabelsRequired(format!("source {} has no label", self.source_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: String,
    /// Configured degradation-tree depth, when the data comes from a tree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_depth: Option<u32>,
    pub sets: Vec<QuerySet>,
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset::new(Vec::new())
    }
}

impl Dataset {
    pub fn new(sets: Vec<QuerySet>) -> Self {
        Dataset {
            schema_version: SCHEMA_VERSION.to_string(),
            tree_depth: None,
            sets,
        }
    }

    /// Groups flat records by source id, keeping first-appearance order of
    /// sources and of instances within a source.
    pub fn from_records(records: impl IntoIterator<Item = InstanceRecord>) -> Self {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut sets: Vec<QuerySet> = Vec::new();
        for rec in records {
            let slot = *index.entry(rec.source_id.clone()).or_insert_with(|| {
                sets.push(QuerySet::new(rec.source_id.clone(), None, Vec::new()));
                sets.len() - 1
            });
            let set = &mut sets[slot];
            if set.label.is_none() {
                set.label = rec.label;
            }
            set.instances.push(rec);
        }
        Dataset::new(sets)
    }

    pub fn n_instances(&self) -> usize {
        self.sets.iter().map(QuerySet::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.sets.iter().flat_map(|s| s.instances.iter())
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.sets.iter().map(|s| s.source_id.as_str())
    }

    /// Returns a dataset restricted to sets whose source id passes `keep`.
    pub fn filter_sources(&self, mut keep: impl FnMut(&str) -> bool) -> Dataset {
        Dataset {
            schema_version: self.schema_version.clone(),
            tree_depth: self.tree_depth,
            sets: self
                .sets
                .iter()
                .filter(|s| keep(&s.source_id))
                .cloned()
                .collect(),
        }
    }

    pub fn count_by_label(&self) -> (usize, usize) {
        self.sets.iter().fold((0, 0), |(r, f), s| match s.label {
            Some(Label::Real) => (r + 1, f),
            Some(Label::Fake) => (r, f + 1),
            None => (r, f),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptySet,
    NonFinite,
    DuplicateKey,
    DuplicateSource,
    SourceMismatch,
    LabelMismatch,
    QfWithoutLossyFormat,
    QfOutOfRange,
    TreeLevelOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub source_id: String,
    pub instance_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.instance_id {
            Some(id) => write!(f, "({}, {}): {}", self.source_id, id, self.message),
            None => write!(f, "({}): {}", self.source_id, self.message),
        }
    }
}

/// Checks every data-model invariant; an empty result means the dataset is valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut sources = HashSet::new();
    let mut keys: HashSet<(&str, &str)> = HashSet::new();

    let mut push = |kind, source: &str, instance: Option<&str>, message: String| {
        out.push(Violation {
            kind,
            source_id: source.to_string(),
            instance_id: instance.map(str::to_string),
            message,
        })
    };

    for set in &ds.sets {
        if !sources.insert(set.source_id.as_str()) {
            push(
                ViolationKind::DuplicateSource,
                &set.source_id,
                None,
                "source id appears in more than one set".into(),
            );
        }
        if set.instances.is_empty() {
            push(
                ViolationKind::EmptySet,
                &set.source_id,
                None,
                "set has no instances".into(),
            );
        }
        for rec in &set.instances {
            let id = Some(rec.instance_id.as_str());
            if rec.source_id != set.source_id {
                push(
                    ViolationKind::SourceMismatch,
                    &set.source_id,
                    id,
                    format!("record carries source id {}", rec.source_id),
                );
            }
            if !keys.insert((rec.source_id.as_str(), rec.instance_id.as_str())) {
                push(
                    ViolationKind::DuplicateKey,
                    &rec.source_id,
                    id,
                    "duplicate (source_id, instance_id)".into(),
                );
            }
            if !rec.logit.is_finite() {
                push(
                    ViolationKind::NonFinite,
                    &rec.source_id,
                    id,
                    format!("logit is {}", rec.logit),
                );
            }
            if !rec.quality.is_finite() {
                push(
                    ViolationKind::NonFinite,
                    &rec.source_id,
                    id,
                    format!("quality is {}", rec.quality),
                );
            }
            if let (Some(a), Some(b)) = (set.label, rec.label) {
                if a != b {
                    push(
                        ViolationKind::LabelMismatch,
                        &rec.source_id,
                        id,
                        format!("record label {b} differs from set label {a}"),
                    );
                }
            }
            if let Some(qf) = rec.meta.jpeg_qf {
                if !(1..=100).contains(&qf) {
                    push(
                        ViolationKind::QfOutOfRange,
                        &rec.source_id,
                        id,
                        format!("jpeg_qf {qf} outside [1,100]"),
                    );
                }
                if !rec.meta.format.is_some_and(ImageFormat::is_lossy) {
                    push(
                        ViolationKind::QfWithoutLossyFormat,
                        &rec.source_id,
                        id,
                        "jpeg_qf present without a lossy format".into(),
                    );
                }
            }
            if let Some(level) = rec.meta.tree_level {
                let max = ds.tree_depth.unwrap_or(u32::MAX);
                if level < 1 || level > max {
                    push(
                        ViolationKind::TreeLevelOutOfRange,
                        &rec.source_id,
                        id,
                        format!("tree_level {level} outside [1, {max}]"),
                    );
                }
            }
        }
    }
    out
}
