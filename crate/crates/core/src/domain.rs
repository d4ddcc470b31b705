//! Shared value types: views, modalities, clips, annotation records and
//! synchronization groups.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    Anchor,
    Positive,
    HeldOut,
}

/// A camera viewpoint, `V1..V4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewId {
    pub index: u8,
    pub role: ViewRole,
}

impl ViewId {
    pub const fn new(index: u8, role: ViewRole) -> Self {
        Self { index, role }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    AuxiliaryView,
    Target,
}

/// A sensor modality and the domain it plays in adaptation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId {
    pub index: u8,
    pub name: String,
    pub domain_role: DomainRole,
}

impl ModalityId {
    pub fn new(index: u8, name: impl Into<String>, domain_role: DomainRole) -> Self {
        Self {
            index,
            name: name.into(),
            domain_role,
        }
    }

    pub fn is_target(&self) -> bool {
        self.domain_role == DomainRole::Target
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipDims {
    pub const fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major offset of `(t, y, x, c)`.
    #[inline]
    pub fn offset(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }
}

impl Default for ClipDims {
    fn default() -> Self {
        Self::new(8, 32, 32, 3)
    }
}

/// A `T×H×W×C` clip with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub data: Arc<[f32]>,
    pub dims: ClipDims,
    pub view: ViewId,
    pub modality: ModalityId,
    pub class_id: Option<usize>,
    pub clip_id: String,
    pub time_window: (i64, i64),
}

impl Clip {
    pub fn new(
        data: Vec<f32>,
        dims: ClipDims,
        view: ViewId,
        modality: ModalityId,
        class_id: Option<usize>,
        clip_id: impl Into<String>,
        time_window: (i64, i64),
    ) -> Result<Self> {
        let clip = Self {
            data: data.into(),
            dims,
            view,
            modality,
            class_id,
            clip_id: clip_id.into(),
            time_window,
        };
        clip.validate(dims)?;
        Ok(clip)
    }

    /// Checks shape, value range and the label/target-domain pairing.
    pub fn validate(&self, expected: ClipDims) -> Result<()> {
        for (axis, want, got) in [
            ("frames", expected.frames, self.dims.frames),
            ("height", expected.height, self.dims.height),
            ("width", expected.width, self.dims.width),
            ("channels", expected.channels, self.dims.channels),
            ("data", expected.len(), self.data.len()),
        ] {
            if want != got {
                return Err(Error::DimensionMismatch {
                    axis: axis.into(),
                    expected: want,
                    actual: got,
                });
            }
        }
        if let Some(bad) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "clip {} holds value {bad} outside [0,1]",
                self.clip_id
            )));
        }
        if self.modality.is_target() == self.class_id.is_some() {
            return Err(Error::InvalidArgument(format!(
                "clip {}: class label must be present iff the modality is not the target",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn domain_role(&self) -> DomainRole {
        match (self.modality.domain_role, self.view.role) {
            (DomainRole::Target, _) => DomainRole::Target,
            (_, ViewRole::Anchor) => DomainRole::Source,
            _ => DomainRole::AuxiliaryView,
        }
    }

    /// Copy of this clip with the label removed; the only way target clips
    /// enter training.
    pub fn unlabeled(&self) -> Clip {
        Clip {
            class_id: None,
            ..self.clone()
        }
    }
}

/// One annotation row of a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    pub clip_ref: String,
    pub view: ViewId,
    pub modality: ModalityId,
    pub class_id: Option<usize>,
    pub start_frame: i64,
    pub end_frame: i64,
}

impl SampleRecord {
    pub fn interval(&self) -> (i64, i64) {
        (self.start_frame, self.end_frame)
    }

    /// Length of the intersection of two half-open frame intervals.
    pub fn overlap(&self, other: &SampleRecord) -> i64 {
        interval_overlap(self.interval(), other.interval())
    }
}

pub fn interval_overlap(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0)
}

/// An anchor-view record and its matched records from the positive views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncGroup {
    pub anchor: SampleRecord,
    pub positives: Vec<SampleRecord>,
    pub class_id: usize,
    /// Intersection of every member's interval. May be empty (`start == end`)
    /// when positives overlap the anchor at disjoint places.
    pub overlap_window: (i64, i64),
}

impl SyncGroup {
    /// Anchors without a match in some positive view are kept as singletons
    /// and only take part in the classification loss.
    pub fn is_singleton(&self) -> bool {
        self.positives.is_empty()
    }

    /// Groups are identified by the anchor record.
    pub fn group_id(&self) -> &str {
        &self.anchor.clip_ref
    }

    pub fn members(&self) -> impl Iterator<Item = &SampleRecord> {
        std::iter::once(&self.anchor).chain(self.positives.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingDomain {
    Source,
    ViewPositive,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLabel {
    pub class_id: usize,
    pub pseudo: bool,
}

/// `B×d` encoder outputs with labels and a domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Array2<f64>,
    pub labels: Vec<BatchLabel>,
    pub domain: EmbeddingDomain,
}

impl EmbeddingBatch {
    pub fn new(features: Array2<f64>, labels: Vec<BatchLabel>, domain: EmbeddingDomain) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidArgument("embedding batch must be non-empty".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                axis: "batch".into(),
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            domain,
        })
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.class_id).collect()
    }
}
