//! Datasets, meta-splits and C-way K-shot episode sampling.

pub mod dir;
pub mod episode;
pub mod split;
pub mod synth;
pub mod tensor_file;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;

pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use split::{make_splits, MetaSplit, SplitRule};
pub use synth::{synth_dataset, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Raster,
    Features,
}

/// Image content. Rasters go through the backbone; precomputed feature maps
/// bypass it. Both use the channels × height × width layout.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Raster(FeatureMap),
    Features(FeatureMap),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Raster(_) => PayloadKind::Raster,
            Payload::Features(_) => PayloadKind::Features,
        }
    }

    pub fn map(&self) -> &FeatureMap {
        match self {
            Payload::Raster(m) | Payload::Features(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: SampleId,
    pub class: ClassId,
    pub payload: Arc<Payload>,
}

/// Immutable labeled collection indexed by class.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
    kind: PayloadKind,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        let kind = samples
            .first()
            .map(|s| s.payload.kind())
            .ok_or_else(|| Error::InvalidParam("empty dataset".into()))?;
        let shape = samples[0].payload.map().shape();
        let mut seen = BTreeSet::new();
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.id) {
                return Err(Error::InvalidParam(format!(
                    "duplicate sample id {}",
                    s.id.0
                )));
            }
            if s.payload.kind() != kind {
                return Err(Error::InvalidParam("mixed payload kinds".into()));
            }
            if s.payload.map().shape() != shape {
                return Err(Error::shape(
                    "Dataset::new",
                    format!(
                        "sample {} has shape {:?}, expected {shape:?}",
                        s.id.0,
                        s.payload.map().shape()
                    ),
                ));
            }
            if !s.payload.map().is_finite() {
                return Err(Error::InvalidParam(format!(
                    "sample {} is not finite",
                    s.id.0
                )));
            }
            by_class.entry(s.class).or_default().push(i);
        }
        Ok(Self {
            samples,
            by_class,
            kind,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    /// `(channels, height, width)` of every payload.
    pub fn payload_shape(&self) -> (usize, usize, usize) {
        self.samples[0].payload.map().shape()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_indices(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn view(&self, classes: &[ClassId]) -> Result<DatasetView<'_>> {
        for c in classes {
            if !self.by_class.contains_key(c) {
                return Err(Error::InvalidParam(format!("class {} not in dataset", c.0)));
            }
        }
        let mut classes = classes.to_vec();
        classes.sort();
        classes.dedup();
        Ok(DatasetView {
            dataset: self,
            classes,
        })
    }

    pub fn full_view(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            classes: self.classes(),
        }
    }
}

/// A dataset restricted to a subset of classes (one meta-split part).
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    classes: Vec<ClassId>,
}

impl DatasetView<'_> {
    /// Sorted class list.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }
}
