//! The detector contract the engine drives.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Detection, DomainTag, GroundTruthObject, ImageRecord};

/// Detections keyed by image id.
pub type Predictions = BTreeMap<String, Vec<Detection>>;

/// Where a training example's labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    /// Source labels carried over to a translated image.
    InheritedTranslated,
    Pseudo,
}

/// An image together with the labels to train on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: ImageRecord,
    pub labels: Vec<GroundTruthObject>,
    pub label_source: LabelSource,
}

impl TrainingExample {
    /// Source and translated images train on their own annotations.
    pub fn from_annotated(image: &ImageRecord) -> Self {
        let label_source = if image.domain_tag == DomainTag::Translated {
            LabelSource::InheritedTranslated
        } else {
            LabelSource::GroundTruth
        };
        Self {
            labels: image.annotations.clone(),
            image: image.clone(),
            label_source,
        }
    }

    /// A target image labelled with gated detections.
    pub fn pseudo(image: &ImageRecord, detections: &[Detection]) -> Self {
        Self {
            image: image.clone(),
            labels: detections.iter().map(Detection::to_label).collect(),
            label_source: LabelSource::Pseudo,
        }
    }
}

/// A trainable detector.
///
/// Implementations must be deterministic: the same state queried with the
/// same images returns the same detections. `predict` must return an entry
/// for every requested image, possibly empty.
pub trait Backend {
    fn train(&mut self, examples: &[TrainingExample]) -> Result<()>;

    fn predict(&mut self, images: &[ImageRecord]) -> Result<Predictions>;
}

impl<B: Backend + ?Sized> Backend for &mut B {
    fn train(&mut self, examples: &[TrainingExample]) -> Result<()> {
        (**self).train(examples)
    }

    fn predict(&mut self, images: &[ImageRecord]) -> Result<Predictions> {
        (**self).predict(images)
    }
}
