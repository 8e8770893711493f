//! Images, annotations and datasets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::geom::BoundingBox;

/// Which role an image plays in a cross-domain run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    /// Source image restyled to look like the target domain.
    Translated,
    Target,
    TargetTest,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Translated => "translated",
            DomainTag::Target => "target",
            DomainTag::TargetTest => "target_test",
        }
    }
}

/// A labelled object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthObject {
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(rename = "bbox")]
    pub bbox: BoundingBox,
}

impl GroundTruthObject {
    pub fn new(class_name: impl Into<String>, bbox: BoundingBox) -> Result<Self> {
        let class_name = class_name.into();
        if class_name.is_empty() {
            return Err(validation!("empty class name"));
        }
        Ok(Self { class_name, bbox })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    class: String,
    bbox: BoundingBox,
    score: f64,
}

/// A detector output: a class, a box and a confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(rename = "bbox")]
    pub bbox: BoundingBox,
    score: f64,
}

impl Detection {
    pub fn new(class_name: impl Into<String>, bbox: BoundingBox, score: f64) -> Result<Self> {
        let class_name = class_name.into();
        if class_name.is_empty() {
            return Err(validation!("empty class name"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(validation!("detection score {score} outside [0, 1]"));
        }
        Ok(Self { class_name, bbox, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// Drops the score, keeping class and box as a training label.
    pub fn to_label(&self) -> GroundTruthObject {
        GroundTruthObject {
            class_name: self.class_name.clone(),
            bbox: self.bbox,
        }
    }
}

impl TryFrom<RawDetection> for Detection {
    type Error = Error;

    fn try_from(raw: RawDetection) -> Result<Self> {
        Detection::new(raw.class, raw.bbox, raw.score)
    }
}

/// One image and whatever labels it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub path: String,
    #[serde(rename = "domain")]
    pub domain_tag: DomainTag,
    #[serde(default)]
    pub annotations: Vec<GroundTruthObject>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        path: impl Into<String>,
        domain_tag: DomainTag,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            path: path.into(),
            domain_tag,
            annotations: Vec::new(),
        }
    }

    pub fn with_annotations(mut self, annotations: Vec<GroundTruthObject>) -> Self {
        self.annotations = annotations;
        self
    }

    /// Checks dimensions and that every annotation lies inside the image.
    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(validation!("empty image_id"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(validation!(
                "image {} has zero dimension {}x{}",
                self.image_id,
                self.width,
                self.height
            ));
        }
        for obj in &self.annotations {
            if obj.class_name.is_empty() {
                return Err(validation!("image {} has an empty class name", self.image_id));
            }
            if !obj.bbox.fits_within(self.width, self.height) {
                let b: [f64; 4] = obj.bbox.into();
                return Err(validation!(
                    "image {}: box {:?} exceeds image bounds {}x{}",
                    self.image_id,
                    b,
                    self.width,
                    self.height
                ));
            }
        }
        Ok(())
    }
}

/// An ordered collection of images with an explicit class vocabulary.
///
/// Image ids are unique and every annotation class is in the vocabulary.
/// The vocabulary order is the order classes are reported in by `mean_ap`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<ImageRecord>,
    class_vocabulary: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Builds a validated dataset. Without an explicit vocabulary the sorted
    /// set of observed class names is used.
    pub fn new(
        name: impl Into<String>,
        images: Vec<ImageRecord>,
        class_vocabulary: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            img.validate()?;
            if index.insert(img.image_id.clone(), i).is_some() {
                return Err(validation!("duplicate image_id {}", img.image_id));
            }
        }
        let observed: BTreeSet<&str> = images
            .iter()
            .flat_map(|img| img.annotations.iter().map(|a| a.class_name.as_str()))
            .collect();
        let class_vocabulary = match class_vocabulary {
            Some(vocab) => {
                let mut seen = BTreeSet::new();
                for c in &vocab {
                    if c.is_empty() || !seen.insert(c.as_str()) {
                        return Err(validation!("vocabulary entry {c:?} is empty or repeated"));
                    }
                }
                if let Some(missing) = observed.iter().find(|c| !seen.contains(*c)) {
                    return Err(validation!("class {missing:?} is not in the vocabulary"));
                }
                vocab
            }
            None => observed.into_iter().map(String::from).collect(),
        };
        Ok(Self {
            name: name.into(),
            images,
            class_vocabulary,
            index,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            images: Vec::new(),
            class_vocabulary: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn class_vocabulary(&self) -> &[String] {
        &self.class_vocabulary
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn has_annotations(&self) -> bool {
        self.images.iter().any(|img| !img.annotations.is_empty())
    }

    /// Same images with every annotation removed; the vocabulary is kept.
    pub fn without_annotations(&self) -> Self {
        let mut out = self.clone();
        for img in &mut out.images {
            img.annotations.clear();
        }
        out
    }

    /// Ground truth keyed by image id, one entry per image.
    pub fn ground_truth(&self) -> BTreeMap<String, Vec<GroundTruthObject>> {
        self.images
            .iter()
            .map(|img| (img.image_id.clone(), img.annotations.clone()))
            .collect()
    }

    /// Keeps only the listed images, in the listed order.
    pub fn subset(&self, name: impl Into<String>, image_ids: &[String]) -> Result<Self> {
        let images = image_ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| validation!("unknown image_id {id}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(name, images, Some(self.class_vocabulary.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn car(x: f64, y: f64, w: f64, h: f64) -> GroundTruthObject {
        GroundTruthObject::new("car", BoundingBox::new(x, y, w, h).unwrap()).unwrap()
    }

    #[test]
    fn vocabulary_defaults_to_sorted_observed() {
        let a = ImageRecord::new("a", 100, 100, "a.png", DomainTag::Source)
            .with_annotations(vec![car(10.0, 10.0, 20.0, 20.0)]);
        let mut b = ImageRecord::new("b", 100, 100, "b.png", DomainTag::Source);
        b.annotations.push(GroundTruthObject::new("bus", BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap()).unwrap());
        let ds = Dataset::new("d", vec![a, b], None).unwrap();
        assert_eq!(ds.class_vocabulary(), ["bus", "car"]);
        assert_eq!(ds.get("b").unwrap().path, "b.png");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = ImageRecord::new("a", 10, 10, "x", DomainTag::Target);
        let err = Dataset::new("d", vec![a.clone(), a], None).unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("duplicate")));
    }

    #[test]
    fn out_of_bounds_box_names_image() {
        let a = ImageRecord::new("img7", 100, 100, "x", DomainTag::Source)
            .with_annotations(vec![car(90.0, 10.0, 20.0, 20.0)]);
        let err = Dataset::new("d", vec![a], None).unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("img7")));
    }

    #[test]
    fn explicit_vocabulary_must_cover_classes() {
        let a = ImageRecord::new("a", 100, 100, "x", DomainTag::Source)
            .with_annotations(vec![car(0.0, 0.0, 1.0, 1.0)]);
        assert!(Dataset::new("d", vec![a.clone()], Some(vec!["bus".into()])).is_err());
        let ds = Dataset::new("d", vec![a], Some(vec!["truck".into(), "car".into()])).unwrap();
        assert_eq!(ds.class_vocabulary(), ["truck", "car"]);
    }

    #[test]
    fn detection_score_range() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(Detection::new("car", b, 1.3).is_err());
        assert!(Detection::new("car", b, -0.1).is_err());
        assert!(Detection::new("car", b, 1.0).is_ok());
        assert!(Detection::new("", b, 0.5).is_err());
    }
}
