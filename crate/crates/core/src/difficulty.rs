//! Image difficulty from detected instances.
//!
//! The score of an image with `n` detections is `n^2 / sum(w_i * h_i)`:
//! the object count divided by the mean box area. Many small objects make
//! an image hard, few large ones make it easy. An image without detections
//! gets the infinite score and sorts after every finite one.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::geom::BoundingBox;
use crate::model::{Dataset, Detection};

/// A difficulty value; larger is harder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyScore {
    Finite(f64),
    /// Assigned to images with nothing detected.
    Infinite,
}

impl DifficultyScore {
    /// A finite score; negative or non-finite values are rejected.
    pub fn finite(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(validation!("difficulty score {value} must be finite and >= 0"));
        }
        Ok(DifficultyScore::Finite(value))
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, DifficultyScore::Infinite)
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            DifficultyScore::Finite(v) => Some(*v),
            DifficultyScore::Infinite => None,
        }
    }
}

impl Eq for DifficultyScore {}

impl PartialOrd for DifficultyScore {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DifficultyScore {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (DifficultyScore::Finite(a), DifficultyScore::Finite(b)) => a.total_cmp(b),
            (DifficultyScore::Finite(_), DifficultyScore::Infinite) => Ordering::Less,
            (DifficultyScore::Infinite, DifficultyScore::Finite(_)) => Ordering::Greater,
            (DifficultyScore::Infinite, DifficultyScore::Infinite) => Ordering::Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: String,
    pub score: DifficultyScore,
}

impl ScoredImage {
    pub fn new(image_id: impl Into<String>, score: DifficultyScore) -> Self {
        Self {
            image_id: image_id.into(),
            score,
        }
    }
}

/// Difficulty of an image given its detections.
pub fn difficulty_score(detections: &[Detection]) -> DifficultyScore {
    difficulty_of_boxes(detections.iter().map(|d| &d.bbox))
}

/// The same score over any set of boxes, e.g. ground-truth annotations.
pub fn difficulty_of_boxes<'a>(boxes: impl IntoIterator<Item = &'a BoundingBox>) -> DifficultyScore {
    let (n, total_area) = boxes
        .into_iter()
        .fold((0usize, 0.0f64), |(n, a), b| (n + 1, a + b.area()));
    if n == 0 {
        return DifficultyScore::Infinite;
    }
    let n = n as f64;
    DifficultyScore::Finite(n * n / total_area)
}

/// Sorts easiest first; equal scores are ordered by image id.
pub fn rank_by_difficulty(mut scored: Vec<ScoredImage>) -> Result<Vec<ScoredImage>> {
    let mut seen = BTreeSet::new();
    for s in &scored {
        if !seen.insert(s.image_id.as_str()) {
            return Err(validation!("duplicate image_id {} in ranking", s.image_id));
        }
    }
    scored.sort_by(|a, b| a.score.cmp(&b.score).then_with(|| a.image_id.cmp(&b.image_id)));
    Ok(scored)
}

/// Externally produced scores matched against a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScores {
    /// One entry per dataset image, in dataset order.
    pub scored: Vec<ScoredImage>,
    /// How many ids in the source were not in the dataset.
    pub ignored_extra: usize,
}

impl ExternalScores {
    /// Matches `(image_id, score)` pairs to `dataset`. Every dataset image
    /// must be covered; ids outside the dataset are counted and dropped.
    /// Positive infinity maps to the infinite score.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (String, f64)>,
        dataset: &Dataset,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        let mut ignored_extra = 0;
        for (id, value) in pairs {
            let score = if value == f64::INFINITY {
                DifficultyScore::Infinite
            } else {
                DifficultyScore::finite(value)
                    .map_err(|_| validation!("score {value} for image {id} must be >= 0"))?
            };
            if !dataset.contains(&id) {
                ignored_extra += 1;
                continue;
            }
            if by_id.insert(id.clone(), score).is_some() {
                return Err(validation!("image {id} scored more than once"));
            }
        }
        let scored = dataset
            .images()
            .iter()
            .map(|img| {
                by_id
                    .get(&img.image_id)
                    .map(|&score| ScoredImage::new(img.image_id.clone(), score))
                    .ok_or_else(|| validation!("no external score for image {}", img.image_id))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scored,
            ignored_extra,
        })
    }
}
