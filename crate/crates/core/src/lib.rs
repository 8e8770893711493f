//! Curriculum self-paced learning for cross-domain object detection.
//!
//! This crate holds the pure algorithmic pieces: box geometry, the image
//! difficulty score, PASCAL-VOC style evaluation, the curriculum split and
//! stage schedule, the self-paced training engine and a seeded simulated
//! detector. It needs `alloc` but no `std`; file formats, process backends
//! and the command line live in the `cspl` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod backend;
pub mod curriculum;
pub mod difficulty;
pub mod engine;
mod error;
pub mod eval;
pub mod geom;
pub mod model;
pub mod sim;

pub use backend::{Backend, Predictions};
pub use curriculum::{split, stage_plan, CurriculumBatch, StagePlan};
pub use difficulty::{
    difficulty_score, rank_by_difficulty, DifficultyScore, ExternalScores, ScoredImage,
};
pub use engine::{
    DifficultySource, Engine, EngineConfig, PseudoLabelSet, RunAborted, RunReport, WarmupMode,
};
pub use error::{Error, Result};
pub use eval::{average_precision, match_detections, mean_ap, ApResult, MatchResult, PrCurve};
pub use geom::{iou, BoundingBox};
pub use model::{Dataset, Detection, DomainTag, GroundTruthObject, ImageRecord};
pub use sim::{SimDetector, SimParams};
