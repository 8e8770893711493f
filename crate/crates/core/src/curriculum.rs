//! Difficulty-ordered batches and the easy-to-hard stage schedule.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::difficulty::ScoredImage;
use crate::error::{config_err, validation, Result};

/// One of the `k` difficulty-ordered partitions; batch 1 is the easiest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumBatch {
    pub index: usize,
    pub image_ids: Vec<String>,
}

/// Stage `i` trains on batches `1..=i` for `iterations` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_index: usize,
    pub batch_indices: Vec<usize>,
    pub iterations: u64,
}

/// Partitions a ranked list into `k` contiguous batches. The first
/// `n mod k` batches hold one extra image.
pub fn split(ranked: &[ScoredImage], k: usize) -> Result<Vec<CurriculumBatch>> {
    let n = ranked.len();
    if k < 1 {
        return Err(validation!("k must be at least 1"));
    }
    if n < k {
        return Err(validation!("cannot split {n} images into {k} batches"));
    }
    let (base, extra) = (n / k, n % k);
    let mut rest = ranked;
    let batches = (0..k)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let (head, tail) = rest.split_at(size);
            rest = tail;
            CurriculumBatch {
                index: i + 1,
                image_ids: head.iter().map(|s| s.image_id.clone()).collect(),
            }
        })
        .collect();
    Ok(batches)
}

/// Stages `1..k` get `early_stage_iterations` each; the last stage gets
/// whatever remains of `total_iterations`.
pub fn stage_plan(
    k: usize,
    total_iterations: u64,
    early_stage_iterations: u64,
) -> Result<Vec<StagePlan>> {
    if k < 1 {
        return Err(config_err!("k must be at least 1"));
    }
    let early_total = (k as u64 - 1)
        .checked_mul(early_stage_iterations)
        .ok_or_else(|| config_err!("schedule overflows"))?;
    if total_iterations <= early_total {
        return Err(config_err!(
            "total iterations {total_iterations} must exceed (k - 1) * early-stage iterations = {} * {} = {early_total}",
            k - 1,
            early_stage_iterations
        ));
    }
    Ok((1..=k)
        .map(|stage| StagePlan {
            stage_index: stage,
            batch_indices: (1..=stage).collect(),
            iterations: if stage < k {
                early_stage_iterations
            } else {
                total_iterations - early_total
            },
        })
        .collect())
}

/// Image ids of batches `1..=stage`, easiest first.
pub fn stage_pool(batches: &[CurriculumBatch], stage: usize) -> Vec<String> {
    batches
        .iter()
        .take(stage)
        .flat_map(|b| b.image_ids.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difficulty::DifficultyScore;
    use alloc::format;
    use alloc::string::ToString;

    fn ranked(ids: &[&str]) -> Vec<ScoredImage> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| ScoredImage::new(*id, DifficultyScore::Finite(i as f64)))
            .collect()
    }

    fn sizes(b: &[CurriculumBatch]) -> Vec<usize> {
        b.iter().map(|b| b.image_ids.len()).collect()
    }

    #[test]
    fn five_into_three() {
        let b = split(&ranked(&["a", "b", "c", "d", "e"]), 3).unwrap();
        assert_eq!(sizes(&b), [2, 2, 1]);
        assert_eq!(b[2].index, 3);
    }

    #[test]
    fn k_one_is_everything() {
        let b = split(&ranked(&["a", "b", "c"]), 1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].image_ids, ["a", "b", "c"]);
    }

    #[test]
    fn order_preserving() {
        let b = split(&ranked(&["a", "b", "c", "d", "e", "f"]), 3).unwrap();
        assert_eq!(b[0].image_ids, ["a", "b"]);
        assert_eq!(b[1].image_ids, ["c", "d"]);
        assert_eq!(b[2].image_ids, ["e", "f"]);
        assert_eq!(stage_pool(&b, 2), ["a", "b", "c", "d"]);
    }

    #[test]
    fn too_few_images() {
        assert!(split(&ranked(&["a", "b"]), 3).is_err());
        assert!(split(&ranked(&["a"]), 0).is_err());
        assert!(split(&[], 1).is_err());
    }

    #[test]
    fn default_schedule() {
        let plan = stage_plan(3, 500, 50).unwrap();
        let iters: Vec<_> = plan.iter().map(|s| s.iterations).collect();
        assert_eq!(iters, [50, 50, 400]);
        assert_eq!(plan[2].batch_indices, [1, 2, 3]);
    }

    #[test]
    fn generalised_schedule() {
        let iters: Vec<_> = stage_plan(5, 500, 50).unwrap().iter().map(|s| s.iterations).collect();
        assert_eq!(iters, [50, 50, 50, 50, 300]);
        let single = stage_plan(1, 500, 50).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].iterations, 500);
    }

    #[test]
    fn schedule_too_short() {
        let err = stage_plan(3, 100, 50).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("2 * 50 = 100"), "{msg}");
        assert!(stage_plan(0, 100, 50).is_err());
        assert_eq!("configuration error".to_string(), msg[..19]);
    }
}
