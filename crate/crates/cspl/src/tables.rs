//! Tab-separated files: difficulty scores, split manifests, PR curves and
//! sweep tables.

use std::path::Path;

use cspl_core::eval::PrCurve;
use cspl_core::{CurriculumBatch, Dataset, DifficultyScore, ExternalScores, ScoredImage};

use crate::error::Result;
use crate::jsonl::{in_file, read_text};

fn parse_error(line: usize, message: impl Into<String>) -> cspl_core::Error {
    cspl_core::Error::Parse {
        line,
        message: message.into(),
    }
}

fn rows(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// `image_id<TAB>score` pairs. `inf` marks an image with no detections.
pub fn parse_scores(text: &str) -> cspl_core::Result<Vec<(String, f64)>> {
    rows(text)
        .map(|(n, line)| {
            let (id, value) = line
                .split_once('\t')
                .ok_or_else(|| parse_error(n, "expected image_id<TAB>score"))?;
            let id = id.trim();
            if id.is_empty() {
                return Err(parse_error(n, "empty image_id"));
            }
            let score: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_error(n, format!("score {:?} is not a number", value.trim())))?;
            if score.is_nan() {
                return Err(parse_error(n, "score is NaN"));
            }
            Ok((id.to_string(), score))
        })
        .collect()
}

/// Scores for every image of `dataset` from an external score file.
pub fn load_external_scores(path: &Path, dataset: &Dataset) -> Result<ExternalScores> {
    let pairs = parse_scores(&read_text(path)?).map_err(|e| in_file(path, e))?;
    let scores = ExternalScores::from_pairs(pairs, dataset)?;
    if scores.ignored_extra > 0 {
        log::warn!("{}: ignored {} ids not in dataset {}", path.display(), scores.ignored_extra, dataset.name());
    }
    Ok(scores)
}

pub fn format_score(score: DifficultyScore) -> String {
    match score {
        DifficultyScore::Finite(v) => v.to_string(),
        DifficultyScore::Infinite => "inf".into(),
    }
}

pub fn scores_to_string(scored: &[ScoredImage]) -> String {
    scored
        .iter()
        .map(|s| format!("{}\t{}\n", s.image_id, format_score(s.score)))
        .collect()
}

/// One line per batch: `batch_index<TAB>id,id,...`.
pub fn manifest_to_string(batches: &[CurriculumBatch]) -> String {
    batches
        .iter()
        .map(|b| format!("{}\t{}\n", b.index, b.image_ids.join(",")))
        .collect()
}

pub fn parse_manifest(text: &str) -> cspl_core::Result<Vec<CurriculumBatch>> {
    rows(text)
        .map(|(n, line)| {
            let (index, ids) = line
                .split_once('\t')
                .ok_or_else(|| parse_error(n, "expected batch_index<TAB>ids"))?;
            let index: usize = index
                .trim()
                .parse()
                .map_err(|_| parse_error(n, format!("bad batch index {index:?}")))?;
            let image_ids = ids.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
            Ok(CurriculumBatch { index, image_ids })
        })
        .collect()
}

/// `recall<TAB>precision` rows.
pub fn pr_to_string(curve: &PrCurve) -> String {
    curve.points.iter().map(|(r, p)| format!("{r}\t{p}\n")).collect()
}

/// `k<TAB>metric` rows.
pub fn sweep_to_string(rows: &[(usize, f64)]) -> String {
    rows.iter().map(|(k, m)| format!("{k}\t{m}\n")).collect()
}
