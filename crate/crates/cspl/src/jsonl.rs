//! The canonical line-delimited dataset format.
//!
//! One JSON object per image:
//!
//! ```text
//! {"image_id":"a","width":100,"height":100,"path":"a.jpg","domain":"target","annotations":[{"class":"car","bbox":[10,10,20,20]}]}
//! ```
//!
//! An optional first line `{"vocabulary":[...]}` fixes the class order.
//! Detection files use the same records with a `score` on every
//! annotation.

use std::fs;
use std::path::Path;

use cspl_core::{Dataset, Detection, ImageRecord, Predictions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocabulary: Vec<String>,
}

fn parse_error(line: usize, e: impl std::fmt::Display) -> cspl_core::Error {
    cspl_core::Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Non-blank lines with their 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn is_header(line: &str) -> bool {
    matches!(serde_json::from_str::<serde_json::Value>(line), Ok(serde_json::Value::Object(m)) if m.contains_key("vocabulary"))
}

/// Parses a dataset; images keep line order.
pub fn parse_dataset(name: &str, text: &str) -> cspl_core::Result<Dataset> {
    let mut vocabulary = None;
    let mut images = Vec::new();
    for (n, (line_no, line)) in records(text).enumerate() {
        if n == 0 && is_header(line) {
            let h: Header = serde_json::from_str(line).map_err(|e| parse_error(line_no, e))?;
            vocabulary = Some(h.vocabulary);
            continue;
        }
        let img: ImageRecord = serde_json::from_str(line).map_err(|e| parse_error(line_no, e))?;
        images.push(img);
    }
    Dataset::new(name, images, vocabulary)
}

/// Writes the vocabulary header (when there is a vocabulary) and one line
/// per image.
pub fn dataset_to_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    if !dataset.class_vocabulary().is_empty() {
        let header = Header {
            vocabulary: dataset.class_vocabulary().to_vec(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serialises"));
        out.push('\n');
    }
    for img in dataset.images() {
        out.push_str(&serde_json::to_string(img).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Line-numbered parse errors gain the file path; validation errors pass
/// through unchanged.
pub(crate) fn in_file(path: &Path, e: cspl_core::Error) -> Error {
    match e {
        cspl_core::Error::Parse { line, message } => Error::format(path, format!("line {line}: {message}")),
        other => Error::Core(other),
    }
}

/// Reads a dataset file. The dataset is named after the file stem.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_dataset(&name, &text).map_err(|e| in_file(path, e))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_text(path, &dataset_to_string(dataset))
}

#[derive(Deserialize)]
struct DetectionRecord {
    image_id: String,
    #[serde(default)]
    annotations: Vec<Detection>,
}

#[derive(Serialize)]
struct DetectionRecordOut<'a> {
    image_id: &'a str,
    width: u32,
    height: u32,
    path: &'a str,
    domain: cspl_core::DomainTag,
    annotations: &'a [Detection],
}

/// Parses a detection file. Any other record fields are ignored.
pub fn parse_detections(text: &str) -> cspl_core::Result<Predictions> {
    let mut out = Predictions::new();
    for (n, (line_no, line)) in records(text).enumerate() {
        if n == 0 && is_header(line) {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| parse_error(line_no, e))?;
        if out.insert(rec.image_id.clone(), rec.annotations).is_some() {
            return Err(cspl_core::Error::Validation(format!("duplicate image_id {}", rec.image_id)));
        }
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Predictions> {
    parse_detections(&read_text(path)?).map_err(|e| in_file(path, e))
}

/// Detection records for every image of `images`, in dataset order.
pub fn detections_to_string(detections: &Predictions, images: &Dataset) -> String {
    let mut out = String::new();
    for img in images.images() {
        let dets = detections.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let rec = DetectionRecordOut {
            image_id: &img.image_id,
            width: img.width,
            height: img.height,
            path: &img.path,
            domain: img.domain_tag,
            annotations: dets,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"image_id":"a","width":100,"height":100,"path":"a.jpg","domain":"target","annotations":[{"class":"car","bbox":[10,10,20,20]}]}"#;

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_dataset("e", "").unwrap();
        assert!(ds.is_empty());
        assert!(ds.class_vocabulary().is_empty());
    }

    #[test]
    fn single_record() {
        let ds = parse_dataset("one", ONE).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.class_vocabulary(), ["car"]);
        assert_eq!(ds.images()[0].annotations[0].bbox.w(), 20.0);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!("{ONE}\n{ONE}\n");
        assert!(matches!(parse_dataset("d", &text), Err(cspl_core::Error::Validation(_))));
    }

    #[test]
    fn malformed_line_is_named() {
        let text = format!("{ONE}\n{{\"image_id\": \n");
        assert!(matches!(parse_dataset("m", &text), Err(cspl_core::Error::Parse { line: 2, .. })));
    }

    #[test]
    fn out_of_bounds_box_names_the_image() {
        let text = ONE.replace("[10,10,20,20]", "[90,10,20,20]");
        let err = parse_dataset("b", &text).unwrap_err().to_string();
        assert!(err.contains("image a"), "{err}");
    }

    #[test]
    fn header_fixes_vocabulary_order() {
        let text = format!("{{\"vocabulary\":[\"truck\",\"car\"]}}\n{ONE}\n");
        let ds = parse_dataset("h", &text).unwrap();
        assert_eq!(ds.class_vocabulary(), ["truck", "car"]);
        let again = parse_dataset("h", &dataset_to_string(&ds)).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn detections_need_scores_in_range() {
        let ok = ONE.replace("20,20]}", "20,20],\"score\":0.5}");
        assert_eq!(parse_detections(&ok).unwrap()["a"][0].score(), 0.5);
        let bad = ONE.replace("20,20]}", "20,20],\"score\":1.3}");
        assert!(parse_detections(&bad).is_err());
    }
}
