//! PASCAL VOC annotation directories.
//!
//! VOC boxes are 1-based and pixel-inclusive, so `xmin = 1, xmax = 100`
//! covers 100 pixels starting at the left edge.

use std::fs;
use std::path::{Path, PathBuf};

use cspl_core::{BoundingBox, Dataset, DomainTag, GroundTruthObject, ImageRecord};
use roxmltree::{Document, Node};

use crate::error::{Error, Result};

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text_of(node: Node, path: &[&str], file: &Path) -> Result<String> {
    let mut cur = node;
    for name in path {
        cur = child(cur, name).ok_or_else(|| Error::format(file, format!("missing element {}", path.join("/"))))?;
    }
    Ok(cur.text().unwrap_or("").trim().to_string())
}

fn number(node: Node, path: &[&str], file: &Path) -> Result<f64> {
    let raw = text_of(node, path, file)?;
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::format(file, format!("{} is not a number: {raw:?}", path.join("/"))))
}

fn dimension(node: Node, name: &str, file: &Path) -> Result<u32> {
    let v = number(node, &["size", name], file)?;
    if v.fract() != 0.0 || v < 1.0 || v > f64::from(u32::MAX) {
        return Err(Error::format(file, format!("size/{name} must be a positive integer, got {v}")));
    }
    Ok(v as u32)
}

/// Converts one annotation file. The image id is the file stem.
pub fn parse_voc(xml: &str, file: &Path, domain: DomainTag) -> Result<ImageRecord> {
    let doc = Document::parse(xml).map_err(|e| Error::format(file, e.to_string()))?;
    let root = doc.root_element();
    let image_id = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::format(file, "no file name"))?;
    let width = dimension(root, "width", file)?;
    let height = dimension(root, "height", file)?;
    let path = match child(root, "filename").and_then(|n| n.text()) {
        Some(name) => name.trim().to_string(),
        None => format!("{image_id}.jpg"),
    };
    let mut annotations = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let class = text_of(obj, &["name"], file)?;
        let xmin = number(obj, &["bndbox", "xmin"], file)?;
        let ymin = number(obj, &["bndbox", "ymin"], file)?;
        let xmax = number(obj, &["bndbox", "xmax"], file)?;
        let ymax = number(obj, &["bndbox", "ymax"], file)?;
        if xmax < xmin || ymax < ymin {
            return Err(cspl_core::Error::Validation(format!(
                "image {image_id}: inverted box xmin={xmin} xmax={xmax} ymin={ymin} ymax={ymax}"
            ))
            .into());
        }
        let bbox = BoundingBox::new(xmin - 1.0, ymin - 1.0, xmax - xmin + 1.0, ymax - ymin + 1.0)
            .map_err(|e| cspl_core::Error::Validation(format!("image {image_id}: {e}")))?;
        annotations.push(GroundTruthObject::new(class, bbox)?);
    }
    let record = ImageRecord::new(image_id, width, height, path, domain).with_annotations(annotations);
    record.validate()?;
    Ok(record)
}

/// Reads every `*.xml` file in `dir`, in file-name order.
pub fn read_voc_dir(dir: &Path, domain: DomainTag) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")) {
            files.push(path);
        }
    }
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    for file in &files {
        let xml = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        images.push(parse_voc(&xml, file, domain)?);
    }
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Dataset::new(name, images, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xml(w: u32, h: u32, boxes: &[(&str, [i32; 4])]) -> String {
        let objects: String = boxes
            .iter()
            .map(|(c, b)| {
                format!(
                    "<object><name>{c}</name><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
                    b[0], b[1], b[2], b[3]
                )
            })
            .collect();
        format!("<annotation><filename>x.jpg</filename><size><width>{w}</width><height>{h}</height><depth>3</depth></size>{objects}</annotation>")
    }

    fn parse(text: &str) -> Result<ImageRecord> {
        parse_voc(text, Path::new("dir/000001.xml"), DomainTag::Source)
    }

    #[test]
    fn full_image_box() {
        let img = parse(&xml(100, 50, &[("car", [1, 1, 100, 50])])).unwrap();
        let b = img.annotations[0].bbox;
        assert_eq!((b.x(), b.y(), b.w(), b.h()), (0.0, 0.0, 100.0, 50.0));
        assert_eq!(img.image_id, "000001");
        assert_eq!(img.path, "x.jpg");
    }

    #[test]
    fn inclusive_conversion() {
        let img = parse(&xml(100, 100, &[("car", [10, 20, 30, 60])])).unwrap();
        let b = img.annotations[0].bbox;
        assert_eq!((b.x(), b.y(), b.w(), b.h()), (9.0, 19.0, 21.0, 41.0));
    }

    #[test]
    fn inverted_box_is_a_validation_error() {
        let err = parse(&xml(100, 100, &[("car", [30, 20, 10, 60])])).unwrap_err();
        assert!(matches!(err, Error::Core(cspl_core::Error::Validation(_))), "{err}");
    }

    #[test]
    fn missing_element_names_the_file() {
        let err = parse("<annotation><size><width>5</width></size></annotation>").unwrap_err();
        assert!(err.to_string().contains("000001.xml"), "{err}");
        assert!(err.to_string().contains("size/height"), "{err}");
    }

    #[test]
    fn box_past_the_edge_is_rejected() {
        assert!(parse(&xml(100, 100, &[("car", [50, 50, 101, 60])])).is_err());
    }
}
