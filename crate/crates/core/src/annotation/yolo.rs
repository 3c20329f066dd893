use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AnnotationError, LabelMap};
use crate::geometry::{BBox, Detection, GeometryError};

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// The annotations of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelFile {
    pub image_id: String,
    pub objects: Vec<Annotation>,
}

impl LabelFile {
    pub fn new(image_id: impl Into<String>, objects: Vec<Annotation>) -> Self {
        Self {
            image_id: image_id.into(),
            objects,
        }
    }
}

fn malformed(line: usize, token: &str, reason: impl Into<String>) -> AnnotationError {
    AnnotationError::MalformedLine {
        line,
        token: token.to_string(),
        reason: reason.into(),
    }
}

fn parse_real(line: usize, token: &str) -> Result<f64, AnnotationError> {
    let v: f64 = token.parse().map_err(|_| malformed(line, token, "not a number"))?;
    if !v.is_finite() {
        return Err(malformed(line, token, "not finite"));
    }
    Ok(v)
}

/// Shared field parser for label lines (5 fields) and prediction lines (6 fields).
fn parse_fields<'a>(
    line: &'a str,
    line_no: usize,
    label_map: &LabelMap,
    expected: usize,
) -> Result<(usize, BBox, Vec<&'a str>), AnnotationError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != expected {
        let token = fields.get(expected).or(fields.last()).copied().unwrap_or("");
        return Err(malformed(
            line_no,
            token,
            format!("expected {expected} fields, found {}", fields.len()),
        ));
    }
    let class_tok = fields[0];
    if !class_tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(line_no, class_tok, "class id must be a non-negative integer"));
    }
    let class_id: usize = class_tok
        .parse()
        .map_err(|_| malformed(line_no, class_tok, "class id too large"))?;
    if class_id >= label_map.len() {
        return Err(AnnotationError::ClassOutOfRange {
            line: line_no,
            token: class_tok.to_string(),
            classes: label_map.len(),
        });
    }
    let mut c = [0.0; 4];
    for (k, v) in c.iter_mut().enumerate() {
        *v = parse_real(line_no, fields[k + 1])?;
    }
    let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| {
        let token = match &e {
            GeometryError::OutOfBounds { edge, .. } if *edge == "left" || *edge == "right" => fields[1],
            GeometryError::OutOfBounds { .. } => fields[2],
            GeometryError::NonPositiveSize { w, .. } if *w <= 0.0 => fields[3],
            GeometryError::NonPositiveSize { .. } => fields[4],
            GeometryError::NotFinite => fields[1],
        };
        AnnotationError::BoxOutOfBounds {
            line: line_no,
            token: token.to_string(),
            reason: e.to_string(),
        }
    })?;
    Ok((class_id, bbox, fields))
}

/// Parses `"<class_id> <cx> <cy> <w> <h>"`. `line_no` is 1-based and only used in errors.
pub fn parse_yolo_line(line: &str, line_no: usize, label_map: &LabelMap) -> Result<Annotation, AnnotationError> {
    let (class_id, bbox, _) = parse_fields(line, line_no, label_map, 5)?;
    Ok(Annotation { class_id, bbox })
}

/// Parses every non-blank line, keeping the good objects and every error.
pub fn parse_label_lines(text: &str, label_map: &LabelMap) -> (Vec<Annotation>, Vec<AnnotationError>) {
    let mut objects = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_yolo_line(line, i + 1, label_map) {
            Ok(a) => objects.push(a),
            Err(e) => errors.push(e),
        }
    }
    (objects, errors)
}

/// Parses a whole label file, failing on the first bad line. Empty files are legal.
pub fn parse_label_file(text: &str, image_id: &str, label_map: &LabelMap) -> Result<LabelFile, AnnotationError> {
    let (objects, errors) = parse_label_lines(text, label_map);
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(LabelFile::new(image_id, objects)),
    }
}

/// Canonical YOLO TXT: one `"<id> <cx> <cy> <w> <h>\n"` line per object, 6 decimals.
pub fn serialize_yolo(file: &LabelFile) -> String {
    let mut out = String::new();
    for o in &file.objects {
        let b = &o.bbox;
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            o.class_id,
            b.cx(),
            b.cy(),
            b.w(),
            b.h()
        )
        .unwrap();
    }
    out
}

/// Parses a prediction line `"<class> <cx> <cy> <w> <h> <conf>"`.
pub fn parse_prediction_line(line: &str, line_no: usize, label_map: &LabelMap) -> Result<Detection, AnnotationError> {
    let (class_id, bbox, fields) = parse_fields(line, line_no, label_map, 6)?;
    let confidence = parse_real(line_no, fields[5])?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(malformed(line_no, fields[5], "confidence outside [0, 1]"));
    }
    Ok(Detection {
        bbox,
        class_id,
        confidence,
    })
}

pub fn parse_predictions(text: &str, label_map: &LabelMap) -> Result<Vec<Detection>, AnnotationError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_prediction_line(l, i + 1, label_map))
        .collect()
}

pub fn serialize_predictions(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = &d.bbox;
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.class_id,
            b.cx(),
            b.cy(),
            b.w(),
            b.h(),
            d.confidence
        )
        .unwrap();
    }
    out
}
