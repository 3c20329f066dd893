use std::fs;
use std::path::Path;

use serde::Serialize;

use super::manifest::{DatasetManifest, ScanResult};
use super::yolo::parse_label_lines;
use super::LabelMap;
use crate::imaging;

/// One problem found while validating a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Finding {
    pub path: String,
    pub line: Option<usize>,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    /// Valid objects per class id.
    pub class_counts: Vec<usize>,
    /// Entries per split, in train/val/test order.
    pub split_counts: [usize; 3],
    pub images: usize,
    pub objects: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    /// Number of classes with at least one object.
    pub fn classes_present(&self) -> usize {
        self.class_counts.iter().filter(|&&c| c > 0).count()
    }
}

fn finding(path: &Path, line: Option<usize>, kind: &str, message: impl Into<String>) -> Finding {
    Finding {
        path: path.to_string_lossy().into_owned(),
        line,
        kind: kind.to_string(),
        message: message.into(),
    }
}

/// Checks every entry of a manifest. Problems are collected, never fatal; the findings come
/// back sorted by path and line.
pub fn validate_dataset(manifest: &DatasetManifest, label_map: &LabelMap) -> ValidationReport {
    let mut findings = Vec::new();
    let mut class_counts = vec![0; label_map.len()];
    let mut objects = 0;

    for entry in &manifest.entries {
        let image = manifest.resolve(&entry.image);
        let label = manifest.resolve(&entry.label);
        let has_image = image.is_file();
        let has_label = label.is_file();
        match (has_image, has_label) {
            (true, false) => findings.push(finding(&image, None, "orphan_image", "no label file")),
            (false, true) => findings.push(finding(&label, None, "orphan_label", "no image file")),
            (false, false) => findings.push(finding(&image, None, "io", "image and label both missing")),
            (true, true) => {}
        }
        if entry.image_stem() != entry.label_stem() {
            findings.push(finding(
                &label,
                None,
                "stem_mismatch",
                format!("label stem `{}` != image stem `{}`", entry.label_stem(), entry.image_stem()),
            ));
        }
        if has_image {
            if let Err(e) = imaging::load_image_info(&image) {
                findings.push(finding(&image, None, "image", e.to_string()));
            }
        }
        if has_label {
            match fs::read(&label) {
                Err(e) => findings.push(finding(&label, None, "io", e.to_string())),
                Ok(bytes) => match String::from_utf8(bytes) {
                    Err(_) => findings.push(finding(&label, None, "io", "label file is not UTF-8")),
                    Ok(text) => {
                        let (good, errors) = parse_label_lines(&text, label_map);
                        for o in &good {
                            class_counts[o.class_id] += 1;
                        }
                        objects += good.len();
                        for e in errors {
                            findings.push(finding(&label, e.line(), e.code(), e.to_string()));
                        }
                    }
                },
            }
        }
    }
    findings.sort();
    ValidationReport {
        findings,
        class_counts,
        split_counts: manifest.split_counts(),
        images: manifest.len(),
        objects,
    }
}

/// Scans a `images/` + `labels/` tree and validates it, reporting unpaired files as orphans.
pub fn validate_tree(scan: &ScanResult, label_map: &LabelMap) -> ValidationReport {
    let mut report = validate_dataset(&scan.manifest, label_map);
    for p in &scan.orphan_images {
        report.findings.push(finding(p, None, "orphan_image", "no label file"));
    }
    for p in &scan.orphan_labels {
        report.findings.push(finding(p, None, "orphan_label", "no image file"));
    }
    report.findings.sort();
    report
}
