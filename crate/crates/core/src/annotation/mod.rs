//! YOLO TXT annotations, the class label map, dataset manifests and conversion to
//! PASCAL VOC XML and COCO JSON.

mod convert;
mod manifest;
mod validate;
mod yolo;

use std::collections::HashMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::imaging::ImageError;

pub use convert::{
    from_coco, from_voc, to_coco, to_coco_from_files, to_voc, voc_corners, CocoAnnotation,
    CocoCategory, CocoDataset, CocoImage, ImageSize,
};
pub use manifest::{group_key, DatasetManifest, ManifestEntry, ScanResult, Split};
pub use validate::{validate_dataset, validate_tree, Finding, ValidationReport};
pub use yolo::{
    parse_label_file, parse_label_lines, parse_prediction_line, parse_predictions,
    parse_yolo_line, serialize_predictions, serialize_yolo, Annotation, LabelFile,
};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line {line}: malformed annotation at `{token}`: {reason}")]
    MalformedLine {
        line: usize,
        token: String,
        reason: String,
    },
    #[error("line {line}: class id {token} out of range for {classes} classes")]
    ClassOutOfRange {
        line: usize,
        token: String,
        classes: usize,
    },
    #[error("line {line}: box out of bounds at `{token}`: {reason}")]
    BoxOutOfBounds {
        line: usize,
        token: String,
        reason: String,
    },
    #[error("label map: {0}")]
    LabelMap(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("voc: {0}")]
    Voc(String),
    #[error("coco: {0}")]
    Coco(String),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AnnotationError {
    /// 1-based source line, when the error points at one.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::MalformedLine { line, .. }
            | Self::ClassOutOfRange { line, .. }
            | Self::BoxOutOfBounds { line, .. }
            | Self::Manifest { line, .. } => Some(*line),
            _ => None,
        }
    }

    /// Stable short code used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            Self::MalformedLine { .. } => "malformed_line",
            Self::ClassOutOfRange { .. } => "class_out_of_range",
            Self::BoxOutOfBounds { .. } => "box_out_of_bounds",
            Self::LabelMap(_) => "label_map",
            Self::Manifest { .. } => "manifest",
            Self::Voc(_) => "voc",
            Self::Coco(_) => "coco",
            Self::Image(_) => "image",
            Self::Io { .. } => "io",
        }
    }
}

/// Ordered class names; the position of a name is its class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    aliases: Vec<Option<String>>,
}

const DANISH_DIGITS: [&str; 10] = [
    "NUL", "EN", "TO", "TRE", "FIRE", "FEM", "SEKS", "SYV", "OTTE", "NI",
];

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self, AnnotationError> {
        let aliases = vec![None; names.len()];
        Self::with_aliases(names, aliases)
    }

    pub fn with_aliases(names: Vec<String>, aliases: Vec<Option<String>>) -> Result<Self, AnnotationError> {
        if names.len() != aliases.len() {
            return Err(AnnotationError::LabelMap("alias count differs from name count".into()));
        }
        let mut seen = HashMap::new();
        let all = names
            .iter()
            .enumerate()
            .chain(aliases.iter().enumerate().filter_map(|(i, a)| a.as_ref().map(|a| (i, a))));
        for (id, name) in all {
            if name.is_empty() {
                return Err(AnnotationError::LabelMap(format!("empty name for class {id}")));
            }
            if name.chars().any(char::is_whitespace) {
                return Err(AnnotationError::LabelMap(format!("`{name}` contains whitespace")));
            }
            if let Some(prev) = seen.insert(name.as_str(), id) {
                if prev != id {
                    return Err(AnnotationError::LabelMap(format!("duplicate name `{name}`")));
                }
            }
        }
        Ok(Self { names, aliases })
    }

    /// The 36-class map: `A`..`Z` as ids 0..25, then `0`..`9` as ids 26..35, with the
    /// Danish number words as aliases of the digits.
    pub fn addsl() -> Self {
        let mut names: Vec<String> = ('A'..='Z').map(String::from).collect();
        names.extend(('0'..='9').map(String::from));
        let mut aliases = vec![None; 26];
        aliases.extend(DANISH_DIGITS.iter().map(|s| Some(s.to_string())));
        Self::with_aliases(names, aliases).expect("canonical label map is valid")
    }

    /// Parses a label-map file: one class per line, `name` or `name=alias`. Blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, AnnotationError> {
        let mut names = Vec::new();
        let mut aliases = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            match line.split_once('=') {
                Some((name, alias)) => {
                    names.push(name.trim().to_string());
                    aliases.push(Some(alias.trim().to_string()));
                }
                None => {
                    names.push(line.to_string());
                    aliases.push(None);
                }
            }
        }
        Self::with_aliases(names, aliases)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, alias) in self.names.iter().zip(&self.aliases) {
            out.push_str(name);
            if let Some(a) = alias {
                out.push('=');
                out.push_str(a);
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn alias(&self, id: usize) -> Option<&str> {
        self.aliases.get(id).and_then(|a| a.as_deref())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Looks a class up by name or alias.
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .or_else(|| self.aliases.iter().position(|a| a.as_deref() == Some(name)))
    }
}

impl Default for LabelMap {
    fn default() -> Self {
        Self::addsl()
    }
}
