use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AnnotationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One image/label pair. Relative paths are resolved against the manifest root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    pub fn new(image: impl Into<PathBuf>, label: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            image: image.into(),
            label: label.into(),
            split,
        }
    }

    pub fn image_stem(&self) -> String {
        stem(&self.image)
    }

    pub fn label_stem(&self) -> String {
        stem(&self.label)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Strips an augmentation suffix (`_r0`, `_r90`, `_r180`, `_r270`) from the image path, so
/// that rotated copies share a key with their source image.
pub fn group_key(image: &Path) -> String {
    let s = image.to_string_lossy();
    let stem = stem(image);
    for suffix in ["_r0", "_r90", "_r180", "_r270"] {
        if let Some(base) = stem.strip_suffix(suffix) {
            if !base.is_empty() {
                let ext = image.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
                let parent = image.parent().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
                return if parent.is_empty() {
                    format!("{base}{ext}")
                } else {
                    format!("{parent}/{base}{ext}")
                };
            }
        }
    }
    s.into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Result of scanning a `images/` + `labels/` tree.
#[derive(Debug, Clone, Default)]
pub struct ScanResult {
    pub manifest: DatasetManifest,
    pub orphan_images: Vec<PathBuf>,
    pub orphan_labels: Vec<PathBuf>,
}

const IMAGE_EXTS: [&str; 2] = ["ppm", "pgm"];

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), AnnotationError> {
    let io = |source| AnnotationError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut items: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    items.sort();
    for p in items {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn path_to_manifest_str(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Parses tab-separated `image<TAB>label<TAB>split` lines.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, AnnotationError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(AnnotationError::Manifest {
                    line: i + 1,
                    reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            let split = cols[2]
                .trim()
                .parse()
                .map_err(|reason| AnnotationError::Manifest { line: i + 1, reason })?;
            entries.push(ManifestEntry::new(cols[0], cols[1], split));
        }
        Ok(Self::new(root, entries))
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&path_to_manifest_str(&e.image));
            out.push('\t');
            out.push_str(&path_to_manifest_str(&e.label));
            out.push('\t');
            out.push_str(e.split.as_str());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotationError> {
        fs::write(path, self.to_tsv()).map_err(|source| AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Scans `root/images/**.{ppm,pgm}` and `root/labels/**.txt`, pairing files by relative
    /// path. A leading `train`/`val`/`test` directory under `images/` sets the split; anything
    /// else is train.
    pub fn scan(root: &Path) -> Result<ScanResult, AnnotationError> {
        let images_dir = root.join("images");
        let labels_dir = root.join("labels");
        let mut images = Vec::new();
        let mut labels = Vec::new();
        if images_dir.is_dir() {
            walk(&images_dir, &mut images)?;
        }
        if labels_dir.is_dir() {
            walk(&labels_dir, &mut labels)?;
        }
        let rel_no_ext = |base: &Path, p: &Path| -> PathBuf {
            p.strip_prefix(base).expect("walked under base").with_extension("")
        };
        images.retain(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        });
        labels.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"));

        let mut label_keys: Vec<(PathBuf, PathBuf, bool)> = labels
            .iter()
            .map(|l| (rel_no_ext(&labels_dir, l), l.clone(), false))
            .collect();
        let mut result = ScanResult::default();
        let mut entries = Vec::new();
        for img in &images {
            let key = rel_no_ext(&images_dir, img);
            match label_keys.iter_mut().find(|(k, _, used)| *k == key && !*used) {
                Some(slot) => {
                    slot.2 = true;
                    let split = match key.components().next() {
                        Some(Component::Normal(first)) if key.components().count() > 1 => {
                            first.to_str().and_then(|s| s.parse().ok()).unwrap_or(Split::Train)
                        }
                        _ => Split::Train,
                    };
                    entries.push(ManifestEntry::new(
                        img.strip_prefix(root).expect("under root"),
                        slot.1.strip_prefix(root).expect("under root"),
                        split,
                    ));
                }
                None => result.orphan_images.push(img.clone()),
            }
        }
        result.orphan_labels = label_keys
            .into_iter()
            .filter(|(_, _, used)| !used)
            .map(|(_, p, _)| p)
            .collect();
        result.manifest = Self::new(root, entries);
        Ok(result)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            c[e.split.index()] += 1;
        }
        c
    }
}
