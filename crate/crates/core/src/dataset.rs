//! Dataset assembly: quarter-turn augmentation, seeded train/val/test splitting and
//! per-class statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::annotation::{
    group_key, parse_label_file, serialize_yolo, Annotation, AnnotationError, DatasetManifest, LabelFile,
    LabelMap, ManifestEntry, Split,
};
use crate::imaging::{self, ImageError, ResizeMode};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 3 split units, found {0}")]
    TooFewEntries(usize),
    #[error("{split} split would be empty although its ratio is {ratio}")]
    DegenerateSplit { split: Split, ratio: f64 },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Rotation / preprocessing recipe applied to every manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    /// Clockwise quarter turns, each in `0..4`.
    pub turns: Vec<u8>,
    pub resize_to: Option<(usize, usize)>,
    pub resize_mode: ResizeMode,
    pub grayscale: bool,
    /// Also copy the untouched originals into the output tree.
    pub keep_originals: bool,
    pub allow_duplicate_turns: bool,
}

impl Default for AugmentSpec {
    /// 90, 180, 270 and 360 degrees, keeping the originals.
    fn default() -> Self {
        Self {
            turns: vec![1, 2, 3, 0],
            resize_to: None,
            resize_mode: ResizeMode::default(),
            grayscale: false,
            keep_originals: true,
            allow_duplicate_turns: false,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.turns.is_empty() {
            return Err(DatasetError::InvalidSpec("no rotation turns given".into()));
        }
        if let Some(t) = self.turns.iter().find(|&&t| t > 3) {
            return Err(DatasetError::InvalidSpec(format!("turn {t} is not in 0..=3")));
        }
        let unique: HashSet<_> = self.turns.iter().collect();
        if unique.len() != self.turns.len() && !self.allow_duplicate_turns {
            return Err(DatasetError::InvalidSpec("duplicate rotation turns".into()));
        }
        if let Some((w, h)) = self.resize_to {
            if w == 0 || h == 0 {
                return Err(DatasetError::InvalidSpec(format!("resize target {w}x{h}")));
            }
        }
        Ok(())
    }
}

/// A per-file failure that did not stop the augmentation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AugmentFailure {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub manifest: DatasetManifest,
    pub failures: Vec<AugmentFailure>,
}

/// Output stem for a rotated copy: `<stem>_r<degrees>`.
pub fn augmented_stem(stem: &str, turns: u8) -> String {
    format!("{stem}_r{}", 90 * turns as u32)
}

fn process(img: &imaging::Raster, turns: u8, spec: &AugmentSpec) -> Result<imaging::Raster, ImageError> {
    let mut out = imaging::rotate_quarter(img, turns);
    if spec.grayscale {
        out = imaging::to_grayscale(&out);
    }
    if let Some((w, h)) = spec.resize_to {
        out = imaging::resize(&out, w, h, spec.resize_mode)?;
    }
    Ok(out)
}

fn rotate_labels(file: &LabelFile, turns: u8) -> LabelFile {
    LabelFile::new(
        file.image_id.clone(),
        file.objects
            .iter()
            .map(|o| Annotation {
                class_id: o.class_id,
                bbox: imaging::rotate_box(&o.bbox, turns),
            })
            .collect(),
    )
}

/// Writes rotated (and optionally grayscale/resized) copies of every image with matching
/// rotated label files under `out_dir/images` and `out_dir/labels`.
///
/// Each variant keeps its source entry's split. The returned manifest is rooted at `out_dir`
/// and lists, per input entry, the original copy (when kept) followed by one entry per turn.
pub fn augment(
    manifest: &DatasetManifest,
    spec: &AugmentSpec,
    out_dir: &Path,
    label_map: &LabelMap,
) -> Result<AugmentOutput, DatasetError> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    fs::create_dir_all(&labels_dir).map_err(io_err(&labels_dir))?;

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut used_stems = HashSet::new();

    for entry in &manifest.entries {
        let image_path = manifest.resolve(&entry.image);
        let label_path = manifest.resolve(&entry.label);
        let stem = entry.image_stem();
        let loaded = imaging::load_image(&image_path)
            .map_err(|e| (image_path.clone(), e.to_string()))
            .and_then(|img| {
                let text = fs::read_to_string(&label_path).map_err(|e| (label_path.clone(), e.to_string()))?;
                let labels =
                    parse_label_file(&text, &stem, label_map).map_err(|e| (label_path.clone(), e.to_string()))?;
                Ok((img, labels))
            });
        let (img, labels) = match loaded {
            Ok(v) => v,
            Err((path, message)) => {
                failures.push(AugmentFailure {
                    path: path.to_string_lossy().into_owned(),
                    message,
                });
                continue;
            }
        };

        let mut variants: Vec<(String, u8)> = Vec::new();
        if spec.keep_originals {
            variants.push((stem.clone(), 0));
        }
        variants.extend(spec.turns.iter().map(|&t| (augmented_stem(&stem, t), t)));

        for (k, (out_stem, turns)) in variants.into_iter().enumerate() {
            let unique_stem = if used_stems.contains(&out_stem) && spec.allow_duplicate_turns {
                format!("{out_stem}_{k}")
            } else {
                out_stem
            };
            if !used_stems.insert(unique_stem.clone()) {
                failures.push(AugmentFailure {
                    path: image_path.to_string_lossy().into_owned(),
                    message: format!("output name `{unique_stem}` already used by another entry"),
                });
                continue;
            }
            let raster = process(&img, turns, spec)?;
            let ext = if raster.channels() == 1 { "pgm" } else { "ppm" };
            let rel_image = PathBuf::from("images").join(format!("{unique_stem}.{ext}"));
            let rel_label = PathBuf::from("labels").join(format!("{unique_stem}.txt"));
            imaging::save_image(&out_dir.join(&rel_image), &raster)?;
            let rotated = rotate_labels(&labels, turns);
            let label_out = out_dir.join(&rel_label);
            fs::write(&label_out, serialize_yolo(&rotated)).map_err(io_err(&label_out))?;
            entries.push(ManifestEntry::new(rel_image, rel_label, entry.split));
        }
    }
    Ok(AugmentOutput {
        manifest: DatasetManifest::new(out_dir, entries),
        failures,
    })
}

/// Ratios for train/val/test and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Keep rotated copies (`_r<deg>` suffix) in their source image's split.
    pub grouped: bool,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self, DatasetError> {
        let spec = Self {
            ratios,
            seed,
            grouped: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 80:10:10.
    pub fn addsl(seed: u64) -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed,
            grouped: true,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(DatasetError::InvalidSpec(format!("negative ratio in {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidSpec(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// One step of the splitmix64 generator.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Sort key of one split unit: `splitmix64(fnv1a64(path) ^ stream)`, where `stream` is the
/// first splitmix64 output for `seed`.
pub fn shuffle_key(path: &str, seed: u64) -> u64 {
    let mut s = seed;
    let stream = splitmix64(&mut s);
    let mut k = fnv1a64(path.as_bytes()) ^ stream;
    splitmix64(&mut k)
}

/// Cut points `(train_end, val_end)` for `n` units.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    // The small epsilon keeps exact products like 10 * 0.9 from landing just below an integer.
    let cut = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
    let a = cut(ratios[0]);
    let b = cut(ratios[0] + ratios[1]).max(a);
    (a, b)
}

/// Deterministically reassigns every entry to train/val/test.
///
/// Units (single entries, or source-image groups when `spec.grouped`) are ordered by
/// [`shuffle_key`] and cut at `floor(n * r_train)` and `floor(n * (r_train + r_val))`. The
/// output keeps the input entry order.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest, DatasetError> {
    spec.validate()?;
    let manifest_path = |p: &Path| {
        p.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    };
    let unit_of: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| {
            let p = manifest_path(&e.image);
            if spec.grouped {
                group_key(Path::new(&p))
            } else {
                p
            }
        })
        .collect();
    let mut units: Vec<&String> = unit_of.iter().collect::<HashSet<_>>().into_iter().collect();
    let n = units.len();
    if n < 3 {
        return Err(DatasetError::TooFewEntries(n));
    }
    units.sort_by(|a, b| {
        shuffle_key(a, spec.seed)
            .cmp(&shuffle_key(b, spec.seed))
            .then_with(|| a.cmp(b))
    });
    let (a, b) = split_counts(n, spec.ratios);
    let sizes = [a, b - a, n - b];
    for (k, split) in Split::ALL.iter().enumerate() {
        if sizes[k] == 0 && spec.ratios[k] > 0.0 {
            return Err(DatasetError::DegenerateSplit {
                split: *split,
                ratio: spec.ratios[k],
            });
        }
    }
    let assignment: BTreeMap<&str, Split> = units
        .iter()
        .enumerate()
        .map(|(rank, u)| {
            let s = if rank < a {
                Split::Train
            } else if rank < b {
                Split::Val
            } else {
                Split::Test
            };
            (u.as_str(), s)
        })
        .collect();
    let entries = manifest
        .entries
        .iter()
        .zip(&unit_of)
        .map(|(e, u)| ManifestEntry::new(e.image.clone(), e.label.clone(), assignment[u.as_str()]))
        .collect();
    Ok(DatasetManifest::new(manifest.root.clone(), entries))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassStats {
    pub class_id: usize,
    pub name: String,
    /// Images containing at least one object of this class.
    pub images: usize,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizeBucket {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub classes: Vec<ClassStats>,
    pub split_counts: [usize; 3],
    pub images: usize,
    pub objects: usize,
    /// Images without any object.
    pub negatives: usize,
    pub image_sizes: Vec<SizeBucket>,
}

impl StatsReport {
    pub fn classes_present(&self) -> usize {
        self.classes.iter().filter(|c| c.objects > 0).count()
    }
}

/// Per-class, per-split and image-size counts. Independent of entry order.
pub fn stats(manifest: &DatasetManifest, label_map: &LabelMap) -> Result<StatsReport, DatasetError> {
    let mut classes: Vec<ClassStats> = label_map
        .names()
        .iter()
        .enumerate()
        .map(|(class_id, name)| ClassStats {
            class_id,
            name: name.clone(),
            images: 0,
            objects: 0,
        })
        .collect();
    let mut sizes: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut objects = 0;
    let mut negatives = 0;
    for e in &manifest.entries {
        let info = imaging::load_image_info(&manifest.resolve(&e.image))?;
        *sizes.entry((info.width, info.height, info.channels)).or_default() += 1;
        let label_path = manifest.resolve(&e.label);
        let text = fs::read_to_string(&label_path).map_err(io_err(&label_path))?;
        let file = parse_label_file(&text, &e.image_stem(), label_map)?;
        if file.objects.is_empty() {
            negatives += 1;
        }
        let mut seen = HashSet::new();
        for o in &file.objects {
            classes[o.class_id].objects += 1;
            if seen.insert(o.class_id) {
                classes[o.class_id].images += 1;
            }
        }
        objects += file.objects.len();
    }
    Ok(StatsReport {
        classes,
        split_counts: manifest.split_counts(),
        images: manifest.len(),
        objects,
        negatives,
        image_sizes: sizes
            .into_iter()
            .map(|((width, height, channels), count)| SizeBucket {
                width,
                height,
                channels,
                count,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::imaging::{save_image, Raster};

    fn entries(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            "/nowhere",
            (0..n)
                .map(|i| ManifestEntry::new(format!("images/{i:03}.pgm"), format!("labels/{i:03}.txt"), Split::Train))
                .collect(),
        )
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of splitmix64 seeded with 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn split_252_by_floor_rule() {
        let m = split(&entries(252), &SplitSpec::addsl(7)).unwrap();
        assert_eq!(m.split_counts(), [201, 25, 26]);
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let m = entries(40);
        let a = split(&m, &SplitSpec::addsl(1)).unwrap();
        assert_eq!(a, split(&m, &SplitSpec::addsl(1)).unwrap());
        let b = split(&m, &SplitSpec::addsl(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn split_all_train() {
        let m = split(&entries(5), &SplitSpec::new([1.0, 0.0, 0.0], 3).unwrap()).unwrap();
        assert_eq!(m.split_counts(), [5, 0, 0]);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split(&entries(2), &SplitSpec::addsl(0)),
            Err(DatasetError::TooFewEntries(2))
        ));
        assert!(matches!(
            split(&entries(5), &SplitSpec::addsl(0)),
            Err(DatasetError::DegenerateSplit { split: Split::Val, .. })
        ));
        assert!(SplitSpec::new([0.5, 0.5, 0.5], 0).is_err());
        assert!(SplitSpec::new([1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn split_cut_points() {
        assert_eq!(split_counts(252, [0.8, 0.1, 0.1]), (201, 226));
        assert_eq!(split_counts(10, [0.7, 0.2, 0.1]), (7, 9));
        assert_eq!(split_counts(3, [1.0, 0.0, 0.0]), (3, 3));
    }

    #[test]
    fn grouped_split_keeps_rotations_together() {
        let mut list = Vec::new();
        for i in 0..30 {
            for suffix in ["", "_r90", "_r180", "_r270", "_r0"] {
                list.push(ManifestEntry::new(
                    format!("images/s{i}{suffix}.pgm"),
                    format!("labels/s{i}{suffix}.txt"),
                    Split::Train,
                ));
            }
        }
        let m = DatasetManifest::new(".", list);
        let out = split(&m, &SplitSpec::addsl(11)).unwrap();
        for chunk in out.entries.chunks(5) {
            assert!(chunk.iter().all(|e| e.split == chunk[0].split));
        }
        assert_eq!(out.split_counts(), [24 * 5, 3 * 5, 3 * 5]);

        let flat = split(&m, &SplitSpec { grouped: false, ..SplitSpec::addsl(11) }).unwrap();
        assert_eq!(flat.split_counts(), [120, 15, 15]);
    }

    fn tiny_tree(root: &Path, per_class: usize, classes: usize) -> DatasetManifest {
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("labels")).unwrap();
        let mut list = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                let stem = format!("c{c}_{k}");
                let data: Vec<u8> = (0..6 * 4 * 3).map(|v| (v * 7 + c + k) as u8).collect();
                save_image(&root.join(format!("images/{stem}.ppm")), &Raster::new(6, 4, 3, data).unwrap()).unwrap();
                let file = LabelFile::new(
                    stem.clone(),
                    vec![Annotation {
                        class_id: c,
                        bbox: BBox::new(0.25, 0.375, 0.25, 0.5).unwrap(),
                    }],
                );
                fs::write(root.join(format!("labels/{stem}.txt")), serialize_yolo(&file)).unwrap();
                list.push(ManifestEntry::new(format!("images/{stem}.ppm"), format!("labels/{stem}.txt"), Split::Train));
            }
        }
        DatasetManifest::new(root, list)
    }

    #[test]
    fn augment_counts_and_names() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = tiny_tree(src.path(), 6, 1);
        let res = augment(&m, &AugmentSpec::default(), out.path(), &LabelMap::addsl()).unwrap();
        assert!(res.failures.is_empty());
        assert_eq!(res.manifest.len(), 30);
        let names: Vec<_> = res.manifest.entries[..5].iter().map(|e| e.image_stem()).collect();
        assert_eq!(names, ["c0_0", "c0_0_r90", "c0_0_r180", "c0_0_r270", "c0_0_r0"]);
        let r90 = imaging::load_image(&out.path().join("images/c0_0_r90.ppm")).unwrap();
        assert_eq!((r90.width(), r90.height()), (4, 6));
        let text = fs::read_to_string(out.path().join("labels/c0_0_r90.txt")).unwrap();
        // (0.25, 0.375, 0.25, 0.5) turned once clockwise.
        assert_eq!(text, "0 0.625000 0.250000 0.500000 0.250000\n");
    }

    #[test]
    fn augment_identity_turn_copies_pixels() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = tiny_tree(src.path(), 2, 1);
        let spec = AugmentSpec {
            turns: vec![0],
            keep_originals: false,
            ..Default::default()
        };
        let res = augment(&m, &spec, out.path(), &LabelMap::addsl()).unwrap();
        assert_eq!(res.manifest.len(), 2);
        for (a, b) in m.entries.iter().zip(&res.manifest.entries) {
            assert_eq!(b.image_stem(), format!("{}_r0", a.image_stem()));
            let pa = imaging::load_image(&m.resolve(&a.image)).unwrap();
            let pb = imaging::load_image(&res.manifest.resolve(&b.image)).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn augment_grayscale_resize_and_failures() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let mut m = tiny_tree(src.path(), 1, 2);
        m.entries.push(ManifestEntry::new("images/missing.ppm", "labels/missing.txt", Split::Test));
        let spec = AugmentSpec {
            turns: vec![1],
            grayscale: true,
            resize_to: Some((8, 8)),
            ..Default::default()
        };
        let res = augment(&m, &spec, out.path(), &LabelMap::addsl()).unwrap();
        assert_eq!(res.failures.len(), 1);
        assert_eq!(res.manifest.len(), 4);
        let img = imaging::load_image(&res.manifest.resolve(&res.manifest.entries[1].image)).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (8, 8, 1));
        assert!(res.manifest.entries[1].image.to_string_lossy().ends_with(".pgm"));
    }

    #[test]
    fn augment_spec_validation() {
        let bad = |turns: Vec<u8>| AugmentSpec {
            turns,
            ..Default::default()
        };
        assert!(bad(vec![]).validate().is_err());
        assert!(bad(vec![4]).validate().is_err());
        assert!(bad(vec![1, 1]).validate().is_err());
        let dup = AugmentSpec {
            allow_duplicate_turns: true,
            ..bad(vec![1, 1])
        };
        assert!(dup.validate().is_ok());
    }

    #[test]
    fn stats_counts_and_order_invariance() {
        let src = tempfile::tempdir().unwrap();
        let m = tiny_tree(src.path(), 2, 3);
        let map = LabelMap::addsl();
        let s = stats(&m, &map).unwrap();
        assert_eq!(s.classes.len(), 36);
        assert_eq!(s.classes_present(), 3);
        assert_eq!(s.classes[1].images, 2);
        assert_eq!(s.images, 6);
        assert_eq!(s.image_sizes, vec![SizeBucket { width: 6, height: 4, channels: 3, count: 6 }]);
        let mut rev = m.clone();
        rev.entries.reverse();
        assert_eq!(stats(&rev, &map).unwrap(), s);

        let empty = stats(&DatasetManifest::default(), &map).unwrap();
        assert_eq!(empty.images, 0);
        assert!(empty.classes.iter().all(|c| c.objects == 0 && c.images == 0));
        assert!(empty.image_sizes.is_empty());
    }
}
