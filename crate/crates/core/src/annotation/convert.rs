//! YOLO <-> PASCAL VOC and YOLO <-> COCO conversion.
//!
//! VOC boxes are 1-based inclusive integer pixels computed as `round(edge * size) + 1` and
//! clamped to `[1, size]`. The reverse map is `(v - 1) / size`, which recovers every edge
//! within half a pixel unless the clamp fired (an edge within half a pixel of the right or
//! bottom border), in which case the error is at most one pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::yolo::{parse_label_file, Annotation, LabelFile};
use super::{AnnotationError, LabelMap};
use crate::geometry::BBox;
use crate::imaging;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// `[xmin, ymin, xmax, ymax]` in 1-based inclusive pixels.
pub fn voc_corners(b: &BBox, size: ImageSize) -> [u32; 4] {
    let r = b.rect();
    let px = |v: f64, dim: u32| -> u32 {
        let p = (v * dim as f64).round() + 1.0;
        p.clamp(1.0, dim as f64) as u32
    };
    [
        px(r.x1, size.width),
        px(r.y1, size.height),
        px(r.x2, size.width),
        px(r.y2, size.height),
    ]
}

pub fn to_voc(file: &LabelFile, size: ImageSize, label_map: &LabelMap) -> String {
    let mut out = String::new();
    out.push_str("<annotation>\n");
    writeln!(out, "  <filename>{}</filename>", xml_escape(&file.image_id)).unwrap();
    out.push_str("  <size>\n");
    writeln!(out, "    <width>{}</width>", size.width).unwrap();
    writeln!(out, "    <height>{}</height>", size.height).unwrap();
    out.push_str("  </size>\n");
    for o in &file.objects {
        let name = label_map
            .name(o.class_id)
            .map(str::to_string)
            .unwrap_or_else(|| o.class_id.to_string());
        let [xmin, ymin, xmax, ymax] = voc_corners(&o.bbox, size);
        out.push_str("  <object>\n");
        writeln!(out, "    <name>{}</name>", xml_escape(&name)).unwrap();
        out.push_str("    <pose>Unspecified</pose>\n");
        out.push_str("    <truncated>0</truncated>\n");
        out.push_str("    <difficult>0</difficult>\n");
        out.push_str("    <bndbox>\n");
        writeln!(out, "      <xmin>{xmin}</xmin>").unwrap();
        writeln!(out, "      <ymin>{ymin}</ymin>").unwrap();
        writeln!(out, "      <xmax>{xmax}</xmax>").unwrap();
        writeln!(out, "      <ymax>{ymax}</ymax>").unwrap();
        out.push_str("    </bndbox>\n");
        out.push_str("  </object>\n");
    }
    out.push_str("</annotation>\n");
    out
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, tag: &str) -> Result<&'a str, AnnotationError> {
    child(node, tag)
        .and_then(|n| n.text())
        .map(str::trim)
        .ok_or_else(|| AnnotationError::Voc(format!("missing <{tag}>")))
}

fn child_num(node: roxmltree::Node<'_, '_>, tag: &str) -> Result<f64, AnnotationError> {
    let text = child_text(node, tag)?;
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| AnnotationError::Voc(format!("<{tag}> is not a number: {text}")))
}

/// Reads a VOC annotation back into YOLO form. Class names resolve through the label map
/// (names or aliases).
pub fn from_voc(xml: &str, label_map: &LabelMap) -> Result<(LabelFile, ImageSize), AnnotationError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| AnnotationError::Voc(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(AnnotationError::Voc("root element is not <annotation>".into()));
    }
    let image_id = child(root, "filename")
        .and_then(|n| n.text())
        .unwrap_or("")
        .trim()
        .to_string();
    let size_node = child(root, "size").ok_or_else(|| AnnotationError::Voc("missing <size>".into()))?;
    let (w, h) = (child_num(size_node, "width")?, child_num(size_node, "height")?);
    if w < 1.0 || h < 1.0 {
        return Err(AnnotationError::Voc(format!("image size {w}x{h}")));
    }
    let size = ImageSize::new(w as u32, h as u32);

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")?;
        let class_id = label_map
            .id_of(name)
            .ok_or_else(|| AnnotationError::Voc(format!("unknown class `{name}`")))?;
        let bb = child(obj, "bndbox").ok_or_else(|| AnnotationError::Voc("missing <bndbox>".into()))?;
        let x1 = (child_num(bb, "xmin")? - 1.0) / w;
        let y1 = (child_num(bb, "ymin")? - 1.0) / h;
        let x2 = (child_num(bb, "xmax")? - 1.0) / w;
        let y2 = (child_num(bb, "ymax")? - 1.0) / h;
        let bbox = BBox::from_corners(x1, y1, x2, y2)
            .map_err(|e| AnnotationError::Voc(format!("object `{name}`: {e}")))?;
        objects.push(Annotation { class_id, bbox });
    }
    Ok((LabelFile::new(image_id, objects), size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in absolute pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    pub supercategory: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Builds a COCO document from in-memory label files. Image and annotation ids are dense
/// from 1 in input order; category ids are `class_id + 1`.
pub fn to_coco_from_files(items: &[(String, ImageSize, LabelFile)], label_map: &LabelMap) -> CocoDataset {
    let mut ds = CocoDataset {
        categories: label_map
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u64 + 1,
                name: name.clone(),
                supercategory: "sign".into(),
            })
            .collect(),
        ..Default::default()
    };
    for (k, (file_name, size, file)) in items.iter().enumerate() {
        let image_id = k as u64 + 1;
        ds.images.push(CocoImage {
            id: image_id,
            file_name: file_name.clone(),
            width: size.width,
            height: size.height,
        });
        let (fw, fh) = (size.width as f64, size.height as f64);
        for o in &file.objects {
            let r = o.bbox.rect();
            let bbox = [r.x1 * fw, r.y1 * fh, o.bbox.w() * fw, o.bbox.h() * fh];
            ds.annotations.push(CocoAnnotation {
                id: ds.annotations.len() as u64 + 1,
                image_id,
                category_id: o.class_id as u64 + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
        }
    }
    ds
}

/// Reads every image header and label file of a manifest and renders one COCO JSON document.
pub fn to_coco(manifest: &DatasetManifest, label_map: &LabelMap) -> Result<String, AnnotationError> {
    let mut items = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let info = imaging::load_image_info(&manifest.resolve(&e.image))?;
        let label_path = manifest.resolve(&e.label);
        let text = fs::read_to_string(&label_path).map_err(|source| AnnotationError::Io {
            path: label_path.clone(),
            source,
        })?;
        let file = parse_label_file(&text, &e.image_stem(), label_map)?;
        items.push((
            e.image.to_string_lossy().into_owned(),
            ImageSize::new(info.width as u32, info.height as u32),
            file,
        ));
    }
    let ds = to_coco_from_files(&items, label_map);
    Ok(serde_json::to_string_pretty(&ds).expect("coco document serializes") + "\n")
}

/// Reads a COCO document back into per-image label files, in `images[]` order.
pub fn from_coco(json: &str, label_map: &LabelMap) -> Result<Vec<(String, ImageSize, LabelFile)>, AnnotationError> {
    let ds: CocoDataset = serde_json::from_str(json).map_err(|e| AnnotationError::Coco(e.to_string()))?;
    let mut out: Vec<(String, ImageSize, LabelFile)> = ds
        .images
        .iter()
        .map(|im| {
            let stem = Path::new(&im.file_name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (im.file_name.clone(), ImageSize::new(im.width, im.height), LabelFile::new(stem, vec![]))
        })
        .collect();
    for a in &ds.annotations {
        let slot = ds
            .images
            .iter()
            .position(|im| im.id == a.image_id)
            .ok_or_else(|| AnnotationError::Coco(format!("annotation {} has unknown image {}", a.id, a.image_id)))?;
        let cat = ds
            .categories
            .iter()
            .find(|c| c.id == a.category_id)
            .ok_or_else(|| AnnotationError::Coco(format!("unknown category {}", a.category_id)))?;
        let class_id = label_map
            .id_of(&cat.name)
            .ok_or_else(|| AnnotationError::Coco(format!("category `{}` not in label map", cat.name)))?;
        let size = out[slot].1;
        let (fw, fh) = (size.width as f64, size.height as f64);
        let [x, y, w, h] = a.bbox;
        let bbox = BBox::new((x + w / 2.0) / fw, (y + h / 2.0) / fh, w / fw, h / fh)
            .map_err(|e| AnnotationError::Coco(format!("annotation {}: {e}", a.id)))?;
        out[slot].2.objects.push(Annotation { class_id, bbox });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(objs: &[(usize, f64, f64, f64, f64)]) -> LabelFile {
        LabelFile::new(
            "img",
            objs.iter()
                .map(|&(c, cx, cy, w, h)| Annotation {
                    class_id: c,
                    bbox: BBox::new(cx, cy, w, h).unwrap(),
                })
                .collect(),
        )
    }

    const S416: ImageSize = ImageSize {
        width: 416,
        height: 416,
    };

    #[test]
    fn voc_corner_examples() {
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(voc_corners(&b, S416), [105, 105, 313, 313]);
        assert_eq!(voc_corners(&BBox::full(), S416), [1, 1, 416, 416]);
    }

    #[test]
    fn voc_document_round_trip() {
        let map = LabelMap::addsl();
        let f = file(&[(0, 0.5, 0.5, 0.5, 0.5), (33, 0.3, 0.6, 0.2, 0.1)]);
        let xml = to_voc(&f, S416, &map);
        assert!(xml.contains("<name>7</name>"));
        assert!(xml.contains("<xmin>105</xmin>"));
        let (back, size) = from_voc(&xml, &map).unwrap();
        assert_eq!(size, S416);
        assert_eq!(back.image_id, "img");
        assert_eq!(back.objects[1].class_id, 33);
        for (a, b) in f.objects.iter().zip(&back.objects) {
            let (ra, rb) = (a.bbox.rect(), b.bbox.rect());
            for (u, v) in [(ra.x1, rb.x1), (ra.y1, rb.y1), (ra.x2, rb.x2), (ra.y2, rb.y2)] {
                assert!((u - v).abs() <= 0.5 / 416.0 + 1e-12);
            }
        }
        // Stable after one cycle.
        assert_eq!(to_voc(&back, size, &map), xml);
    }

    #[test]
    fn voc_accepts_aliases_and_rejects_garbage() {
        let map = LabelMap::addsl();
        let xml = "<annotation><size><width>10</width><height>10</height></size>\
                   <object><name>SEKS</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>6</xmax><ymax>6</ymax></bndbox></object></annotation>";
        let (f, _) = from_voc(xml, &map).unwrap();
        assert_eq!(f.objects[0].class_id, 32);
        assert!(from_voc("<annotation>", &map).is_err());
        assert!(from_voc("<other/>", &map).is_err());
        let unknown = xml.replace("SEKS", "SEVEN");
        assert!(from_voc(&unknown, &map).is_err());
    }

    #[test]
    fn coco_bbox_example() {
        let map = LabelMap::addsl();
        let items = vec![("images/a.pgm".to_string(), S416, file(&[(4, 0.5, 0.5, 0.25, 0.25)]))];
        let ds = to_coco_from_files(&items, &map);
        assert_eq!(ds.annotations[0].bbox, [156.0, 156.0, 104.0, 104.0]);
        assert_eq!(ds.annotations[0].category_id, 5);
        assert_eq!(ds.categories.len(), 36);
        assert_eq!(ds.categories[0].id, 1);
        let json = serde_json::to_string(&ds).unwrap();
        assert!(json.contains("[156.0,156.0,104.0,104.0]"));
        let back = from_coco(&json, &map).unwrap();
        assert_eq!(back[0].2.objects[0].class_id, 4);
        assert!(back[0].2.objects[0].bbox.max_abs_diff(&items[0].2.objects[0].bbox) < 1e-12);
    }

    #[test]
    fn coco_empty() {
        let empty_map = LabelMap::new(vec![]).unwrap();
        let json = serde_json::to_value(to_coco_from_files(&[], &empty_map)).unwrap();
        assert_eq!(json, serde_json::json!({"images": [], "annotations": [], "categories": []}));
        let ds = to_coco_from_files(&[], &LabelMap::addsl());
        assert!(ds.images.is_empty() && ds.annotations.is_empty());
        assert_eq!(ds.categories.len(), 36);
    }

    #[test]
    fn coco_ids_are_dense() {
        let map = LabelMap::addsl();
        let items = vec![
            ("a".to_string(), S416, file(&[(1, 0.5, 0.5, 0.2, 0.2), (2, 0.3, 0.3, 0.2, 0.2)])),
            ("b".to_string(), S416, file(&[])),
            ("c".to_string(), S416, file(&[(3, 0.5, 0.5, 0.2, 0.2)])),
        ];
        let ds = to_coco_from_files(&items, &map);
        let ids: Vec<_> = ds.annotations.iter().map(|a| (a.id, a.image_id)).collect();
        assert_eq!(ids, vec![(1, 1), (2, 1), (3, 3)]);
    }
}
