//! Single-scale detection head: grid/anchor geometry, target assignment, decoding, and
//! shape / parameter arithmetic for convolution layer chains.
//!
//! Every grid entry is a record `[conf, x, y, w, h, p_0 .. p_{C-1}]`. Box fields use the
//! cell-relative parameterization `(cx * S - col, cy * S - row, w, h)`: center offsets inside
//! the owning cell and absolute normalized sizes, with no link functions.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Annotation;
use crate::geometry::{rank_order, BBox, Detection};

/// Offset of the confidence inside an entry.
pub const CONF: usize = 0;
/// Offsets of the four box fields.
pub const BOX: std::ops::Range<usize> = 1..5;
/// Offset of the first class probability.
pub const CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("object {index}: class {class_id} out of range for {classes} classes")]
    ClassOutOfRange {
        index: usize,
        class_id: usize,
        classes: usize,
    },
    #[error("grid shape {found:?} does not match expected {expected:?}")]
    GridShape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("layer {layer}: {reason}")]
    ShapeMismatch { layer: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
}

fn default_grid() -> usize {
    13
}

fn default_classes() -> usize {
    36
}

fn default_anchors() -> Vec<[f64; 2]> {
    vec![[0.15, 0.25], [0.25, 0.40], [0.35, 0.55], [0.50, 0.75]]
}

/// Head geometry: an `S x S` grid with `B` anchors per cell and `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Anchor `(w, h)` pairs in normalized image units.
    #[serde(default = "default_anchors")]
    pub anchors: Vec<[f64; 2]>,
}

impl Default for HeadConfig {
    /// 13x13 grid, 4 anchors, 36 classes.
    fn default() -> Self {
        Self {
            grid: default_grid(),
            classes: default_classes(),
            anchors: default_anchors(),
        }
    }
}

impl HeadConfig {
    pub fn new(grid: usize, classes: usize, anchors: Vec<[f64; 2]>) -> Result<Self, DetectorError> {
        let cfg = Self {
            grid,
            classes,
            anchors,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.grid == 0 {
            return Err(DetectorError::InvalidConfig("grid size must be at least 1".into()));
        }
        if self.anchors.is_empty() {
            return Err(DetectorError::InvalidConfig("need at least one anchor".into()));
        }
        if self
            .anchors
            .iter()
            .any(|[w, h]| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0))
        {
            return Err(DetectorError::InvalidConfig("anchor sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Values per grid entry, `5 + C`.
    pub fn entry_len(&self) -> usize {
        5 + self.classes
    }

    /// Output channels of the head, `B * (5 + C)`.
    pub fn channels(&self) -> usize {
        self.num_anchors() * self.entry_len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid, self.num_anchors(), self.classes)
    }

    /// Anchor with the median area (lower middle for an even count).
    pub fn median_anchor(&self) -> [f64; 2] {
        let mut a = self.anchors.clone();
        a.sort_by(|x, y| (x[0] * x[1]).total_cmp(&(y[0] * y[1])));
        a[(a.len() - 1) / 2]
    }
}

/// IoU of two `(w, h)` shapes sharing a center.
pub fn shape_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// Index of the anchor with the highest shape IoU; ties go to the lowest index.
pub fn best_anchor(anchors: &[[f64; 2]], wh: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (k, a) in anchors.iter().enumerate() {
        let v = shape_iou(*a, wh);
        if v > best_iou {
            best = k;
            best_iou = v;
        }
    }
    best
}

/// Dense `S x S x B x (5 + C)` tensor of grid entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    grid: usize,
    anchors: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(grid: usize, anchors: usize, classes: usize) -> Self {
        Self {
            grid,
            anchors,
            classes,
            data: vec![0.0; grid * grid * anchors * (5 + classes)],
        }
    }

    pub fn for_head(cfg: &HeadConfig) -> Self {
        Self::zeros(cfg.grid, cfg.num_anchors(), cfg.classes)
    }

    pub fn from_data(grid: usize, anchors: usize, classes: usize, data: Vec<f64>) -> Result<Self, DetectorError> {
        let g = Self {
            grid,
            anchors,
            classes,
            data,
        };
        g.check_len()?;
        Ok(g)
    }

    fn check_len(&self) -> Result<(), DetectorError> {
        let need = self.grid * self.grid * self.anchors * self.entry_len();
        if self.data.len() != need {
            return Err(DetectorError::InvalidConfig(format!(
                "grid data has {} values, expected {need}",
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let g: Grid = serde_json::from_str(text).map_err(|e| DetectorError::Config(e.to_string()))?;
        g.check_len()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serializes") + "\n"
    }

    /// `(S, B, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid, self.anchors, self.classes)
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn entry_len(&self) -> usize {
        5 + self.classes
    }

    pub fn num_entries(&self) -> usize {
        self.grid * self.grid * self.anchors
    }

    /// Entry number of `(col, row, anchor)`.
    #[inline]
    pub fn entry_index(&self, col: usize, row: usize, anchor: usize) -> usize {
        (row * self.grid + col) * self.anchors + anchor
    }

    /// `(col, row, anchor)` of an entry number.
    #[inline]
    pub fn entry_position(&self, entry: usize) -> (usize, usize, usize) {
        let anchor = entry % self.anchors;
        let cell = entry / self.anchors;
        (cell % self.grid, cell / self.grid, anchor)
    }

    pub fn entry(&self, entry: usize) -> &[f64] {
        let n = self.entry_len();
        &self.data[entry * n..(entry + 1) * n]
    }

    pub fn entry_mut(&mut self, entry: usize) -> &mut [f64] {
        let n = self.entry_len();
        &mut self.data[entry * n..(entry + 1) * n]
    }

    pub fn at(&self, col: usize, row: usize, anchor: usize) -> &[f64] {
        self.entry(self.entry_index(col, row, anchor))
    }

    pub fn at_mut(&mut self, col: usize, row: usize, anchor: usize) -> &mut [f64] {
        let e = self.entry_index(col, row, anchor);
        self.entry_mut(e)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_head(&self, cfg: &HeadConfig) -> Result<(), DetectorError> {
        if self.shape() != cfg.shape() {
            return Err(DetectorError::GridShape {
                expected: cfg.shape(),
                found: self.shape(),
            });
        }
        Ok(())
    }

    /// Normalized image-space box `(cx, cy, w, h)` of an entry's box fields.
    pub fn image_box(&self, entry: usize) -> [f64; 4] {
        let (col, row, _) = self.entry_position(entry);
        let e = self.entry(entry);
        let s = self.grid as f64;
        [(col as f64 + e[1]) / s, (row as f64 + e[2]) / s, e[3], e[4]]
    }
}

/// Ground truth in grid form, with the per-entry responsibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    grid: Grid,
    responsible: Vec<bool>,
}

impl TargetGrid {
    /// Rebuilds the mask from a stored grid: entries with confidence 1 are responsible.
    pub fn from_grid(grid: Grid) -> Self {
        let responsible = (0..grid.num_entries()).map(|e| grid.entry(e)[CONF] == 1.0).collect();
        Self { grid, responsible }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_grid(self) -> Grid {
        self.grid
    }

    pub fn is_responsible(&self, entry: usize) -> bool {
        self.responsible[entry]
    }

    pub fn responsible_entries(&self) -> impl Iterator<Item = usize> + '_ {
        self.responsible.iter().enumerate().filter(|(_, r)| **r).map(|(e, _)| e)
    }

    pub fn assigned_count(&self) -> usize {
        self.responsible.iter().filter(|r| **r).count()
    }
}

/// Two objects landed on the same `(cell, anchor)`; the later one was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellCollision {
    pub dropped: usize,
    pub kept: usize,
    pub col: usize,
    pub row: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub target: TargetGrid,
    pub collisions: Vec<CellCollision>,
}

/// Cell `(col, row)` owning a normalized center.
pub fn owning_cell(cx: f64, cy: f64, grid: usize) -> (usize, usize) {
    let s = grid as f64;
    let idx = |v: f64| ((v * s).floor().max(0.0) as usize).min(grid - 1);
    (idx(cx), idx(cy))
}

/// Builds the target grid: every object goes to the cell containing its center and, inside
/// it, to the anchor with the best shape IoU.
pub fn assign_targets(objects: &[Annotation], cfg: &HeadConfig) -> Result<TargetAssignment, DetectorError> {
    cfg.validate()?;
    let mut grid = Grid::for_head(cfg);
    let mut responsible = vec![false; grid.num_entries()];
    let mut owner = vec![usize::MAX; grid.num_entries()];
    let mut collisions = Vec::new();
    let s = cfg.grid as f64;

    for (index, obj) in objects.iter().enumerate() {
        if obj.class_id >= cfg.classes {
            return Err(DetectorError::ClassOutOfRange {
                index,
                class_id: obj.class_id,
                classes: cfg.classes,
            });
        }
        let b = &obj.bbox;
        let (col, row) = owning_cell(b.cx(), b.cy(), cfg.grid);
        let anchor = best_anchor(&cfg.anchors, [b.w(), b.h()]);
        let e = grid.entry_index(col, row, anchor);
        if responsible[e] {
            collisions.push(CellCollision {
                dropped: index,
                kept: owner[e],
                col,
                row,
                anchor,
            });
            continue;
        }
        responsible[e] = true;
        owner[e] = index;
        let entry = grid.entry_mut(e);
        entry[CONF] = 1.0;
        entry[1] = b.cx() * s - col as f64;
        entry[2] = b.cy() * s - row as f64;
        entry[3] = b.w();
        entry[4] = b.h();
        entry[CLASSES + obj.class_id] = 1.0;
    }
    Ok(TargetAssignment {
        target: TargetGrid { grid, responsible },
        collisions,
    })
}

fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Turns a prediction grid into detections.
///
/// Every entry whose raw confidence is at least `conf_threshold` yields one detection with
/// class `argmax(p)` and confidence `clamp(conf) * clamp(max p)`. Boxes leaving the image are
/// clipped to it; entries with non-positive size are skipped. Output is in
/// [`rank_order`](crate::geometry::rank_order).
pub fn decode(pred: &Grid, cfg: &HeadConfig, conf_threshold: f64) -> Result<Vec<Detection>, DetectorError> {
    pred.check_head(cfg)?;
    let mut out = Vec::new();
    for e in 0..pred.num_entries() {
        let entry = pred.entry(e);
        let conf = entry[CONF];
        if !(conf >= conf_threshold) {
            continue;
        }
        let [cx, cy, w, h] = pred.image_box(e);
        if !(w > 0.0 && h > 0.0 && cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            continue;
        }
        let bbox = match BBox::new(cx, cy, w, h) {
            Ok(b) => b,
            Err(_) => {
                let r = crate::geometry::Rect::from_center(cx, cy, w, h);
                let (x1, y1) = (r.x1.clamp(0.0, 1.0), r.y1.clamp(0.0, 1.0));
                let (x2, y2) = (r.x2.clamp(0.0, 1.0), r.y2.clamp(0.0, 1.0));
                match BBox::from_corners(x1, y1, x2, y2) {
                    Ok(b) => b,
                    Err(_) => continue,
                }
            }
        };
        let (class_id, prob) = if cfg.classes == 0 {
            (0, 1.0)
        } else {
            argmax(&entry[CLASSES..])
        };
        let confidence = conf.clamp(0.0, 1.0) * prob.clamp(0.0, 1.0);
        out.push(Detection {
            bbox,
            class_id,
            confidence,
        });
    }
    out.sort_by(rank_order);
    Ok(out)
}

/// Fits `k` anchors to box shapes with k-means under the `1 - shape IoU` distance.
///
/// Deterministic: centroids start at evenly spaced area quantiles and each update takes the
/// per-cluster mean. Returned anchors are sorted by area.
pub fn fit_anchors(shapes: &[[f64; 2]], k: usize, iterations: usize) -> Vec<[f64; 2]> {
    if shapes.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut sorted = shapes.to_vec();
    sorted.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    let n = sorted.len();
    let mut centroids: Vec<[f64; 2]> = (0..k).map(|i| sorted[((2 * i + 1) * n / (2 * k)).min(n - 1)]).collect();
    for _ in 0..iterations {
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for s in &sorted {
            let c = best_anchor(&centroids, *s);
            sums[c][0] += s[0];
            sums[c][1] += s[1];
            sums[c][2] += 1.0;
        }
        let next: Vec<[f64; 2]> = sums
            .iter()
            .zip(&centroids)
            .map(|(s, old)| if s[2] > 0.0 { [s[0] / s[2], s[1] / s[2]] } else { *old })
            .collect();
        if next == centroids {
            break;
        }
        centroids = next;
    }
    centroids.sort_by(|a, b| (a[0] * a[1]).partial_cmp(&(b[0] * b[1])).unwrap_or(Ordering::Equal));
    centroids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    PointwiseConv,
    Maxpool,
}

fn one() -> usize {
    1
}

/// One layer of a convolutional chain, for shape and parameter bookkeeping only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub bias: bool,
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv,
            in_ch: ch,
            out_ch: ch,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize, bias: bool) -> Self {
        Self {
            kind: LayerKind::PointwiseConv,
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias,
        }
    }

    pub fn maxpool(ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Maxpool,
            in_ch: ch,
            out_ch: ch,
            kernel,
            stride,
            padding,
            bias: false,
        }
    }

    /// A depthwise + pointwise pair standing in for `conv(in, out, k, s, p)`.
    pub fn depthwise_separable(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> [Self; 2] {
        [
            Self::depthwise(in_ch, kernel, stride, padding, bias),
            Self::pointwise(in_ch, out_ch, bias),
        ]
    }

    fn check(&self) -> Result<(), String> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kernel == 0 || self.stride == 0 {
            return Err("channels, kernel and stride must be positive".into());
        }
        match self.kind {
            LayerKind::DepthwiseConv | LayerKind::Maxpool if self.out_ch != self.in_ch => Err(format!(
                "{:?} needs out_ch == in_ch, got {} -> {}",
                self.kind, self.in_ch, self.out_ch
            )),
            LayerKind::PointwiseConv if self.kernel != 1 => {
                Err(format!("pointwise conv needs kernel 1, got {}", self.kernel))
            }
            _ => Ok(()),
        }
    }

    /// Trainable parameters of this layer.
    pub fn params(&self) -> u64 {
        let (k, i, o) = (self.kernel as u64, self.in_ch as u64, self.out_ch as u64);
        let b = |n: u64| if self.bias { n } else { 0 };
        match self.kind {
            LayerKind::Conv => k * k * i * o + b(o),
            LayerKind::DepthwiseConv => k * k * i + b(i),
            LayerKind::PointwiseConv => i * o + b(o),
            LayerKind::Maxpool => 0,
        }
    }
}

/// Feature-map shape `(height, width, channels)`.
pub type FeatureShape = (usize, usize, usize);

/// Output shape after every layer, using `floor((in + 2p - k) / s) + 1` per spatial axis.
pub fn shape_propagate(input: FeatureShape, layers: &[LayerSpec]) -> Result<Vec<FeatureShape>, DetectorError> {
    let mut cur = input;
    let mut out = Vec::with_capacity(layers.len());
    for (layer, spec) in layers.iter().enumerate() {
        spec.check().map_err(|reason| DetectorError::ShapeMismatch { layer, reason })?;
        if cur.2 != spec.in_ch {
            return Err(DetectorError::ShapeMismatch {
                layer,
                reason: format!("expects {} input channels, got {}", spec.in_ch, cur.2),
            });
        }
        let axis = |n: usize| -> Result<usize, DetectorError> {
            let padded = n + 2 * spec.padding;
            if padded < spec.kernel {
                return Err(DetectorError::ShapeMismatch {
                    layer,
                    reason: format!("kernel {} larger than padded input {padded}", spec.kernel),
                });
            }
            Ok((padded - spec.kernel) / spec.stride + 1)
        };
        cur = (axis(cur.0)?, axis(cur.1)?, spec.out_ch);
        out.push(cur);
    }
    Ok(out)
}

/// Sum of [`LayerSpec::params`] over the chain.
pub fn param_count(layers: &[LayerSpec]) -> u64 {
    layers.iter().map(LayerSpec::params).sum()
}

/// A loadable model description: optional head geometry, input shape and layer chain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub head: Option<HeadConfig>,
    /// `[height, width, channels]`.
    #[serde(default)]
    pub input: Option<[usize; 3]>,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self, DetectorError> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| DetectorError::Config(e.to_string()))?;
        if let Some(h) = &cfg.head {
            h.validate()?;
        }
        Ok(cfg)
    }
}
