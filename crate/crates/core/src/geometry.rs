//! Axis-aligned box arithmetic: IoU, GIoU, enclosing box and non-maximum suppression.
//!
//! Boxes are stored in normalized center format ([`BBox`]). The overlap math runs on
//! corner-format [`Rect`]s, which are not tied to the unit image and are also used for
//! unnormalized test geometry and for decoded predictions that may leave the image.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when checking that a box lies inside the unit image.
pub const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box size must be positive, got w={w} h={h}")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("box coordinate is not finite")]
    NotFinite,
    #[error("box leaves the unit image: {edge} edge at {value}")]
    OutOfBounds { edge: &'static str, value: f64 },
}

/// Corner-format rectangle `[x1, x2] x [y1, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    /// Smallest axis-aligned rectangle containing both.
    pub fn enclosing(&self, other: &Rect) -> Rect {
        Rect {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }

    /// `IoU - (area(C) - area(union)) / area(C)` with `C` the enclosing rectangle.
    pub fn giou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = self.enclosing(other).area();
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        let iou = (inter / union).clamp(0.0, 1.0);
        iou - (hull - union) / hull
    }
}

/// Normalized center-format box. Always has positive size and lies inside the unit image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NotFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::NonPositiveSize { w, h });
        }
        let r = Rect::from_center(cx, cy, w, h);
        let checks = [
            ("left", r.x1, r.x1 >= -BOUNDS_EPS),
            ("top", r.y1, r.y1 >= -BOUNDS_EPS),
            ("right", r.x2, r.x2 <= 1.0 + BOUNDS_EPS),
            ("bottom", r.y2, r.y2 <= 1.0 + BOUNDS_EPS),
        ];
        for (edge, value, ok) in checks {
            if !ok {
                return Err(GeometryError::OutOfBounds { edge, value });
            }
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from normalized corners.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// The full-image box.
    pub fn full() -> Self {
        Self {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        self.rect().iou(&other.rect())
    }

    pub fn giou(&self, other: &BBox) -> f64 {
        self.rect().giou(&other.rect())
    }

    pub fn enclosing(&self, other: &BBox) -> BBox {
        let (ra, rb) = (self.rect(), other.rect());
        let r = ra.enclosing(&rb);
        if r == ra {
            return *self;
        }
        if r == rb {
            return *other;
        }
        // Both inputs are inside the unit image, so is their hull.
        BBox {
            cx: (r.x1 + r.x2) / 2.0,
            cy: (r.y1 + r.y2) / 2.0,
            w: r.x2 - r.x1,
            h: r.y2 - r.y1,
        }
    }

    /// Largest per-coordinate absolute difference.
    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        [
            self.cx - other.cx,
            self.cy - other.cy,
            self.w - other.w,
            self.h - other.h,
        ]
        .iter()
        .fold(0.0_f64, |m, d| m.max(d.abs()))
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    a.giou(b)
}

pub fn enclosing(a: &BBox, b: &BBox) -> BBox {
    a.enclosing(b)
}

/// A decoded `(box, class, confidence)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Self {
        Self {
            bbox,
            class_id,
            confidence,
        }
    }
}

/// Ranking used everywhere detections are ordered: confidence descending, then class id,
/// center x and center y ascending.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.cx().total_cmp(&b.bbox.cx()))
        .then(a.bbox.cy().total_cmp(&b.bbox.cy()))
}

/// Greedy non-maximum suppression.
///
/// A candidate is dropped when its IoU with an already kept detection is strictly greater
/// than `iou_threshold` (and, with `class_aware`, the two share a class). The survivors come
/// back in [`rank_order`].
pub fn nms(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));

    let mut kept: Vec<Detection> = Vec::new();
    for cand in order {
        let suppressed = kept.iter().any(|k| {
            (!class_aware || k.class_id == cand.class_id) && k.bbox.iou(&cand.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&b(0.5, 0.5, 1.0, 1.0)), 1.0);
        assert_eq!(area(&b(0.5, 0.5, 0.5, 0.5)), 0.25);
        assert!((area(&b(0.2, 0.4, 0.1, 0.3)) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn iou_examples() {
        let a = b(0.3, 0.6, 0.2, 0.4);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&b(0.5, 0.5, 0.5, 0.5), &b(0.5, 0.5, 1.0, 1.0)) - 0.25).abs() < 1e-15);
        assert_eq!(iou(&b(0.1, 0.1, 0.1, 0.1), &b(0.9, 0.9, 0.1, 0.1)), 0.0);
    }

    #[test]
    fn enclosing_examples() {
        let a = b(0.3, 0.6, 0.2, 0.4);
        assert_eq!(enclosing(&a, &a), a);

        let r = Rect::new(0.0, 0.0, 1.0, 1.0).enclosing(&Rect::new(2.0, 0.0, 3.0, 1.0));
        assert_eq!(r, Rect::new(0.0, 0.0, 3.0, 1.0));

        let outer = b(0.5, 0.5, 0.8, 0.8);
        let inner = b(0.5, 0.4, 0.2, 0.1);
        assert!(enclosing(&outer, &inner).max_abs_diff(&outer) < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = b(0.3, 0.6, 0.2, 0.4);
        assert_eq!(giou(&a, &a), 1.0);

        let g = Rect::new(0.0, 0.0, 1.0, 1.0).giou(&Rect::new(2.0, 0.0, 3.0, 1.0));
        assert!((g + 1.0 / 3.0).abs() < 1e-15);

        let outer = b(0.5, 0.5, 0.8, 0.8);
        let inner = b(0.5, 0.4, 0.2, 0.1);
        assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_and_outside_boxes() {
        assert!(matches!(
            BBox::new(0.5, 0.5, 0.0, 0.2),
            Err(GeometryError::NonPositiveSize { .. })
        ));
        assert!(matches!(
            BBox::new(0.05, 0.5, 0.2, 0.2),
            Err(GeometryError::OutOfBounds { edge: "left", .. })
        ));
        assert!(BBox::new(0.5, f64::NAN, 0.2, 0.2).is_err());
        // Within the tolerance.
        assert!(BBox::new(0.1 - 5e-10, 0.5, 0.2, 0.2).is_ok());
    }

    #[test]
    fn nms_examples() {
        let d1 = Detection::new(b(0.5, 0.5, 0.4, 0.4), 3, 0.9);
        let d2 = Detection::new(b(0.51, 0.5, 0.4, 0.4), 3, 0.8);
        assert!(d1.bbox.iou(&d2.bbox) > 0.45);
        assert_eq!(nms(&[d2, d1], 0.45, true), vec![d1]);
        assert!(nms(&[], 0.45, true).is_empty());

        // Other classes survive class-aware suppression but not class-agnostic.
        let d3 = Detection::new(d2.bbox, 4, 0.8);
        assert_eq!(nms(&[d1, d3], 0.45, true), vec![d1, d3]);
        assert_eq!(nms(&[d1, d3], 0.45, false), vec![d1]);
    }

    #[test]
    fn nms_threshold_one_keeps_everything() {
        let d = Detection::new(b(0.5, 0.5, 0.4, 0.4), 0, 0.5);
        let out = nms(&[d, d, d], 1.0, true);
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn nms_survivors_may_tie_at_threshold() {
        let a = Detection::new(b(0.25, 0.5, 0.5, 1.0), 0, 0.9);
        let c = Detection::new(b(0.5, 0.5, 0.5, 1.0), 0, 0.8);
        let t = a.bbox.iou(&c.bbox);
        assert_eq!(nms(&[a, c], t, true).len(), 2);
        assert_eq!(nms(&[a, c], t - 1e-12, true).len(), 1);
    }
}
