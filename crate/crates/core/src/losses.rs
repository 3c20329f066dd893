//! Confidence, classification, localization and GIoU losses over a prediction grid and a
//! target grid, with analytic gradients, a finite-difference checker and a small
//! gradient-descent harness that treats every grid value as a free parameter.
//!
//! All sums run over every `(cell, anchor)` entry. Unassigned entries have zero targets and
//! there is no separate no-object weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::annotation::Annotation;
use crate::detector::{assign_targets, DetectorError, Grid, HeadConfig, TargetGrid, CLASSES, CONF};
use crate::geometry::BBox;

/// Lower clamp applied to predicted box sizes before the GIoU term.
pub const SIZE_EPS: f64 = 1e-6;
/// Loss above which gradient descent is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("grid shape {pred:?} does not match target {target:?}")]
    ShapeMismatch {
        pred: (usize, usize, usize),
        target: (usize, usize, usize),
    },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Per-component weights `(λ_conf, λ_cls, λ_loc, λ_giou)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub conf: f64,
    pub cls: f64,
    pub loc: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            conf: 1.0,
            cls: 1.0,
            loc: 1.0,
            giou: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(conf: f64, cls: f64, loc: f64, giou: f64) -> Result<Self, LossError> {
        let w = Self { conf, cls, loc, giou };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("conf", self.conf), ("cls", self.cls), ("loc", self.loc), ("giou", self.giou)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Parses `conf,cls,loc,giou`.
    pub fn parse(text: &str) -> Result<Self, LossError> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(LossError::InvalidWeights(format!("expected 4 comma-separated values, got {text:?}")));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| LossError::InvalidWeights(format!("not a number: {p:?}")))?;
        }
        Self::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub cls: f64,
    pub loc: f64,
    pub giou: f64,
    pub total: f64,
}

fn check_shapes(pred: &Grid, target: &TargetGrid) -> Result<(), LossError> {
    if !pred.same_shape(target.grid()) {
        return Err(LossError::ShapeMismatch {
            pred: pred.shape(),
            target: target.grid().shape(),
        });
    }
    Ok(())
}

fn sq(v: f64) -> f64 {
    v * v
}

fn conf_sum(pred: &Grid, target: &TargetGrid) -> f64 {
    let t = target.grid();
    (0..pred.num_entries())
        .map(|e| sq(t.entry(e)[CONF] - pred.entry(e)[CONF]))
        .sum()
}

fn cls_sum(pred: &Grid, target: &TargetGrid) -> f64 {
    let t = target.grid();
    (0..pred.num_entries())
        .map(|e| {
            t.entry(e)[CLASSES..]
                .iter()
                .zip(&pred.entry(e)[CLASSES..])
                .map(|(a, b)| sq(a - b))
                .sum::<f64>()
        })
        .sum()
}

fn has_box_target(target: &TargetGrid, e: usize) -> bool {
    let t = target.grid().entry(e);
    t[CONF] == 1.0 || t[1..5].iter().any(|v| *v != 0.0)
}

fn loc_sum(pred: &Grid, target: &TargetGrid) -> f64 {
    let t = target.grid();
    (0..pred.num_entries())
        .filter(|&e| has_box_target(target, e))
        .map(|e| (1..5).map(|k| sq(t.entry(e)[k] - pred.entry(e)[k])).sum::<f64>())
        .sum()
}

/// `λ_conf · Σ (c − p)²` over all entries.
pub fn loss_conf(pred: &Grid, target: &TargetGrid, w: &LossWeights) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(w.conf * conf_sum(pred, target))
}

/// `λ_cls · Σ Σ_c (t_c − p_c)²` over all entries.
pub fn loss_cls(pred: &Grid, target: &TargetGrid, w: &LossWeights) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(w.cls * cls_sum(pred, target))
}

/// `λ_loc · Σ ‖t − p‖²` over the four box fields of entries carrying a box target.
pub fn loss_loc(pred: &Grid, target: &TargetGrid, w: &LossWeights) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(w.loc * loc_sum(pred, target))
}

/// Predicted image-space box `[cx, cy, w, h]` with sizes clamped at [`SIZE_EPS`].
fn pred_box(pred: &Grid, e: usize) -> [f64; 4] {
    let [cx, cy, w, h] = pred.image_box(e);
    [cx, cy, w.max(SIZE_EPS), h.max(SIZE_EPS)]
}

/// IoU and enclosing slack `(area(C) − area(U)) / area(C)` of two center-form boxes, with
/// their gradients with respect to the first box.
struct GiouParts {
    iou: f64,
    slack: f64,
    d_iou: [f64; 4],
    d_slack: [f64; 4],
}

fn giou_parts(b: [f64; 4], t: [f64; 4]) -> GiouParts {
    let (x1, x2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (y1, y2) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let (tx1, tx2) = (t[0] - t[2] / 2.0, t[0] + t[2] / 2.0);
    let (ty1, ty2) = (t[1] - t[3] / 2.0, t[1] + t[3] / 2.0);

    let iw_in = x2.min(tx2) - x1.max(tx1);
    let ih_in = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (iw_in.max(0.0), ih_in.max(0.0));
    let inter = iw * ih;
    let area = b[2] * b[3];
    let union = area + t[2] * t[3] - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let enclose = cw * ch;

    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    // Derivatives of the clipped overlap and enclosing extents with respect to each corner.
    let (diw_dx1, diw_dx2) = if iw_in > 0.0 {
        (-ind(x1 >= tx1), ind(x2 < tx2))
    } else {
        (0.0, 0.0)
    };
    let (dih_dy1, dih_dy2) = if ih_in > 0.0 {
        (-ind(y1 >= ty1), ind(y2 < ty2))
    } else {
        (0.0, 0.0)
    };
    let (dcw_dx1, dcw_dx2) = (-ind(x1 < tx1), ind(x2 >= tx2));
    let (dch_dy1, dch_dy2) = (-ind(y1 < ty1), ind(y2 >= ty2));

    // Corner derivatives mapped to (cx, cy, w, h): d/dcx = d/dx1 + d/dx2, d/dw = (d/dx2 − d/dx1) / 2.
    let d_inter = [
        ih * (diw_dx1 + diw_dx2),
        iw * (dih_dy1 + dih_dy2),
        ih * (diw_dx2 - diw_dx1) / 2.0,
        iw * (dih_dy2 - dih_dy1) / 2.0,
    ];
    let d_enclose = [
        ch * (dcw_dx1 + dcw_dx2),
        cw * (dch_dy1 + dch_dy2),
        ch * (dcw_dx2 - dcw_dx1) / 2.0,
        cw * (dch_dy2 - dch_dy1) / 2.0,
    ];
    let d_area = [0.0, 0.0, b[3], b[2]];

    let iou = inter / union;
    let slack = (enclose - union) / enclose;
    let mut d_iou = [0.0; 4];
    let mut d_slack = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        d_iou[k] = (d_inter[k] * union - inter * d_union) / (union * union);
        // slack = 1 − U / C
        d_slack[k] = -(d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
    }
    GiouParts {
        iou,
        slack,
        d_iou,
        d_slack,
    }
}

/// `Σ [1 − IoU + λ_giou · (g − IoU)]` over assigned entries, where `g − IoU` is the enclosing
/// slack. Equals `Σ (1 − GIoU)` at `λ_giou = 1` and `Σ (1 − IoU)` at `λ_giou = 0`.
pub fn loss_giou(pred: &Grid, target: &TargetGrid, w: &LossWeights) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(target
        .responsible_entries()
        .map(|e| {
            let p = giou_parts(pred_box(pred, e), target.grid().image_box(e));
            1.0 - p.iou + w.giou * p.slack
        })
        .sum())
}

/// `Σ (1 − GIoU)` over assigned entries.
fn giou_sum(pred: &Grid, target: &TargetGrid) -> f64 {
    target
        .responsible_entries()
        .map(|e| {
            let p = giou_parts(pred_box(pred, e), target.grid().image_box(e));
            1.0 - p.iou + p.slack
        })
        .sum()
}

/// All four components and their sum. The GIoU component enters as `λ_giou · Σ (1 − GIoU)`,
/// so every component is linear in its own weight and a zero weight removes it.
pub fn total_loss(pred: &Grid, target: &TargetGrid, w: &LossWeights) -> Result<LossBreakdown, LossError> {
    check_shapes(pred, target)?;
    let conf = w.conf * conf_sum(pred, target);
    let cls = w.cls * cls_sum(pred, target);
    let loc = w.loc * loc_sum(pred, target);
    let giou = if w.giou == 0.0 {
        0.0
    } else {
        w.giou * giou_sum(pred, target)
    };
    Ok(LossBreakdown {
        conf,
        cls,
        loc,
        giou,
        total: conf + cls + loc + giou,
    })
}

/// Analytic gradient of [`total_loss`] with respect to every prediction value.
///
/// At corner-alignment ties in the GIoU term the derivative from the positive direction is
/// taken.
pub fn grad_total(pred: &Grid, target: &TargetGrid, w: &LossWeights) -> Result<Grid, LossError> {
    check_shapes(pred, target)?;
    let (s, b, c) = pred.shape();
    let mut grad = Grid::zeros(s, b, c);
    let t = target.grid();
    for e in 0..pred.num_entries() {
        let (p, tv) = (pred.entry(e), t.entry(e));
        let boxed = has_box_target(target, e);
        let g = grad.entry_mut(e);
        g[CONF] = -2.0 * w.conf * (tv[CONF] - p[CONF]);
        for k in CLASSES..p.len() {
            g[k] = -2.0 * w.cls * (tv[k] - p[k]);
        }
        if boxed {
            for k in 1..5 {
                g[k] = -2.0 * w.loc * (tv[k] - p[k]);
            }
        }
    }
    if w.giou != 0.0 {
        let inv_s = 1.0 / s as f64;
        for e in target.responsible_entries() {
            let p = giou_parts(pred_box(pred, e), t.image_box(e));
            let raw = pred.entry(e);
            let chain = [
                inv_s,
                inv_s,
                if raw[3] >= SIZE_EPS { 1.0 } else { 0.0 },
                if raw[4] >= SIZE_EPS { 1.0 } else { 0.0 },
            ];
            let g = grad.entry_mut(e);
            for k in 0..4 {
                g[1 + k] += w.giou * (p.d_slack[k] - p.d_iou[k]) * chain[k];
            }
        }
    }
    Ok(grad)
}

/// Outcome of comparing [`grad_total`] against central finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub values: usize,
}

/// Step used by [`finite_difference_check`].
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error; only guards 0/0.
pub const REL_ERROR_FLOOR: f64 = f64::MIN_POSITIVE;

/// Compares the analytic gradient with `(L(p + h) − L(p − h)) / 2h` at every prediction value.
pub fn finite_difference_check(pred: &Grid, target: &TargetGrid, w: &LossWeights, h: f64) -> Result<GradCheck, LossError> {
    let analytic = grad_total(pred, target, w)?;
    let mut probe = pred.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        values: pred.data().len(),
    };
    for k in 0..pred.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = total_loss(&probe, target, w)?.total;
        probe.data_mut()[k] = orig - h;
        let down = total_loss(&probe, target, w)?.total;
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[k];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        out.max_abs_error = out.max_abs_error.max(abs);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = k;
        }
    }
    Ok(out)
}

/// A random loss instance for gradient checking.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub cfg: HeadConfig,
    pub pred: Grid,
    pub target: TargetGrid,
    pub weights: LossWeights,
}

/// Distance the GIoU corners must keep from every non-differentiable configuration.
const KINK_MARGIN: f64 = 1e-3;

fn near_kink(pred: &Grid, target: &TargetGrid) -> bool {
    target.responsible_entries().any(|e| {
        let raw = pred.entry(e);
        if raw[3] < SIZE_EPS + KINK_MARGIN || raw[4] < SIZE_EPS + KINK_MARGIN {
            return true;
        }
        let b = pred_box(pred, e);
        let t = target.grid().image_box(e);
        (0..2).any(|axis| {
            let (lo, hi) = (b[axis] - b[axis + 2] / 2.0, b[axis] + b[axis + 2] / 2.0);
            let (tlo, thi) = (t[axis] - t[axis + 2] / 2.0, t[axis] + t[axis + 2] / 2.0);
            let inner = hi.min(thi) - lo.max(tlo);
            (lo - tlo).abs() < KINK_MARGIN || (hi - thi).abs() < KINK_MARGIN || inner.abs() < KINK_MARGIN
        })
    })
}

/// Draws a seeded instance with `S ≤ 4`, `B ≤ 2`, `C ≤ 5`, resampling predictions that sit
/// within a small margin of a GIoU kink.
pub fn random_instance(rng: &mut ChaCha8Rng) -> GradInstance {
    loop {
        let s = rng.random_range(1..=4);
        let b = rng.random_range(1..=2);
        let c = rng.random_range(1..=5);
        let anchors: Vec<[f64; 2]> = (0..b)
            .map(|_| [rng.random_range(0.05..0.6), rng.random_range(0.05..0.6)])
            .collect();
        let cfg = HeadConfig::new(s, c, anchors).expect("valid random head");
        let objects: Vec<Annotation> = (0..rng.random_range(1..=3))
            .map(|_| {
                let w: f64 = rng.random_range(0.05..0.5);
                let h: f64 = rng.random_range(0.05..0.5);
                let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
                let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
                Annotation {
                    class_id: rng.random_range(0..c),
                    bbox: BBox::new(cx, cy, w, h).expect("box inside the image"),
                }
            })
            .collect();
        let target = assign_targets(&objects, &cfg).expect("classes in range").target;
        let mut pred = Grid::for_head(&cfg);
        for e in 0..pred.num_entries() {
            let entry = pred.entry_mut(e);
            entry[CONF] = rng.random_range(0.0..1.0);
            entry[1] = rng.random_range(0.0..1.0);
            entry[2] = rng.random_range(0.0..1.0);
            entry[3] = rng.random_range(0.05..0.6);
            entry[4] = rng.random_range(0.05..0.6);
            for v in &mut entry[CLASSES..] {
                *v = rng.random_range(0.0..1.0);
            }
        }
        if near_kink(&pred, &target) {
            continue;
        }
        let weights = LossWeights {
            conf: rng.random_range(0.1..2.0),
            cls: rng.random_range(0.1..2.0),
            loc: rng.random_range(0.1..2.0),
            giou: rng.random_range(0.1..2.0),
        };
        return GradInstance {
            cfg,
            pred,
            target,
            weights,
        };
    }
}

/// Summary of a seeded batch of finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub trials: usize,
    pub seed: u64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_trial: usize,
}

pub fn gradcheck_trials(trials: usize, seed: u64) -> Result<GradCheckSummary, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheckSummary {
        trials,
        seed,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_trial: 0,
    };
    for trial in 0..trials {
        let inst = random_instance(&mut rng);
        let r = finite_difference_check(&inst.pred, &inst.target, &inst.weights, FD_STEP)?;
        out.max_abs_error = out.max_abs_error.max(r.max_abs_error);
        if r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst_trial = trial;
        }
    }
    Ok(out)
}

/// Starting point of [`toy_fit`]: confidence 0.5, uniform class probabilities, and every box
/// at its cell center with the median anchor size.
pub fn initial_prediction(cfg: &HeadConfig) -> Grid {
    let mut g = Grid::for_head(cfg);
    let [aw, ah] = cfg.median_anchor();
    let p = if cfg.classes > 0 { 1.0 / cfg.classes as f64 } else { 0.0 };
    for e in 0..g.num_entries() {
        let entry = g.entry_mut(e);
        entry[CONF] = 0.5;
        entry[1..5].copy_from_slice(&[0.5, 0.5, aw, ah]);
        for v in &mut entry[CLASSES..] {
            *v = p;
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct ToyFit {
    pub grid: Grid,
    /// `trace[k]` is the loss after `k` updates.
    pub trace: Vec<LossBreakdown>,
    pub monotone: bool,
}

impl ToyFit {
    pub fn final_loss(&self) -> LossBreakdown {
        *self.trace.last().expect("trace has the initial point")
    }
}

/// Plain gradient descent on [`total_loss`] from [`initial_prediction`].
pub fn toy_fit(
    objects: &[Annotation],
    cfg: &HeadConfig,
    w: &LossWeights,
    lr: f64,
    steps: usize,
) -> Result<ToyFit, LossError> {
    w.validate()?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(LossError::InvalidParameter(format!("learning rate must be positive, got {lr}")));
    }
    if steps == 0 {
        return Err(LossError::InvalidParameter("steps must be at least 1".into()));
    }
    let target = assign_targets(objects, cfg)?.target;
    let mut grid = initial_prediction(cfg);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut monotone = true;
    let check = |step: usize, l: &LossBreakdown| {
        if !l.total.is_finite() || l.total > DIVERGENCE_LIMIT {
            Err(LossError::Diverged { step, loss: l.total })
        } else {
            Ok(())
        }
    };
    let first = total_loss(&grid, &target, w)?;
    check(0, &first)?;
    trace.push(first);
    for step in 1..=steps {
        let g = grad_total(&grid, &target, w)?;
        for (v, d) in grid.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
        let l = total_loss(&grid, &target, w)?;
        check(step, &l)?;
        let prev = trace.last().map_or(f64::INFINITY, |p: &LossBreakdown| p.total);
        if l.total > prev * (1.0 + 1e-12) {
            monotone = false;
        }
        trace.push(l);
    }
    Ok(ToyFit { grid, trace, monotone })
}

/// CSV with header `step,conf,cls,loc,giou,total`.
pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut out = String::from("step,conf,cls,loc,giou,total\n");
    for (k, l) in trace.iter().enumerate() {
        out.push_str(&format!("{k},{},{},{},{},{}\n", l.conf, l.cls, l.loc, l.giou, l.total));
    }
    out
}
