//! Boxes in normalized center-size form, overlap kernels, and the
//! IoU-constrained shift sampler used to build shifted-box queries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, HqmError, Result};

/// Axis-aligned box: center `(cx, cy)` and size `(w, h)`, normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `[x0, y0, x1, y1]`
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Area shared with the axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn overlap_with_rect(self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        let [a0, b0, a1, b1] = self.corners();
        let iw = (a1.min(x1) - a0.max(x0)).max(0.0);
        let ih = (b1.min(y1) - b0.max(y0)).max(0.0);
        iw * ih
    }
}

fn intersection(a: BBox, b: BBox) -> f64 {
    let [x0, y0, x1, y1] = b.corners();
    a.overlap_with_rect(x0, y0, x1, y1)
}

// Areas from corners so that a box intersected with itself is exactly its area.
fn corner_area(b: BBox) -> f64 {
    let [x0, y0, x1, y1] = b.corners();
    (x1 - x0) * (y1 - y0)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered by the union.
pub fn giou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let enclosing = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (enclosing - union) / enclosing
}

/// Sum of absolute coordinate differences in center-size form.
pub fn pair_l1(a: BBox, b: BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub iou_lo: f64,
    pub iou_hi: f64,
    pub max_attempts: usize,
    /// Translation is drawn from ±jitter_scale·(w, h); scale factors from
    /// 1 ± jitter_scale/2.
    pub jitter_scale: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            iou_lo: 0.4,
            iou_hi: 0.6,
            max_attempts: 64,
            jitter_scale: 0.5,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.iou_lo && self.iou_lo < self.iou_hi && self.iou_hi <= 1.0) {
            return Err(config_err(format!(
                "shift IoU bounds must satisfy 0 < lo < hi <= 1, got [{}, {}]",
                self.iou_lo, self.iou_hi
            )));
        }
        if self.max_attempts == 0 {
            return Err(config_err("shift max_attempts must be at least 1"));
        }
        if !(self.jitter_scale >= 0.0 && self.jitter_scale < 2.0) {
            return Err(config_err("shift jitter_scale must lie in [0, 2)"));
        }
        Ok(())
    }

    fn accepts(&self, v: f64) -> bool {
        self.iou_lo <= v && v <= self.iou_hi
    }
}

/// Rejection-samples a perturbed copy of `gt` whose IoU with `gt` lies in the
/// configured bounds.
///
/// Each attempt consumes exactly four uniforms from `rng`. Shifted boxes are
/// not clamped to the image.
pub fn shift_box<R: Rng + ?Sized>(gt: BBox, cfg: &ShiftConfig, rng: &mut R) -> Result<BBox> {
    let j = cfg.jitter_scale;
    for _ in 0..cfg.max_attempts {
        let ux: f64 = rng.gen();
        let uy: f64 = rng.gen();
        let us: f64 = rng.gen();
        let ut: f64 = rng.gen();
        let candidate = BBox::new(
            gt.cx + (2.0 * ux - 1.0) * j * gt.w,
            gt.cy + (2.0 * uy - 1.0) * j * gt.h,
            gt.w * (1.0 + (us - 0.5) * j),
            gt.h * (1.0 + (ut - 0.5) * j),
        );
        if cfg.accepts(iou(gt, candidate)) {
            return Ok(candidate);
        }
    }
    Err(HqmError::Sampling {
        attempts: cfg.max_attempts,
    })
}

/// Translation along x that gives IoU = (lo + hi) / 2 with the original box.
///
/// For equal-size boxes offset by `d` along x, IoU = (w − d)/(w + d), so
/// `d = w(1 − t)/(1 + t)`.
pub fn fallback_shift(gt: BBox, cfg: &ShiftConfig) -> BBox {
    let t = 0.5 * (cfg.iou_lo + cfg.iou_hi);
    let d = gt.w * (1.0 - t) / (1.0 + t);
    BBox::new(gt.cx + d, gt.cy, gt.w, gt.h)
}

/// [`shift_box`], falling back to [`fallback_shift`] when sampling gives up.
/// The flag reports whether the fallback was used.
pub fn shift_box_or_fallback<R: Rng + ?Sized>(
    gt: BBox,
    cfg: &ShiftConfig,
    rng: &mut R,
) -> (BBox, bool) {
    match shift_box(gt, cfg, rng) {
        Ok(b) => (b, false),
        Err(_) => (fallback_shift(gt, cfg), true),
    }
}
