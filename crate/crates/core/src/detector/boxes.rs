//! Boxes, anchors, the box-delta parametrization and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest width/height log-ratio a delta may decode to.
const MAX_LOG_RATIO: f64 = 4.135; // ln(1000 / 16)

/// Axis-aligned box in pixel coordinates, origin top-left, `x2 > x1` and
/// `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "BBox::new" });
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// True when the box lies inside a `width x height` image.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clips to the image, keeping at least `min_size` pixels per side.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Self {
        let fix = |a: f64, b: f64, lim: f64| {
            let a = a.clamp(0.0, lim);
            let b = b.clamp(0.0, lim);
            if b - a >= min_size {
                (a, b)
            } else {
                let mid = ((a + b) * 0.5).clamp(min_size * 0.5, lim - min_size * 0.5);
                (mid - min_size * 0.5, mid + min_size * 0.5)
            }
        };
        let (x1, x2) = fix(self.x1, self.x2, width);
        let (y1, y2) = fix(self.y1, self.y2, height);
        Self { x1, y1, x2, y2 }
    }
}

/// Intersection over union; boxes that only touch have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Reference box that regression deltas are expressed against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn from_box(b: &BBox) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx,
            cy,
            w: b.width(),
            h: b.height(),
        }
    }

    pub fn to_box(&self) -> BBox {
        BBox {
            x1: self.cx - self.w * 0.5,
            y1: self.cy - self.h * 0.5,
            x2: self.cx + self.w * 0.5,
            y2: self.cy + self.h * 0.5,
        }
    }
}

/// `(tx, ty, tw, th)` of `b` relative to `a`.
pub fn encode(b: &BBox, a: &Anchor) -> [f64; 4] {
    let (cx, cy) = b.center();
    [
        (cx - a.cx) / a.w,
        (cy - a.cy) / a.h,
        (b.width() / a.w).ln(),
        (b.height() / a.h).ln(),
    ]
}

/// Inverse of [`encode`]. Log-ratios are clamped so extreme deltas cannot
/// overflow.
pub fn decode(d: [f64; 4], a: &Anchor) -> BBox {
    let cx = a.cx + d[0] * a.w;
    let cy = a.cy + d[1] * a.h;
    let w = a.w * d[2].min(MAX_LOG_RATIO).exp();
    let h = a.h * d[3].min(MAX_LOG_RATIO).exp();
    BBox {
        x1: cx - w * 0.5,
        y1: cy - h * 0.5,
        x2: cx + w * 0.5,
        y2: cy + h * 0.5,
    }
}

/// One square anchor of side `size` centered on every cell of a
/// `rows x cols` feature grid with the given pixel stride, row-major.
pub fn anchor_grid(rows: usize, cols: usize, stride: f64, size: f64) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        for x in 0..cols {
            out.push(Anchor {
                cx: (x as f64 + 0.5) * stride,
                cy: (y as f64 + 0.5) * stride,
                w: size,
                h: size,
            });
        }
    }
    out
}

/// A scored detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy non-maximum suppression: visit by descending score (earlier index
/// first on ties), drop anything whose IoU with a kept box exceeds
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(dets[i]);
        }
    }
    kept
}
