//! Axis-aligned box arithmetic: IoU, greedy NMS, and the delta
//! parameterisation shared by every regression head.
//!
//! Coordinates are continuous and half-open: a box `[x1, y1, x2, y2]` has
//! width `x2 - x1` with no `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest log-scale delta accepted at decode time.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[0] + v[2], v[1] + v[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
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
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Regression target relative to a reference box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores are visited in ascending index order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = sort_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Indices sorted by descending score, ties by ascending index.
pub fn sort_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::DegenerateBox(anchor.x1, anchor.y1, anchor.x2, anchor.y2));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gt.width() / aw).ln(),
        dh: (gt.height() / ah).ln(),
    })
}

/// Inverse of [`encode`]. Log-scale deltas are clamped to [`MAX_LOG_SCALE`];
/// with `image_size = Some((w, h))` the result is clipped to the image.
pub fn decode(anchor: &BBox, delta: &BoxDelta, image_size: Option<(f64, f64)>) -> Result<BBox> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::DegenerateBox(anchor.x1, anchor.y1, anchor.x2, anchor.y2));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.min(MAX_LOG_SCALE).exp();
    let h = ah * delta.dh.min(MAX_LOG_SCALE).exp();
    let out = BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
    Ok(match image_size {
        Some((iw, ih)) => out.clip(iw, ih),
        None => out,
    })
}
