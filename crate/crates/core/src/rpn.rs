//! Stage-0 region proposals: anchors, the shared objectness/delta head, and
//! proposal selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::boxes::{decode, encode, iou, nms, sort_by_score, BBox, BoxDelta};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::pyramid::{conv, conv_params, PyramidConfig};
use crate::tensor::Tensor;
use crate::training::sample_split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    /// Anchor side = `anchor_scale * stride` of its level.
    pub anchor_scale: f64,
    /// Height / width ratios; one anchor per ratio per location.
    pub aspect_ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub pre_nms_k: usize,
    pub post_nms_n: usize,
    pub nms_thresh: f64,
    /// Anchors sampled per image for the objectness loss.
    pub batch_per_image: usize,
    pub pos_fraction: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            anchor_scale: 2.0,
            aspect_ratios: vec![1.0],
            pos_iou: 0.7,
            neg_iou: 0.3,
            pre_nms_k: 256,
            post_nms_n: 64,
            nms_thresh: 0.7,
            batch_per_image: 64,
            pos_fraction: 0.5,
        }
    }
}

impl RpnConfig {
    pub fn num_anchors(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::Config {
            field: format!("rpn.{field}"),
            reason: reason.into(),
        };
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(bad("aspect_ratios", "need at least one positive ratio"));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(bad("pos_iou", "require 0 <= neg_iou <= pos_iou <= 1"));
        }
        if !(self.anchor_scale > 0.0) {
            return Err(bad("anchor_scale", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(bad("pos_fraction", "must lie in [0, 1]"));
        }
        if self.post_nms_n == 0 || self.pre_nms_k == 0 {
            return Err(bad("post_nms_n", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Ordered by `(y, x, ratio)`.
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub per_location: usize,
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter().copied()).collect()
    }

    /// `(level, y, x, ratio)` of a flat anchor index.
    pub fn locate(&self, mut idx: usize) -> (usize, usize, usize, usize) {
        for (k, l) in self.levels.iter().enumerate() {
            if idx < l.boxes.len() {
                let a = idx % self.per_location;
                let cell = idx / self.per_location;
                return (k, cell / l.width, cell % l.width, a);
            }
            idx -= l.boxes.len();
        }
        panic!("anchor index out of range");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub source_stage: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// One anchor of size `anchor_scale · stride` per ratio at every cell centre
/// `(i + 0.5) · stride`.
pub fn generate_anchors(pyramid: &PyramidConfig, rpn: &RpnConfig, image_size: usize) -> AnchorSet {
    let levels = pyramid
        .level_strides
        .iter()
        .map(|&stride| {
            let side = image_size / stride;
            let base = rpn.anchor_scale * stride as f64;
            let mut boxes = Vec::with_capacity(side * side * rpn.num_anchors());
            for y in 0..side {
                for x in 0..side {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for &r in &rpn.aspect_ratios {
                        let w = base / r.sqrt();
                        let h = base * r.sqrt();
                        boxes.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
                    }
                }
            }
            LevelAnchors {
                stride,
                height: side,
                width: side,
                boxes,
            }
        })
        .collect();
    AnchorSet {
        per_location: rpn.num_anchors(),
        levels,
    }
}

pub fn declare_params(store: &mut ParamStore, pyramid: &PyramidConfig, rpn: &RpnConfig, seed: u64) {
    let d = pyramid.out_channels;
    let a = rpn.num_anchors();
    conv_params(store, "rpn.conv", d, d, 3, seed);
    conv_params(store, "rpn.cls", a, d, 1, seed);
    conv_params(store, "rpn.reg", 4 * a, d, 1, seed);
}

/// Per-level raw outputs: logits `N×A×H×W`, deltas `N×4A×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct RpnLevel {
    pub logits: Var,
    pub deltas: Var,
}

/// Shared 3×3 conv + ReLU followed by sibling 1×1 convs, applied with the
/// same weights on every top-down level.
pub fn rpn_forward(graph: &mut Graph, binder: &mut Binder<'_>, top_down: &[Var]) -> Result<Vec<RpnLevel>> {
    top_down
        .iter()
        .map(|&p| {
            let h = conv(graph, binder, "rpn.conv", p, 1, 1)?;
            let h = graph.relu(h)?;
            Ok(RpnLevel {
                logits: conv(graph, binder, "rpn.cls", h, 1, 0)?,
                deltas: conv(graph, binder, "rpn.reg", h, 1, 0)?,
            })
        })
        .collect()
}

/// Flat tensor offsets of an anchor's logit and its four deltas for batch row `n`.
pub(crate) fn anchor_offsets(anchors: &AnchorSet, idx: usize, n: usize) -> (usize, usize, [usize; 4]) {
    let (k, y, x, a) = anchors.locate(idx);
    let l = &anchors.levels[k];
    let a_count = anchors.per_location;
    let hw = l.height * l.width;
    let pos = y * l.width + x;
    let logit = (n * a_count + a) * hw + pos;
    let deltas = std::array::from_fn(|j| (n * 4 * a_count + 4 * a + j) * hw + pos);
    (k, logit, deltas)
}

/// Logits and deltas of every anchor for batch row `n`, in anchor order.
pub fn anchor_predictions(graph: &Graph, levels: &[RpnLevel], anchors: &AnchorSet, n: usize) -> (Vec<f64>, Vec<BoxDelta>) {
    let total = anchors.len();
    let mut logits = Vec::with_capacity(total);
    let mut deltas = Vec::with_capacity(total);
    for idx in 0..total {
        let (k, li, di) = anchor_offsets(anchors, idx, n);
        let lv = graph.value(levels[k].logits).data();
        let dv = graph.value(levels[k].deltas).data();
        logits.push(lv[li]);
        deltas.push(BoxDelta {
            dx: dv[di[0]],
            dy: dv[di[1]],
            dw: dv[di[2]],
            dh: dv[di[3]],
        });
    }
    (logits, deltas)
}

/// Decodes and clips every anchor, drops boxes with no area, keeps the top
/// `pre_nms_k` by logit, suppresses at `nms_thresh`, and returns at most
/// `post_nms_n` proposals sorted by objectness.
pub fn select_proposals(
    anchors: &[BBox],
    logits: &[f64],
    deltas: &[BoxDelta],
    pre_nms_k: usize,
    nms_thresh: f64,
    post_nms_n: usize,
    image_size: (f64, f64),
) -> Result<Vec<Proposal>> {
    if anchors.len() != logits.len() || anchors.len() != deltas.len() {
        return Err(Error::Shape {
            op: "select_proposals",
            detail: format!("{} anchors, {} logits, {} deltas", anchors.len(), logits.len(), deltas.len()),
        });
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for ((a, d), &l) in anchors.iter().zip(deltas).zip(logits) {
        let b = decode(a, d, Some(image_size))?;
        if b.width() > 0.0 && b.height() > 0.0 {
            boxes.push(b);
            scores.push(l);
        }
    }
    let top: Vec<usize> = sort_by_score(&scores).into_iter().take(pre_nms_k).collect();
    let top_boxes: Vec<BBox> = top.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    Ok(nms(&top_boxes, &top_scores, nms_thresh)
        .into_iter()
        .take(post_nms_n)
        .map(|i| Proposal {
            bbox: top_boxes[i],
            objectness: crate::util::sigmoid(top_scores[i]),
            source_stage: 0,
        })
        .collect())
}

/// Positive at IoU ≥ `pos_iou` or when the anchor attains some gt's best IoU;
/// negative below `neg_iou`; otherwise ignored. Returns the best-matching gt
/// per anchor alongside.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<(AnchorLabel, Option<usize>)> {
    if gts.is_empty() {
        return vec![(AnchorLabel::Negative, None); anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let gt_best: Vec<f64> = (0..gts.len())
        .map(|j| ious.iter().map(|row| row[j]).fold(0.0, f64::max))
        .collect();
    ious.iter()
        .map(|row| {
            let (best_j, best) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let is_argmax = row
                .iter()
                .zip(&gt_best)
                .any(|(&v, &gb)| gb > 0.0 && v == gb);
            let label = if best >= pos_iou || is_argmax {
                AnchorLabel::Positive
            } else if best < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            (label, Some(best_j))
        })
        .collect()
}

/// Sampled anchors with their objectness and regression targets.
#[derive(Clone, Debug)]
pub struct RpnTargets {
    /// `(batch row, anchor index)` of every sampled anchor.
    pub sampled: Vec<(usize, usize)>,
    pub objectness: Tensor,
    /// `(batch row, anchor index)` of sampled positives.
    pub positives: Vec<(usize, usize)>,
    pub deltas: Tensor,
}

pub fn build_rpn_targets<R: Rng>(
    anchors: &AnchorSet,
    gts_per_image: &[Vec<BBox>],
    cfg: &RpnConfig,
    rng: &mut R,
) -> Result<RpnTargets> {
    let flat = anchors.all();
    let mut sampled = Vec::new();
    let mut labels = Vec::new();
    let mut positives = Vec::new();
    let mut deltas = Vec::new();
    for (n, gts) in gts_per_image.iter().enumerate() {
        let labelled = label_anchors(&flat, gts, cfg.pos_iou, cfg.neg_iou);
        let pos: Vec<usize> = (0..flat.len()).filter(|&i| labelled[i].0 == AnchorLabel::Positive).collect();
        let neg: Vec<usize> = (0..flat.len()).filter(|&i| labelled[i].0 == AnchorLabel::Negative).collect();
        let picked = sample_split(&pos, &neg, cfg.batch_per_image, cfg.pos_fraction, rng);
        for i in picked {
            let is_pos = labelled[i].0 == AnchorLabel::Positive;
            sampled.push((n, i));
            labels.push(if is_pos { 1.0 } else { 0.0 });
            if is_pos {
                let gt = &gts[labelled[i].1.expect("positive anchors have a match")];
                positives.push((n, i));
                deltas.extend(encode(&flat[i], gt)?.to_array());
            }
        }
    }
    Ok(RpnTargets {
        objectness: Tensor::from_parts(vec![labels.len()], labels),
        deltas: Tensor::from_parts(vec![positives.len(), 4], deltas),
        sampled,
        positives,
    })
}

/// Objectness BCE over sampled anchors plus smooth-L1 over sampled positives.
pub fn rpn_loss(graph: &mut Graph, levels: &[RpnLevel], anchors: &AnchorSet, targets: &RpnTargets) -> Result<(Var, Var)> {
    let inputs: Vec<Var> = levels.iter().flat_map(|l| [l.logits, l.deltas]).collect();
    let logit_picks = targets
        .sampled
        .iter()
        .map(|&(n, i)| {
            let (k, li, _) = anchor_offsets(anchors, i, n);
            (2 * k, li)
        })
        .collect::<Vec<_>>();
    let len = logit_picks.len();
    let logits = graph.gather(&inputs, logit_picks, vec![len])?;
    let obj = graph.bce_with_logits(logits, &targets.objectness)?;
    let delta_picks = targets
        .positives
        .iter()
        .flat_map(|&(n, i)| {
            let (k, _, di) = anchor_offsets(anchors, i, n);
            di.map(|d| (2 * k + 1, d))
        })
        .collect::<Vec<_>>();
    let deltas = graph.gather(&inputs, delta_picks, vec![targets.positives.len(), 4])?;
    let reg = graph.smooth_l1(deltas, &targets.deltas)?;
    Ok((obj, reg))
}
