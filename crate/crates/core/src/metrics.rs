//! COCO-style average precision for boxes and masks.
//!
//! Greedy per-image, per-class matching in score order, 101-point
//! interpolated precision, mean over the classes that have ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::dataset::{Dataset, DetectionRecord, Mask};
use crate::error::{Error, Result};

/// IoU 0.50:0.95 in steps of 0.05.
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const MAX_DETS: usize = 100;
const RECALL_POINTS: usize = 101;

/// Area limits of the small / medium buckets; anything larger is large.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small: f64,
    pub medium: f64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            small: 16.0 * 16.0,
            medium: 32.0 * 32.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalGt {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub area: f64,
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalDet {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
    pub mask: Option<Mask>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

/// Box and (optionally) mask metrics of one evaluation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub bbox: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<EvalReport>,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Box,
    Mask,
}

pub fn evaluate_ap(dets: &[EvalDet], gts: &[EvalGt], iou_thresholds: &[f64], buckets: &SizeBuckets) -> EvalReport {
    Evaluator::new(dets, gts, Kind::Box).report(iou_thresholds, buckets)
}

/// Same protocol as [`evaluate_ap`] with mask IoU. Detection masks at a
/// different resolution are resampled to the ground-truth grid first.
pub fn evaluate_mask_ap(dets: &[EvalDet], gts: &[EvalGt], iou_thresholds: &[f64], buckets: &SizeBuckets) -> Result<EvalReport> {
    if dets.iter().any(|d| d.mask.is_none()) || gts.iter().any(|g| g.mask.is_none()) {
        return Err(Error::InvalidArgument("mask evaluation needs a mask on every entry".into()));
    }
    Ok(Evaluator::new(dets, gts, Kind::Mask).report(iou_thresholds, buckets))
}

struct Cell {
    dets: Vec<usize>,
    gts: Vec<usize>,
    /// `ious[d][g]` over the truncated, score-sorted detections.
    ious: Vec<Vec<f64>>,
}

struct Evaluator<'a> {
    dets: &'a [EvalDet],
    gts: &'a [EvalGt],
    kind: Kind,
    /// class → image → cell
    cells: BTreeMap<usize, BTreeMap<u64, Cell>>,
}

fn mask_on_grid(m: &Mask, width: usize, height: usize) -> Mask {
    if m.width == width && m.height == height {
        return m.clone();
    }
    let mut out = Mask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * m.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * m.height as f64 / height as f64) as usize;
            out.set(x, y, m.get(sx.min(m.width - 1), sy.min(m.height - 1)));
        }
    }
    out
}

impl<'a> Evaluator<'a> {
    fn new(dets: &'a [EvalDet], gts: &'a [EvalGt], kind: Kind) -> Self {
        let mut cells: BTreeMap<usize, BTreeMap<u64, Cell>> = BTreeMap::new();
        fn cell(cells: &mut BTreeMap<usize, BTreeMap<u64, Cell>>, c: usize, img: u64) -> &mut Cell {
            cells.entry(c).or_default().entry(img).or_insert_with(|| Cell {
                dets: Vec::new(),
                gts: Vec::new(),
                ious: Vec::new(),
            })
        }
        for (i, d) in dets.iter().enumerate() {
            cell(&mut cells, d.class, d.image_id).dets.push(i);
        }
        for (i, g) in gts.iter().enumerate() {
            cell(&mut cells, g.class, g.image_id).gts.push(i);
        }
        for per_image in cells.values_mut() {
            for c in per_image.values_mut() {
                // stable sort keeps input order among equal scores
                c.dets.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
                c.dets.truncate(MAX_DETS);
                c.ious = c
                    .dets
                    .iter()
                    .map(|&d| {
                        c.gts
                            .iter()
                            .map(|&g| match kind {
                                Kind::Box => iou(&dets[d].bbox, &gts[g].bbox),
                                Kind::Mask => {
                                    let gm = gts[g].mask.as_ref().expect("checked");
                                    let dm = mask_on_grid(dets[d].mask.as_ref().expect("checked"), gm.width, gm.height);
                                    dm.iou(gm)
                                }
                            })
                            .collect()
                    })
                    .collect();
            }
        }
        Self { dets, gts, kind, cells }
    }

    fn det_area(&self, d: usize) -> f64 {
        match self.kind {
            Kind::Box => self.dets[d].bbox.area(),
            Kind::Mask => self.dets[d].mask.as_ref().map_or(0.0, |m| m.area() as f64),
        }
    }

    /// AP of one class at one threshold within an area range, `None` when the
    /// class has no non-ignored ground truth there.
    fn class_ap(&self, class: usize, thr: f64, range: (f64, f64)) -> Option<f64> {
        let per_image = self.cells.get(&class)?;
        let in_range = |a: f64| a >= range.0 && a <= range.1;
        let mut scored: Vec<(f64, bool)> = Vec::new(); // (score, true positive), ignored dets dropped
        let mut npig = 0usize;
        for cell in per_image.values() {
            let g_ignored: Vec<bool> = cell.gts.iter().map(|&g| !in_range(self.gts[g].area)).collect();
            npig += g_ignored.iter().filter(|&&i| !i).count();
            // non-ignored gts first, as in the reference implementation
            let mut order: Vec<usize> = (0..cell.gts.len()).collect();
            order.sort_by_key(|&j| g_ignored[j]);
            let mut taken = vec![false; cell.gts.len()];
            for (di, &d) in cell.dets.iter().enumerate() {
                let mut best = thr.min(1.0 - 1e-10);
                let mut m: Option<usize> = None;
                for &gj in &order {
                    if taken[gj] {
                        continue;
                    }
                    if let Some(mj) = m {
                        if !g_ignored[mj] && g_ignored[gj] {
                            break;
                        }
                    }
                    let v = cell.ious[di][gj];
                    if v < best {
                        continue;
                    }
                    best = v;
                    m = Some(gj);
                }
                let score = self.dets[d].score;
                match m {
                    Some(gj) => {
                        taken[gj] = true;
                        if !g_ignored[gj] {
                            scored.push((score, true));
                        }
                    }
                    None => {
                        if in_range(self.det_area(d)) {
                            scored.push((score, false));
                        }
                    }
                }
            }
        }
        if npig == 0 {
            return None;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        Some(interpolated_ap(&scored, npig))
    }

    fn mean_ap(&self, thresholds: &[f64], range: (f64, f64)) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for &t in thresholds {
            for &c in self.cells.keys() {
                if let Some(ap) = self.class_ap(c, t, range) {
                    total += ap;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    fn report(&self, thresholds: &[f64], b: &SizeBuckets) -> EvalReport {
        let all = (0.0, f64::INFINITY);
        EvalReport {
            ap: self.mean_ap(thresholds, all),
            ap50: self.mean_ap(&[0.5], all),
            ap75: self.mean_ap(&[0.75], all),
            ap_s: self.mean_ap(thresholds, (0.0, b.small)),
            ap_m: self.mean_ap(thresholds, (b.small, b.medium)),
            ap_l: self.mean_ap(thresholds, (b.medium, f64::INFINITY)),
        }
    }
}

/// 101-point interpolated precision of a score-sorted TP/FP sequence.
fn interpolated_ap(scored: &[(f64, bool)], npig: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for &(_, is_tp) in scored {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npig as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let thr = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < thr);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Ground truth of a dataset in evaluation form (mask area as the object area).
pub fn gts_from_dataset(d: &Dataset) -> Vec<EvalGt> {
    d.samples
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(move |i| EvalGt {
                image_id: s.id,
                class: i.class,
                bbox: i.bbox,
                area: i.mask.area() as f64,
                mask: Some(i.mask.clone()),
            })
        })
        .collect()
}

/// Converts results-file records (1-based category ids) for evaluation.
pub fn dets_from_records(records: &[DetectionRecord], image_sizes: &BTreeMap<u64, (usize, usize)>) -> Result<Vec<EvalDet>> {
    records
        .iter()
        .map(|r| {
            if r.category_id == 0 {
                return Err(Error::Format("category ids start at 1".into()));
            }
            let mask = match &r.segmentation {
                Some(rle) => Some(Mask::from_rle(rle)?),
                None => None,
            };
            if mask.is_none() && !image_sizes.contains_key(&r.image_id) {
                return Err(Error::Format(format!("detection on unknown image {}", r.image_id)));
            }
            Ok(EvalDet {
                image_id: r.image_id,
                class: r.category_id as usize - 1,
                bbox: BBox::from_xywh(r.bbox),
                score: r.score,
                mask,
            })
        })
        .collect()
}

/// Box metrics, plus mask metrics when every detection carries a mask.
pub fn evaluate_all(dets: &[EvalDet], gts: &[EvalGt]) -> Result<FullReport> {
    let b = SizeBuckets::default();
    let bbox = evaluate_ap(dets, gts, &COCO_IOU_THRESHOLDS, &b);
    let mask = if !dets.is_empty() && dets.iter().all(|d| d.mask.is_some()) {
        Some(evaluate_mask_ap(dets, gts, &COCO_IOU_THRESHOLDS, &b)?)
    } else {
        None
    };
    Ok(FullReport { bbox, mask })
}
