//! Brute-force reference implementations and micro-model helpers shared by
//! the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dsfpn::boxes::BoxDelta;
use dsfpn::dataset::{Instance, Mask, Sample};
use dsfpn::metrics::{EvalDet, EvalGt};
use dsfpn::params::Binder;
use dsfpn::pyramid::PyramidConfig;
use dsfpn::roi_align::RoiConfig;
use dsfpn::rpn::RpnConfig;
use dsfpn::training::RoiSampling;
use dsfpn::{BBox, Graph, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random box with integer corners inside `[0, side]²`, at least 1×1.
pub fn int_box(r: &mut ChaCha8Rng, side: i64) -> BBox {
    let x1 = r.gen_range(0..side);
    let y1 = r.gen_range(0..side);
    let x2 = r.gen_range(x1 + 1..=side);
    let y2 = r.gen_range(y1 + 1..=side);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Random box with real corners inside `[0, side]²`.
pub fn real_box(r: &mut ChaCha8Rng, side: f64, min_size: f64) -> BBox {
    let w = r.gen_range(min_size..side * 0.6);
    let h = r.gen_range(min_size..side * 0.6);
    let x = r.gen_range(0.0..side - w);
    let y = r.gen_range(0.0..side - h);
    BBox::new(x, y, x + w, y + h)
}

/// IoU of integer-cornered boxes by counting unit cells.
pub fn iou_by_cells(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let lo = a.x1.min(b.x1) as i64;
    let hi = a.x2.max(b.x2) as i64;
    let top = a.y1.min(b.y1) as i64;
    let bottom = a.y2.max(b.y2) as i64;
    for y in top..bottom {
        for x in lo..hi {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_a = cx > a.x1 && cx < a.x2 && cy > a.y1 && cy < a.y2;
            let in_b = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Plain IoU from corner arithmetic, written independently of the library.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |c: &BBox| (c.x2 - c.x1) * (c.y2 - c.y1);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Rank order: score descending, ties by index ascending.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort keeps this independent of the library's sort
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j]] > scores[idx[j - 1]] {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx
}

/// Exhaustive suppression: a box survives iff no surviving box ranked
/// above it overlaps it by more than `thr`.
pub fn nms_ref(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let order = ranked(scores);
    let mut survives = vec![false; boxes.len()];
    for (r, &i) in order.iter().enumerate() {
        survives[i] = order[..r].iter().all(|&j| !survives[j] || iou_ref(&boxes[i], &boxes[j]) <= thr);
    }
    order.into_iter().filter(|&i| survives[i]).collect()
}

/// Checks the two defining properties of a greedy NMS result.
pub fn nms_properties_hold(boxes: &[BBox], scores: &[f64], thr: f64, keep: &[usize]) -> bool {
    let order = ranked(scores);
    let rank: BTreeMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let kept: std::collections::BTreeSet<usize> = keep.iter().copied().collect();
    let sorted = keep.windows(2).all(|w| rank[&w[0]] < rank[&w[1]]);
    let separated = keep
        .iter()
        .all(|&a| keep.iter().all(|&b| a == b || iou_ref(&boxes[a], &boxes[b]) <= thr));
    let covered = (0..boxes.len())
        .filter(|i| !kept.contains(i))
        .all(|i| keep.iter().any(|&k| rank[&k] < rank[&i] && iou_ref(&boxes[i], &boxes[k]) > thr));
    sorted && separated && covered
}

/// Bilinear value of channel `c` at feature-space point `(u, v)`, with cell
/// centres at half-integers and clamping at the border.
pub fn bilinear(feature: &Tensor, c: usize, u: f64, v: f64) -> f64 {
    let s = feature.shape();
    let (h, w) = (s[2], s[3]);
    let at = |y: usize, x: usize| feature.data()[(c * h + y) * w + x];
    let px = (u - 0.5).max(0.0).min((w - 1) as f64);
    let py = (v - 0.5).max(0.0).min((h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    at(y0, x0) * (1.0 - fx) * (1.0 - fy) + at(y0, x1) * fx * (1.0 - fy) + at(y1, x0) * (1.0 - fx) * fy + at(y1, x1) * fx * fy
}

/// RoIAlign by direct evaluation: every bin averages `sr²` evenly spaced
/// bilinear samples.
pub fn roi_align_ref(feature: &Tensor, b: &BBox, stride: usize, cfg: &RoiConfig) -> Vec<f64> {
    let c = feature.shape()[1];
    let (oh, ow) = cfg.output_size;
    let sr = cfg.sampling_ratio;
    let s = stride as f64;
    let bw = (b.x2 - b.x1) / s / ow as f64;
    let bh = (b.y2 - b.y1) / s / oh as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for a in 0..sr {
                    for bb in 0..sr {
                        let v = b.y1 / s + bh * (i as f64 + (a as f64 + 0.5) / sr as f64);
                        let u = b.x1 / s + bw * (j as f64 + (bb as f64 + 0.5) / sr as f64);
                        acc += bilinear(feature, ch, u, v);
                    }
                }
                out.push(acc / (sr * sr) as f64);
            }
        }
    }
    out
}

/// Proposal selection spelled out step by step.
pub fn select_proposals_ref(
    anchors: &[BBox],
    logits: &[f64],
    deltas: &[BoxDelta],
    pre_nms_k: usize,
    nms_thresh: f64,
    post_nms_n: usize,
    size: f64,
) -> Vec<(BBox, f64)> {
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for i in 0..anchors.len() {
        let a = anchors[i];
        let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
        let cx = 0.5 * (a.x1 + a.x2) + deltas[i].dx * aw;
        let cy = 0.5 * (a.y1 + a.y2) + deltas[i].dy * ah;
        let w = aw * deltas[i].dw.exp();
        let h = ah * deltas[i].dh.exp();
        let clip = |v: f64| v.max(0.0).min(size);
        let b = BBox::new(clip(cx - 0.5 * w), clip(cy - 0.5 * h), clip(cx + 0.5 * w), clip(cy + 0.5 * h));
        if b.x2 > b.x1 && b.y2 > b.y1 {
            boxes.push(b);
            scores.push(logits[i]);
        }
    }
    let top: Vec<usize> = ranked(&scores).into_iter().take(pre_nms_k).collect();
    let tb: Vec<BBox> = top.iter().map(|&i| boxes[i]).collect();
    let ts: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    nms_ref(&tb, &ts, nms_thresh)
        .into_iter()
        .take(post_nms_n)
        .map(|i| (tb[i], ts[i]))
        .collect()
}

/// Max-IoU matching: the first gt with the largest IoU, fg iff IoU ≥ `thr`.
pub fn match_ref(proposals: &[BBox], gts: &[BBox], thr: f64) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|p| {
            let ious: Vec<f64> = gts.iter().map(|g| iou_ref(p, g)).collect();
            let best = ious.iter().cloned().fold(0.0, f64::max);
            if best >= thr && best > 0.0 {
                ious.iter().position(|&v| v == best)
            } else {
                None
            }
        })
        .collect()
}

/// Single-threshold box AP over the whole area range: greedy matching per
/// image and class, 101-point interpolation by definition (for each recall
/// level, the best precision at any recall at or beyond it), mean over
/// classes that have ground truth. Scores must be distinct.
pub fn ap_ref(dets: &[EvalDet], gts: &[EvalGt], thr: f64) -> f64 {
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let mut total = 0.0;
    for &c in &classes {
        let images: std::collections::BTreeSet<u64> = gts.iter().filter(|g| g.class == c).map(|g| g.image_id).collect();
        let n_gt = gts.iter().filter(|g| g.class == c).count();
        let mut flags: Vec<(f64, bool)> = Vec::new();
        let det_images: std::collections::BTreeSet<u64> = dets.iter().filter(|d| d.class == c).map(|d| d.image_id).collect();
        for img in images.union(&det_images) {
            let g: Vec<&EvalGt> = gts.iter().filter(|g| g.class == c && g.image_id == *img).collect();
            let mut d: Vec<&EvalDet> = dets.iter().filter(|d| d.class == c && d.image_id == *img).collect();
            d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            d.truncate(100);
            let mut used = vec![false; g.len()];
            for det in d {
                let mut best: Option<(usize, f64)> = None;
                for (j, gt) in g.iter().enumerate() {
                    let v = iou_ref(&det.bbox, &gt.bbox);
                    if !used[j] && v >= thr && best.is_none_or(|(_, bv)| v >= bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                }
                flags.push((det.score, best.is_some()));
            }
        }
        flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut pr = Vec::new();
        let mut tp = 0.0;
        for (k, &(_, hit)) in flags.iter().enumerate() {
            if hit {
                tp += 1.0;
            }
            pr.push((tp / n_gt as f64, tp / (k + 1) as f64));
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            ap += pr.iter().filter(|(rec, _)| *rec >= level).map(|(_, p)| *p).fold(0.0, f64::max);
        }
        total += ap / 101.0;
    }
    if classes.is_empty() {
        0.0
    } else {
        total / classes.len() as f64
    }
}

/// Random evaluation case: jittered copies of ground truth plus clutter,
/// all with distinct scores.
pub fn random_eval_case(r: &mut ChaCha8Rng) -> (Vec<EvalDet>, Vec<EvalGt>) {
    let images = r.gen_range(1..=3u64);
    let classes = r.gen_range(1..=3usize);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..images {
        for _ in 0..r.gen_range(0..=5) {
            let b = real_box(r, 64.0, 4.0);
            let class = r.gen_range(0..classes);
            gts.push(EvalGt {
                image_id: img,
                class,
                bbox: b,
                area: b.area(),
                mask: None,
            });
            for _ in 0..r.gen_range(0..=2) {
                let j = |r: &mut ChaCha8Rng| r.gen_range(-3.0..3.0);
                let (dx1, dy1, dx2, dy2) = (j(r), j(r), j(r), j(r));
                let d = BBox::new(b.x1 + dx1, b.y1 + dy1, (b.x2 + dx2).max(b.x1 + dx1 + 1.0), (b.y2 + dy2).max(b.y1 + dy1 + 1.0));
                dets.push(EvalDet {
                    image_id: img,
                    class: if r.gen_bool(0.85) { class } else { r.gen_range(0..classes) },
                    bbox: d,
                    score: r.gen_range(0.0..1.0),
                    mask: None,
                });
            }
        }
        for _ in 0..r.gen_range(0..=3) {
            dets.push(EvalDet {
                image_id: img,
                class: r.gen_range(0..classes),
                bbox: real_box(r, 64.0, 4.0),
                score: r.gen_range(0.0..1.0),
                mask: None,
            });
        }
    }
    (dets, gts)
}

/// Micro detector: 32×32 input, three pyramid levels, hidden width 16.
pub fn micro_config(ds: bool, dc: bool, with_masks: bool, num_stages: usize) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        image_size: 32,
        ds_enabled: ds,
        dc_enabled: dc,
        with_masks,
        num_stages,
        head_hidden: 16,
        pyramid: PyramidConfig {
            backbone_channels: vec![4, 6, 8],
            out_channels: 6,
            level_strides: vec![2, 4, 8],
            assign_k0: 1,
            assign_scale: 12.0,
        },
        rpn: RpnConfig {
            anchor_scale: 4.0,
            pre_nms_k: 200,
            post_nms_n: 30,
            batch_per_image: 32,
            ..RpnConfig::default()
        },
        roi: RoiConfig {
            output_size: (3, 3),
            sampling_ratio: 2,
        },
        mask_roi: RoiConfig {
            output_size: (3, 3),
            sampling_ratio: 2,
        },
        ..ModelConfig::default()
    }
}

/// One 32×32 image with a smooth random background and two objects.
pub fn micro_sample(seed: u64) -> Sample {
    let mut r = rng(seed);
    let n = 3 * 32 * 32;
    let image = Tensor::new(vec![3, 32, 32], (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let mut instances = Vec::new();
    for (class, b) in [(0, BBox::new(3.0, 4.0, 15.0, 14.0)), (1, BBox::new(16.0, 15.0, 30.0, 29.0))] {
        let mut mask = Mask::new(32, 32);
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                if (x + y) % 5 != 0 {
                    mask.set(x, y, true);
                }
            }
        }
        instances.push(Instance { bbox: b, class, mask });
    }
    Sample {
        id: 0,
        file_name: "micro.ppm".into(),
        image,
        instances,
    }
}

pub const MICRO_SAMPLING: RoiSampling = RoiSampling {
    roi_batch: 8,
    fg_fraction: 0.5,
};

/// Outcome of a full-model finite-difference check.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub tensors: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Redraws every parameter uniformly in `±1/√fan_in` (biases in `±0.5`) so
/// that ReLU pre-activations sit well away from their kinks; at the tiny
/// default initialisation finite differences straddle kinks.
pub fn randomize_params(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    for (name, p) in model.params.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        let fan_in = if name.ends_with(".bias") { 0 } else { shape[1..].iter().product::<usize>() };
        let a = if fan_in == 0 { 0.5 } else { 1.0 / (fan_in as f64).sqrt() };
        for v in p.tensor.data_mut() {
            *v = r.gen_range(-a..a);
        }
    }
}

/// Loss of `model` on `sample` with sampling seed `seed`, every stage pinned
/// to `boxes`.
fn replay_loss(model: &Model, sample: &Sample, seed: u64, boxes: &[Vec<(usize, BBox)>]) -> f64 {
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.params, false);
    let out = model
        .forward_train_replay(&mut g, &mut binder, &[sample], &MICRO_SAMPLING, &mut rng(seed), boxes)
        .unwrap();
    let (loss, _) = model.compute_loss(&mut g, &out).unwrap();
    g.value(loss).data()[0]
}

/// Central differences on up to `per_tensor` entries of every parameter
/// tensor (all entries of smaller tensors). Relative error uses a floor of
/// `floor` in the denominator so that near-zero gradients compare absolutely.
pub fn model_grad_check(model: &Model, sample: &Sample, seed: u64, per_tensor: usize, floor: f64) -> GradCheck {
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.params, true);
    let out = model
        .forward_train(&mut g, &mut binder, &[sample], &MICRO_SAMPLING, &mut rng(seed))
        .unwrap();
    let boxes = out.stage_boxes.clone();
    let (loss, _) = model.compute_loss(&mut g, &out).unwrap();
    let grads = binder.collect_grads(&g, &g.backward(loss).unwrap());
    let base = g.value(loss).data()[0];
    assert!((replay_loss(model, sample, seed, &boxes) - base).abs() < 1e-12, "replay must reproduce the loss");

    let eps = 1e-6;
    let mut probe = model.clone();
    let mut pick = rng(seed ^ 0xfd);
    let mut res = GradCheck {
        checked: 0,
        tensors: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        let numel = model.params.get(&name).unwrap().tensor.numel();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(vec![numel]));
        let idx: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut pick, numel, per_tensor).into_vec()
        };
        res.tensors += 1;
        for i in idx {
            let orig = model.params.get(&name).unwrap().tensor.data()[i];
            probe.params.get_mut(&name).unwrap().tensor.data_mut()[i] = orig + eps;
            let lp = replay_loss(&probe, sample, seed, &boxes);
            probe.params.get_mut(&name).unwrap().tensor.data_mut()[i] = orig - eps;
            let lm = replay_loss(&probe, sample, seed, &boxes);
            probe.params.get_mut(&name).unwrap().tensor.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            res.checked += 1;
            if err > res.max_rel_err {
                res.max_rel_err = err;
                res.worst = format!("{name}[{i}]: analytic {a:e}, numeric {fd:e}");
            }
        }
    }
    res
}

/// Gradients of `loss_of(graph, outputs)` for `model` on `batch`.
pub fn grads_of(
    model: &Model,
    batch: &[&Sample],
    seed: u64,
    loss_of: impl Fn(&mut Graph, &dsfpn::model::TrainOutputs) -> dsfpn::Var,
) -> BTreeMap<String, Tensor> {
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.params, true);
    let out = model
        .forward_train(&mut g, &mut binder, batch, &MICRO_SAMPLING, &mut rng(seed))
        .unwrap();
    let loss = loss_of(&mut g, &out);
    binder.collect_grads(&g, &g.backward(loss).unwrap())
}

/// Classification and regression losses of one detection branch, built
/// from its outputs and targets.
pub fn branch_losses(g: &mut Graph, b: &dsfpn::model::DetBranch) -> (dsfpn::Var, dsfpn::Var) {
    let cls = g.softmax_cross_entropy(b.output.cls_logits, &b.targets.classes).unwrap();
    let picks: Vec<(usize, usize)> = b
        .targets
        .fg_rows
        .iter()
        .flat_map(|&r| (0..4).map(move |j| (0, 4 * r + j)))
        .collect();
    let n = b.targets.fg_rows.len();
    let d = g.gather(&[b.output.reg_deltas], picks, vec![n, 4]).unwrap();
    let reg = g.smooth_l1(d, &b.targets.deltas).unwrap();
    (cls, reg)
}

pub fn is_zero(t: Option<&Tensor>) -> bool {
    t.is_none_or(|t| t.data().iter().all(|&v| v == 0.0))
}

pub fn norm(t: Option<&Tensor>) -> f64 {
    t.map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Decoupled towers: the classification loss leaves every regression
/// weight with an exactly zero gradient and vice versa, at every stage and
/// in the auxiliary head. Returns the number of (loss, tensor) pairs checked.
pub fn decoupling_isolation(model: &Model, batch: &[&Sample], seed: u64) -> std::result::Result<usize, String> {
    let stages = model.config.num_stages;
    let mut checked = 0;
    for which in 0..=stages {
        for cls_side in [true, false] {
            let grads = grads_of(model, batch, seed, |g, out| {
                let b = if which < stages { &out.stages[which] } else { out.aux_det.as_ref().expect("aux branch") };
                let (c, r) = branch_losses(g, b);
                if cls_side {
                    c
                } else {
                    r
                }
            });
            let prefix = if which < stages {
                dsfpn::model::stage_prefix(which)
            } else {
                dsfpn::model::AUX_HEAD_PREFIX.to_string()
            };
            let (silent, live) = if cls_side { ("reg_", "cls_fc1") } else { ("cls_", "reg_fc1") };
            for name in model.params.names().filter(|n| n.starts_with(&format!("{prefix}."))) {
                let tail = &name[prefix.len() + 1..];
                if tail.starts_with(silent) {
                    if !is_zero(grads.get(name)) {
                        return Err(format!("{name} has a nonzero gradient from the other tower's loss"));
                    }
                    checked += 1;
                }
            }
            let live_name = format!("{prefix}.{live}.weight");
            if norm(grads.get(&live_name)) == 0.0 {
                return Err(format!("{live_name} receives no gradient from its own loss"));
            }
        }
    }
    Ok(checked)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst central-difference relative error of `build` over every element of
/// every input.
pub fn op_grad_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[dsfpn::Var]) -> dsfpn::Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };
    let value = |vals: &[Tensor]| {
        let (g, _, l) = eval(vals);
        g.value(l).data()[0]
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[slot]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[i] -= eps;
            let fd = (value(&plus) - value(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
        }
    }
    worst
}

/// Finite-difference check of every differentiable graph op. Each op is
/// wrapped in a sigmoid and summed so the loss is a smooth scalar.
pub fn op_grad_checks(seed: u64) -> Vec<(&'static str, f64)> {
    use dsfpn::autodiff::{PoolPlan, PoolRoi};
    let mut r = rng(seed);
    let squash = |g: &mut Graph, y: dsfpn::Var| {
        let s = g.sigmoid(y).unwrap();
        g.sum(s).unwrap()
    };
    let mut out = Vec::new();

    let conv_in = [random_tensor(&mut r, &[2, 2, 5, 5]), random_tensor(&mut r, &[3, 2, 3, 3]), random_tensor(&mut r, &[3])];
    let mut conv = 0.0f64;
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        conv = conv.max(op_grad_error(&conv_in, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            squash(g, y)
        }));
    }
    out.push(("conv2d", conv));

    let lin = [random_tensor(&mut r, &[4, 5]), random_tensor(&mut r, &[3, 5]), random_tensor(&mut r, &[3])];
    out.push((
        "linear",
        op_grad_error(&lin, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            squash(g, y)
        }),
    ));

    // keep inputs away from the kink
    let mut x = random_tensor(&mut r, &[3, 4]);
    for v in x.data_mut() {
        *v += 0.1f64.copysign(*v);
    }
    out.push((
        "relu",
        op_grad_error(&[x], |g, v| {
            let y = g.relu(v[0]).unwrap();
            squash(g, y)
        }),
    ));

    let pair = [random_tensor(&mut r, &[1, 2, 3, 3]), random_tensor(&mut r, &[1, 2, 6, 6])];
    out.push((
        "sigmoid/add/upsample2x",
        op_grad_error(&pair, |g, v| {
            let s = g.sigmoid(v[0]).unwrap();
            let u = g.upsample2x(s).unwrap();
            let y = g.add(u, v[1]).unwrap();
            squash(g, y)
        }),
    ));

    out.push((
        "reshape/weighted_sum",
        op_grad_error(&[random_tensor(&mut r, &[2, 6]), random_tensor(&mut r, &[3, 4])], |g, v| {
            let a = g.reshape(v[0], vec![3, 4]).unwrap();
            let a = squash(g, a);
            let b = squash(g, v[1]);
            g.weighted_sum(&[(a, 0.7), (b, -1.3)]).unwrap()
        }),
    ));

    let plan = PoolPlan {
        channels: 2,
        out_h: 1,
        out_w: 2,
        rois: vec![
            PoolRoi { input: 0, batch: 0, taps: vec![vec![(0, 0.25), (4, 0.75)], vec![(8, 1.0)]] },
            PoolRoi { input: 1, batch: 1, taps: vec![vec![(3, 0.5), (3, 0.5)], vec![(1, 0.1), (2, 0.9)]] },
        ],
    };
    out.push((
        "pool/gather",
        op_grad_error(&[random_tensor(&mut r, &[1, 2, 3, 3]), random_tensor(&mut r, &[2, 2, 2, 2])], |g, v| {
            let p = g.pool(v, plan.clone()).unwrap();
            let s = g.sigmoid(p).unwrap();
            let picked = g.gather(&[s, v[0]], vec![(0, 1), (0, 5), (1, 2), (0, 5)], vec![2, 2]).unwrap();
            squash(g, picked)
        }),
    ));

    out.push((
        "softmax_cross_entropy",
        op_grad_error(&[random_tensor(&mut r, &[4, 3])], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()),
    ));

    let target = random_tensor(&mut r, &[3, 4]);
    out.push((
        "smooth_l1",
        op_grad_error(&[random_tensor(&mut r, &[3, 4])], |g, v| {
            let s = g.sigmoid(v[0]).unwrap();
            g.smooth_l1(s, &target).unwrap()
        }),
    ));

    let bits = Tensor::new(vec![2, 5], vec![1., 0., 1., 1., 0., 0., 0., 1., 0., 1.]).unwrap();
    out.push((
        "bce_with_logits",
        op_grad_error(&[random_tensor(&mut r, &[2, 5])], |g, v| g.bce_with_logits(v[0], &bits).unwrap()),
    ));
    out
}

/// `micro_sample` plus a third object large enough to be pooled from the
/// coarsest level.
pub fn micro_sample_with_large_object(seed: u64) -> Sample {
    let mut s = micro_sample(seed);
    let b = BBox::new(2.0, 2.0, 30.0, 30.0);
    let mut mask = Mask::new(32, 32);
    for y in 6..26 {
        for x in 6..26 {
            mask.set(x, y, true);
        }
    }
    s.instances.push(Instance { bbox: b, class: 0, mask });
    s
}

/// With only the auxiliary losses weighted, every top-down-only parameter
/// gets an exactly zero gradient. Backbone level `k` gets a nonzero gradient
/// exactly when some auxiliary RoI is pooled from level `k` or above.
/// `model` must have every non-aux loss weight at zero. Returns
/// (zero tensors, live tensors, highest level used).
pub fn aux_only_gradient_path(model: &Model, sample: &Sample, seed: u64) -> std::result::Result<(usize, usize, usize), String> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, true);
    let out = model.forward_train(&mut g, &mut b, &[sample], &MICRO_SAMPLING, &mut rng(seed)).unwrap();
    let boxes = dsfpn::model::select_aux_box_source(&out.stage_boxes, &model.config).unwrap();
    let top = boxes
        .iter()
        .map(|(_, bx)| dsfpn::pyramid::assign_level(bx, &model.config.pyramid).unwrap())
        .max()
        .ok_or("no auxiliary RoIs")?;
    let grads = grads_of(model, &[sample], seed, |g, out| model.compute_loss(g, out).unwrap().0);
    let (mut zero, mut live) = (0, 0);
    for name in model.params.names() {
        if ["fpn.", "rpn.", "head.", "mask."].iter().any(|p| name.starts_with(p)) {
            if !is_zero(grads.get(name)) {
                return Err(format!("{name} gets gradient from aux losses"));
            }
            zero += 1;
        } else if let Some(rest) = name.strip_prefix("backbone.") {
            let level: usize = rest.split('.').next().unwrap().parse().unwrap();
            let nonzero = norm(grads.get(name)) > 0.0;
            if nonzero != (level <= top) {
                return Err(format!("{name}: nonzero gradient {nonzero}, highest aux level {top}"));
            }
            live += nonzero as usize;
        }
    }
    Ok((zero, live, top))
}

/// Micro config whose only active losses are the auxiliary ones.
pub fn aux_only_config(num_stages: usize) -> ModelConfig {
    let mut cfg = micro_config(true, true, true, num_stages);
    cfg.loss_weights = dsfpn::model::LossWeights {
        rpn: 0.0,
        aux_det: 1.0,
        aux_mask: 1.0,
        mask: 0.0,
        stages: vec![0.0; num_stages],
    };
    cfg
}
