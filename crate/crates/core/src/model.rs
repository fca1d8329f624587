//! Full detectors: two-stage and three-stage cascade, optionally dually
//! supervised (auxiliary heads on the bottom-up pyramid) and with decoupled
//! box heads.
//!
//! Parameter names: `backbone.*`, `fpn.*`, `rpn.*`, `head.td.s{i}.*`,
//! `mask.td.*` belong to the detector used at inference; everything under
//! `aux.*` exists only for training and is removed by [`strip_aux_heads`].

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OpRecord, Var};
use crate::boxes::{decode, nms, BBox, BoxDelta};
use crate::dataset::{Dataset, Instance, Mask, Sample};
use crate::error::{Error, Result};
use crate::heads::{self, HeadMode, HeadOutput, HeadSpec};
use crate::metrics::{evaluate_all, gts_from_dataset, EvalDet, FullReport};
use crate::params::{Binder, ParamStore};
use crate::pyramid::{self, PyramidConfig};
use crate::roi_align::{pool_pyramid, RoiConfig};
use crate::rpn::{self, AnchorSet, Proposal, RpnConfig};
use crate::tensor::{DType, Tensor};
use crate::training::{build_targets, match_proposals, sample_rois, LossReport, LossTerm, RoiSampling, RoiTargets};
use crate::util::{sigmoid, softmax_rows};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rpn: f64,
    /// Auxiliary detection on the bottom-up pyramid.
    pub aux_det: f64,
    /// Auxiliary segmentation on the bottom-up pyramid.
    pub aux_mask: f64,
    /// Top-down segmentation (last stage).
    pub mask: f64,
    /// Top-down detection, one weight per stage.
    pub stages: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rpn: 1.0,
            aux_det: 1.0,
            aux_mask: 1.0,
            mask: 1.0,
            stages: vec![1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub ds_enabled: bool,
    pub dc_enabled: bool,
    pub with_masks: bool,
    /// 1 for the two-stage detector, 3 for the cascade.
    pub num_stages: usize,
    /// Which stage's boxes feed the auxiliary heads: 0 = RPN proposals,
    /// `i` = boxes refined by top-down stage `i`.
    pub aux_box_source: usize,
    pub loss_weights: LossWeights,
    pub cascade_iou_thresholds: Vec<f64>,
    /// Foreground threshold for the auxiliary heads' targets.
    pub aux_iou_threshold: f64,
    pub head_hidden: usize,
    /// Halve the width of each decoupled tower (equal trunk parameters).
    pub halve_decoupled_width: bool,
    /// Box regression targets are divided by these.
    pub reg_target_std: [f64; 4],
    pub pyramid: PyramidConfig,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
    pub mask_roi: RoiConfig,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            image_size: 64,
            ds_enabled: false,
            dc_enabled: false,
            with_masks: false,
            num_stages: 1,
            aux_box_source: 0,
            loss_weights: LossWeights::default(),
            cascade_iou_thresholds: vec![0.5, 0.6, 0.7],
            aux_iou_threshold: 0.5,
            head_hidden: 128,
            halve_decoupled_width: false,
            reg_target_std: [0.1, 0.1, 0.2, 0.2],
            pyramid: PyramidConfig::default(),
            rpn: RpnConfig::default(),
            roi: RoiConfig::default(),
            mask_roi: RoiConfig {
                output_size: (7, 7),
                sampling_ratio: 2,
            },
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.rpn.validate()?;
        self.roi.validate()?;
        self.mask_roi.validate()?;
        if self.num_classes == 0 {
            return Err(cfg_err("num_classes", "must be positive"));
        }
        let largest = *self.pyramid.level_strides.last().expect("validated");
        if self.image_size == 0 || !self.image_size.is_multiple_of(largest) {
            return Err(cfg_err(
                "image_size",
                format!("must be a positive multiple of the largest stride {largest}"),
            ));
        }
        if self.num_stages != 1 && self.num_stages != 3 {
            return Err(cfg_err("num_stages", "must be 1 (two-stage) or 3 (cascade)"));
        }
        if self.aux_box_source >= self.num_stages {
            return Err(cfg_err(
                "aux_box_source",
                format!("stage {} does not exist with {} stage(s)", self.aux_box_source, self.num_stages),
            ));
        }
        let w = &self.loss_weights;
        for (name, v) in [("rpn", w.rpn), ("aux_det", w.aux_det), ("aux_mask", w.aux_mask), ("mask", w.mask)]
            .into_iter()
            .chain(w.stages.iter().map(|&v| ("stages", v)))
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(&format!("loss_weights.{name}"), "must be finite and non-negative"));
            }
        }
        if w.stages.len() < self.num_stages {
            return Err(cfg_err("loss_weights.stages", "needs one weight per stage"));
        }
        if self.cascade_iou_thresholds.len() < self.num_stages {
            return Err(cfg_err("cascade_iou_thresholds", "needs one threshold per stage"));
        }
        for &t in self.cascade_iou_thresholds.iter().chain([&self.aux_iou_threshold]) {
            if !(t > 0.0 && t < 1.0) {
                return Err(cfg_err("cascade_iou_thresholds", format!("{t} outside (0, 1)")));
            }
        }
        if self.head_hidden < 2 {
            return Err(cfg_err("head_hidden", "must be at least 2"));
        }
        if self.reg_target_std.iter().any(|s| !(*s > 0.0)) {
            return Err(cfg_err("reg_target_std", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(cfg_err("score_threshold", "must be in [0, 1)"));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(cfg_err("nms_threshold", "must be in (0, 1]"));
        }
        if self.max_detections == 0 {
            return Err(cfg_err("max_detections", "must be positive"));
        }
        Ok(())
    }

    pub fn head_mode(&self) -> HeadMode {
        if self.dc_enabled {
            HeadMode::Decoupled
        } else {
            HeadMode::Coupled
        }
    }

    fn head_spec(&self, prefix: String) -> HeadSpec {
        let (h, w) = self.roi.output_size;
        let hidden = if self.dc_enabled && self.halve_decoupled_width {
            self.head_hidden / 2
        } else {
            self.head_hidden
        };
        HeadSpec {
            prefix,
            mode: self.head_mode(),
            in_features: self.pyramid.out_channels * h * w,
            hidden,
            num_logits: self.num_classes + 1,
        }
    }

    fn mask_size(&self) -> (usize, usize) {
        let (h, w) = self.mask_roi.output_size;
        (2 * h, 2 * w)
    }
}

pub fn stage_prefix(i: usize) -> String {
    format!("head.td.s{i}")
}

pub const MASK_PREFIX: &str = "mask.td";
pub const AUX_HEAD_PREFIX: &str = "aux.head";
pub const AUX_MASK_PREFIX: &str = "aux.mask";

/// Every parameter of the detector described by `cfg`, initialised from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    pyramid::declare_backbone(&mut s, &cfg.pyramid, seed);
    pyramid::declare_top_down(&mut s, &cfg.pyramid, seed);
    rpn::declare_params(&mut s, &cfg.pyramid, &cfg.rpn, seed);
    for i in 0..cfg.num_stages {
        heads::declare_detection_head(&mut s, &cfg.head_spec(stage_prefix(i)), seed);
    }
    let c = cfg.pyramid.out_channels;
    if cfg.with_masks {
        heads::declare_mask_head(&mut s, MASK_PREFIX, c, cfg.num_classes, seed);
    }
    if cfg.ds_enabled {
        pyramid::declare_aux_lateral(&mut s, &cfg.pyramid, seed);
        heads::declare_detection_head(&mut s, &cfg.head_spec(AUX_HEAD_PREFIX.into()), seed);
        if cfg.with_masks {
            heads::declare_mask_head(&mut s, AUX_MASK_PREFIX, c, cfg.num_classes, seed);
        }
    }
    Ok(s)
}

const KNOWN_PREFIXES: [&str; 6] = ["backbone.", "fpn.", "rpn.", "head.td.", "mask.td.", "aux."];

/// Removes every auxiliary parameter. Names outside the known families are
/// rejected rather than silently kept.
pub fn strip_aux_heads(params: &ParamStore) -> Result<ParamStore> {
    let mut out = params.clone();
    for name in params.names() {
        if !KNOWN_PREFIXES.iter().any(|p| name.starts_with(p)) {
            return Err(Error::UnknownParameter(name.to_string()));
        }
        if name.starts_with("aux.") {
            out.remove(name);
        }
    }
    Ok(out)
}

/// A box branch on the tape together with its targets.
#[derive(Clone, Debug)]
pub struct DetBranch {
    pub output: HeadOutput,
    pub targets: RoiTargets,
}

#[derive(Clone, Debug)]
pub struct MaskBranch {
    /// `fg × K × h × w`
    pub logits: Var,
    pub classes: Vec<usize>,
    pub targets: Tensor,
}

/// Everything one training forward pass put on the tape.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    /// RPN proposals per image (B0 before sampling).
    pub proposals: Vec<Vec<Proposal>>,
    /// Top-down detection stages D1..DT.
    pub stages: Vec<DetBranch>,
    /// Boxes fed to each stage, plus the boxes refined by the last stage.
    pub stage_boxes: Vec<Vec<(usize, BBox)>>,
    /// Top-down mask (stage 1 of the two-stage model, stage 3 of the cascade);
    /// `None` also when no foreground RoI was sampled.
    pub mask: Option<MaskBranch>,
    pub aux_det: Option<DetBranch>,
    pub aux_mask: Option<MaskBranch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Zero-based class.
    pub label: usize,
    pub score: f64,
    #[serde(skip)]
    pub mask: Option<Mask>,
}

/// Boxes `rois` moved by detached predicted deltas (scaled by `std`) and
/// clipped; a box that collapses keeps its previous coordinates.
fn refine(graph: &Graph, deltas: Var, rois: &[(usize, BBox)], std: &[f64; 4], size: f64) -> Result<Vec<(usize, BBox)>> {
    let d = graph.value(deltas).data();
    rois.iter()
        .enumerate()
        .map(|(r, &(n, b))| {
            let delta = BoxDelta {
                dx: d[4 * r] * std[0],
                dy: d[4 * r + 1] * std[1],
                dw: d[4 * r + 2] * std[2],
                dh: d[4 * r + 3] * std[3],
            };
            let nb = decode(&b, &delta, Some((size, size)))?;
            Ok((n, if nb.width() > 0.0 && nb.height() > 0.0 { nb } else { b }))
        })
        .collect()
}

/// Pastes `h×w` mask probabilities into an image-sized binary mask.
fn paste_mask(probs: &[f64], h: usize, w: usize, b: &BBox, size: usize) -> Mask {
    let mut m = Mask::new(size, size);
    let (bw, bh) = (b.width(), b.height());
    let sample = |u: f64, len: usize| {
        let p = u.clamp(0.0, (len - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(len - 1), p - lo as f64)
    };
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(size);
    let y1 = (b.y2.ceil() as usize).min(size);
    for y in y0..y1 {
        let py = y as f64 + 0.5;
        if py < b.y1 || py >= b.y2 {
            continue;
        }
        let (ylo, yhi, fy) = sample((py - b.y1) / bh * h as f64 - 0.5, h);
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            if px < b.x1 || px >= b.x2 {
                continue;
            }
            let (xlo, xhi, fx) = sample((px - b.x1) / bw * w as f64 - 0.5, w);
            let v = (1.0 - fy) * ((1.0 - fx) * probs[ylo * w + xlo] + fx * probs[ylo * w + xhi])
                + fy * ((1.0 - fx) * probs[yhi * w + xlo] + fx * probs[yhi * w + xhi]);
            m.set(x, y, v >= 0.5);
        }
    }
    m
}

/// Returns B0, B1 or B2 for the auxiliary heads. Boxes are plain
/// coordinates, so no gradient flows through them.
pub fn select_aux_box_source(stage_boxes: &[Vec<(usize, BBox)>], cfg: &ModelConfig) -> Result<Vec<(usize, BBox)>> {
    if cfg.aux_box_source >= cfg.num_stages || cfg.aux_box_source >= stage_boxes.len() {
        return Err(cfg_err(
            "aux_box_source",
            format!("stage {} has not been computed", cfg.aux_box_source),
        ));
    }
    Ok(stage_boxes[cfg.aux_box_source].clone())
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    anchors: AnchorSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps existing weights; every inference parameter must be present
    /// with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, 0)?;
        for (name, p) in expected.iter() {
            if name.starts_with("aux.") {
                continue;
            }
            match params.get(name) {
                None => return Err(Error::Format(format!("checkpoint lacks `{name}`"))),
                Some(q) if q.tensor.shape() != p.tensor.shape() => {
                    return Err(Error::Format(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        q.tensor.shape(),
                        p.tensor.shape()
                    )))
                }
                _ => {}
            }
        }
        let anchors = rpn::generate_anchors(&config.pyramid, &config.rpn, config.image_size);
        Ok(Self {
            config,
            params,
            anchors,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn has_aux(&self) -> bool {
        self.params.names().any(|n| n.starts_with("aux."))
    }

    /// Same detector without the auxiliary parameters (and with DS disabled
    /// in the config, since nothing remains to train it with).
    pub fn stripped(&self) -> Result<Model> {
        let mut config = self.config.clone();
        config.ds_enabled = false;
        Model::from_params(config, strip_aux_heads(&self.params)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        self.params.save(dir, DType::F64)
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        Model::from_params(config, ParamStore::load(dir)?)
    }

    fn stack_images(&self, images: &[&Tensor]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for im in images {
            if im.shape() != [3, s, s] {
                return Err(Error::Shape {
                    op: "model input",
                    detail: format!("expected 3×{s}×{s} image, got {:?}", im.shape()),
                });
            }
            data.extend_from_slice(im.data());
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    fn mask_branch(
        &self,
        graph: &mut Graph,
        binder: &mut Binder<'_>,
        maps: &[Var],
        prefix: &str,
        targets: &RoiTargets,
    ) -> Result<Option<MaskBranch>> {
        if targets.fg_rows.is_empty() {
            return Ok(None);
        }
        let rois: Vec<(usize, BBox)> = targets.fg_rows.iter().map(|&r| targets.rois[r]).collect();
        let pooled = pool_pyramid(graph, maps, &rois, &self.config.pyramid, &self.config.mask_roi)?;
        let logits = heads::mask_forward(graph, binder, prefix, pooled)?;
        Ok(Some(MaskBranch {
            logits,
            classes: targets.fg_classes.clone(),
            targets: targets.masks.clone().expect("mask targets requested"),
        }))
    }

    /// Match `boxes` (grouped by batch row) at `thr` and build targets.
    fn targets_for(
        &self,
        boxes: Vec<(usize, BBox)>,
        gts: &[&[Instance]],
        thr: f64,
        with_masks: bool,
    ) -> Result<RoiTargets> {
        let mut matches = Vec::with_capacity(boxes.len());
        for (n, g) in gts.iter().enumerate() {
            let mine: Vec<BBox> = boxes.iter().filter(|r| r.0 == n).map(|r| r.1).collect();
            let gb: Vec<BBox> = g.iter().map(|i| i.bbox).collect();
            matches.extend(match_proposals(&mine, &gb, thr)?);
        }
        let mask_size = with_masks.then(|| self.config.mask_size());
        build_targets(boxes, &matches, gts, mask_size, self.config.reg_target_std)
    }

    /// Training forward pass over a batch of samples.
    pub fn forward_train<R: Rng>(
        &self,
        graph: &mut Graph,
        binder: &mut Binder<'_>,
        batch: &[&Sample],
        sampling: &RoiSampling,
        rng: &mut R,
    ) -> Result<TrainOutputs> {
        self.forward_train_impl(graph, binder, batch, sampling, rng, None)
    }

    /// Like [`forward_train`](Self::forward_train) but every stage uses the
    /// boxes of `stage_boxes` (as returned in a previous run's
    /// [`TrainOutputs::stage_boxes`]) instead of boxes derived from the
    /// current weights. Box coordinates are detached from the graph, so this
    /// replays the exact function the gradients describe; finite-difference
    /// checks rely on it.
    pub fn forward_train_replay<R: Rng>(
        &self,
        graph: &mut Graph,
        binder: &mut Binder<'_>,
        batch: &[&Sample],
        sampling: &RoiSampling,
        rng: &mut R,
        stage_boxes: &[Vec<(usize, BBox)>],
    ) -> Result<TrainOutputs> {
        if stage_boxes.len() != self.config.num_stages + 1 {
            return Err(Error::InvalidArgument(format!(
                "replay needs {} box sets, got {}",
                self.config.num_stages + 1,
                stage_boxes.len()
            )));
        }
        self.forward_train_impl(graph, binder, batch, sampling, rng, Some(stage_boxes))
    }

    fn forward_train_impl<R: Rng>(
        &self,
        graph: &mut Graph,
        binder: &mut Binder<'_>,
        batch: &[&Sample],
        sampling: &RoiSampling,
        rng: &mut R,
        fixed: Option<&[Vec<(usize, BBox)>]>,
    ) -> Result<TrainOutputs> {
        let replace = |i: usize, current: Vec<(usize, BBox)>| -> Result<Vec<(usize, BBox)>> {
            match fixed {
                Some(f) if f[i].len() != current.len() => Err(Error::InvalidArgument(format!(
                    "replayed stage {i} has {} boxes, the sampler produced {}",
                    f[i].len(),
                    current.len()
                ))),
                Some(f) => Ok(f[i].clone()),
                None => Ok(current),
            }
        };
        let cfg = &self.config;
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let image = graph.constant(self.stack_images(&images)?);
        let pyr = pyramid::build_pyramid(graph, binder, image, &cfg.pyramid, cfg.ds_enabled)?;
        let levels = rpn::rpn_forward(graph, binder, &pyr.top_down)?;
        let gts: Vec<&[Instance]> = batch.iter().map(|s| s.instances.as_slice()).collect();
        let gt_boxes: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|i| i.bbox).collect()).collect();
        let rpn_targets = rpn::build_rpn_targets(&self.anchors, &gt_boxes, &cfg.rpn, rng)?;
        let (rpn_cls, rpn_reg) = rpn::rpn_loss(graph, &levels, &self.anchors, &rpn_targets)?;

        let size = cfg.image_size as f64;
        let flat = self.anchors.all();
        let mut proposals = Vec::with_capacity(batch.len());
        let mut rois = Vec::new();
        let mut first_matches = Vec::new();
        for (n, image_gts) in gt_boxes.iter().enumerate() {
            let (logits, deltas) = rpn::anchor_predictions(graph, &levels, &self.anchors, n);
            let props = rpn::select_proposals(
                &flat,
                &logits,
                &deltas,
                cfg.rpn.pre_nms_k,
                cfg.rpn.nms_thresh,
                cfg.rpn.post_nms_n,
                (size, size),
            )?;
            let mut cands: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
            cands.extend(image_gts);
            let matches = match_proposals(&cands, image_gts, cfg.cascade_iou_thresholds[0])?;
            for i in sample_rois(&matches, sampling.roi_batch, sampling.fg_fraction, rng) {
                rois.push((n, cands[i]));
                first_matches.push(matches[i]);
            }
            proposals.push(props);
        }
        if rois.is_empty() {
            return Err(Error::EmptyProposals);
        }
        let rois = replace(0, rois)?;

        let t = cfg.num_stages;
        let mut stages = Vec::with_capacity(t);
        let mut stage_boxes = vec![rois.clone()];
        let mask_size = cfg.mask_size();
        let mut targets = build_targets(
            rois,
            &first_matches,
            &gts,
            (cfg.with_masks && t == 1).then_some(mask_size),
            cfg.reg_target_std,
        )?;
        for i in 0..t {
            let pooled = pool_pyramid(graph, &pyr.top_down, &targets.rois, &cfg.pyramid, &cfg.roi)?;
            let output = heads::detection_forward(graph, binder, &stage_prefix(i), cfg.head_mode(), pooled)?;
            let refined = replace(i + 1, refine(graph, output.reg_deltas, &targets.rois, &cfg.reg_target_std, size)?)?;
            stage_boxes.push(refined.clone());
            let next = if i + 1 < t {
                let last = i + 2 == t;
                Some(self.targets_for(refined, &gts, cfg.cascade_iou_thresholds[i + 1], cfg.with_masks && last)?)
            } else {
                None
            };
            stages.push(DetBranch { output, targets });
            match next {
                Some(n) => targets = n,
                None => break,
            }
        }
        let mask = if cfg.with_masks {
            let last = &stages[t - 1].targets;
            self.mask_branch(graph, binder, &pyr.top_down, MASK_PREFIX, last)?
        } else {
            None
        };

        let (aux_det, aux_mask) = match &pyr.aux_lateral {
            Some(maps) => {
                let boxes = select_aux_box_source(&stage_boxes, cfg)?;
                let targets = self.targets_for(boxes, &gts, cfg.aux_iou_threshold, cfg.with_masks)?;
                let pooled = pool_pyramid(graph, maps, &targets.rois, &cfg.pyramid, &cfg.roi)?;
                let output = heads::detection_forward(graph, binder, AUX_HEAD_PREFIX, cfg.head_mode(), pooled)?;
                let m = if cfg.with_masks {
                    self.mask_branch(graph, binder, maps, AUX_MASK_PREFIX, &targets)?
                } else {
                    None
                };
                (Some(DetBranch { output, targets }), m)
            }
            None => (None, None),
        };

        Ok(TrainOutputs {
            rpn_cls,
            rpn_reg,
            proposals,
            stages,
            stage_boxes,
            mask,
            aux_det,
            aux_mask,
        })
    }

    fn det_terms(graph: &mut Graph, b: &DetBranch) -> Result<(Var, Var)> {
        let cls = graph.softmax_cross_entropy(b.output.cls_logits, &b.targets.classes)?;
        let picks: Vec<(usize, usize)> = b
            .targets
            .fg_rows
            .iter()
            .flat_map(|&r| (0..4).map(move |j| (0, 4 * r + j)))
            .collect();
        let n = b.targets.fg_rows.len();
        let d = graph.gather(&[b.output.reg_deltas], picks, vec![n, 4])?;
        let reg = graph.smooth_l1(d, &b.targets.deltas)?;
        Ok((cls, reg))
    }

    fn mask_term(graph: &mut Graph, m: Option<&MaskBranch>) -> Result<Var> {
        match m {
            Some(m) => {
                let picked = heads::select_mask_channels(graph, m.logits, &m.classes)?;
                graph.bce_with_logits(picked, &m.targets)
            }
            None => Ok(graph.constant(Tensor::scalar(0.0))),
        }
    }

    /// Builds `L_final` for the configured detector; see
    /// [`compute_loss_two_stage`](Self::compute_loss_two_stage) and
    /// [`compute_loss_multi_stage`](Self::compute_loss_multi_stage).
    pub fn compute_loss(&self, graph: &mut Graph, out: &TrainOutputs) -> Result<(Var, LossReport)> {
        if self.config.num_stages == 1 {
            self.compute_loss_two_stage(graph, out)
        } else {
            self.compute_loss_multi_stage(graph, out)
        }
    }

    fn finish(graph: &mut Graph, terms: Vec<(&str, Var, f64)>) -> Result<(Var, LossReport)> {
        let weighted: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
        let total = graph.weighted_sum(&weighted)?;
        let report = LossReport {
            total: graph.value(total).data()[0],
            terms: terms
                .iter()
                .map(|&(name, v, w)| LossTerm {
                    name: name.to_string(),
                    weight: w,
                    value: graph.value(v).data()[0],
                })
                .collect(),
            grad_norm: None,
        };
        Ok((total, report))
    }

    /// `α_rpn·L_rpn + α1·L(D0) + α2·L(D1) + α3·L(S0) + α4·L(S1)`, auxiliary
    /// terms present only with DS and mask terms only with masks.
    pub fn compute_loss_two_stage(&self, graph: &mut Graph, out: &TrainOutputs) -> Result<(Var, LossReport)> {
        let cfg = &self.config;
        if cfg.num_stages != 1 || out.stages.len() != 1 {
            return Err(Error::InvalidArgument("two-stage loss needs exactly one stage".into()));
        }
        let w = &cfg.loss_weights;
        let mut terms = vec![("rpn_cls", out.rpn_cls, w.rpn), ("rpn_reg", out.rpn_reg, w.rpn)];
        if let Some(aux) = &out.aux_det {
            let (c, r) = Self::det_terms(graph, aux)?;
            terms.push(("aux_det_cls", c, w.aux_det));
            terms.push(("aux_det_reg", r, w.aux_det));
        }
        let (c, r) = Self::det_terms(graph, &out.stages[0])?;
        terms.push(("det_cls", c, w.stages[0]));
        terms.push(("det_reg", r, w.stages[0]));
        if cfg.with_masks {
            if cfg.ds_enabled {
                let m = Self::mask_term(graph, out.aux_mask.as_ref())?;
                terms.push(("aux_mask", m, w.aux_mask));
            }
            let m = Self::mask_term(graph, out.mask.as_ref())?;
            terms.push(("mask", m, w.mask));
        }
        Self::finish(graph, terms)
    }

    /// `α_rpn·L_rpn + α1·L(D0) + α2·L(S0) + α3·L(S3) + Σ α_si·L(Di)`.
    pub fn compute_loss_multi_stage(&self, graph: &mut Graph, out: &TrainOutputs) -> Result<(Var, LossReport)> {
        let cfg = &self.config;
        if cfg.num_stages != 3 || out.stages.len() != 3 {
            return Err(Error::InvalidArgument("multi-stage loss needs three stages".into()));
        }
        let w = &cfg.loss_weights;
        let mut terms = vec![("rpn_cls", out.rpn_cls, w.rpn), ("rpn_reg", out.rpn_reg, w.rpn)];
        if let Some(aux) = &out.aux_det {
            let (c, r) = Self::det_terms(graph, aux)?;
            terms.push(("aux_det_cls", c, w.aux_det));
            terms.push(("aux_det_reg", r, w.aux_det));
        }
        if cfg.with_masks {
            if cfg.ds_enabled {
                let m = Self::mask_term(graph, out.aux_mask.as_ref())?;
                terms.push(("aux_mask", m, w.aux_mask));
            }
            let m = Self::mask_term(graph, out.mask.as_ref())?;
            terms.push(("mask", m, w.mask));
        }
        const NAMES: [(&str, &str); 3] = [("s1_cls", "s1_reg"), ("s2_cls", "s2_reg"), ("s3_cls", "s3_reg")];
        for (i, st) in out.stages.iter().enumerate() {
            let (c, r) = Self::det_terms(graph, st)?;
            terms.push((NAMES[i].0, c, w.stages[i]));
            terms.push((NAMES[i].1, r, w.stages[i]));
        }
        Self::finish(graph, terms)
    }

    /// Detections for one `3×S×S` image using only the top-down path.
    pub fn forward_infer(&self, image: &Tensor) -> Result<Vec<Detection>> {
        Ok(self.forward_infer_traced(image)?.0)
    }

    /// [`forward_infer`](Self::forward_infer) plus the executed op trace.
    pub fn forward_infer_traced(&self, image: &Tensor) -> Result<(Vec<Detection>, Vec<OpRecord>)> {
        let cfg = &self.config;
        let mut graph = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let x = graph.constant(self.stack_images(&[image])?);
        let pyr = pyramid::build_pyramid(&mut graph, &mut binder, x, &cfg.pyramid, false)?;
        let levels = rpn::rpn_forward(&mut graph, &mut binder, &pyr.top_down)?;
        let size = cfg.image_size as f64;
        let (logits, deltas) = rpn::anchor_predictions(&graph, &levels, &self.anchors, 0);
        let props = rpn::select_proposals(
            &self.anchors.all(),
            &logits,
            &deltas,
            cfg.rpn.pre_nms_k,
            cfg.rpn.nms_thresh,
            cfg.rpn.post_nms_n,
            (size, size),
        )?;
        if props.is_empty() {
            return Ok((Vec::new(), graph.trace()));
        }
        let mut boxes: Vec<(usize, BBox)> = props.iter().map(|p| (0, p.bbox)).collect();
        let mut scores = Vec::new();
        for i in 0..cfg.num_stages {
            let pooled = pool_pyramid(&mut graph, &pyr.top_down, &boxes, &cfg.pyramid, &cfg.roi)?;
            let out = heads::detection_forward(&mut graph, &mut binder, &stage_prefix(i), cfg.head_mode(), pooled)?;
            if i + 1 == cfg.num_stages {
                scores = softmax_rows(graph.value(out.cls_logits).data(), cfg.num_classes + 1);
            }
            boxes = refine(&graph, out.reg_deltas, &boxes, &cfg.reg_target_std, size)?;
        }

        let k = cfg.num_classes + 1;
        let mut dets = Vec::new();
        for c in 1..k {
            let idx: Vec<usize> = (0..boxes.len()).filter(|&r| scores[r * k + c] > cfg.score_threshold).collect();
            let cb: Vec<BBox> = idx.iter().map(|&r| boxes[r].1).collect();
            let cs: Vec<f64> = idx.iter().map(|&r| scores[r * k + c]).collect();
            for j in nms(&cb, &cs, cfg.nms_threshold) {
                dets.push(Detection {
                    bbox: cb[j],
                    label: c - 1,
                    score: cs[j],
                    mask: None,
                });
            }
        }
        // stable: equal scores keep class order
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(cfg.max_detections);

        if cfg.with_masks && !dets.is_empty() {
            let rois: Vec<(usize, BBox)> = dets.iter().map(|d| (0, d.bbox)).collect();
            let pooled = pool_pyramid(&mut graph, &pyr.top_down, &rois, &cfg.pyramid, &cfg.mask_roi)?;
            let logits = heads::mask_forward(&mut graph, &mut binder, MASK_PREFIX, pooled)?;
            let (mh, mw) = cfg.mask_size();
            let lv = graph.value(logits).data();
            let kc = cfg.num_classes;
            for (i, d) in dets.iter_mut().enumerate() {
                let base = (i * kc + d.label) * mh * mw;
                let probs: Vec<f64> = lv[base..base + mh * mw].iter().map(|&v| sigmoid(v)).collect();
                d.mask = Some(paste_mask(&probs, mh, mw, &d.bbox, cfg.image_size));
            }
        }
        Ok((dets, graph.trace()))
    }

    /// Detections over a whole dataset in evaluation form.
    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<EvalDet>> {
        let mut out = Vec::new();
        for s in &data.samples {
            for d in self.forward_infer(&s.image)? {
                out.push(EvalDet {
                    image_id: s.id,
                    class: d.label,
                    bbox: d.bbox,
                    score: d.score,
                    mask: d.mask,
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<FullReport> {
        evaluate_all(&self.predict_dataset(data)?, &gts_from_dataset(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            aux_box_source: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "aux_box_source"));
        let bad = ModelConfig {
            num_stages: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.loss_weights.aux_det = -1.0;
        assert!(bad.validate().is_err());
        let json = r#"{"ds_enabled": true, "bogus": 1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
        let json = r#"{"ds_enabled": true}"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert!(c.ds_enabled && c.num_stages == 1);
    }

    #[test]
    fn strip_rules() {
        let cfg = ModelConfig {
            ds_enabled: true,
            with_masks: true,
            ..Default::default()
        };
        let ds = init_params(&cfg, 1).unwrap();
        let base = init_params(
            &ModelConfig {
                ds_enabled: false,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        assert_eq!(strip_aux_heads(&ds).unwrap(), base);
        assert_eq!(strip_aux_heads(&base).unwrap(), base);
        let mut odd = base.clone();
        odd.insert("mystery.weight", Tensor::zeros(vec![1]), true);
        assert!(matches!(strip_aux_heads(&odd), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn paste_full_probability_fills_box() {
        let probs = vec![1.0; 4];
        let m = paste_mask(&probs, 2, 2, &BBox::new(2.0, 3.0, 6.0, 9.0), 16);
        assert_eq!(m.area(), 24);
        assert_eq!(m.bbox().unwrap(), BBox::new(2.0, 3.0, 6.0, 9.0));
    }
}
