//! Proposal matching, RoI sampling, target building, SGD and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::boxes::{encode, iou, BBox};
use crate::dataset::{Dataset, Instance, Sample};
use crate::error::{Error, Result};
use crate::metrics::FullReport;
use crate::model::Model;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Up to `⌊batch·fg_fraction⌋` random picks from `fg`, then random picks
/// from `bg` for the remainder. Foregrounds come first in the result.
pub fn sample_split<R: Rng>(fg: &[usize], bg: &[usize], batch: usize, fg_fraction: f64, rng: &mut R) -> Vec<usize> {
    let n_fg = ((batch as f64 * fg_fraction).floor() as usize).min(fg.len());
    let n_bg = (batch - n_fg).min(bg.len());
    let mut out: Vec<usize> = sample(rng, fg.len(), n_fg).into_iter().map(|i| fg[i]).collect();
    out.extend(sample(rng, bg.len(), n_bg).into_iter().map(|i| bg[i]));
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalMatch {
    /// Matched ground truth; `Some` exactly for foreground proposals.
    pub gt: Option<usize>,
    /// Best IoU over all ground truth (0 when there is none).
    pub iou: f64,
}

/// Foreground when the best IoU reaches `threshold` (ties go to the lower gt
/// index), background otherwise.
pub fn match_proposals(proposals: &[BBox], gts: &[BBox], threshold: f64) -> Result<Vec<ProposalMatch>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {threshold} outside (0, 1]")));
    }
    Ok(proposals
        .iter()
        .map(|p| {
            let mut best = (0.0, None);
            for (j, g) in gts.iter().enumerate() {
                let v = iou(p, g);
                if v > best.0 {
                    best = (v, Some(j));
                }
            }
            ProposalMatch {
                gt: if best.0 >= threshold { best.1 } else { None },
                iou: best.0,
            }
        })
        .collect())
}

pub fn sample_rois<R: Rng>(matches: &[ProposalMatch], roi_batch: usize, fg_fraction: f64, rng: &mut R) -> Vec<usize> {
    let fg: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].gt.is_some()).collect();
    let bg: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].gt.is_none()).collect();
    sample_split(&fg, &bg, roi_batch, fg_fraction, rng)
}

/// How many RoIs per image the box heads see during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSampling {
    pub roi_batch: usize,
    pub fg_fraction: f64,
}

/// Per-RoI training targets for one detection branch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    /// `(batch row, box)` fed to the head.
    pub rois: Vec<(usize, BBox)>,
    /// 0 is background, `c + 1` is class `c`.
    pub classes: Vec<usize>,
    pub fg_rows: Vec<usize>,
    /// `fg × 4` encoded deltas, divided by the regression std.
    pub deltas: Tensor,
    /// Zero-based class of each foreground row.
    pub fg_classes: Vec<usize>,
    /// `fg × h × w` binary mask targets.
    pub masks: Option<Tensor>,
}

pub fn build_targets(
    rois: Vec<(usize, BBox)>,
    matches: &[ProposalMatch],
    gts: &[&[Instance]],
    mask_size: Option<(usize, usize)>,
    reg_std: [f64; 4],
) -> Result<RoiTargets> {
    if rois.len() != matches.len() {
        return Err(Error::Shape {
            op: "build_targets",
            detail: format!("{} rois, {} matches", rois.len(), matches.len()),
        });
    }
    let mut classes = Vec::with_capacity(rois.len());
    let mut fg_rows = Vec::new();
    let mut deltas = Vec::new();
    let mut fg_classes = Vec::new();
    let mut masks = Vec::new();
    for (row, (&(n, b), m)) in rois.iter().zip(matches).enumerate() {
        let Some(j) = m.gt else {
            classes.push(0);
            continue;
        };
        let inst = &gts[n][j];
        classes.push(inst.class + 1);
        fg_rows.push(row);
        fg_classes.push(inst.class);
        let d = encode(&b, &inst.bbox)?.to_array();
        deltas.extend((0..4).map(|k| d[k] / reg_std[k]));
        if let Some((h, w)) = mask_size {
            if inst.mask.area() == 0 {
                return Err(Error::InvalidArgument("foreground instance has an empty mask".into()));
            }
            masks.extend(inst.mask.crop_resample(&b, h, w)?);
        }
    }
    let nfg = fg_rows.len();
    Ok(RoiTargets {
        rois,
        classes,
        deltas: Tensor::from_parts(vec![nfg, 4], deltas),
        masks: mask_size.map(|(h, w)| Tensor::from_parts(vec![nfg, h, w], masks)),
        fg_rows,
        fg_classes,
    })
}

// ---------------------------------------------------------------------------
// loss bookkeeping

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
    /// Global L2 norm of the gradient, once computed.
    pub grad_norm: Option<f64>,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

// ---------------------------------------------------------------------------
// optimiser

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

/// `v ← μ·v + g + λ·p; p ← p − lr·v` for every trainable parameter with a
/// gradient. Biases (and anything else marked so) skip weight decay. All
/// gradients are checked before anything is updated, so a failed step leaves
/// the parameters untouched.
pub fn sgd_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!("`{name}` gradient {:?} vs parameter {:?}", g.shape(), p.tensor.shape()),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        if !p.trainable {
            continue;
        }
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        for ((pv, vv), gv) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vv = cfg.momentum * *vv + gv + wd * *pv;
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub roi_batch: usize,
    pub fg_fraction: f64,
    pub seed: u64,
    /// Evaluate every this many iterations (0 = only at the end).
    pub eval_interval: usize,
    /// Print a progress line to stderr every this many iterations (0 = quiet).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            lr_steps: vec![1500],
            lr_decay: 0.1,
            batch_size: 2,
            roi_batch: 32,
            fg_fraction: 0.25,
            seed: 0,
            eval_interval: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::Config {
            field: field.into(),
            reason: reason.into(),
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(bad("lr_decay", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if self.roi_batch == 0 {
            return Err(bad("roi_batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(bad("fg_fraction", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate in effect for (zero-based) step `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&s| it >= s).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    pub fn sampling(&self) -> RoiSampling {
        RoiSampling {
            roi_batch: self.roi_batch,
            fg_fraction: self.fg_fraction,
        }
    }
}

/// Loss and parameter gradients of one batch, without updating anything.
pub fn compute_gradients<R: Rng>(
    model: &Model,
    batch: &[&Sample],
    sampling: &RoiSampling,
    rng: &mut R,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let mut graph = Graph::new();
    let mut binder = Binder::new(&model.params, true);
    let outputs = model.forward_train(&mut graph, &mut binder, batch, sampling, rng)?;
    let (loss, mut report) = model.compute_loss(&mut graph, &outputs)?;
    let grads = graph.backward(loss)?;
    let named = binder.collect_grads(&graph, &grads);
    let sq: f64 = named.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
    report.grad_norm = Some(sq.sqrt());
    Ok((report, named))
}

/// Datasets evaluated during training.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalSets<'a> {
    /// Fixed subsample of the training data.
    pub train: Option<&'a Dataset>,
    pub val: Option<&'a Dataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub train_ap50: Option<f64>,
    pub val: Option<FullReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    /// Number of completed updates.
    pub iteration: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainRun {
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    /// Iterations skipped because no RoIs survived sampling.
    pub skipped: usize,
    /// `(iteration, val AP50)` of the best evaluation.
    pub best: Option<(usize, f64)>,
}

impl TrainRun {
    /// CSV with one row per iteration; evaluation columns are filled on
    /// evaluation rows only.
    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self
            .log
            .first()
            .map(|r| r.report.terms.iter().map(|t| t.name.as_str()).collect())
            .unwrap_or_default();
        let mut out = String::from("iteration");
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        out.push_str(",L_final,lr,train_ap50,val_ap,val_ap50,val_ap75\n");
        let evals: BTreeMap<usize, &EvalRow> = self.evals.iter().map(|e| (e.iteration, e)).collect();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for row in &self.log {
            let _ = write!(out, "{}", row.iteration);
            for t in &row.report.terms {
                let _ = write!(out, ",{}", t.value);
            }
            let _ = write!(out, ",{},{}", row.report.total, row.lr);
            let e = evals.get(&row.iteration);
            let val = e.and_then(|e| e.val);
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                fmt(e.and_then(|e| e.train_ap50)),
                fmt(val.map(|v| v.bbox.ap)),
                fmt(val.map(|v| v.bbox.ap50)),
                fmt(val.map(|v| v.bbox.ap75)),
            );
        }
        out
    }
}

fn evaluate_row(model: &Model, iteration: usize, sets: &EvalSets<'_>) -> Result<EvalRow> {
    let train_ap50 = match sets.train {
        Some(d) => Some(model.evaluate(d)?.bbox.ap50),
        None => None,
    };
    let val = match sets.val {
        Some(d) => Some(model.evaluate(d)?),
        None => None,
    };
    Ok(EvalRow {
        iteration,
        train_ap50,
        val,
    })
}

/// Runs `cfg.iterations` SGD updates on `data`. When `out` is given, writes
/// `log.csv` and the `final` (and `best`, when validation data is present)
/// checkpoints there; on divergence writes `last_stable` and returns
/// [`Error::Diverged`].
pub fn train(model: &mut Model, cfg: &TrainConfig, data: &Dataset, sets: &EvalSets<'_>, out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let mut run = TrainRun::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let sampling = cfg.sampling();
    let should_eval = |it: usize| {
        it == cfg.iterations || (cfg.eval_interval > 0 && it.is_multiple_of(cfg.eval_interval))
    };

    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = sample(&mut rng, data.len(), data.len()).into_vec();
                cursor = 0;
            }
            batch.push(&data.samples[order[cursor]]);
            cursor += 1;
        }
        let diverged = |reason: String, run: &TrainRun, model: &Model| -> Result<TrainRun> {
            if let Some(dir) = out {
                model.save(&dir.join("last_stable"))?;
                fs::write(dir.join("log.csv"), run.to_csv())?;
            }
            Err(Error::Diverged { iteration: it, reason })
        };
        let lr = cfg.lr_at(it);
        let (report, grads) = match compute_gradients(model, &batch, &sampling, &mut rng) {
            Ok(v) => v,
            Err(Error::EmptyProposals) => {
                run.skipped += 1;
                continue;
            }
            Err(Error::NonFinite(what)) => return diverged(format!("non-finite {what}"), &run, model),
            Err(e) => return Err(e),
        };
        if !report.total.is_finite() {
            return diverged("loss is not finite".into(), &run, model);
        }
        let step = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        if let Err(Error::NonFinite(what)) = sgd_step(&mut model.params, &grads, &step, &mut state) {
            return diverged(format!("non-finite {what}"), &run, model);
        }
        let done = it + 1;
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            eprintln!("iter {done:>5}  loss {:.4}  lr {lr}", report.total);
        }
        run.log.push(LogRow {
            iteration: done,
            lr,
            report,
        });
        if should_eval(done) && (sets.train.is_some() || sets.val.is_some()) {
            let row = evaluate_row(model, done, sets)?;
            if let Some(v) = row.val {
                if run.best.is_none_or(|(_, b)| v.bbox.ap50 > b) {
                    run.best = Some((done, v.bbox.ap50));
                    if let Some(dir) = out {
                        model.save(&dir.join("best"))?;
                    }
                }
            }
            if cfg.log_every > 0 {
                eprintln!("iter {done:>5}  eval {:?}", row.val.map(|v| v.bbox.ap50));
            }
            run.evals.push(row);
        }
    }
    if let Some(dir) = out {
        model.save(&dir.join("final"))?;
        fs::write(dir.join("log.csv"), run.to_csv())?;
    }
    Ok(run)
}
