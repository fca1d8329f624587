//! Measurement tools: per-layer gradient probes, pyramid feature-map export,
//! and learning curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{write_pgm, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Binder;
use crate::pyramid;
use crate::tensor::Tensor;
use crate::training::{compute_gradients, train, EvalSets, RoiSampling, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProbeReport {
    pub label: String,
    pub batches: usize,
    /// Layer name → mean over batches of `‖g‖₂ / √count` (weight and bias
    /// of a layer pooled together).
    pub layers: BTreeMap<String, f64>,
}

impl GradProbeReport {
    pub fn get(&self, layer: &str) -> Option<f64> {
        self.layers.get(layer).copied()
    }
}

fn layer_of(param: &str) -> &str {
    param
        .strip_suffix(".weight")
        .or_else(|| param.strip_suffix(".bias"))
        .unwrap_or(param)
}

/// Runs `n` forward/backward passes on seeded batches without touching the
/// weights. Two models probed with the same `seed` see the same batches and
/// the same RoI samples.
pub fn grad_probe(
    model: &Model,
    data: &Dataset,
    n: usize,
    batch_size: usize,
    sampling: &RoiSampling,
    seed: u64,
    label: &str,
) -> Result<GradProbeReport> {
    if n == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("probe needs at least one batch of one image".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("probe dataset is empty".into()));
    }
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for b in 0..n {
        let idx = sample(&mut pick_rng, data.len(), batch_size.min(data.len()));
        let batch: Vec<_> = idx.iter().map(|i| &data.samples[i]).collect();
        // each batch gets its own sampling stream so batches are independent
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(b as u64));
        let (_, grads) = compute_gradients(model, &batch, sampling, &mut rng)?;
        let mut per_layer: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (name, g) in &grads {
            let e = per_layer.entry(layer_of(name)).or_default();
            e.0 += g.data().iter().map(|v| v * v).sum::<f64>();
            e.1 += g.numel();
        }
        for (layer, (sq, count)) in per_layer {
            *sums.entry(layer.to_string()).or_default() += sq.sqrt() / (count as f64).sqrt();
        }
    }
    Ok(GradProbeReport {
        label: label.to_string(),
        batches: n,
        layers: sums.into_iter().map(|(k, v)| (k, v / n as f64)).collect(),
    })
}

/// A channel-summed pyramid map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `bottom_up{k}` or `top_down{k}`.
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

fn channel_sum(t: &Tensor) -> (usize, usize, Vec<f64>) {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    (w, h, out)
}

/// Channel sums of every bottom-up and top-down level for one image.
pub fn feature_maps(model: &Model, image: &Tensor) -> Result<Vec<FeatureMap>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "feature_maps",
            detail: format!("expected 3×H×W image, got {s:?}"),
        });
    }
    let mut graph = Graph::new();
    let mut binder = Binder::new(&model.params, false);
    let x = graph.constant(image.clone().reshape(vec![1, s[0], s[1], s[2]])?);
    let pyr = pyramid::build_pyramid(&mut graph, &mut binder, x, &model.config.pyramid, false)?;
    let mut out = Vec::new();
    for (kind, maps) in [("bottom_up", &pyr.bottom_up), ("top_down", &pyr.top_down)] {
        for (k, &v) in maps.iter().enumerate() {
            let (width, height, values) = channel_sum(graph.value(v));
            out.push(FeatureMap {
                name: format!("{kind}{k}"),
                width,
                height,
                values,
            });
        }
    }
    Ok(out)
}

/// Min-max scaling to 0..=255; a constant map becomes all zeros.
pub fn normalize_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `{prefix}_{name}.pgm` for every pyramid level (2·M files).
pub fn export_feature_maps(model: &Model, image: &Tensor, prefix: &Path) -> Result<Vec<PathBuf>> {
    let stem = prefix
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "features".into());
    let dir = prefix.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    feature_maps(model, image)?
        .into_iter()
        .map(|m| {
            let p = dir.join(format!("{stem}_{}.pgm", m.name));
            write_pgm(&p, m.width, m.height, &normalize_u8(&m.values))?;
            Ok(p)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_ap50: f64,
    pub val_ap50: f64,
    pub val_ap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,train_ap50,val_ap50,val_ap\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.iteration, p.train_ap50, p.val_ap50, p.val_ap);
        }
        s
    }

    /// First evaluated iteration whose val AP50 reaches `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.val_ap50 >= threshold).map(|p| p.iteration)
    }

    pub fn final_val_ap50(&self) -> Option<f64> {
        self.points.last().map(|p| p.val_ap50)
    }
}

pub const TRAIN_SUBSAMPLE: usize = 100;

/// Fixed seeded subsample of the training set used for train-AP.
pub fn train_subsample(data: &Dataset, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut idx = sample(&mut rng, data.len(), n.min(data.len())).into_vec();
    idx.sort_unstable();
    data.subset(&idx)
}

/// Trains `model` while evaluating every `interval` iterations on a train
/// subsample and the validation set.
pub fn learning_curve(
    model: &mut Model,
    cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    interval: usize,
    out: Option<&Path>,
) -> Result<LearningCurve> {
    if interval == 0 || !cfg.iterations.is_multiple_of(interval) {
        return Err(Error::InvalidArgument(format!(
            "interval {interval} does not divide {} iterations",
            cfg.iterations
        )));
    }
    let sub = train_subsample(train_data, TRAIN_SUBSAMPLE, cfg.seed);
    let cfg = TrainConfig {
        eval_interval: interval,
        ..cfg.clone()
    };
    let sets = EvalSets {
        train: Some(&sub),
        val: Some(val_data),
    };
    let run = train(model, &cfg, train_data, &sets, out)?;
    Ok(LearningCurve {
        points: run
            .evals
            .iter()
            .map(|e| {
                let v = e.val.unwrap_or_default();
                CurvePoint {
                    iteration: e.iteration,
                    train_ap50: e.train_ap50.unwrap_or(0.0),
                    val_ap50: v.bbox.ap50,
                    val_ap: v.bbox.ap,
                }
            })
            .collect(),
    })
}
