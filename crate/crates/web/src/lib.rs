//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations: render a synthetic scene, explore IoU and NMS on
//! user-drawn boxes, and view channel-summed pyramid maps of a scene.
//! Each binding is a thin wrapper over a plain function so the logic is
//! testable natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use dsfpn::boxes::{iou, nms};
use dsfpn::dataset::{synth_generate, SHAPE_NAMES};
use dsfpn::instrument::{feature_maps, normalize_u8};
use dsfpn::{BBox, Model, ModelConfig, Result, Sample};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneObject {
    /// `[x1, y1, x2, y2]`
    pub bbox: [f64; 4],
    pub class: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scene {
    pub size: usize,
    /// Row-major RGBA bytes, ready for `ImageData`.
    pub rgba: Vec<u8>,
    pub objects: Vec<SceneObject>,
}

fn sample(seed: u64, size: usize, classes: usize) -> Result<Sample> {
    let mut d = synth_generate(1, size, classes, seed)?;
    Ok(d.samples.remove(0))
}

fn to_rgba(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    let px = s.image.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((px[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        out.push(255);
    }
    out
}

pub fn make_scene(seed: u64, size: usize, classes: usize) -> Result<Scene> {
    let s = sample(seed, size, classes)?;
    Ok(Scene {
        size,
        rgba: to_rgba(&s),
        objects: s
            .instances
            .iter()
            .map(|i| SceneObject {
                bbox: [i.bbox.x1, i.bbox.y1, i.bbox.x2, i.bbox.y2],
                class: i.class,
                name: SHAPE_NAMES.get(i.class).map_or_else(|| format!("class{}", i.class), |n| n.to_string()),
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ScoredBox {
    /// `[x1, y1, x2, y2]`
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NmsResult {
    /// Indices of surviving boxes, highest score first.
    pub keep: Vec<usize>,
    /// Pairwise IoU, row-major `n×n`.
    pub iou: Vec<f64>,
}

pub fn nms_explore(boxes: &[ScoredBox], threshold: f64) -> NmsResult {
    let bb: Vec<BBox> = boxes.iter().map(|b| BBox::new(b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3])).collect();
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let mut pairwise = Vec::with_capacity(bb.len() * bb.len());
    for a in &bb {
        for b in &bb {
            pairwise.push(iou(a, b));
        }
    }
    NmsResult {
        keep: nms(&bb, &scores, threshold),
        iou: pairwise,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureImage {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Grey levels, min-max scaled per map.
    pub pixels: Vec<u8>,
}

/// Bottom-up and top-down maps of a freshly initialised default model.
pub fn pyramid_maps(scene_seed: u64, size: usize, classes: usize, model_seed: u64) -> Result<Vec<FeatureImage>> {
    let s = sample(scene_seed, size, classes)?;
    let cfg = ModelConfig {
        num_classes: classes,
        image_size: size,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, model_seed)?;
    Ok(feature_maps(&model, &s.image)?
        .into_iter()
        .map(|m| FeatureImage {
            pixels: normalize_u8(&m.values),
            name: m.name,
            width: m.width,
            height: m.height,
        })
        .collect())
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

/// Synthetic scene as JSON `{size, rgba, objects}`.
#[wasm_bindgen(js_name = sceneJson)]
pub fn scene_json(seed: u32, size: usize, classes: usize) -> std::result::Result<String, JsError> {
    to_json(&make_scene(seed as u64, size, classes).map_err(js_err)?)
}

/// Takes `[{bbox, score}, ...]` as JSON, returns `{keep, iou}` as JSON.
#[wasm_bindgen(js_name = nmsJson)]
pub fn nms_json(boxes: &str, threshold: f64) -> std::result::Result<String, JsError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(JsError::new("threshold must lie in [0, 1]"));
    }
    let boxes: Vec<ScoredBox> = serde_json::from_str(boxes).map_err(js_err)?;
    to_json(&nms_explore(&boxes, threshold))
}

/// Pyramid maps as JSON `[{name, width, height, pixels}, ...]`.
#[wasm_bindgen(js_name = pyramidJson)]
pub fn pyramid_json(scene_seed: u32, size: usize, classes: usize, model_seed: u32) -> std::result::Result<String, JsError> {
    to_json(&pyramid_maps(scene_seed as u64, size, classes, model_seed as u64).map_err(js_err)?)
}
