//! Box heads (coupled and decoupled) and the mask head.
//!
//! A head is a named weight set; all RoIs of a batch, whatever pyramid level
//! they were pooled from, go through the same weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::pyramid::{conv, conv_params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Coupled,
    Decoupled,
}

/// Shape of one detection head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub prefix: String,
    pub mode: HeadMode,
    pub in_features: usize,
    pub hidden: usize,
    /// Foreground classes plus background.
    pub num_logits: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `n × (K+1)`, column 0 is background.
    pub cls_logits: Var,
    /// `n × 4` class-agnostic deltas.
    pub reg_deltas: Var,
}

const HIDDEN_STD: f64 = 0.01;
const REG_STD: f64 = 0.001;

fn linear_params(store: &mut ParamStore, name: &str, out: usize, inp: usize, std: f64, seed: u64) {
    store.init(&format!("{name}.weight"), &[out, inp], Init::Normal(std), seed);
    store.init(&format!("{name}.bias"), &[out], Init::Zeros, seed);
}

fn linear(graph: &mut Graph, binder: &mut Binder<'_>, name: &str, x: Var) -> Result<Var> {
    let w = binder.get(graph, &format!("{name}.weight"))?;
    let b = binder.get(graph, &format!("{name}.bias"))?;
    graph.linear(x, w, b)
}

pub fn declare_detection_head(store: &mut ParamStore, spec: &HeadSpec, seed: u64) {
    let p = &spec.prefix;
    let h = spec.hidden;
    match spec.mode {
        HeadMode::Coupled => {
            linear_params(store, &format!("{p}.fc1"), h, spec.in_features, HIDDEN_STD, seed);
            linear_params(store, &format!("{p}.fc2"), h, h, HIDDEN_STD, seed);
        }
        HeadMode::Decoupled => {
            for tower in ["cls", "reg"] {
                linear_params(store, &format!("{p}.{tower}_fc1"), h, spec.in_features, HIDDEN_STD, seed);
                linear_params(store, &format!("{p}.{tower}_fc2"), h, h, HIDDEN_STD, seed);
            }
        }
    }
    linear_params(store, &format!("{p}.cls_out"), spec.num_logits, h, HIDDEN_STD, seed);
    linear_params(store, &format!("{p}.reg_out"), 4, h, REG_STD, seed);
}

pub fn declare_mask_head(store: &mut ParamStore, prefix: &str, channels: usize, num_classes: usize, seed: u64) {
    conv_params(store, &format!("{prefix}.conv1"), channels, channels, 3, seed);
    conv_params(store, &format!("{prefix}.conv2"), channels, channels, 3, seed);
    conv_params(store, &format!("{prefix}.out"), num_classes, channels, 1, seed);
}

fn flatten(graph: &mut Graph, pooled: Var) -> Result<Var> {
    let s = graph.shape(pooled).to_vec();
    let features = s[1..].iter().product::<usize>();
    graph.reshape(pooled, vec![s[0], features])
}

fn tower(graph: &mut Graph, binder: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(graph, binder, &format!("{prefix}fc1"), x)?;
    let h = graph.relu(h)?;
    let h = linear(graph, binder, &format!("{prefix}fc2"), h)?;
    graph.relu(h)
}

/// Shared two-layer trunk feeding sibling classification and regression layers.
pub fn coupled_forward(graph: &mut Graph, binder: &mut Binder<'_>, prefix: &str, pooled: Var) -> Result<HeadOutput> {
    if !binder.has(&format!("{prefix}.fc1.weight")) {
        return Err(Error::InvalidArgument(format!("`{prefix}` is not a coupled head")));
    }
    let x = flatten(graph, pooled)?;
    let h = tower(graph, binder, &format!("{prefix}."), x)?;
    Ok(HeadOutput {
        cls_logits: linear(graph, binder, &format!("{prefix}.cls_out"), h)?,
        reg_deltas: linear(graph, binder, &format!("{prefix}.reg_out"), h)?,
    })
}

/// Separate two-layer towers for classification and regression; the two
/// outputs share nothing above the pooled feature.
pub fn decoupled_forward(graph: &mut Graph, binder: &mut Binder<'_>, prefix: &str, pooled: Var) -> Result<HeadOutput> {
    if !binder.has(&format!("{prefix}.cls_fc1.weight")) {
        return Err(Error::InvalidArgument(format!("`{prefix}` is not a decoupled head")));
    }
    let x = flatten(graph, pooled)?;
    let hc = tower(graph, binder, &format!("{prefix}.cls_"), x)?;
    let hr = tower(graph, binder, &format!("{prefix}.reg_"), x)?;
    Ok(HeadOutput {
        cls_logits: linear(graph, binder, &format!("{prefix}.cls_out"), hc)?,
        reg_deltas: linear(graph, binder, &format!("{prefix}.reg_out"), hr)?,
    })
}

pub fn detection_forward(
    graph: &mut Graph,
    binder: &mut Binder<'_>,
    prefix: &str,
    mode: HeadMode,
    pooled: Var,
) -> Result<HeadOutput> {
    match mode {
        HeadMode::Coupled => coupled_forward(graph, binder, prefix, pooled),
        HeadMode::Decoupled => decoupled_forward(graph, binder, prefix, pooled),
    }
}

/// Two 3×3 conv+ReLU, 2× nearest upsampling, 1×1 conv to one logit map per
/// class: `n×C×h×w → n×K×2h×2w`.
pub fn mask_forward(graph: &mut Graph, binder: &mut Binder<'_>, prefix: &str, pooled: Var) -> Result<Var> {
    let x = conv(graph, binder, &format!("{prefix}.conv1"), pooled, 1, 1)?;
    let x = graph.relu(x)?;
    let x = conv(graph, binder, &format!("{prefix}.conv2"), x, 1, 1)?;
    let x = graph.relu(x)?;
    let x = graph.upsample2x(x)?;
    conv(graph, binder, &format!("{prefix}.out"), x, 1, 0)
}

/// Picks channel `classes[i]` of row `i` from `n×K×H×W` mask logits → `n×H×W`.
pub fn select_mask_channels(graph: &mut Graph, logits: Var, classes: &[usize]) -> Result<Var> {
    let s = graph.shape(logits).to_vec();
    if s.len() != 4 || s[0] != classes.len() {
        return Err(Error::Shape {
            op: "select_mask_channels",
            detail: format!("logits {s:?}, {} classes", classes.len()),
        });
    }
    let (k, hw) = (s[1], s[2] * s[3]);
    let mut picks = Vec::with_capacity(classes.len() * hw);
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!("mask class {c} outside [0, {k})")));
        }
        picks.extend((0..hw).map(|p| (0, (i * k + c) * hw + p)));
    }
    graph.gather(&[logits], picks, vec![classes.len(), s[2], s[3]])
}

/// Trunk parameter count (hidden layers only) of a head in `store`.
pub fn hidden_param_count(store: &ParamStore, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(k, _)| k.starts_with(&format!("{prefix}.")) && k.contains("fc"))
        .map(|(_, p)| p.tensor.numel())
        .sum()
}
