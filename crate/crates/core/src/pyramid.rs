//! Bottom-up backbone pyramid, top-down pathway with lateral connections,
//! and box-to-level assignment.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Output channels of each backbone stage, fine to coarse. Its length is
    /// the number of levels.
    pub backbone_channels: Vec<usize>,
    /// Width shared by every top-down map and every lateral projection.
    pub out_channels: usize,
    pub level_strides: Vec<usize>,
    pub assign_k0: i64,
    pub assign_scale: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64, 128],
            out_channels: 32,
            level_strides: vec![2, 4, 8, 16],
            assign_k0: 2,
            assign_scale: 16.0,
        }
    }
}

impl PyramidConfig {
    pub fn num_levels(&self) -> usize {
        self.level_strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::Config {
            field: format!("pyramid.{field}"),
            reason,
        };
        if self.level_strides.is_empty() {
            return Err(bad("level_strides", "at least one level required".into()));
        }
        if self.level_strides[0] != 2 {
            return Err(bad(
                "level_strides",
                "each backbone stage halves resolution, so the first stride must be 2".into(),
            ));
        }
        if self.level_strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(bad("level_strides", format!("{:?} is not strictly doubling", self.level_strides)));
        }
        if self.backbone_channels.len() != self.level_strides.len() {
            return Err(bad(
                "backbone_channels",
                format!(
                    "{} entries for {} levels",
                    self.backbone_channels.len(),
                    self.level_strides.len()
                ),
            ));
        }
        if self.out_channels == 0 || self.backbone_channels.contains(&0) {
            return Err(bad("out_channels", "channel counts must be positive".into()));
        }
        if !(self.assign_scale > 0.0) {
            return Err(bad("assign_scale", "must be positive".into()));
        }
        Ok(())
    }
}

/// Bottom-up maps `C_k`, top-down maps `P_k` and, when dual supervision is on,
/// the bottom-up lateral projections the auxiliary heads pool from.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub bottom_up: Vec<Var>,
    pub top_down: Vec<Var>,
    pub aux_lateral: Option<Vec<Var>>,
}

pub(crate) fn conv_params(store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, seed: u64) {
    store.init(&format!("{name}.weight"), &[out, inp, k, k], Init::He(inp * k * k), seed);
    store.init(&format!("{name}.bias"), &[out], Init::Zeros, seed);
}

pub(crate) fn conv(
    graph: &mut Graph,
    binder: &mut Binder<'_>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = binder.get(graph, &format!("{name}.weight"))?;
    let b = binder.get(graph, &format!("{name}.bias"))?;
    graph.conv2d(x, w, b, stride, pad)
}

pub fn declare_backbone(store: &mut ParamStore, cfg: &PyramidConfig, seed: u64) {
    let mut inp = 3;
    for (k, &c) in cfg.backbone_channels.iter().enumerate() {
        conv_params(store, &format!("backbone.{k}.conv1"), c, inp, 3, seed);
        conv_params(store, &format!("backbone.{k}.conv2"), c, c, 3, seed);
        inp = c;
    }
}

pub fn declare_top_down(store: &mut ParamStore, cfg: &PyramidConfig, seed: u64) {
    let m = cfg.num_levels();
    for (k, &c) in cfg.backbone_channels.iter().enumerate() {
        conv_params(store, &format!("fpn.lateral.{k}"), cfg.out_channels, c, 1, seed);
        if k + 1 < m {
            conv_params(store, &format!("fpn.smooth.{k}"), cfg.out_channels, cfg.out_channels, 3, seed);
        }
    }
}

pub fn declare_aux_lateral(store: &mut ParamStore, cfg: &PyramidConfig, seed: u64) {
    for (k, &c) in cfg.backbone_channels.iter().enumerate() {
        conv_params(store, &format!("aux.lateral.{k}"), cfg.out_channels, c, 1, seed);
    }
}

/// Runs the backbone on an `N×3×H×W` image batch. Each stage is a stride-2
/// 3×3 conv and a stride-1 3×3 conv, both followed by ReLU.
pub fn build_bottom_up(
    graph: &mut Graph,
    binder: &mut Binder<'_>,
    image: Var,
    cfg: &PyramidConfig,
) -> Result<Vec<Var>> {
    let s = graph.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape {
            op: "build_bottom_up",
            detail: format!("expected N×3×H×W image, got {s:?}"),
        });
    }
    let largest = *cfg.level_strides.last().unwrap_or(&1);
    if !s[2].is_multiple_of(largest) || !s[3].is_multiple_of(largest) {
        return Err(Error::InvalidArgument(format!(
            "image {}×{} not divisible by largest stride {largest}",
            s[2], s[3]
        )));
    }
    let mut x = image;
    let mut maps = Vec::with_capacity(cfg.num_levels());
    for k in 0..cfg.num_levels() {
        x = conv(graph, binder, &format!("backbone.{k}.conv1"), x, 2, 1)?;
        x = graph.relu(x)?;
        x = conv(graph, binder, &format!("backbone.{k}.conv2"), x, 1, 1)?;
        x = graph.relu(x)?;
        maps.push(x);
    }
    Ok(maps)
}

/// `P_M = lateral(C_M)`, `P_k = smooth(lateral(C_k) + up2(P_{k+1}))`.
pub fn build_top_down(graph: &mut Graph, binder: &mut Binder<'_>, bottom_up: &[Var]) -> Result<Vec<Var>> {
    let m = bottom_up.len();
    let mut out = vec![None; m];
    let mut above: Option<Var> = None;
    for k in (0..m).rev() {
        let lat = conv(graph, binder, &format!("fpn.lateral.{k}"), bottom_up[k], 1, 0)?;
        let p = match above {
            None => lat,
            Some(prev) => {
                let up = graph.upsample2x(prev)?;
                let merged = graph.add(lat, up)?;
                conv(graph, binder, &format!("fpn.smooth.{k}"), merged, 1, 1)?
            }
        };
        out[k] = Some(p);
        above = Some(p);
    }
    Ok(out.into_iter().map(|p| p.expect("every level built")).collect())
}

/// Dedicated 1×1 projections of the bottom-up maps for the auxiliary heads.
pub fn build_aux_lateral(graph: &mut Graph, binder: &mut Binder<'_>, bottom_up: &[Var]) -> Result<Vec<Var>> {
    bottom_up
        .iter()
        .enumerate()
        .map(|(k, &c)| conv(graph, binder, &format!("aux.lateral.{k}"), c, 1, 0))
        .collect()
}

pub fn build_pyramid(
    graph: &mut Graph,
    binder: &mut Binder<'_>,
    image: Var,
    cfg: &PyramidConfig,
    with_aux: bool,
) -> Result<FeaturePyramid> {
    let bottom_up = build_bottom_up(graph, binder, image, cfg)?;
    let top_down = build_top_down(graph, binder, &bottom_up)?;
    let aux_lateral = if with_aux {
        Some(build_aux_lateral(graph, binder, &bottom_up)?)
    } else {
        None
    };
    Ok(FeaturePyramid {
        bottom_up,
        top_down,
        aux_lateral,
    })
}

/// Pyramid level for a box: `k0 + floor(log2(sqrt(area) / s0))`, clamped.
pub fn assign_level(b: &BBox, cfg: &PyramidConfig) -> Result<usize> {
    let area = b.area();
    if !(area > 0.0) {
        return Err(Error::DegenerateBox(b.x1, b.y1, b.x2, b.y2));
    }
    let k = cfg.assign_k0 as f64 + (area.sqrt() / cfg.assign_scale).log2().floor();
    Ok(k.clamp(0.0, (cfg.num_levels() - 1) as f64) as usize)
}
