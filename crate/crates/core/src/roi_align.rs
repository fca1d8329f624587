//! RoIAlign: fixed-size bilinear pooling of box regions.
//!
//! Feature cell `j` covers `[j, j+1)` in feature coordinates with its value at
//! the centre `j + 0.5`. Sample positions are clamped to the valid range.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PoolPlan, PoolRoi, Var};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::pyramid::{assign_level, PyramidConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub output_size: (usize, usize),
    pub sampling_ratio: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            output_size: (4, 4),
            sampling_ratio: 2,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_size.0 == 0 || self.output_size.1 == 0 || self.sampling_ratio == 0 {
            return Err(Error::Config {
                field: "roi".into(),
                reason: "output size and sampling ratio must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Per-bin bilinear taps `(y * W + x, weight)` for one box on an `H×W` map.
pub fn roi_taps(b: &BBox, stride: usize, height: usize, width: usize, cfg: &RoiConfig) -> Result<Vec<Vec<(usize, f64)>>> {
    if !(b.width() > 0.0 && b.height() > 0.0) || !b.is_valid() {
        return Err(Error::DegenerateBox(b.x1, b.y1, b.x2, b.y2));
    }
    let s = stride as f64;
    let (x0, y0) = (b.x1 / s, b.y1 / s);
    let (oh, ow) = cfg.output_size;
    let bin_h = (b.y2 / s - y0) / oh as f64;
    let bin_w = (b.x2 / s - x0) / ow as f64;
    let sr = cfg.sampling_ratio;
    let norm = 1.0 / (sr * sr) as f64;

    // Index-space position (centre-aligned, clamped) → (low, high, frac).
    let axis = |u: f64, len: usize| -> (usize, usize, f64) {
        let p = (u - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, p - lo as f64)
    };

    let mut bins = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let mut taps = Vec::with_capacity(4 * sr * sr);
            for sy in 0..sr {
                let v = y0 + (by as f64 + (sy as f64 + 0.5) / sr as f64) * bin_h;
                let (ylo, yhi, fy) = axis(v, height);
                for sx in 0..sr {
                    let u = x0 + (bx as f64 + (sx as f64 + 0.5) / sr as f64) * bin_w;
                    let (xlo, xhi, fx) = axis(u, width);
                    taps.push((ylo * width + xlo, norm * (1.0 - fy) * (1.0 - fx)));
                    taps.push((ylo * width + xhi, norm * (1.0 - fy) * fx));
                    taps.push((yhi * width + xlo, norm * fy * (1.0 - fx)));
                    taps.push((yhi * width + xhi, norm * fy * fx));
                }
            }
            bins.push(taps);
        }
    }
    Ok(bins)
}

/// Pools one box from a `1×C×H×W` feature map into a `C×h×w` tensor.
pub fn roi_align(feature: &Tensor, b: &BBox, stride: usize, cfg: &RoiConfig) -> Result<Tensor> {
    let fs = feature.shape();
    if fs.len() != 4 || fs[0] != 1 {
        return Err(Error::Shape {
            op: "roi_align",
            detail: format!("expected 1×C×H×W feature, got {fs:?}"),
        });
    }
    let mut g = Graph::new();
    let f = g.constant(feature.clone());
    let out = pool_single(&mut g, f, &[(0, *b)], stride, cfg)?;
    let (oh, ow) = cfg.output_size;
    g.value(out).clone().reshape(vec![fs[1], oh, ow])
}

/// Differentiable RoIAlign of `(batch row, box)` pairs from a single map.
pub fn pool_single(graph: &mut Graph, feature: Var, rois: &[(usize, BBox)], stride: usize, cfg: &RoiConfig) -> Result<Var> {
    let fs = graph.shape(feature).to_vec();
    let rois = rois
        .iter()
        .map(|&(batch, b)| {
            Ok(PoolRoi {
                input: 0,
                batch,
                taps: roi_taps(&b, stride, fs[2], fs[3], cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = PoolPlan {
        channels: fs[1],
        out_h: cfg.output_size.0,
        out_w: cfg.output_size.1,
        rois,
    };
    graph.pool(&[feature], plan)
}

/// Pools every box from the pyramid level chosen by [`assign_level`]; output
/// rows follow the order of `rois`.
pub fn pool_pyramid(
    graph: &mut Graph,
    levels: &[Var],
    rois: &[(usize, BBox)],
    pyramid: &PyramidConfig,
    cfg: &RoiConfig,
) -> Result<Var> {
    let mut plan = PoolPlan {
        channels: graph.shape(levels[0])[1],
        out_h: cfg.output_size.0,
        out_w: cfg.output_size.1,
        rois: Vec::with_capacity(rois.len()),
    };
    for &(batch, b) in rois {
        let k = assign_level(&b, pyramid)?;
        let fs = graph.shape(levels[k]);
        plan.rois.push(PoolRoi {
            input: k,
            batch,
            taps: roi_taps(&b, pyramid.level_strides[k], fs[2], fs[3], cfg)?,
        });
    }
    graph.pool(levels, plan)
}
