//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever context its
//! backward rule needs. Nodes only ever reference earlier nodes, so a single
//! reverse sweep over the tape visits each node once in topological order.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};
use crate::util::sigmoid;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bilinear gather plan consumed by [`Graph::pool`].
///
/// Output is `rois.len() × channels × out_h × out_w`; every output bin of a RoI
/// is a weighted sum of spatial positions of one input feature map, identical
/// across channels.
#[derive(Clone, Debug, Default)]
pub struct PoolPlan {
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub rois: Vec<PoolRoi>,
}

#[derive(Clone, Debug)]
pub struct PoolRoi {
    /// Index into the `inputs` slice handed to [`Graph::pool`].
    pub input: usize,
    /// Batch row of that input.
    pub batch: usize,
    /// Per output bin (row-major), `(y * W + x, weight)` taps.
    pub taps: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Option<Vec<f64>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    Gather {
        inputs: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    Pool {
        inputs: Vec<Var>,
        plan: PoolPlan,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Upsample2x(_) => "upsample2x",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Pool { .. } => "roi_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Upsample2x(x) | Op::Reshape(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::Add(a, b) => vec![*a, *b],
            Op::Gather { inputs, .. } | Op::Pool { inputs, .. } => inputs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => {
                vec![*logits]
            }
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One executed op: its kind and the shapes it consumed and produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one gradient buffer per node that received one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn im2col(
    src: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dst: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.kind(), &value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Sequence of executed (non-leaf) ops with their shapes.
    pub fn trace(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| OpRecord {
                kind: n.op.kind(),
                inputs: n
                    .op
                    .inputs()
                    .iter()
                    .map(|v| self.nodes[v.0].value.shape().to_vec())
                    .collect(),
                output: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// 2-D convolution over an `N×C×H×W` input with an `O×C×k×k` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[1] != c || bs != [o] || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}, pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let plane = oh * ow;
        let ckk = c * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;

        let x = self.value(input).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * o * plane];
        let mut cols = if pointwise {
            None
        } else {
            Some(vec![0.0; n * ckk * plane])
        };
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let colb: &[f64] = match cols.as_mut() {
                Some(buf) => {
                    let dst = &mut buf[b * ckk * plane..(b + 1) * ckk * plane];
                    im2col(xb, (c, h, w), k, stride, pad, (oh, ow), dst);
                    dst
                }
                None => xb,
            };
            let ob = &mut out[b * o * plane..(b + 1) * o * plane];
            for (oi, row) in ob.chunks_exact_mut(plane).enumerate() {
                row.fill(bd[oi]);
            }
            gemm(o, ckk, plane, 1.0, wd, (ckk, 1), colb, (plane, 1), 1.0, ob, (plane, 1));
        }
        let value = Tensor::from_parts(vec![n, o, oh, ow], out);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
        )
    }

    /// `input · weightᵀ + bias` for `N×F` input and `G×F` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * g];
        let bd = self.value(bias).data();
        for row in out.chunks_exact_mut(g) {
            row.copy_from_slice(bd);
        }
        gemm(
            n,
            f,
            g,
            1.0,
            self.value(input).data(),
            (f, 1),
            self.value(weight).data(),
            (1, f),
            1.0,
            &mut out,
            (g, 1),
        );
        self.push(
            Tensor::from_parts(vec![n, g], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Sigmoid(x))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::Add(a, b))
    }

    /// Nearest-neighbour 2× upsampling of an `N×C×H×W` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", format!("expected rank 4, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; nc * 4 * h * w];
        let src = t.data();
        for p in 0..nc {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xo] = src[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        self.push(value, Op::Upsample2x(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let value = Tensor::from_parts(shape, t.data().to_vec());
        self.push(value, Op::Reshape(x))
    }

    /// Picks individual elements (`(input slot, flat index)`) from several
    /// tensors into a new tensor of `shape`.
    pub fn gather(
        &mut self,
        inputs: &[Var],
        picks: Vec<(usize, usize)>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != picks.len() {
            return Err(shape_err(
                "gather",
                format!("{} picks for shape {shape:?}", picks.len()),
            ));
        }
        let mut data = Vec::with_capacity(picks.len());
        for &(slot, idx) in &picks {
            let t = inputs
                .get(slot)
                .map(|v| self.value(*v))
                .ok_or_else(|| shape_err("gather", format!("no input slot {slot}")))?;
            let v = t
                .data()
                .get(idx)
                .ok_or_else(|| shape_err("gather", format!("index {idx} out of range")))?;
            data.push(*v);
        }
        let value = Tensor::from_parts(shape, data);
        self.push(
            value,
            Op::Gather {
                inputs: inputs.to_vec(),
                picks,
            },
        )
    }

    /// Region pooling driven by a precomputed bilinear [`PoolPlan`].
    pub fn pool(&mut self, inputs: &[Var], plan: PoolPlan) -> Result<Var> {
        let bins = plan.out_h * plan.out_w;
        let c = plan.channels;
        let mut out = vec![0.0; plan.rois.len() * c * bins];
        for (r, roi) in plan.rois.iter().enumerate() {
            let fv = *inputs
                .get(roi.input)
                .ok_or_else(|| shape_err("roi_pool", format!("no input slot {}", roi.input)))?;
            let fs = self.value(fv).shape();
            if fs.len() != 4 || fs[1] != c || roi.batch >= fs[0] || roi.taps.len() != bins {
                return Err(shape_err(
                    "roi_pool",
                    format!("feature {fs:?}, roi batch {}, channels {c}", roi.batch),
                ));
            }
            let hw = fs[2] * fs[3];
            let feat = self.value(fv).data();
            for ch in 0..c {
                let plane = &feat[(roi.batch * c + ch) * hw..(roi.batch * c + ch + 1) * hw];
                let dst = &mut out[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                for (d, taps) in dst.iter_mut().zip(&roi.taps) {
                    *d = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
                }
            }
        }
        let value = Tensor::from_parts(vec![plan.rois.len(), c, plan.out_h, plan.out_w], out);
        self.push(
            value,
            Op::Pool {
                inputs: inputs.to_vec(),
                plan,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`; zero for an empty batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?}, {} targets", targets.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidArgument(format!(
                "class target {bad} outside [0, {k})"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, row) in t.data().chunks_exact(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[targets[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean elementwise smooth-L1 (β = 1); zero for an empty input.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(pred);
        if t.shape() != target.shape() {
            return Err(shape_err(
                "smooth_l1",
                format!("{:?} vs {:?}", t.shape(), target.shape()),
            ));
        }
        let n = t.numel();
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, q)| {
                let d = (p - q).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    /// Mean sigmoid binary cross-entropy with targets in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != target.shape() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{:?} vs {:?}", t.shape(), target.shape()),
            ));
        }
        if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "binary cross-entropy targets must be 0 or 1".into(),
            ));
        }
        let n = t.numel();
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
        )
    }

    /// `Σ wᵢ·termᵢ` over scalar terms, accumulated in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, wt) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(shape_err(
                    "weighted_sum",
                    format!("term of shape {:?} is not scalar", t.shape()),
                ));
            }
            total += wt * t.data()[0];
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of tensors used several
    /// times accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: vec![None; self.nodes.len()],
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_op(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let plane = oh * ow;
                let ckk = c * k * k;
                let x = self.value(*input).data();
                let col_of = |b: usize| -> &[f64] {
                    match cols {
                        Some(buf) => &buf[b * ckk * plane..(b + 1) * ckk * plane],
                        None => &x[b * c * h * w..(b + 1) * c * h * w],
                    }
                };
                acc(*bias, &mut |db| {
                    for b in 0..n {
                        for (oi, d) in db.iter_mut().enumerate().take(o) {
                            let s = (b * o + oi) * plane;
                            *d += g[s..s + plane].iter().sum::<f64>();
                        }
                    }
                });
                acc(*weight, &mut |dw| {
                    for b in 0..n {
                        let gb = &g[b * o * plane..(b + 1) * o * plane];
                        gemm(o, plane, ckk, 1.0, gb, (plane, 1), col_of(b), (1, plane), 1.0, dw, (ckk, 1));
                    }
                });
                let wd = self.value(*weight).data();
                acc(*input, &mut |dx| {
                    let mut dcol = vec![0.0; ckk * plane];
                    for b in 0..n {
                        let gb = &g[b * o * plane..(b + 1) * o * plane];
                        let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                        if cols.is_none() {
                            gemm(ckk, o, plane, 1.0, wd, (1, ckk), gb, (plane, 1), 1.0, dxb, (plane, 1));
                        } else {
                            gemm(ckk, o, plane, 1.0, wd, (1, ckk), gb, (plane, 1), 0.0, &mut dcol, (plane, 1));
                            col2im(&dcol, (c, h, w), k, *stride, *pad, (oh, ow), dxb);
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, f) = (xs[0], xs[1]);
                let gdim = self.shape(*weight)[0];
                acc(*bias, &mut |db| {
                    for row in g.chunks_exact(gdim) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
                let x = self.value(*input).data();
                acc(*weight, &mut |dw| {
                    gemm(gdim, n, f, 1.0, g, (1, gdim), x, (f, 1), 1.0, dw, (f, 1));
                });
                let wd = self.value(*weight).data();
                acc(*input, &mut |dx| {
                    gemm(n, gdim, f, 1.0, g, (gdim, 1), wd, (f, 1), 1.0, dx, (f, 1));
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gi), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * s * (1.0 - s);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                acc(*x, &mut |dx| {
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                dx[(p * h + y / 2) * w + xo / 2] += g[(p * 2 * h + y) * 2 * w + xo];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::Gather { inputs, picks } => {
                for (slot, v) in inputs.iter().enumerate() {
                    acc(*v, &mut |dx| {
                        for (&(s, idx), gi) in picks.iter().zip(g) {
                            if s == slot {
                                dx[idx] += gi;
                            }
                        }
                    });
                }
            }
            Op::Pool { inputs, plan } => {
                let bins = plan.out_h * plan.out_w;
                let c = plan.channels;
                for (slot, v) in inputs.iter().enumerate() {
                    let fs = self.shape(*v);
                    let hw = fs[2] * fs[3];
                    acc(*v, &mut |dx| {
                        for (r, roi) in plan.rois.iter().enumerate().filter(|(_, r)| r.input == slot) {
                            for ch in 0..c {
                                let base = (roi.batch * c + ch) * hw;
                                let gr = &g[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                                for (gi, taps) in gr.iter().zip(&roi.taps) {
                                    for &(i, wt) in taps {
                                        dx[base + i] += wt * gi;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                if let Some(k) = probs.len().checked_div(n) {
                    let scale = g[0] / n as f64;
                    acc(*logits, &mut |dx| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dx[i * k + j] += scale * (probs[i * k + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::SmoothL1 { pred, target } => {
                let n = target.len();
                if n > 0 {
                    let p = self.value(*pred).data();
                    let scale = g[0] / n as f64;
                    acc(*pred, &mut |dx| {
                        for ((d, &pi), &ti) in dx.iter_mut().zip(p).zip(target) {
                            let diff = pi - ti;
                            *d += scale * if diff.abs() < 1.0 { diff } else { diff.signum() };
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, target } => {
                let n = target.len();
                if n > 0 {
                    let x = self.value(*logits).data();
                    let scale = g[0] / n as f64;
                    acc(*logits, &mut |dx| {
                        for ((d, &xi), &ti) in dx.iter_mut().zip(x).zip(target) {
                            *d += scale * (sigmoid(xi) - ti);
                        }
                    });
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    acc(v, &mut |d| d[0] += wt * g[0]);
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
        }
        Ok(())
    }
}
