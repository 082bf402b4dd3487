//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! the information its backward rule needs. Inputs always precede outputs, so
//! node order is a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{conv, norm, pool};
use crate::tensor::{Shape, Tensor};
use crate::warp::{self, WarpGrid};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    GroupNorm {
        input: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        stats: norm::GroupStats,
    },
    AvgPoolAdaptive {
        input: Var,
    },
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    /// Bilinear resampling on a fixed coordinate grid shared by every sample.
    Resample {
        input: Var,
        grid: Arc<WarpGrid>,
    },
    MapCoords {
        flow: Var,
        scale: f64,
    },
    BilinearSample {
        source: Var,
        coords: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[u8]>,
        ignore: u8,
    },
    SelectMean {
        input: Var,
        indices: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::GroupNorm { .. } => "group_norm",
            Op::AvgPoolAdaptive { .. } => "avg_pool_adaptive",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Resample { .. } => "resample_bilinear",
            Op::MapCoords { .. } => "map_coords",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Sum { .. } => "sum",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SelectMean { .. } => "select_mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::GroupNorm { input, scale, shift, .. } => vec![*input, *scale, *shift],
            Op::BilinearSample { source, coords } => vec![*source, *coords],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::MapCoords { flow, .. } => vec![*flow],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Relu { input }
            | Op::AvgPoolAdaptive { input }
            | Op::UpsampleNearest { input, .. }
            | Op::Resample { input, .. }
            | Op::ScalarMul { input, .. }
            | Op::Sum { input }
            | Op::SoftmaxChannels { input }
            | Op::SelectMean { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation recorder. One tape per forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed by convolutions and bilinear sampling so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Autograd(format!(
                "variable {} does not belong to this tape",
                v.idx
            )));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx]
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.idx].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.node(v);
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    // ---- primitives -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let b = bias.map(|b| self.value(b));
        let out = conv::conv2d_forward(self.value(input), self.value(weight), b, stride, padding)?;
        let g = conv::ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        self.flops += g.flops();
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Relu { input })
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            norm::group_norm_forward(self.value(input), groups, self.value(scale), self.value(shift), eps)?;
        self.push(
            out,
            Op::GroupNorm {
                input,
                scale,
                shift,
                groups,
                stats,
            },
        )
    }

    pub fn avg_pool_adaptive(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = pool::avg_pool_adaptive_forward(self.value(input), out_h, out_w)?;
        self.push(out, Op::AvgPoolAdaptive { input })
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(crate::error::invalid!("upsample_nearest: factor must be ≥ 1"));
        }
        let x = self.value(input);
        let s = x.shape();
        let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
        let out = Tensor::from_fn(out_shape, |n, c, y, xx| x.at(n, c, y / factor, xx / factor));
        self.push(out, Op::UpsampleNearest { input, factor })
    }

    /// Resample every plane of `input` on a fixed coordinate grid.
    pub(crate) fn resample(&mut self, input: Var, grid: Arc<WarpGrid>) -> Result<Var> {
        let out = warp::resample_forward(self.value(input), &grid)?;
        self.flops += 8 * out.len() as u64;
        self.push(out, Op::Resample { input, grid })
    }

    pub(crate) fn map_coords_op(&mut self, flow: Var, scale: f64) -> Result<Var> {
        let out = warp::map_coords_forward(self.value(flow), scale)?;
        self.push(out, Op::MapCoords { flow, scale })
    }

    pub(crate) fn bilinear_sample_op(&mut self, source: Var, coords: Var) -> Result<Var> {
        let out = warp::sample_forward(self.value(source), self.value(coords))?;
        self.flops += 8 * out.len() as u64;
        self.push(out, Op::BilinearSample { source, coords })
    }

    /// Concatenate along channels, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("concat_channels of zero tensors"))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &v in inputs {
            self.check(v)?;
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(shape_err!("concat_channels: {s} vs {s0} differ outside the channel axis"));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().c * s0.plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("{op}: shapes {sa} and {sb} differ"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Mul { a, b })
    }

    pub fn scalar_mul(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::ScalarMul { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        let s = self.sum(input)?;
        self.scalar_mul(s, 1.0 / n as f64)
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        let plane = s.plane();
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let m = (0..s.c).map(|c| x.data()[base + c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..s.c {
                    let e = (x.data()[base + c * plane + p] - m).exp();
                    out[base + c * plane + p] = e;
                    z += e;
                }
                for c in 0..s.c {
                    out[base + c * plane + p] /= z;
                }
            }
        }
        let out = Tensor::new(s, out)?;
        self.push(out, Op::SoftmaxChannels { input })
    }

    /// Per-pixel negative log-likelihood, `N×1×H×W`; zero at ignored pixels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        let plane = s.plane();
        if labels.len() != s.n * plane {
            return Err(shape_err!(
                "cross_entropy: {} labels for logits {s}",
                labels.len()
            ));
        }
        let mut out = vec![0.0; s.n * plane];
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let y = labels[n * plane + p];
                if y == ignore {
                    continue;
                }
                if y as usize >= s.c {
                    return Err(crate::error::invalid!(
                        "cross_entropy: label {y} out of range for {} classes",
                        s.c
                    ));
                }
                let logit = |c: usize| x.data()[base + c * plane + p];
                let m = (0..s.c).map(logit).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..s.c).map(|c| (logit(c) - m).exp()).sum::<f64>().ln();
                out[n * plane + p] = lse - logit(y as usize);
            }
        }
        let out = Tensor::new(Shape::new(s.n, 1, s.h, s.w), out)?;
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                ignore,
            },
        )
    }

    /// Mean over the listed flat element indices.
    pub fn select_mean(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        if indices.is_empty() {
            return Err(crate::error::invalid!("select_mean: empty index set"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(shape_err!("select_mean: index {bad} out of range for {}", x.shape()));
        }
        let m = indices.iter().map(|&i| x.data()[i]).sum::<f64>() / indices.len() as f64;
        self.push(Tensor::scalar(m), Op::SelectMean { input, indices })
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of every `requires_grad` node reachable from `root`.
    /// Gradients from an earlier call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.nodes[root.idx].value.len() != 1 {
            return Err(Error::Autograd(format!(
                "backward root must be a scalar, got {}",
                self.nodes[root.idx].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.idx].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..=root.idx).map(|_| None).collect();
        pending[root.idx] = Some(vec![1.0]);

        for idx in (0..=root.idx).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            for (input, grad) in self.input_grads(node, &g)? {
                if !self.nodes[input.idx].requires_grad {
                    continue;
                }
                match &mut pending[input.idx] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let rg = |v: Var| self.nodes[v.idx].requires_grad;
        let val = |v: Var| &self.nodes[v.idx].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv::conv2d_backward(val(*input), val(*weight), g, *stride, *padding, rg(*input))?;
                let mut v = vec![(*weight, grads.weight)];
                if let Some(gi) = grads.input {
                    v.push((*input, gi));
                }
                if let Some(b) = bias {
                    v.push((*b, grads.bias));
                }
                v
            }
            Op::Relu { input } => {
                let x = val(*input).data();
                let gi = x.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                vec![(*input, gi)]
            }
            Op::GroupNorm {
                input,
                scale,
                shift,
                groups,
                stats,
            } => {
                let grads = norm::group_norm_backward(val(*input), *groups, val(*scale), stats, g);
                vec![(*input, grads.input), (*scale, grads.scale), (*shift, grads.shift)]
            }
            Op::AvgPoolAdaptive { input } => {
                let s = node.value.shape();
                vec![(*input, pool::avg_pool_adaptive_backward(val(*input).shape(), s.h, s.w, g))]
            }
            Op::UpsampleNearest { input, factor } => {
                let si = val(*input).shape();
                let so = node.value.shape();
                let mut gi = vec![0.0; si.numel()];
                for n in 0..so.n {
                    for c in 0..so.c {
                        for y in 0..so.h {
                            for x in 0..so.w {
                                gi[si.index(n, c, y / factor, x / factor)] += g[so.index(n, c, y, x)];
                            }
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::Resample { input, grid } => {
                vec![(*input, warp::resample_backward(val(*input).shape(), grid, g))]
            }
            Op::MapCoords { flow, scale } => {
                vec![(*flow, g.iter().map(|d| d / scale).collect())]
            }
            Op::BilinearSample { source, coords } => {
                let (gs, gc) = warp::sample_backward(val(*source), val(*coords), g);
                vec![(*source, gs), (*coords, gc)]
            }
            Op::Concat { inputs } => {
                let so = node.value.shape();
                let plane = so.plane();
                let mut grads: Vec<Vec<f64>> = inputs.iter().map(|&v| Vec::with_capacity(val(v).len())).collect();
                let mut off = 0;
                for _ in 0..so.n {
                    for (k, &v) in inputs.iter().enumerate() {
                        let len = val(v).shape().c * plane;
                        grads[k].extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                inputs.iter().copied().zip(grads).collect()
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let (x, y) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(y).map(|(d, v)| d * v).collect()),
                    (*b, g.iter().zip(x).map(|(d, v)| d * v).collect()),
                ]
            }
            Op::ScalarMul { input, factor } => vec![(*input, g.iter().map(|d| d * factor).collect())],
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).len()])],
            Op::SoftmaxChannels { input } => {
                let y = &node.value;
                let s = y.shape();
                let plane = s.plane();
                let mut gi = vec![0.0; s.numel()];
                for n in 0..s.n {
                    let base = n * s.c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..s.c)
                            .map(|c| g[base + c * plane + p] * y.data()[base + c * plane + p])
                            .sum();
                        for c in 0..s.c {
                            let i = base + c * plane + p;
                            gi[i] = y.data()[i] * (g[i] - dot);
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::CrossEntropy { logits, labels, ignore } => {
                let x = val(*logits);
                let s = x.shape();
                let plane = s.plane();
                let mut gi = vec![0.0; s.numel()];
                for n in 0..s.n {
                    let base = n * s.c * plane;
                    for p in 0..plane {
                        let y = labels[n * plane + p];
                        let d = g[n * plane + p];
                        if y == *ignore || d == 0.0 {
                            continue;
                        }
                        let logit = |c: usize| x.data()[base + c * plane + p];
                        let m = (0..s.c).map(logit).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..s.c).map(|c| (logit(c) - m).exp()).sum();
                        for c in 0..s.c {
                            let prob = (logit(c) - m).exp() / z;
                            let onehot = if c == y as usize { 1.0 } else { 0.0 };
                            gi[base + c * plane + p] = d * (prob - onehot);
                        }
                    }
                }
                vec![(*logits, gi)]
            }
            Op::SelectMean { input, indices } => {
                let mut gi = vec![0.0; val(*input).len()];
                let share = g[0] / indices.len() as f64;
                for &i in indices {
                    gi[i] += share;
                }
                vec![(*input, gi)]
            }
        };
        Ok(out)
    }
}
