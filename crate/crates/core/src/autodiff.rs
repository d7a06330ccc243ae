//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends its result to the tape. When at least one input
//! requires a gradient the operation is also recorded as a node, together with
//! whatever it needs for its backward rule. Values are appended in creation
//! order, so nodes are topologically sorted by construction and
//! [`Tape::backward`] visits them once each, in reverse.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grads`] doubles every gradient.
//!
//! Broadcasting in the elementwise operations follows one rule: the smaller
//! operand's shape is aligned with the trailing dimensions of the larger one
//! and each aligned dimension must be equal or 1. The result always has the
//! shape of the larger operand. Two-sided broadcasting (where neither shape
//! covers the other) is rejected.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{ensure_finite, numel, strides, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor stored on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormOptions {
    pub mode: BatchNormMode,
    pub epsilon: f64,
}

/// Result of a batch-norm op. In train mode the batch statistics are returned
/// so the caller can update its running averages; the variance is unbiased.
#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub output: Var,
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct PoolGeometry {
    batch_channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
enum Op {
    Binary {
        op: BinaryOp,
        lhs_map: Option<Vec<usize>>,
        rhs_map: Option<Vec<usize>>,
    },
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Reduce {
        map: Vec<usize>,
        scale: f64,
    },
    Relu,
    Log,
    Reshape,
    Conv2d {
        geom: ConvGeometry,
        batch: usize,
        filters: usize,
    },
    MaxPool {
        argmax: Vec<usize>,
    },
    AvgPool {
        geom: PoolGeometry,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
        train: bool,
    },
    Concat {
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Dropout {
        mask: Vec<f64>,
    },
    Softmax {
        classes: usize,
    },
    CrossEntropy {
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
}

/// Operation recorder and value store for one forward/backward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    values: Vec<Tensor>,
    nodes: Vec<Node>,
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
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Stores a tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.values.push(tensor);
        Var {
            tape: self.id,
            index: self.values.len() - 1,
        }
    }

    /// Stores a tensor that gradients should flow into.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Stores a tensor that is treated as a constant.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.check(var)?;
        Ok(&self.values[var.index])
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(self.value(var)?.shape())
    }

    pub fn grad(&self, var: Var) -> Result<Option<&[f64]>> {
        Ok(self.value(var)?.grad())
    }

    /// Number of recorded (differentiable) nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn zero_grads(&mut self) {
        self.values.iter_mut().for_each(Tensor::zero_grad);
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.values.len() {
            return Err(Error::DanglingVar { index: var.index });
        }
        Ok(())
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.values[var.index].requires_grad()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(value.data(), op_name)?;
        let record = inputs.iter().any(|&v| self.needs_grad(v));
        let var = self.leaf(value.with_requires_grad(record));
        if record {
            self.nodes.push(Node {
                op,
                inputs: inputs.iter().map(|v| v.index).collect(),
                output: var.index,
            });
        }
        Ok(var)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.values[a.index].shape(), self.values[b.index].shape());
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: op_name(op),
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let lhs_map = (sa != out_shape.as_slice()).then(|| kernels::broadcast_map(sa, &out_shape));
        let rhs_map = (sb != out_shape.as_slice()).then(|| kernels::broadcast_map(sb, &out_shape));
        let (da, db) = (self.values[a.index].data(), self.values[b.index].data());
        if op == BinaryOp::Div && db.contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[lhs_map.as_ref().map_or(i, |m| m[i])];
            let y = db[rhs_map.as_ref().map_or(i, |m| m[i])];
            out.push(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            });
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push(op_name(op), value, Op::Binary { op, lhs_map, rhs_map }, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.index];
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("relu", value, Op::Relu, &[x])
    }

    /// Natural logarithm; non-positive inputs are an error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.values[x.index];
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("log", value, Op::Log, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.values[x.index].reshape(shape)?;
        self.push("reshape", value, Op::Reshape, &[x])
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x)?.to_vec();
        let lead = *shape.first().ok_or_else(|| Error::invalid("flatten needs rank >= 1"))?;
        self.reshape(x, &[lead, numel(&shape[1..])])
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.values[a.index].shape(), self.values[b.index].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.values[a.index].data(), self.values[b.index].data(), m, k, n, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul { m, k, n }, &[a, b])
    }

    /// Sum or mean over `axes`, removing the reduced axes. An empty axis list
    /// is the identity.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let shape = self.values[x.index].shape().to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            if reduced[ax] {
                return Err(Error::invalid(format!("axis {ax} listed twice")));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
        let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| shape[i]).product();
        // output stride for each input axis (0 on reduced axes)
        let out_strides = strides(&out_shape);
        let mut eff = vec![0usize; rank];
        let mut k = 0;
        for i in 0..rank {
            if !reduced[i] {
                eff[i] = out_strides[k];
                k += 1;
            }
        }
        let in_strides = strides(&shape);
        let total = numel(&shape);
        let map: Vec<usize> = (0..total)
            .map(|flat| {
                (0..rank)
                    .map(|ax| (flat / in_strides[ax]) % shape[ax] * eff[ax])
                    .sum()
            })
            .collect();
        let scale = match op {
            ReduceOp::Sum => 1.0,
            ReduceOp::Mean if count == 0 => return Err(Error::invalid("mean over an empty axis")),
            ReduceOp::Mean => 1.0 / count as f64,
        };
        let mut out = vec![0.0; numel(&out_shape)];
        for (&v, &o) in self.values[x.index].data().iter().zip(&map) {
            out[o] += v;
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push("reduce", value, Op::Reduce { map, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x)?.len();
        self.reduce(ReduceOp::Sum, x, &(0..rank).collect::<Vec<_>>())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x)?.len();
        self.reduce(ReduceOp::Mean, x, &(0..rank).collect::<Vec<_>>())
    }

    // ---------------------------------------------------------------- convolution & pooling

    /// 2-D cross-correlation. `input` is `[N,C,H,W]`, `weight` is
    /// `[F,C,kh,kw]`, `bias` (if any) is `[F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let xs = self.values[input.index].shape().to_vec();
        let ws = self.values[weight.index].shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (filters, kernel_h, kernel_w) = (ws[0], ws[2], ws[3]);
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::invalid(format!(
                "conv2d kernel {kernel_h}x{kernel_w} exceeds padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.values[b.index].shape() != [filters] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![filters],
                    rhs: self.values[b.index].shape().to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let x = self.values[input.index].data();
        let w = self.values[weight.index].data();
        let bias_data = bias.map(|b| self.values[b.index].data());
        let sample = channels * height * width;
        let mut out = vec![0.0; batch * filters * cols];
        let mut col = vec![0.0; rows * cols];
        for n in 0..batch {
            kernels::im2col(&x[n * sample..(n + 1) * sample], &geom, &mut col);
            let dst = &mut out[n * filters * cols..(n + 1) * filters * cols];
            if let Some(bd) = bias_data {
                for (f, chunk) in dst.chunks_mut(cols).enumerate() {
                    chunk.fill(bd[f]);
                }
            }
            kernels::gemm(w, &col, filters, rows, cols, dst);
        }
        let value = Tensor::from_parts(vec![batch, filters, geom.out_h, geom.out_w], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { geom, batch, filters }, &inputs)
    }

    /// Windowed max or mean over `[N,C,H,W]`. Max ignores padding; mean
    /// divides by the full window size. Max pooling routes gradient to the
    /// first maximal element in row-major window order.
    pub fn pool2d(
        &mut self,
        kind: PoolKind,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(input)?;
        let xs = self.values[input.index].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(format!("pool2d needs [N,C,H,W], got {xs:?}")));
        }
        if kernel == 0 || stride == 0 || padding * 2 > kernel {
            return Err(Error::invalid(format!(
                "pool2d: bad kernel {kernel} / stride {stride} / padding {padding}"
            )));
        }
        let (height, width) = (xs[2], xs[3]);
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::invalid(format!(
                "pool2d kernel {kernel} exceeds padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        let geom = PoolGeometry {
            batch_channels: xs[0] * xs[1],
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        };
        let x = self.values[input.index].data();
        let plane = height * width;
        let out_plane = geom.out_h * geom.out_w;
        let mut out = Vec::with_capacity(geom.batch_channels * out_plane);
        let mut argmax = Vec::new();
        let inv_area = 1.0 / (kernel * kernel) as f64;
        for p in 0..geom.batch_channels {
            let base = p * plane;
            for oi in 0..geom.out_h {
                for oj in 0..geom.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    let mut acc = 0.0;
                    for (ii, jj) in window(&geom, oi, oj) {
                        let idx = base + ii * width + jj;
                        let v = x[idx];
                        acc += v;
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out.push(best);
                            argmax.push(best_idx);
                        }
                        PoolKind::Avg => out.push(acc * inv_area),
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1], geom.out_h, geom.out_w], out);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { argmax },
            PoolKind::Avg => Op::AvgPool { geom },
        };
        self.push("pool2d", value, op, &[input])
    }

    /// `[N,C,H,W] -> [N,C]` maximum over each spatial plane.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let xs = self.values[input.index].shape().to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return Err(Error::invalid(format!("global pooling needs [N,C,H,W], got {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let x = self.values[input.index].data();
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        let mut argmax = Vec::with_capacity(xs[0] * xs[1]);
        for (p, chunk) in x.chunks(plane).enumerate() {
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &v) in chunk.iter().enumerate() {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            out.push(bv);
            argmax.push(p * plane + bi);
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1]], out);
        self.push("global_max_pool", value, Op::MaxPool { argmax }, &[input])
    }

    /// `[N,C,H,W] -> [N,C]` mean over each spatial plane.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let rank = self.shape(input)?.len();
        if rank != 4 {
            return Err(Error::invalid("global pooling needs [N,C,H,W]"));
        }
        self.reduce(ReduceOp::Mean, input, &[2, 3])
    }

    // ---------------------------------------------------------------- normalization

    /// Per-channel normalization of `[N,C]` or `[N,C,...]` input (channel
    /// axis 1). Train mode uses batch statistics (biased variance for the
    /// normalization). Eval mode uses `running_mean` / `running_var`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        options: BatchNormOptions,
    ) -> Result<BatchNormOutput> {
        self.check(input)?;
        self.check(scale)?;
        self.check(shift)?;
        let xs = self.values[input.index].shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid(format!("batch_norm needs [N,C,...], got {xs:?}")));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let inner = numel(&xs[2..]);
        for (what, len) in [
            ("scale", self.values[scale.index].numel()),
            ("shift", self.values[shift.index].numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != channels {
                return Err(Error::invalid(format!(
                    "batch_norm {what} has {len} entries for {channels} channels"
                )));
            }
        }
        let count = batch * inner;
        let train = options.mode == BatchNormMode::Train;
        if train && count < 2 {
            return Err(Error::invalid(
                "batch_norm in train mode needs more than one value per channel",
            ));
        }
        let x = self.values[input.index].data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for n in 0..batch {
                    let off = (n * channels + c) * inner;
                    s += x[off..off + inner].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut sq = 0.0;
                for n in 0..batch {
                    let off = (n * channels + c) * inner;
                    sq += x[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = sq / count as f64;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + options.epsilon).sqrt()).collect();
        ensure_finite(&inv_std, "batch_norm")?;
        let gamma = self.values[scale.index].data();
        let beta = self.values[shift.index].data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for n in 0..batch {
            for c in 0..channels {
                let off = (n * channels + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                    out[i] = gamma[c] * xhat[i] + beta[c];
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        let output = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                xhat,
                inv_std,
                channels,
                inner,
                train,
            },
            &[input, scale, shift],
        )?;
        let (batch_mean, batch_var) = if train {
            let unbias = count as f64 / (count - 1) as f64;
            (Some(mean), Some(var.iter().map(|v| v * unbias).collect()))
        } else {
            (None, None)
        };
        Ok(BatchNormOutput {
            output,
            batch_mean,
            batch_var,
        })
    }

    // ---------------------------------------------------------------- structure

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.values[first.index].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.values[p.index].shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.values[p.index].data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.push("concat", value, Op::Concat { sizes, outer, inner }, parts)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0,1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let t = &self.values[x.index];
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("dropout", value, Op::Dropout { mask }, &[x])
    }

    // ---------------------------------------------------------------- classification

    /// Softmax over the last axis, computed max-shifted.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.check(logits)?;
        let t = &self.values[logits.index];
        let classes = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax needs rank >= 1"))?;
        if classes == 0 {
            return Err(Error::invalid("softmax over zero classes"));
        }
        let data = softmax_rows(t.data(), classes);
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("softmax", value, Op::Softmax { classes }, &[logits])
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against integer labels,
    /// fused through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let t = &self.values[logits.index];
        let s = t.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let data = t.data();
        let mut total = 0.0;
        for (row, &y) in data.chunks(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // ln Σ exp(v − max) − (v_y − max): exact ln K at uniform logits.
            total += row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - (row[y] - max);
        }
        let probs = softmax_rows(data, classes);
        let value = Tensor::scalar(total / batch as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                classes,
            },
            &[logits],
        )
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding into the gradient slot
    /// of every reachable tensor that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.values[loss.index].shape();
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let Tape { values, nodes, .. } = self;
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; values.len()];
        if values[loss.index].requires_grad() {
            adjoint[loss.index] = Some(vec![1.0]);
        }
        for node in nodes.iter().rev() {
            let Some(g) = adjoint[node.output].take() else {
                continue;
            };
            let input_grads = node_backward(node, values, &g)?;
            for (&inp, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                match &mut adjoint[inp] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
            values[node.output].accumulate_grad(&g)?;
        }
        for (value, adj) in values.iter_mut().zip(adjoint) {
            if let Some(adj) = adj {
                value.accumulate_grad(&adj)?;
            }
        }
        Ok(())
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

/// Output shape under the trailing-alignment rule, or `None`.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    fn covers(big: &[usize], small: &[usize]) -> bool {
        small.len() <= big.len()
            && small
                .iter()
                .rev()
                .zip(big.iter().rev())
                .all(|(&s, &b)| s == b || s == 1)
    }
    if covers(a, b) {
        Some(a.to_vec())
    } else if covers(b, a) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn window(geom: &PoolGeometry, oi: usize, oj: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let i0 = (oi * geom.stride) as isize - geom.padding as isize;
    let j0 = (oj * geom.stride) as isize - geom.padding as isize;
    (0..geom.kernel as isize).flat_map(move |di| {
        (0..geom.kernel as isize).filter_map(move |dj| {
            let (i, j) = (i0 + di, j0 + dj);
            (i >= 0 && j >= 0 && i < geom.height as isize && j < geom.width as isize)
                .then_some((i as usize, j as usize))
        })
    })
}

pub(crate) fn softmax_rows(data: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn node_backward(node: &Node, values: &[Tensor], g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let needs = |k: usize| values[node.inputs[k]].requires_grad();
    let val = |k: usize| values[node.inputs[k]].data();
    let grads = match &node.op {
        Op::Binary { op, lhs_map, rhs_map } => {
            let (a, b) = (val(0), val(1));
            let mut da = needs(0).then(|| vec![0.0; a.len()]);
            let mut db = needs(1).then(|| vec![0.0; b.len()]);
            for (i, &gi) in g.iter().enumerate() {
                let ia = lhs_map.as_ref().map_or(i, |m| m[i]);
                let ib = rhs_map.as_ref().map_or(i, |m| m[i]);
                let (x, y) = (a[ia], b[ib]);
                let (ga, gb) = match op {
                    BinaryOp::Add => (gi, gi),
                    BinaryOp::Sub => (gi, -gi),
                    BinaryOp::Mul => (gi * y, gi * x),
                    BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                };
                if let Some(da) = &mut da {
                    da[ia] += ga;
                }
                if let Some(db) = &mut db {
                    db[ib] += gb;
                }
            }
            vec![da, db]
        }
        Op::MatMul { m, k, n } => {
            let (a, b) = (val(0), val(1));
            let da = needs(0).then(|| {
                let mut out = vec![0.0; m * k];
                kernels::gemm_nt(g, b, *m, *n, *k, &mut out);
                out
            });
            let db = needs(1).then(|| {
                let mut out = vec![0.0; k * n];
                kernels::gemm_tn(a, g, *k, *m, *n, &mut out);
                out
            });
            vec![da, db]
        }
        Op::Reduce { map, scale } => {
            vec![Some(map.iter().map(|&o| g[o] * scale).collect())]
        }
        Op::Relu => {
            let x = val(0);
            vec![Some(
                x.iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect(),
            )]
        }
        Op::Log => {
            let x = val(0);
            vec![Some(x.iter().zip(g).map(|(v, gi)| gi / v).collect())]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Conv2d { geom, batch, filters } => {
            let x = val(0);
            let w = val(1);
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let sample = geom.channels * geom.height * geom.width;
            let mut dx = needs(0).then(|| vec![0.0; x.len()]);
            let mut dw = needs(1).then(|| vec![0.0; w.len()]);
            let mut col = vec![0.0; rows * cols];
            let mut dcol = vec![0.0; rows * cols];
            for nidx in 0..*batch {
                let g_n = &g[nidx * filters * cols..(nidx + 1) * filters * cols];
                if let Some(dw) = &mut dw {
                    kernels::im2col(&x[nidx * sample..(nidx + 1) * sample], geom, &mut col);
                    kernels::gemm_nt(g_n, &col, *filters, cols, rows, dw);
                }
                if let Some(dx) = &mut dx {
                    dcol.fill(0.0);
                    kernels::gemm_tn(w, g_n, rows, *filters, cols, &mut dcol);
                    kernels::col2im(&dcol, geom, &mut dx[nidx * sample..(nidx + 1) * sample]);
                }
            }
            let mut out = vec![dx, dw];
            if node.inputs.len() == 3 {
                let db = needs(2).then(|| {
                    let mut db = vec![0.0; *filters];
                    for (i, chunk) in g.chunks(cols).enumerate() {
                        db[i % filters] += chunk.iter().sum::<f64>();
                    }
                    db
                });
                out.push(db);
            }
            out
        }
        Op::MaxPool { argmax } => {
            let mut dx = vec![0.0; val(0).len()];
            for (&idx, &gi) in argmax.iter().zip(g) {
                dx[idx] += gi;
            }
            vec![Some(dx)]
        }
        Op::AvgPool { geom } => {
            let mut dx = vec![0.0; val(0).len()];
            let inv_area = 1.0 / (geom.kernel * geom.kernel) as f64;
            let plane = geom.height * geom.width;
            let mut gi = g.iter();
            for p in 0..geom.batch_channels {
                for oi in 0..geom.out_h {
                    for oj in 0..geom.out_w {
                        let share = gi.next().copied().unwrap_or(0.0) * inv_area;
                        for (ii, jj) in window(geom, oi, oj) {
                            dx[p * plane + ii * geom.width + jj] += share;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::BatchNorm {
            xhat,
            inv_std,
            channels,
            inner,
            train,
        } => {
            let gamma = val(1);
            let batch = xhat.len() / (channels * inner);
            let count = (batch * inner) as f64;
            let mut dgamma = vec![0.0; *channels];
            let mut dbeta = vec![0.0; *channels];
            for n in 0..batch {
                for c in 0..*channels {
                    let off = (n * channels + c) * inner;
                    for i in off..off + inner {
                        dgamma[c] += g[i] * xhat[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            let dx = needs(0).then(|| {
                let mut dx = vec![0.0; xhat.len()];
                for n in 0..batch {
                    for c in 0..*channels {
                        let off = (n * channels + c) * inner;
                        let k = gamma[c] * inv_std[c];
                        for i in off..off + inner {
                            dx[i] = if *train {
                                k * (g[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, needs(1).then_some(dgamma), needs(2).then_some(dbeta)]
        }
        Op::Concat { sizes, outer, inner } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (k, &sz) in sizes.iter().enumerate() {
                let part = needs(k).then(|| {
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + sz * inner]);
                    }
                    d
                });
                offset += sz;
                out.push(part);
            }
            out
        }
        Op::Dropout { mask } => vec![Some(g.iter().zip(mask).map(|(a, b)| a * b).collect())],
        Op::Softmax { classes } => {
            let y = values[node.output].data();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(*classes).zip(g.chunks(*classes)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
            }
            vec![Some(dx)]
        }
        Op::CrossEntropy {
            probs,
            labels,
            classes,
        } => {
            let scale = g[0] / labels.len() as f64;
            let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (n, &y) in labels.iter().enumerate() {
                dx[n * classes + y] -= scale;
            }
            vec![Some(dx)]
        }
    };
    Ok(grads)
}
