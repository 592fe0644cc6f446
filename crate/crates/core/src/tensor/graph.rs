use super::kernels::{col2im, conv2d_output_size, gemm, im2col, ConvGeometry, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
        /// im2col patches for every batch item, needed for the kernel gradient.
        cols: Vec<f32>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul {
        lhs: Var,
        rhs: Var,
    },
    Transpose {
        input: Var,
    },
    Column {
        input: Var,
        index: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Sub {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Sqrt {
        input: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    L2Normalize {
        input: Var,
        /// `max(‖row‖, eps)` per row, and whether the eps clamp was active.
        norms: Vec<(f32, bool)>,
    },
    Softmax {
        input: Var,
    },
    LogSoftmax {
        input: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Dense { .. } => "dense",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Column { .. } => "column",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Sqrt { .. } => "sqrt",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::ChannelBias { input, bias } => vec![input, bias],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::MatMul { lhs, rhs }
            | Op::Add { lhs, rhs }
            | Op::Sub { lhs, rhs }
            | Op::Mul { lhs, rhs } => vec![lhs, rhs],
            Op::Transpose { input }
            | Op::Column { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::Sqrt { input }
            | Op::MaxPool2d { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::L2Normalize { input, .. }
            | Op::Softmax { input }
            | Op::LogSoftmax { input } => vec![input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded ops in topological (insertion) order.
///
/// A fresh graph is built for every forward pass; [`Graph::backward`] walks
/// it in reverse and fills the `grad` field of every leaf that requires one.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.nodes[var.0].value.grad()
    }

    /// Name of the op that produced `var`.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let name = op.name();
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, var: Var) -> &[f32] {
        self.nodes[var.0].value.data()
    }

    fn dims<const N: usize>(&self, var: Var, op: &'static str) -> Result<[usize; N]> {
        let shape = self.shape(var);
        shape
            .try_into()
            .map_err(|_| Error::shape(op, format!("expected rank {N}, got {shape:?}")))
    }

    fn same_shape(&self, lhs: Var, rhs: Var, op: &'static str) -> Result<()> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(lhs), self.shape(rhs)),
            ));
        }
        Ok(())
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Cross-correlation of an NCHW input with an OIHW kernel (no bias).
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims::<4>(input, "conv2d")?;
        let [o, kc, kh, kw] = self.dims::<4>(kernel, "conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let (oh, ow) = match (
            conv2d_output_size(h, kh, stride, padding),
            conv2d_output_size(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"),
                ))
            }
        };
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let (k, p) = (g.patch_len(), g.out_len());
        let mut cols = vec![0.0; n * k * p];
        let mut out = vec![0.0; n * o * p];
        let x = self.data(input);
        let weights = self.data(kernel);
        for b in 0..n {
            let patch = &mut cols[b * k * p..(b + 1) * k * p];
            im2col(&x[b * c * h * w..(b + 1) * c * h * w], &g, patch);
            gemm(
                o,
                k,
                p,
                MatRef::rows(weights, k),
                MatRef::rows(patch, p),
                0.0,
                &mut out[b * o * p..(b + 1) * o * p],
            );
        }
        self.push(
            Op::Conv2d {
                input,
                kernel,
                geometry: g,
                cols,
            },
            vec![n, o, oh, ow],
            out,
        )
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims::<4>(input, "channel_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let x = self.data(input);
        let b = self.data(bias);
        let plane = h * w;
        let mut out = x.to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        self.push(Op::ChannelBias { input, bias }, vec![n, c, h, w], out)
    }

    /// `input (B x F) · weight (F x G) + bias (G)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [batch, f] = self.dims::<2>(input, "dense")?;
        let [wf, g] = self.dims::<2>(weight, "dense")?;
        if wf != f || self.shape(bias) != [g] {
            return Err(Error::shape(
                "dense",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out: Vec<f32> = self.data(bias).repeat(batch);
        gemm(
            batch,
            f,
            g,
            MatRef::rows(self.data(input), f),
            MatRef::rows(self.data(weight), g),
            1.0,
            &mut out,
        );
        self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            vec![batch, g],
            out,
        )
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let [m, k] = self.dims::<2>(lhs, "matmul")?;
        let [rk, n] = self.dims::<2>(rhs, "matmul")?;
        if rk != k {
            return Err(Error::shape("matmul", format!("{m}x{k} by {rk}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.data(lhs), k),
            MatRef::rows(self.data(rhs), n),
            0.0,
            &mut out,
        );
        self.push(Op::MatMul { lhs, rhs }, vec![m, n], out)
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let [r, c] = self.dims::<2>(input, "transpose")?;
        let x = self.data(input);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(Op::Transpose { input }, vec![c, r], out)
    }

    /// Column `index` of a B×K matrix, as B×1.
    pub fn column(&mut self, input: Var, index: usize) -> Result<Var> {
        let [r, c] = self.dims::<2>(input, "column")?;
        if index >= c {
            return Err(Error::shape("column", format!("index {index} out of range for {r}×{c}")));
        }
        let out = self.data(input).chunks(c).map(|row| row[index]).collect();
        self.push(Op::Column { input, index }, vec![r, 1], out)
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let out = self.data(input).iter().map(|&v| f(v)).collect();
        let shape = self.shape(input).to_vec();
        self.push(op, shape, out)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Relu { input }, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Sigmoid { input }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        self.unary(input, Op::Scale { input, factor }, |v| v * factor)
    }

    /// Square root; the backward pass treats the derivative at 0 as 0.
    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        if self.data(input).iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        self.unary(input, Op::Sqrt { input }, f32::sqrt)
    }

    fn binary(&mut self, lhs: Var, rhs: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let name = op.name();
        self.same_shape(lhs, rhs, name)?;
        let out = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(&a, &b)| f(a, b))
            .collect();
        let shape = self.shape(lhs).to_vec();
        self.push(op, shape, out)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, Op::Add { lhs, rhs }, |a, b| a + b)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, Op::Sub { lhs, rhs }, |a, b| a - b)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, Op::Mul { lhs, rhs }, |a, b| a * b)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.data(input).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Op::Sum { input }, vec![], vec![total])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let data = self.data(input);
        if data.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
        self.push(Op::Mean { input }, vec![], vec![mean])
    }

    /// Non-overlapping or strided max pooling over NCHW; ties go to the
    /// first maximum in scan order.
    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims::<4>(input, "max_pool2d")?;
        let (oh, ow) = match (
            conv2d_output_size(h, window, stride, 0),
            conv2d_output_size(w, window, stride, 0),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(
                    "max_pool2d",
                    format!("window {window} / stride {stride} invalid for {h}x{w}"),
                ))
            }
        };
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Op::MaxPool2d { input, argmax }, vec![n, c, oh, ow], out)
    }

    /// NCHW → N×C spatial means.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims::<4>(input, "global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
        }
        let out = self
            .data(input)
            .chunks(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        self.push(Op::GlobalAvgPool { input }, vec![n, c], out)
    }

    /// Divides each row of a B×F tensor by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, input: Var, eps: f32) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("l2_normalize", "eps must be positive"));
        }
        let [b, f] = self.dims::<2>(input, "l2_normalize")?;
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * f);
        let mut norms = Vec::with_capacity(b);
        for row in x.chunks(f.max(1)).take(b) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            let (denom, clamped) = if norm > eps { (norm, false) } else { (eps, true) };
            out.extend(row.iter().map(|&v| v / denom));
            norms.push((denom, clamped));
        }
        self.push(Op::L2Normalize { input, norms }, vec![b, f], out)
    }

    /// Row-wise softmax over the last axis of a B×K tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let [b, k] = self.dims::<2>(input, "softmax")?;
        let mut out = Vec::with_capacity(b * k);
        for row in self.data(input).chunks(k.max(1)).take(b) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
            let total: f32 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / total));
        }
        self.push(Op::Softmax { input }, vec![b, k], out)
    }

    /// Row-wise log-softmax, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let [b, k] = self.dims::<2>(input, "log_softmax")?;
        let mut out = Vec::with_capacity(b * k);
        for row in self.data(input).chunks(k.max(1)).take(b) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push(Op::LogSoftmax { input }, vec![b, k], out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar `loss`. Fills the gradient of
    /// every leaf that requires one; gradients of shared inputs are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.value.requires_grad() {
                    self.nodes[id].value.set_grad(g)?;
                }
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each input that needs a gradient.
    fn local_grads(&self, id: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = node.value.data();
        let mut result = Vec::new();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geometry,
                cols,
            } => {
                let gm = *geometry;
                let n = self.shape(*input)[0];
                let o = self.shape(*kernel)[0];
                let (k, p) = (gm.patch_len(), gm.out_len());
                if wants(*kernel) {
                    let mut dk = vec![0.0; o * k];
                    for b in 0..n {
                        gemm(
                            o,
                            p,
                            k,
                            MatRef::rows(&g[b * o * p..(b + 1) * o * p], p),
                            MatRef::transposed(&cols[b * k * p..(b + 1) * k * p], p),
                            1.0,
                            &mut dk,
                        );
                    }
                    result.push((*kernel, dk));
                }
                if wants(*input) {
                    let weights = self.data(*kernel);
                    let image = gm.channels * gm.height * gm.width;
                    let mut dx = vec![0.0; n * image];
                    let mut dcols = vec![0.0; k * p];
                    for b in 0..n {
                        gemm(
                            k,
                            o,
                            p,
                            MatRef::transposed(weights, k),
                            MatRef::rows(&g[b * o * p..(b + 1) * o * p], p),
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, &gm, &mut dx[b * image..(b + 1) * image]);
                    }
                    result.push((*input, dx));
                }
            }
            Op::ChannelBias { input, bias } => {
                let [_, c, h, w]: [usize; 4] = self.shape(*input).try_into().unwrap();
                if wants(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(h * w).enumerate() {
                        db[i % c] += chunk.iter().sum::<f32>();
                    }
                    result.push((*bias, db));
                }
                if wants(*input) {
                    result.push((*input, g.to_vec()));
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let [batch, f]: [usize; 2] = self.shape(*input).try_into().unwrap();
                let gdim = self.shape(*weight)[1];
                if wants(*input) {
                    let mut dx = vec![0.0; batch * f];
                    gemm(
                        batch,
                        gdim,
                        f,
                        MatRef::rows(g, gdim),
                        MatRef::transposed(self.data(*weight), gdim),
                        0.0,
                        &mut dx,
                    );
                    result.push((*input, dx));
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; f * gdim];
                    gemm(
                        f,
                        batch,
                        gdim,
                        MatRef::transposed(self.data(*input), f),
                        MatRef::rows(g, gdim),
                        0.0,
                        &mut dw,
                    );
                    result.push((*weight, dw));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; gdim];
                    for row in g.chunks(gdim) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    result.push((*bias, db));
                }
            }
            Op::MatMul { lhs, rhs } => {
                let [m, k]: [usize; 2] = self.shape(*lhs).try_into().unwrap();
                let n = self.shape(*rhs)[1];
                if wants(*lhs) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rows(g, n),
                        MatRef::transposed(self.data(*rhs), n),
                        0.0,
                        &mut da,
                    );
                    result.push((*lhs, da));
                }
                if wants(*rhs) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(self.data(*lhs), k),
                        MatRef::rows(g, n),
                        0.0,
                        &mut db,
                    );
                    result.push((*rhs, db));
                }
            }
            Op::Transpose { input } => {
                if wants(*input) {
                    let [r, c]: [usize; 2] = self.shape(*input).try_into().unwrap();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    result.push((*input, dx));
                }
            }
            Op::Column { input, index } => {
                if wants(*input) {
                    let [r, c]: [usize; 2] = self.shape(*input).try_into().unwrap();
                    let mut dx = vec![0.0; r * c];
                    for (i, gv) in g.iter().enumerate() {
                        dx[i * c + index] = *gv;
                    }
                    result.push((*input, dx));
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = self.data(*input);
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    result.push((*input, dx));
                }
            }
            Op::Sigmoid { input } => {
                if wants(*input) {
                    let dx = g.iter().zip(out).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
                    result.push((*input, dx));
                }
            }
            Op::Add { lhs, rhs } => {
                if wants(*lhs) {
                    result.push((*lhs, g.to_vec()));
                }
                if wants(*rhs) {
                    result.push((*rhs, g.to_vec()));
                }
            }
            Op::Sub { lhs, rhs } => {
                if wants(*lhs) {
                    result.push((*lhs, g.to_vec()));
                }
                if wants(*rhs) {
                    result.push((*rhs, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul { lhs, rhs } => {
                if wants(*lhs) {
                    let b = self.data(*rhs);
                    result.push((*lhs, g.iter().zip(b).map(|(gv, bv)| gv * bv).collect()));
                }
                if wants(*rhs) {
                    let a = self.data(*lhs);
                    result.push((*rhs, g.iter().zip(a).map(|(gv, av)| gv * av).collect()));
                }
            }
            Op::Scale { input, factor } => {
                if wants(*input) {
                    result.push((*input, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    let n = self.value(*input).numel();
                    result.push((*input, vec![g[0]; n]));
                }
            }
            Op::Mean { input } => {
                if wants(*input) {
                    let n = self.value(*input).numel();
                    result.push((*input, vec![g[0] / n as f32; n]));
                }
            }
            Op::Sqrt { input } => {
                if wants(*input) {
                    let dx = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &y)| if y > 0.0 { gv * 0.5 / y } else { 0.0 })
                        .collect();
                    result.push((*input, dx));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if wants(*input) {
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        dx[idx] += gv;
                    }
                    result.push((*input, dx));
                }
            }
            Op::GlobalAvgPool { input } => {
                if wants(*input) {
                    let [_, _, h, w]: [usize; 4] = self.shape(*input).try_into().unwrap();
                    let plane = h * w;
                    let mut dx = Vec::with_capacity(g.len() * plane);
                    for &gv in g {
                        dx.extend(std::iter::repeat(gv / plane as f32).take(plane));
                    }
                    result.push((*input, dx));
                }
            }
            Op::L2Normalize { input, norms } => {
                if wants(*input) {
                    let f = self.shape(*input)[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, yrow), &(denom, clamped)) in
                        g.chunks(f.max(1)).zip(out.chunks(f.max(1))).zip(norms)
                    {
                        if clamped {
                            dx.extend(grow.iter().map(|v| v / denom));
                        } else {
                            let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            dx.extend(grow.iter().zip(yrow).map(|(gv, y)| (gv - y * dot) / denom));
                        }
                    }
                    result.push((*input, dx));
                }
            }
            Op::Softmax { input } => {
                if wants(*input) {
                    let k = self.shape(*input)[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(k.max(1)).zip(out.chunks(k.max(1))) {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        dx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                    }
                    result.push((*input, dx));
                }
            }
            Op::LogSoftmax { input } => {
                if wants(*input) {
                    let k = self.shape(*input)[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(k.max(1)).zip(out.chunks(k.max(1))) {
                        let total: f32 = grow.iter().sum();
                        dx.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * total));
                    }
                    result.push((*input, dx));
                }
            }
        }
        result
    }
}
