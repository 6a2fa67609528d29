//! Minimal reverse-mode differentiation over dense rank-4 f32 tensors.
//!
//! A [`Tape`] owns one computation graph: leaves are inserted with
//! [`Tape::leaf`] or [`Tape::param`], operators append nodes, and
//! [`Tape::backward`] walks the record once in reverse. Parents always
//! precede children, so creation order is already topological and every
//! node is visited exactly once.
//!
//! One tape is built and differentiated by one logical thread; independent
//! tapes (per batch item, per MC pass) can run fully in parallel. All
//! reductions use fixed summation orders, so forward and backward results
//! are bit-identical regardless of scheduling.

mod kernels;

use crate::rng::SeedStream;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims must be even for 2x2 pooling, got {h}x{w}")]
    OddSpatialDims { h: usize, w: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f32),
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("non-positive predicted variance {0}")]
    NonPositiveVariance(f32),
}

type Result<T> = std::result::Result<T, AutogradError>;

/// (batch, channels, height, width)
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.c, self.h, self.w)
    }
}

/// Dense row-major rank-4 f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape4) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), shape.len(), "tensor data length mismatch");
        Self { shape, data }
    }

    pub fn filled(shape: Shape4, v: f32) -> Self {
        Self { shape, data: vec![v; shape.len()] }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f32 {
        let s = self.shape;
        self.data[((b * s.c + c) * s.h + h) * s.w + w]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f32) {
        let s = self.shape;
        self.data[((b * s.c + c) * s.h + h) * s.w + w] = v;
    }

    fn assert_finite(&self, op: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value after {op}"
        );
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, padding: Padding },
    Relu { input: NodeId },
    Softplus { input: NodeId },
    Square { input: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    MeanAll { input: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<u32> },
    UpsampleNn2 { input: NodeId },
    Dropout { input: NodeId, mask: Option<Vec<f32>> },
    KlLoss { pred_mu: NodeId, pred_sigma2: NodeId, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by node, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        value.assert_finite(op_name(&op));
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant input (no gradient).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable parameter (gradient collected by backward).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Cross-correlation with bias. Kernel is (out_c, in_c, kh, kw) with odd
    /// spatial dims; bias is (1, out_c, 1, 1). `Same` keeps H×W with zero
    /// padding, `Valid` shrinks to (H−kh+1)×(W−kw+1).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let x = self.value(input).shape();
        let k = self.value(kernel).shape();
        let bsh = self.value(bias).shape();
        if k.h % 2 == 0 || k.w % 2 == 0 {
            return Err(AutogradError::ShapeMismatch(format!(
                "kernel spatial dims must be odd, got {}x{}",
                k.h, k.w
            )));
        }
        if x.c != k.c {
            return Err(AutogradError::ShapeMismatch(format!(
                "input channels {} vs kernel input channels {}",
                x.c, k.c
            )));
        }
        if bsh != Shape4::new(1, k.b, 1, 1) {
            return Err(AutogradError::ShapeMismatch(format!(
                "bias shape {bsh} does not match (1,{},1,1)",
                k.b
            )));
        }
        let (pad_h, pad_w, out_h, out_w) = match padding {
            Padding::Same => ((k.h - 1) / 2, (k.w - 1) / 2, x.h, x.w),
            Padding::Valid => {
                if x.h < k.h || x.w < k.w {
                    return Err(AutogradError::ShapeMismatch(format!(
                        "valid conv needs input {}x{} >= kernel {}x{}",
                        x.h, x.w, k.h, k.w
                    )));
                }
                (0, 0, x.h - k.h + 1, x.w - k.w + 1)
            }
        };
        let out_shape = Shape4::new(x.b, k.b, out_h, out_w);
        let mut out = Tensor::zeros(out_shape);
        {
            let n = out_h * out_w;
            let kdim = x.c * k.h * k.w;
            let kernel_data = self.value(kernel).data();
            let bias_data = self.value(bias).data();
            let input_t = self.value(input);
            let mut col = vec![0.0f32; kdim * n];
            for b in 0..x.b {
                let img = &input_t.data()[b * x.c * x.h * x.w..(b + 1) * x.c * x.h * x.w];
                kernels::im2col(img, x.c, x.h, x.w, k.h, k.w, pad_h, pad_w, out_h, out_w, &mut col);
                let dst = &mut out.data_mut()[b * k.b * n..(b + 1) * k.b * n];
                kernels::matmul_acc(kernel_data, &col, k.b, kdim, n, dst);
                for oc in 0..k.b {
                    let bv = bias_data[oc];
                    for v in &mut dst[oc * n..(oc + 1) * n] {
                        *v += bv;
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, padding }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = Tensor {
            shape: self.value(input).shape(),
            data: self.value(input).data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        let out = Tensor {
            shape: self.value(input).shape(),
            data: self.value(input).data().iter().map(|&v| softplus_f32(v)).collect(),
        };
        let needs = self.needs(input);
        self.push(out, Op::Softplus { input }, needs)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let out = Tensor {
            shape: self.value(input).shape(),
            data: self.value(input).data().iter().map(|&v| v * v).collect(),
        };
        let needs = self.needs(input);
        self.push(out, Op::Square { input }, needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.b != sb.b || sa.h != sb.h || sa.w != sb.w {
            return Err(AutogradError::ShapeMismatch(format!(
                "concat_channels {sa} vs {sb}"
            )));
        }
        let out_shape = Shape4::new(sa.b, sa.c + sb.c, sa.h, sa.w);
        let mut out = Tensor::zeros(out_shape);
        let plane = sa.h * sa.w;
        for bi in 0..sa.b {
            let dst = &mut out.data_mut()[bi * out_shape.c * plane..(bi + 1) * out_shape.c * plane];
            dst[..sa.c * plane]
                .copy_from_slice(&self.value(a).data()[bi * sa.c * plane..(bi + 1) * sa.c * plane]);
            dst[sa.c * plane..]
                .copy_from_slice(&self.value(b).data()[bi * sb.c * plane..(bi + 1) * sb.c * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(AutogradError::ShapeMismatch(format!("add {sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: sa, data }, Op::Add { a, b }, needs))
    }

    /// Mean over all elements, as a (1,1,1,1) tensor. Accumulates in f64 in
    /// index order.
    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let sum: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let mean = (sum / self.value(input).data().len() as f64) as f32;
        let needs = self.needs(input);
        self.push(
            Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![mean]),
            Op::MeanAll { input },
            needs,
        )
    }

    /// 2×2 max pooling, stride 2. Ties route the gradient to the first
    /// element in row-major window order.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(AutogradError::OddSpatialDims { h: s.h, w: s.w });
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let out_shape = Shape4::new(s.b, s.c, oh, ow);
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0u32; out_shape.len()];
        {
            let x = self.value(input);
            let mut oi = 0usize;
            for b in 0..s.b {
                for c in 0..s.c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let base_h = 2 * i;
                            let base_w = 2 * j;
                            let mut best = f32::NEG_INFINITY;
                            let mut best_flat = 0u32;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let v = x.at(b, c, base_h + di, base_w + dj);
                                    if v > best {
                                        best = v;
                                        best_flat = (((b * s.c + c) * s.h + base_h + di) * s.w
                                            + base_w
                                            + dj)
                                            as u32;
                                    }
                                }
                            }
                            out.data_mut()[oi] = best;
                            argmax[oi] = best_flat;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Nearest-neighbour ×2 upsampling: each pixel becomes a 2×2 block.
    pub fn upsample_nn2(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).shape();
        let out_shape = Shape4::new(s.b, s.c, s.h * 2, s.w * 2);
        let mut out = Tensor::zeros(out_shape);
        {
            let x = self.value(input);
            for b in 0..s.b {
                for c in 0..s.c {
                    for i in 0..s.h {
                        for j in 0..s.w {
                            let v = x.at(b, c, i, j);
                            out.set(b, c, 2 * i, 2 * j, v);
                            out.set(b, c, 2 * i, 2 * j + 1, v);
                            out.set(b, c, 2 * i + 1, 2 * j, v);
                            out.set(b, c, 2 * i + 1, 2 * j + 1, v);
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(out, Op::UpsampleNn2 { input }, needs)
    }

    /// Inverted dropout: elements are zeroed with probability `rate`,
    /// survivors scaled by 1/(1−rate). The mask comes from `stream`; the
    /// same stream state always produces the same mask. `rate` 0 is the
    /// identity and consumes no draws.
    pub fn dropout(&mut self, input: NodeId, rate: f32, stream: &mut SeedStream) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutogradError::InvalidRate(rate));
        }
        let needs = self.needs(input);
        if rate == 0.0 {
            let out = self.value(input).clone();
            return Ok(self.push(out, Op::Dropout { input, mask: None }, needs));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = self
            .value(input)
            .data()
            .iter()
            .map(|_| if stream.unit_f32() < rate { 0.0 } else { scale })
            .collect();
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.value(input).shape();
        Ok(self.push(Tensor { shape, data }, Op::Dropout { input, mask: Some(mask) }, needs))
    }

    /// The training loss as a graph node:
    /// `(1/n) Σ_i [ (t_i − μ̂_i)²/(2σ̂_i²) + ½ ln σ̂_i² ]` over all elements,
    /// with `target` held constant.
    pub fn kl_lognormal_loss(
        &mut self,
        pred_mu: NodeId,
        pred_sigma2: NodeId,
        target: Tensor,
    ) -> Result<NodeId> {
        let sm = self.value(pred_mu).shape();
        let ss = self.value(pred_sigma2).shape();
        if sm != ss || sm != target.shape() {
            return Err(AutogradError::ShapeMismatch(format!(
                "loss shapes mu {sm}, sigma2 {ss}, target {}",
                target.shape()
            )));
        }
        let mut acc = 0.0f64;
        for ((&t, &m), &s2) in target
            .data()
            .iter()
            .zip(self.value(pred_mu).data())
            .zip(self.value(pred_sigma2).data())
        {
            if s2 <= 0.0 {
                return Err(AutogradError::NonPositiveVariance(s2));
            }
            let (t, m, s2) = (t as f64, m as f64, s2 as f64);
            let r = t - m;
            acc += r * r / (2.0 * s2) + 0.5 * s2.ln();
        }
        let loss = (acc / sm.len() as f64) as f32;
        let needs = self.needs(pred_mu) || self.needs(pred_sigma2);
        Ok(self.push(
            Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![loss]),
            Op::KlLoss { pred_mu, pred_sigma2, target },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// `param` leaf; parameters the loss never touched get explicit zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let loss_len = self.value(loss).data().len();
        if loss_len != 1 {
            return Err(AutogradError::NonScalarLoss(loss_len));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gout); // keep parameter gradients
                }
                &Op::Relu { input } => {
                    if self.needs(input) {
                        let g: Vec<f32> = self.nodes[input.0]
                            .value
                            .data()
                            .iter()
                            .zip(gout.data())
                            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                            .collect();
                        self.accumulate(&mut grads, input, g);
                    }
                }
                &Op::Softplus { input } => {
                    if self.needs(input) {
                        let g: Vec<f32> = self.nodes[input.0]
                            .value
                            .data()
                            .iter()
                            .zip(gout.data())
                            .map(|(&x, &g)| g * sigmoid_f32(x))
                            .collect();
                        self.accumulate(&mut grads, input, g);
                    }
                }
                &Op::Square { input } => {
                    if self.needs(input) {
                        let g: Vec<f32> = self.nodes[input.0]
                            .value
                            .data()
                            .iter()
                            .zip(gout.data())
                            .map(|(&x, &g)| 2.0 * x * g)
                            .collect();
                        self.accumulate(&mut grads, input, g);
                    }
                }
                &Op::Add { a, b } => {
                    if self.needs(a) {
                        self.accumulate(&mut grads, a, gout.data().to_vec());
                    }
                    if self.needs(b) {
                        self.accumulate(&mut grads, b, gout.data().to_vec());
                    }
                }
                &Op::Concat { a, b } => {
                    let sa = self.nodes[a.0].value.shape();
                    let sb = self.nodes[b.0].value.shape();
                    let plane = sa.h * sa.w;
                    if self.needs(a) {
                        let mut g = vec![0.0f32; sa.len()];
                        for bi in 0..sa.b {
                            let src = &gout.data()[bi * (sa.c + sb.c) * plane..];
                            g[bi * sa.c * plane..(bi + 1) * sa.c * plane]
                                .copy_from_slice(&src[..sa.c * plane]);
                        }
                        self.accumulate(&mut grads, a, g);
                    }
                    if self.needs(b) {
                        let mut g = vec![0.0f32; sb.len()];
                        for bi in 0..sb.b {
                            let src = &gout.data()[bi * (sa.c + sb.c) * plane..];
                            g[bi * sb.c * plane..(bi + 1) * sb.c * plane]
                                .copy_from_slice(&src[sa.c * plane..(sa.c + sb.c) * plane]);
                        }
                        self.accumulate(&mut grads, b, g);
                    }
                }
                &Op::MeanAll { input } => {
                    if self.needs(input) {
                        let n = self.nodes[input.0].value.data().len();
                        let g0 = gout.data()[0] / n as f32;
                        self.accumulate(&mut grads, input, vec![g0; n]);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    if self.needs(input) {
                        let mut g = vec![0.0f32; self.nodes[input.0].value.data().len()];
                        for (gi, &flat) in gout.data().iter().zip(argmax) {
                            g[flat as usize] += gi;
                        }
                        self.accumulate(&mut grads, input, g);
                    }
                }
                &Op::UpsampleNn2 { input } => {
                    if self.needs(input) {
                        let s = self.nodes[input.0].value.shape();
                        let mut g = vec![0.0f32; s.len()];
                        let gs = gout.shape();
                        for b in 0..s.b {
                            for c in 0..s.c {
                                for i in 0..s.h {
                                    for j in 0..s.w {
                                        let base =
                                            ((b * gs.c + c) * gs.h + 2 * i) * gs.w + 2 * j;
                                        let sum = (gout.data()[base] + gout.data()[base + 1])
                                            + (gout.data()[base + gs.w]
                                                + gout.data()[base + gs.w + 1]);
                                        g[((b * s.c + c) * s.h + i) * s.w + j] = sum;
                                    }
                                }
                            }
                        }
                        self.accumulate(&mut grads, input, g);
                    }
                }
                Op::Dropout { input, mask } => {
                    let input = *input;
                    if self.needs(input) {
                        let g = match mask {
                            None => gout.data().to_vec(),
                            Some(m) => gout.data().iter().zip(m).map(|(&g, &m)| g * m).collect(),
                        };
                        self.accumulate(&mut grads, input, g);
                    }
                }
                Op::KlLoss { pred_mu, pred_sigma2, target } => {
                    let (pred_mu, pred_sigma2) = (*pred_mu, *pred_sigma2);
                    let g0 = gout.data()[0] as f64;
                    let n = target.shape().len() as f64;
                    let mu_needs = self.needs(pred_mu);
                    let s2_needs = self.needs(pred_sigma2);
                    let mut gmu = if mu_needs { vec![0.0f32; target.data().len()] } else { vec![] };
                    let mut gs2 = if s2_needs { vec![0.0f32; target.data().len()] } else { vec![] };
                    for (i, (&t, (&m, &s2))) in target
                        .data()
                        .iter()
                        .zip(
                            self.nodes[pred_mu.0]
                                .value
                                .data()
                                .iter()
                                .zip(self.nodes[pred_sigma2.0].value.data()),
                        )
                        .enumerate()
                    {
                        let (t, m, s2) = (t as f64, m as f64, s2 as f64);
                        let r = m - t;
                        if mu_needs {
                            gmu[i] = (g0 * r / (s2 * n)) as f32;
                        }
                        if s2_needs {
                            gs2[i] = (g0 * (0.5 / s2 - (r * r) / (2.0 * s2 * s2)) / n) as f32;
                        }
                    }
                    if mu_needs {
                        self.accumulate(&mut grads, pred_mu, gmu);
                    }
                    if s2_needs {
                        self.accumulate(&mut grads, pred_sigma2, gs2);
                    }
                }
                &Op::Conv2d { input, kernel, bias, padding } => {
                    self.conv2d_backward(&mut grads, &gout, input, kernel, bias, padding);
                }
            }
        }

        // Untouched parameters still report a zero gradient.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Vec<f32>) {
        let shape = self.nodes[id.0].value.shape();
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot => *slot = Some(Tensor::from_vec(shape, g)),
        }
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    ) {
        let x = self.nodes[input.0].value.shape();
        let k = self.nodes[kernel.0].value.shape();
        let (pad_h, pad_w) = match padding {
            Padding::Same => ((k.h - 1) / 2, (k.w - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let gs = gout.shape();
        let n = gs.h * gs.w;
        let kdim = x.c * k.h * k.w;

        if self.needs(bias) {
            let mut gb = vec![0.0f32; k.b];
            for b in 0..gs.b {
                for oc in 0..k.b {
                    let row = &gout.data()[(b * k.b + oc) * n..(b * k.b + oc + 1) * n];
                    let mut s = 0.0f32;
                    for &v in row {
                        s += v;
                    }
                    gb[oc] += s;
                }
            }
            self.accumulate(grads, bias, gb);
        }

        let needs_k = self.needs(kernel);
        let needs_x = self.needs(input);
        if !needs_k && !needs_x {
            return;
        }
        let mut gk = vec![0.0f32; k.len()];
        let mut gx = vec![0.0f32; x.len()];
        let mut col = vec![0.0f32; kdim * n];
        let mut gcol = vec![0.0f32; kdim * n];
        let kernel_data = self.nodes[kernel.0].value.data();
        let input_data = self.nodes[input.0].value.data();
        for b in 0..gs.b {
            let gout_b = &gout.data()[b * k.b * n..(b + 1) * k.b * n];
            if needs_k {
                let img = &input_data[b * x.c * x.h * x.w..(b + 1) * x.c * x.h * x.w];
                kernels::im2col(img, x.c, x.h, x.w, k.h, k.w, pad_h, pad_w, gs.h, gs.w, &mut col);
                kernels::matmul_abt_acc(gout_b, &col, k.b, n, kdim, &mut gk);
            }
            if needs_x {
                gcol.fill(0.0);
                // gcol[kdim×n] = kernelᵀ · gout; accumulate row-wise in
                // fixed output-channel order.
                for oc in 0..k.b {
                    let go_row = &gout_b[oc * n..(oc + 1) * n];
                    let k_row = &kernel_data[oc * kdim..(oc + 1) * kdim];
                    for (p, &kv) in k_row.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let dst = &mut gcol[p * n..(p + 1) * n];
                        for (d, &g) in dst.iter_mut().zip(go_row) {
                            *d += kv * g;
                        }
                    }
                }
                let gimg = &mut gx[b * x.c * x.h * x.w..(b + 1) * x.c * x.h * x.w];
                kernels::col2im_acc(
                    &gcol, x.c, x.h, x.w, k.h, k.w, pad_h, pad_w, gs.h, gs.w, gimg,
                );
            }
        }
        if needs_k {
            self.accumulate(grads, kernel, gk);
        }
        if needs_x {
            self.accumulate(grads, input, gx);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu { .. } => "relu",
        Op::Softplus { .. } => "softplus",
        Op::Square { .. } => "square",
        Op::Concat { .. } => "concat_channels",
        Op::Add { .. } => "add",
        Op::MeanAll { .. } => "mean_all",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::UpsampleNn2 { .. } => "upsample_nn2",
        Op::Dropout { .. } => "dropout",
        Op::KlLoss { .. } => "kl_lognormal_loss",
    }
}

/// Numerically stable f32 softplus, `ln(1+exp(x))`.
pub fn softplus_f32(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
