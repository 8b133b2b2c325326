//! Tape-based reverse-mode automatic differentiation over a small,
//! fixed set of operations — enough for the convolutional trackers in
//! this crate and nothing more.
//!
//! A [`Tape`] is built per forward evaluation: leaves are inserted
//! with [`Tape::input`], operations append nodes (eagerly computing
//! values), and [`Tape::backward`] returns one gradient tensor per
//! node. Nodes are topologically ordered by construction.

use crate::error::{Error, Result};
use crate::geometry::{eiou_loss_grad, BoundingBox};
use crate::nn::tensor::Tensor;

pub type NodeId = usize;

/// Numerically stable `ln(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Input,
    /// 2-D convolution, kernel `[c_out, c_in, k, k]`, symmetric zero
    /// padding.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    /// `out = exp(x) * scale`; the gradient is the output itself, so
    /// the factor is not stored.
    ExpScale {
        input: NodeId,
    },
    /// Center spatial crop `[c, h, w] -> [c, size, size]`.
    CropCenter {
        input: NodeId,
        size: usize,
    },
    /// Depth-wise valid cross-correlation of a search feature map
    /// with a per-channel kernel, normalized by the kernel area.
    DwXcorr {
        search: NodeId,
        template: NodeId,
    },
    /// Global average pooling `[c, h, w] -> [c]`.
    Gap {
        input: NodeId,
    },
    /// Elementwise `a - b`.
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Fully connected layer, weight `[out, in]`, bias `[out]`.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Mean focal binary cross-entropy over masked locations with
    /// hard 0/1 targets.
    FocalBce {
        logits: NodeId,
        targets: Tensor,
        mask: Tensor,
        alpha: f64,
        gamma: f64,
    },
    /// Mean focal-modulated BCE against soft targets in `[0, 1]`:
    /// `|t - p|^gamma * bce(p, t)` over masked locations.
    SoftFocalBce {
        logits: NodeId,
        targets: Tensor,
        mask: Tensor,
        gamma: f64,
    },
    /// Mean EIoU loss over masked grid locations between boxes
    /// decoded from `[4, h, w]` edge distances and one ground-truth
    /// box.
    EiouMean {
        reg: NodeId,
        points: Vec<(f64, f64)>,
        mask: Tensor,
        gt: BoundingBox,
    },
    /// Mean binary cross-entropy with logits over all elements.
    BceMean {
        logits: NodeId,
        targets: Tensor,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::ShapeMismatch(format!("{what}: {detail}"))
}

// --- dense kernels -------------------------------------------------

/// `c[m x n] += a[m x k] * b[k x n]`.
fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`.
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`.
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    if input.len() != 3 || weight.len() != 4 || weight[2] != weight[3] {
        return Err(shape_err(
            "conv2d",
            format!("input {input:?}, weight {weight:?}"),
        ));
    }
    let (c_in, h, w) = (input[0], input[1], input[2]);
    let (c_out, k) = (weight[0], weight[2]);
    if weight[1] != c_in {
        return Err(shape_err(
            "conv2d",
            format!("input has {c_in} channels, weight expects {}", weight[1]),
        ));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(shape_err("conv2d", format!("kernel {k} exceeds padded input")));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        h_out: (h + 2 * pad - k) / stride + 1,
        w_out: (w + 2 * pad - k) / stride + 1,
    })
}

/// Unfold input patches into a `[c_in*k*k, h_out*w_out]` matrix.
fn im2col(x: &[f64], d: &ConvDims, stride: usize, pad: usize) -> Vec<f64> {
    let cols = d.h_out * d.w_out;
    let mut col = vec![0.0; d.c_in * d.k * d.k * cols];
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = ((c * d.k + ki) * d.k + kj) * cols;
                for oi in 0..d.h_out {
                    let ri = (oi * stride + ki) as i64 - pad as i64;
                    if ri < 0 || ri >= d.h as i64 {
                        continue;
                    }
                    let src = ri as usize * d.w;
                    let dst = row + oi * d.w_out;
                    for oj in 0..d.w_out {
                        let cj = (oj * stride + kj) as i64 - pad as i64;
                        if cj >= 0 && cj < d.w as i64 {
                            col[dst + oj] = plane[src + cj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back onto the input layout.
fn col2im_acc(col: &[f64], d: &ConvDims, stride: usize, pad: usize, x: &mut [f64]) {
    let cols = d.h_out * d.w_out;
    for c in 0..d.c_in {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = ((c * d.k + ki) * d.k + kj) * cols;
                for oi in 0..d.h_out {
                    let ri = (oi * stride + ki) as i64 - pad as i64;
                    if ri < 0 || ri >= d.h as i64 {
                        continue;
                    }
                    let dst = ri as usize * d.w;
                    let src = row + oi * d.w_out;
                    for oj in 0..d.w_out {
                        let cj = (oj * stride + kj) as i64 - pad as i64;
                        if cj >= 0 && cj < d.w as i64 {
                            plane[dst + cj as usize] += col[src + oj];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let d = conv_dims(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            pad,
        )?;
        if self.value(bias).shape() != [d.c_out] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} vs {} outputs", self.value(bias).shape(), d.c_out),
            ));
        }
        let cols = d.h_out * d.w_out;
        let col = im2col(self.value(input).data(), &d, stride, pad);
        let mut out = vec![0.0; d.c_out * cols];
        for co in 0..d.c_out {
            let b = self.value(bias).data()[co];
            out[co * cols..(co + 1) * cols].fill(b);
        }
        mm_nn_acc(
            self.value(weight).data(),
            &col,
            &mut out,
            d.c_out,
            d.c_in * d.k * d.k,
            cols,
        );
        let value = Tensor::from_vec(&[d.c_out, d.h_out, d.w_out], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            value,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut v = self.value(input).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(Op::Relu { input }, v)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let mut v = self.value(input).clone();
        for x in v.data_mut() {
            *x = sigmoid(*x);
        }
        self.push(Op::Sigmoid { input }, v)
    }

    pub fn exp_scale(&mut self, input: NodeId, scale: f64) -> NodeId {
        let mut v = self.value(input).clone();
        for x in v.data_mut() {
            *x = x.exp() * scale;
        }
        self.push(Op::ExpScale { input }, v)
    }

    pub fn crop_center(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.len() != 3 || s[1] < size || s[2] < size {
            return Err(shape_err(
                "crop_center",
                format!("cannot crop {size} from {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oi, oj) = ((h - size) / 2, (w - size) / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * size * size];
        for ch in 0..c {
            for i in 0..size {
                for j in 0..size {
                    out[(ch * size + i) * size + j] = x[(ch * h + i + oi) * w + j + oj];
                }
            }
        }
        let value = Tensor::from_vec(&[c, size, size], out)?;
        Ok(self.push(Op::CropCenter { input, size }, value))
    }

    pub fn dw_xcorr(&mut self, search: NodeId, template: NodeId) -> Result<NodeId> {
        let ss = self.value(search).shape().to_vec();
        let ts = self.value(template).shape().to_vec();
        if ss.len() != 3
            || ts.len() != 3
            || ss[0] != ts[0]
            || ts[1] != ts[2]
            || ss[1] < ts[1]
            || ss[2] < ts[2]
        {
            return Err(shape_err(
                "dw_xcorr",
                format!("search {ss:?} vs template {ts:?}"),
            ));
        }
        let (c, hs, ws, k) = (ss[0], ss[1], ss[2], ts[1]);
        let (ho, wo) = (hs - k + 1, ws - k + 1);
        let norm = 1.0 / (k * k) as f64;
        let x = self.value(search).data();
        let t = self.value(template).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let xp = &x[ch * hs * ws..(ch + 1) * hs * ws];
            let tp = &t[ch * k * k..(ch + 1) * k * k];
            let op = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for a in 0..k {
                        let xrow = &xp[(i + a) * ws + j..(i + a) * ws + j + k];
                        let trow = &tp[a * k..(a + 1) * k];
                        for (xv, tv) in xrow.iter().zip(trow) {
                            acc += xv * tv;
                        }
                    }
                    op[i * wo + j] = acc * norm;
                }
            }
        }
        let value = Tensor::from_vec(&[c, ho, wo], out)?;
        Ok(self.push(Op::DwXcorr { search, template }, value))
    }

    pub fn gap(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.len() != 3 {
            return Err(shape_err("gap", format!("expected [c,h,w], got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let x = self.value(input).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_vec(&[c], out)?;
        Ok(self.push(Op::Gap { input }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "sub",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *x -= y;
        }
        Ok(self.push(Op::Sub { a, b }, v))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || self.value(bias).shape() != [ws[0]]
        {
            return Err(shape_err(
                "linear",
                format!(
                    "input {xs:?}, weight {ws:?}, bias {:?}",
                    self.value(bias).shape()
                ),
            ));
        }
        let (o, i) = (ws[0], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let out: Vec<f64> = (0..o)
            .map(|r| {
                b[r] + w[r * i..(r + 1) * i]
                    .iter()
                    .zip(x)
                    .map(|(wv, xv)| wv * xv)
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::from_vec(&[o], out)?;
        Ok(self.push(Op::Linear { input, weight, bias }, value))
    }

    fn check_like(&self, what: &str, logits: NodeId, t: &Tensor) -> Result<()> {
        if self.value(logits).shape() != t.shape() {
            return Err(shape_err(
                what,
                format!("{:?} vs {:?}", self.value(logits).shape(), t.shape()),
            ));
        }
        Ok(())
    }

    /// Focal BCE with hard targets, averaged over `mask > 0`
    /// locations; zero (with zero gradient) when the mask is empty.
    pub fn focal_bce(
        &mut self,
        logits: NodeId,
        targets: Tensor,
        mask: Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<NodeId> {
        self.check_like("focal_bce targets", logits, &targets)?;
        self.check_like("focal_bce mask", logits, &mask)?;
        let z = self.value(logits).data();
        let n: f64 = mask.data().iter().filter(|&&m| m > 0.0).count() as f64;
        let mut total = 0.0;
        if n > 0.0 {
            for ((&zv, &tv), &mv) in z.iter().zip(targets.data()).zip(mask.data()) {
                if mv <= 0.0 {
                    continue;
                }
                let p = sigmoid(zv);
                total += if tv > 0.5 {
                    alpha * (1.0 - p).powf(gamma) * softplus(-zv)
                } else {
                    (1.0 - alpha) * p.powf(gamma) * softplus(zv)
                };
            }
            total /= n;
        }
        Ok(self.push(
            Op::FocalBce {
                logits,
                targets,
                mask,
                alpha,
                gamma,
            },
            Tensor::scalar(total),
        ))
    }

    /// Focal-modulated BCE against soft targets, averaged over
    /// `mask > 0` locations.
    pub fn soft_focal_bce(
        &mut self,
        logits: NodeId,
        targets: Tensor,
        mask: Tensor,
        gamma: f64,
    ) -> Result<NodeId> {
        self.check_like("soft_focal_bce targets", logits, &targets)?;
        self.check_like("soft_focal_bce mask", logits, &mask)?;
        let z = self.value(logits).data();
        let n: f64 = mask.data().iter().filter(|&&m| m > 0.0).count() as f64;
        let mut total = 0.0;
        if n > 0.0 {
            for ((&zv, &tv), &mv) in z.iter().zip(targets.data()).zip(mask.data()) {
                if mv <= 0.0 {
                    continue;
                }
                let p = sigmoid(zv);
                let bce = softplus(zv) - tv * zv;
                total += (tv - p).abs().powf(gamma) * bce;
            }
            total /= n;
        }
        Ok(self.push(
            Op::SoftFocalBce {
                logits,
                targets,
                mask,
                gamma,
            },
            Tensor::scalar(total),
        ))
    }

    /// Mean EIoU loss of boxes decoded from per-location edge
    /// distances against one ground-truth box, over `mask > 0`
    /// locations.
    pub fn eiou_mean(
        &mut self,
        reg: NodeId,
        points: Vec<(f64, f64)>,
        mask: Tensor,
        gt: BoundingBox,
    ) -> Result<NodeId> {
        let s = self.value(reg).shape();
        if s.len() != 3 || s[0] != 4 {
            return Err(shape_err("eiou_mean", format!("expected [4,h,w], got {s:?}")));
        }
        let hw = s[1] * s[2];
        if points.len() != hw || mask.numel() != hw {
            return Err(shape_err(
                "eiou_mean",
                format!("{hw} locations vs {} points, {} mask", points.len(), mask.numel()),
            ));
        }
        gt.validate()?;
        let r = self.value(reg).data();
        let n = mask.data().iter().filter(|&&m| m > 0.0).count() as f64;
        let mut total = 0.0;
        if n > 0.0 {
            for (loc, &(px, py)) in points.iter().enumerate() {
                if mask.data()[loc] <= 0.0 {
                    continue;
                }
                let (l, t, rr, b) = (r[loc], r[hw + loc], r[2 * hw + loc], r[3 * hw + loc]);
                let pred = BoundingBox::new(
                    px + (rr - l) / 2.0,
                    py + (b - t) / 2.0,
                    l + rr,
                    t + b,
                    gt.frame,
                )?;
                total += eiou_loss_grad(&pred, &gt)?.0;
            }
            total /= n;
        }
        Ok(self.push(
            Op::EiouMean {
                reg,
                points,
                mask,
                gt,
            },
            Tensor::scalar(total),
        ))
    }

    /// Plain mean BCE with logits over all elements.
    pub fn bce_mean(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        self.check_like("bce_mean targets", logits, &targets)?;
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets.data())
            .map(|(&zv, &tv)| softplus(zv) - tv * zv)
            .sum::<f64>()
            / n;
        Ok(self.push(Op::BceMean { logits, targets }, Tensor::scalar(total)))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            if self.value(id).numel() != 1 {
                return Err(shape_err("weighted_sum", "terms must be scalars".into()));
            }
            total += w * self.value(id).item();
        }
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(total),
        ))
    }

    /// Reverse-mode sweep from a scalar root; returns one gradient
    /// per node (zeros where a node does not influence the root).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>> {
        if self.value(root).numel() != 1 {
            return Err(shape_err("backward", "root must be a scalar".into()));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[root].data_mut()[0] = 1.0;

        for id in (0..=root).rev() {
            let g = std::mem::replace(&mut grads[id], Tensor::zeros(&[0]));
            if g.data().iter().all(|&v| v == 0.0) {
                grads[id] = g;
                continue;
            }
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let d = conv_dims(
                        self.value(*input).shape(),
                        self.value(*weight).shape(),
                        *stride,
                        *pad,
                    )?;
                    let cols = d.h_out * d.w_out;
                    let kk = d.c_in * d.k * d.k;
                    let col = im2col(self.value(*input).data(), &d, *stride, *pad);
                    // dW += dOut * col^T
                    mm_nt_acc(
                        g.data(),
                        &col,
                        grads[*weight].data_mut(),
                        d.c_out,
                        cols,
                        kk,
                    );
                    // db += row sums of dOut
                    for co in 0..d.c_out {
                        grads[*bias].data_mut()[co] +=
                            g.data()[co * cols..(co + 1) * cols].iter().sum::<f64>();
                    }
                    // dcol = W^T * dOut, scattered back to the input.
                    let mut dcol = vec![0.0; kk * cols];
                    mm_tn_acc(
                        self.value(*weight).data(),
                        g.data(),
                        &mut dcol,
                        kk,
                        d.c_out,
                        cols,
                    );
                    col2im_acc(&dcol, &d, *stride, *pad, grads[*input].data_mut());
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gi = grads[*input].data_mut();
                    for (k, (&xv, &gv)) in x.iter().zip(g.data()).enumerate() {
                        if xv > 0.0 {
                            gi[k] += gv;
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let y = self.nodes[id].value.data();
                    let gi = grads[*input].data_mut();
                    for (k, (&yv, &gv)) in y.iter().zip(g.data()).enumerate() {
                        gi[k] += gv * yv * (1.0 - yv);
                    }
                }
                Op::ExpScale { input } => {
                    let y = self.nodes[id].value.data();
                    let gi = grads[*input].data_mut();
                    for (k, (&yv, &gv)) in y.iter().zip(g.data()).enumerate() {
                        gi[k] += gv * yv;
                    }
                }
                Op::CropCenter { input, size } => {
                    let s = self.value(*input).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oi, oj) = ((h - size) / 2, (w - size) / 2);
                    let gi = grads[*input].data_mut();
                    for ch in 0..c {
                        for i in 0..*size {
                            for j in 0..*size {
                                gi[(ch * h + i + oi) * w + j + oj] +=
                                    g.data()[(ch * size + i) * size + j];
                            }
                        }
                    }
                }
                Op::DwXcorr { search, template } => {
                    let ss = self.value(*search).shape().to_vec();
                    let ts = self.value(*template).shape().to_vec();
                    let (c, hs, ws, k) = (ss[0], ss[1], ss[2], ts[1]);
                    let (ho, wo) = (hs - k + 1, ws - k + 1);
                    let norm = 1.0 / (k * k) as f64;
                    let x = self.value(*search).data().to_vec();
                    let t = self.value(*template).data().to_vec();
                    let gs = grads[*search].data_mut();
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = g.data()[(ch * ho + i) * wo + j] * norm;
                                if gv == 0.0 {
                                    continue;
                                }
                                for a in 0..k {
                                    for b in 0..k {
                                        gs[(ch * hs + i + a) * ws + j + b] +=
                                            gv * t[(ch * k + a) * k + b];
                                    }
                                }
                            }
                        }
                    }
                    let gt_ = grads[*template].data_mut();
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = g.data()[(ch * ho + i) * wo + j] * norm;
                                if gv == 0.0 {
                                    continue;
                                }
                                for a in 0..k {
                                    for b in 0..k {
                                        gt_[(ch * k + a) * k + b] +=
                                            gv * x[(ch * hs + i + a) * ws + j + b];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gap { input } => {
                    let s = self.value(*input).shape();
                    let hw = s[1] * s[2];
                    let gi = grads[*input].data_mut();
                    for ch in 0..s[0] {
                        let gv = g.data()[ch] / hw as f64;
                        for v in &mut gi[ch * hw..(ch + 1) * hw] {
                            *v += gv;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    grads[*a].add_assign(&g);
                    for (x, y) in grads[*b].data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let ws = self.value(*weight).shape();
                    let (o, i) = (ws[0], ws[1]);
                    let x = self.value(*input).data().to_vec();
                    let w = self.value(*weight).data().to_vec();
                    {
                        let gw = grads[*weight].data_mut();
                        for r in 0..o {
                            let gv = g.data()[r];
                            for c in 0..i {
                                gw[r * i + c] += gv * x[c];
                            }
                        }
                    }
                    grads[*bias].add_assign(&g);
                    let gi = grads[*input].data_mut();
                    for r in 0..o {
                        let gv = g.data()[r];
                        for c in 0..i {
                            gi[c] += gv * w[r * i + c];
                        }
                    }
                }
                Op::FocalBce {
                    logits,
                    targets,
                    mask,
                    alpha,
                    gamma,
                } => {
                    let n = mask.data().iter().filter(|&&m| m > 0.0).count() as f64;
                    if n > 0.0 {
                        let gv = g.item() / n;
                        let z = self.value(*logits).data();
                        let gi = grads[*logits].data_mut();
                        for (k, ((&zv, &tv), &mv)) in
                            z.iter().zip(targets.data()).zip(mask.data()).enumerate()
                        {
                            if mv <= 0.0 {
                                continue;
                            }
                            let p = sigmoid(zv);
                            let d = if tv > 0.5 {
                                let u = 1.0 - p;
                                -alpha
                                    * (gamma * p * u.powf(*gamma) * softplus(-zv)
                                        + u.powf(gamma + 1.0))
                            } else {
                                (1.0 - alpha)
                                    * (gamma * (1.0 - p) * p.powf(*gamma) * softplus(zv)
                                        + p.powf(gamma + 1.0))
                            };
                            gi[k] += gv * d;
                        }
                    }
                }
                Op::SoftFocalBce {
                    logits,
                    targets,
                    mask,
                    gamma,
                } => {
                    let n = mask.data().iter().filter(|&&m| m > 0.0).count() as f64;
                    if n > 0.0 {
                        let gv = g.item() / n;
                        let z = self.value(*logits).data();
                        let gi = grads[*logits].data_mut();
                        for (k, ((&zv, &tv), &mv)) in
                            z.iter().zip(targets.data()).zip(mask.data()).enumerate()
                        {
                            if mv <= 0.0 {
                                continue;
                            }
                            let p = sigmoid(zv);
                            let d = tv - p;
                            let bce = softplus(zv) - tv * zv;
                            let w = d.abs().powf(*gamma);
                            let dw_dz = -gamma * d.abs().powf(gamma - 1.0) * d.signum()
                                * p
                                * (1.0 - p);
                            gi[k] += gv * (dw_dz * bce + w * (p - tv));
                        }
                    }
                }
                Op::EiouMean {
                    reg,
                    points,
                    mask,
                    gt,
                } => {
                    let s = self.value(*reg).shape();
                    let hw = s[1] * s[2];
                    let n = mask.data().iter().filter(|&&m| m > 0.0).count() as f64;
                    if n > 0.0 {
                        let gv = g.item() / n;
                        let r = self.value(*reg).data().to_vec();
                        let gi = grads[*reg].data_mut();
                        for (loc, &(px, py)) in points.iter().enumerate() {
                            if mask.data()[loc] <= 0.0 {
                                continue;
                            }
                            let (l, t, rr, b) =
                                (r[loc], r[hw + loc], r[2 * hw + loc], r[3 * hw + loc]);
                            let pred = BoundingBox::new(
                                px + (rr - l) / 2.0,
                                py + (b - t) / 2.0,
                                l + rr,
                                t + b,
                                gt.frame,
                            )?;
                            let (_, gb) = eiou_loss_grad(&pred, gt)?;
                            // Chain (cx, cy, w, h) -> (l, t, r, b).
                            gi[loc] += gv * (-0.5 * gb[0] + gb[2]);
                            gi[hw + loc] += gv * (-0.5 * gb[1] + gb[3]);
                            gi[2 * hw + loc] += gv * (0.5 * gb[0] + gb[2]);
                            gi[3 * hw + loc] += gv * (0.5 * gb[1] + gb[3]);
                        }
                    }
                }
                Op::BceMean { logits, targets } => {
                    let z = self.value(*logits).data();
                    let gv = g.item() / z.len() as f64;
                    let gi = grads[*logits].data_mut();
                    for (k, (&zv, &tv)) in z.iter().zip(targets.data()).enumerate() {
                        gi[k] += gv * (sigmoid(zv) - tv);
                    }
                }
                Op::WeightedSum { terms } => {
                    let gv = g.item();
                    for &(tid, w) in terms {
                        grads[tid].data_mut()[0] += gv * w;
                    }
                }
            }
            grads[id] = g;
        }
        Ok(grads)
    }
}
