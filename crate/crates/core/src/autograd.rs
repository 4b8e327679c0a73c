//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes that do not depend on a gradient-requiring leaf
//! record no backward work, so a frozen network evaluated on the same tape
//! never receives gradients.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, BN_EPS};
use crate::tensor::{Scalar, Tensor};

/// Norm below which a cosine similarity is treated as degenerate (defined as 0).
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    ChannelGate {
        x: Var,
        gate: Var,
    },
    SpatialGate {
        x: Var,
        gate: Var,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelAvgPool(Var),
    ChannelMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    UpsampleNearest(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        // per sample: (|a|, |b|, cos); zero norms give cos = 0 and no gradient
        stats: Vec<(T, T, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics captured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel the moments were computed over.
    pub count: usize,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    degenerate_cosines: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            degenerate_cosines: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of cosine similarities evaluated on a near-zero map so far.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn expect_rank4(&self, op: &str, v: Var) -> Result<(usize, usize, usize, usize)> {
        let t = self.value(v);
        if t.rank() != 4 {
            return Err(shape_err(op, format!("expected rank 4, got {:?}", t.shape())));
        }
        Ok(t.dims4())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (_, ci, h, wd) = self.expect_rank4("conv2d", x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("bad weight shape {ws:?}")));
        }
        if spec.groups == 0 || ci % spec.groups != 0 || ws[0] % spec.groups != 0 {
            return Err(shape_err(
                "conv2d",
                format!("groups {} incompatible with {ci} -> {}", spec.groups, ws[0]),
            ));
        }
        if ws[1] != ci / spec.groups {
            return Err(shape_err(
                "conv2d",
                format!("weight {ws:?} expects {} input channels per group, input has {ci}", ws[1]),
            ));
        }
        if h + 2 * spec.padding < ws[2] || wd + 2 * spec.padding < ws[3] {
            return Err(shape_err("conv2d", format!("input {h}x{wd} smaller than kernel")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias shape {:?}", self.value(b).shape())));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &parents))
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); n * fout];
        for i in 0..n {
            for o in 0..fout {
                let mut acc = b.map_or(T::zero(), |b| self.value(b).data()[o]);
                for k in 0..fin {
                    acc += xd[i * fin + k] * wdat[o * fin + k];
                }
                out[i * fout + o] = acc;
            }
        }
        let out = Tensor::from_vec(&[n, fout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// Per-channel normalisation. With `running = None` the batch moments are
    /// used (and returned); otherwise the supplied `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let (n, c, h, w) = self.expect_rank4("batch_norm", x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batch_norm", format!("affine params do not match {c} channels")));
        }
        let eps = T::from_f64(BN_EPS);
        let (mean, var, moments) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = kernels::channel_moments(self.value(x));
                (m.clone(), v.clone(), Some(BatchMoments { mean: m, var: v, count: n * h * w }))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let plane = h * w;
        let xv = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (&xi, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / plane) % c;
            *xh = (xi - mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        let batch_stats = running.is_none();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Shift(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `x * gate` with `gate: (n, c, 1, 1)` broadcast over space.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("channel_gate", x)?;
        if self.value(gate).shape() != [n, c, 1, 1] {
            return Err(shape_err("channel_gate", format!("gate {:?}", self.value(gate).shape())));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i / plane])
            .collect();
        let out = Tensor::from_vec(&[n, c, h, w], data)?;
        Ok(self.push(out, Op::ChannelGate { x, gate }, &[x, gate]))
    }

    /// `x * gate` with `gate: (n, 1, h, w)` broadcast over channels.
    pub fn spatial_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("spatial_gate", x)?;
        if self.value(gate).shape() != [n, 1, h, w] {
            return Err(shape_err("spatial_gate", format!("gate {:?}", self.value(gate).shape())));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[(i / (c * plane)) * plane + i % plane])
            .collect();
        let out = Tensor::from_vec(&[n, c, h, w], data)?;
        Ok(self.push(out, Op::SpatialGate { x, gate }, &[x, gate]))
    }

    /// Spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("global_avg_pool", x)?;
        let plane = h * w;
        let denom = T::from_f64(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Spatial max: `(n, c, h, w) -> (n, c, 1, 1)`; ties go to the first index.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("global_max_pool", x)?;
        let plane = h * w;
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (pi, p) in self.value(x).data().chunks(plane).enumerate() {
            let (mut bi, mut bv) = (0, p[0]);
            for (i, &v) in p.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            argmax.push(pi * plane + bi);
            data.push(bv);
        }
        let out = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    /// Mean across channels: `(n, c, h, w) -> (n, 1, h, w)`.
    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("channel_avg_pool", x)?;
        let plane = h * w;
        let xd = self.value(x).data();
        let denom = T::from_f64(c as f64);
        let mut data = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let src = &xd[(b * c + ch) * plane..][..plane];
                for (o, &v) in data[b * plane..(b + 1) * plane].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= denom);
        let out = Tensor::from_vec(&[n, 1, h, w], data)?;
        Ok(self.push(out, Op::ChannelAvgPool(x), &[x]))
    }

    /// Max across channels: `(n, c, h, w) -> (n, 1, h, w)`; ties go to the lowest channel.
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("channel_max_pool", x)?;
        let plane = h * w;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * plane);
        let mut argmax = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let mut bi = b * c * plane + p;
                let mut bv = xd[bi];
                for ch in 1..c {
                    let i = (b * c + ch) * plane + p;
                    if xd[i] > bv {
                        bv = xd[i];
                        bi = i;
                    }
                }
                data.push(bv);
                argmax.push(bi);
            }
        }
        let out = Tensor::from_vec(&[n, 1, h, w], data)?;
        Ok(self.push(out, Op::ChannelMaxPool { x, argmax }, &[x]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let (n, _, h, w) = self.expect_rank4("concat", parts[0])?;
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.expect_rank4("concat", p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat", format!("part {:?} vs ({n},_,{h},{w})", self.value(p).shape())));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let out = Tensor::from_vec(&[n, c_total, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("slice_channels", x)?;
        if start + len > c || len == 0 {
            return Err(shape_err("slice_channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&xd[(b * c + start) * plane..(b * c + start + len) * plane]);
        }
        let out = Tensor::from_vec(&[n, len, h, w], data)?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    /// 2×2 average pool with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("avg_pool2", x)?;
        if h < 2 || w < 2 {
            return Err(shape_err("avg_pool2", format!("input {h}x{w} too small")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    data.push(s * quarter);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], data)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour resize to `(out_h, out_w)`; source index `floor(i * in / out)`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.expect_rank4("upsample_nearest", x)?;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for i in 0..out_h {
                let si = i * h / out_h;
                for j in 0..out_w {
                    data.push(src[si * w + j * w / out_w]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, out_h, out_w], data)?;
        Ok(self.push(out, Op::UpsampleNearest(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits: (n, classes)` against hard labels,
    /// via the log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (n, k) = (s[0], s[1]);
        if k < 2 {
            return Err(Error::Validation(format!("cross_entropy needs at least 2 classes, got {k}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let out = Tensor::scalar(loss / T::from_f64(n as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Cosine similarity of the per-sample flattened maps, averaged over the batch.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let t = self.value(a);
        if t.rank() == 0 || t.shape()[0] == 0 {
            return Err(shape_err("cosine_similarity", format!("shape {:?}", t.shape())));
        }
        let n = t.shape()[0];
        let per = t.len() / n;
        let floor = T::from_f64(COSINE_NORM_FLOOR);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut stats = Vec::with_capacity(n);
        let mut degenerate = 0;
        let mut total = T::zero();
        for i in 0..n {
            let (x, y) = (&ad[i * per..(i + 1) * per], &bd[i * per..(i + 1) * per]);
            let sa = x.iter().map(|&v| v * v).sum::<T>();
            let sb = y.iter().map(|&v| v * v).sum::<T>();
            let (na, nb) = (sa.sqrt(), sb.sqrt());
            let cos = if na < floor || nb < floor {
                degenerate += 1;
                T::zero()
            } else {
                let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                // sqrt(sa * sb) keeps cos(x, x) at exactly one
                let denom = (sa * sb).sqrt();
                let denom = if denom.is_finite() { denom } else { na * nb };
                (dot / denom).max(-T::one()).min(T::one())
            };
            total += cos;
            stats.push((na, nb, cos));
        }
        self.degenerate_cosines += degenerate;
        let out = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(out, Op::Cosine { a, b, stats }, &[a, b]))
    }

    /// Gradients of the scalar `loss` with respect to every node requiring them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, contrib) in self.node_backward(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let gr = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *spec, need);
                out.extend(gr.input.map(|t| (*x, t)));
                out.extend(gr.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, gr.bias) {
                    out.push((*b, t));
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (xs.shape()[0], xs.shape()[1], ws.shape()[0]);
                let gd = g.data();
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(xs.shape());
                    let gxd = gx.data_mut();
                    for i in 0..n {
                        for o in 0..fout {
                            let go = gd[i * fout + o];
                            for k in 0..fin {
                                gxd[i * fin + k] += go * ws.data()[o * fin + k];
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros(ws.shape());
                    let gwd = gw.data_mut();
                    for i in 0..n {
                        for o in 0..fout {
                            let go = gd[i * fout + o];
                            for k in 0..fin {
                                gwd[o * fin + k] += go * xs.data()[i * fin + k];
                            }
                        }
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut gb = Tensor::zeros(&[fout]);
                    for i in 0..n {
                        for o in 0..fout {
                            gb.data_mut()[o] += gd[i * fout + o];
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = g.dims4();
                let plane = h * w;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xh;
                }
                if self.rg(*x) {
                    let m = T::from_f64((n * plane) as f64);
                    let data = gd
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gv, &xh))| {
                            let ch = (i / plane) % c;
                            if *batch_stats {
                                gam[ch] * inv_std[ch] / m
                                    * (m * gv - sum_g[ch] - xh * sum_gx[ch])
                            } else {
                                gam[ch] * inv_std[ch] * gv
                            }
                        })
                        .collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data).expect("bn grad")));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::from_vec(&[c], sum_gx).expect("bn gamma")));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::from_vec(&[c], sum_g).expect("bn beta")));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    out.push((*a, zip_map(g, bv, |x, y| x * y)));
                }
                if self.rg(*b) {
                    out.push((*b, zip_map(g, av, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::Shift(a) => out.push((*a, g.clone())),
            Op::Relu(a) => {
                out.push((*a, zip_map(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })));
            }
            Op::Sigmoid(a) => {
                out.push((*a, zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y))));
            }
            Op::ChannelGate { x, gate } => {
                let (n, c, h, w) = g.dims4();
                let plane = h * w;
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                if self.rg(*x) {
                    let data = g.data().iter().enumerate().map(|(i, &d)| d * gv[i / plane]).collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data).expect("gate")));
                }
                if self.rg(*gate) {
                    let mut gg = Tensor::zeros(&[n, c, 1, 1]);
                    for (i, (&d, &xv)) in g.data().iter().zip(xv).enumerate() {
                        gg.data_mut()[i / plane] += d * xv;
                    }
                    out.push((*gate, gg));
                }
            }
            Op::SpatialGate { x, gate } => {
                let (n, c, h, w) = g.dims4();
                let plane = h * w;
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                let gidx = |i: usize| (i / (c * plane)) * plane + i % plane;
                if self.rg(*x) {
                    let data = g.data().iter().enumerate().map(|(i, &d)| d * gv[gidx(i)]).collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data).expect("gate")));
                }
                if self.rg(*gate) {
                    let mut gg = Tensor::zeros(&[n, 1, h, w]);
                    for (i, (&d, &xv)) in g.data().iter().zip(xv).enumerate() {
                        gg.data_mut()[gidx(i)] += d * xv;
                    }
                    out.push((*gate, gg));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x);
                let (_, _, h, w) = xs.dims4();
                let plane = h * w;
                let denom = T::from_f64(plane as f64);
                let gd = g.data();
                out.push((*x, Tensor::from_fn(xs.shape(), |i| gd[i / plane] / denom)));
            }
            Op::GlobalMaxPool { x, argmax } | Op::ChannelMaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&i, &d) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[i] += d;
                }
                out.push((*x, gx));
            }
            Op::ChannelAvgPool(x) => {
                let xs = self.value(*x);
                let (_, c, h, w) = xs.dims4();
                let plane = h * w;
                let denom = T::from_f64(c as f64);
                let gd = g.data();
                out.push((*x, Tensor::from_fn(xs.shape(), |i| gd[(i / (c * plane)) * plane + i % plane] / denom)));
            }
            Op::Concat(parts) => {
                let (n, ctot, h, w) = g.dims4();
                let plane = h * w;
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            data.extend_from_slice(&g.data()[(b * ctot + off) * plane..(b * ctot + off + pc) * plane]);
                        }
                        out.push((p, Tensor::from_vec(&[n, pc, h, w], data).expect("concat grad")));
                    }
                    off += pc;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.value(*x);
                let (n, c, h, w) = xs.dims4();
                let len = g.shape()[1];
                let plane = h * w;
                let mut gx = Tensor::zeros(xs.shape());
                for b in 0..n {
                    gx.data_mut()[(b * c + start) * plane..(b * c + start + len) * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                out.push((*x, gx));
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x);
                let (_, _, h, w) = xs.dims4();
                let (_, _, ho, wo) = g.dims4();
                let quarter = T::from_f64(0.25);
                let mut gx = Tensor::zeros(xs.shape());
                let gd = g.data();
                for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    for i in 0..ho {
                        for j in 0..wo {
                            let d = gd[(p * ho + i) * wo + j] * quarter;
                            dst[2 * i * w + 2 * j] += d;
                            dst[2 * i * w + 2 * j + 1] += d;
                            dst[(2 * i + 1) * w + 2 * j] += d;
                            dst[(2 * i + 1) * w + 2 * j + 1] += d;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::UpsampleNearest(x) => {
                let xs = self.value(*x);
                let (_, _, h, w) = xs.dims4();
                let (_, _, oh, ow) = g.dims4();
                let mut gx = Tensor::zeros(xs.shape());
                let gd = g.data();
                for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    for i in 0..oh {
                        let si = i * h / oh;
                        for j in 0..ow {
                            dst[si * w + j * w / ow] += gd[(p * oh + i) * ow + j];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, g.clone().reshape(&shape).expect("reshape grad")));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape(), g.item()))),
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.value(*logits).shape();
                let (n, k) = (s[0], s[1]);
                let scale = g.item() / T::from_f64(n as f64);
                let mut data = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    data[i * k + l] -= T::one();
                }
                data.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::from_vec(s, data).expect("ce grad")));
            }
            Op::Cosine { a, b, stats } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = stats.len();
                let per = av.len() / n;
                let scale = g.item() / T::from_f64(n as f64);
                let floor = T::from_f64(COSINE_NORM_FLOOR);
                let grad_wrt = |own: &Tensor<T>, other: &Tensor<T>, own_is_a: bool| {
                    let mut gt = Tensor::zeros(own.shape());
                    for (i, &(na, nb, cos)) in stats.iter().enumerate() {
                        if na < floor || nb < floor {
                            continue;
                        }
                        let (n_own, n_other) = if own_is_a { (na, nb) } else { (nb, na) };
                        let r = i * per..(i + 1) * per;
                        let (o, q) = (&own.data()[r.clone()], &other.data()[r.clone()]);
                        for ((dst, &ov), &qv) in gt.data_mut()[r].iter_mut().zip(o).zip(q) {
                            *dst = scale * (qv / (n_own * n_other) - cos * ov / (n_own * n_own));
                        }
                    }
                    gt
                };
                if self.rg(*a) {
                    out.push((*a, grad_wrt(av, bv, true)));
                }
                if self.rg(*b) {
                    out.push((*b, grad_wrt(bv, av, false)));
                }
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shape")
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn weights(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7919 % 113) as f64 / 113.0) - 0.43)
    }

    fn check_unary(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Tensor<f64>) {
        let run = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let y = build(&mut t, v);
            let r = t.constant(weights(t.value(y).shape()));
            let p = t.mul(y, r).unwrap();
            let l = t.sum(p);
            (t.value(l).item(), t.backward(l).unwrap().get(v).cloned())
        };
        let (_, g) = run(&x);
        let g = g.expect("gradient");
        let fd = finite_diff(|x| run(x).0, &x);
        let err = g.max_abs_diff(&fd);
        assert!(err < 1e-6, "max abs err {err}");
    }

    fn sample(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 % 29) as f64 / 29.0) * 2.0 - 1.0 + i as f64 * 1e-3)
    }

    #[test]
    fn pooling_and_resampling_gradients() {
        check_unary(|t, v| t.global_avg_pool(v).unwrap(), sample(&[2, 3, 4, 5]));
        check_unary(|t, v| t.global_max_pool(v).unwrap(), sample(&[2, 3, 4, 5]));
        check_unary(|t, v| t.channel_avg_pool(v).unwrap(), sample(&[2, 3, 4, 5]));
        check_unary(|t, v| t.channel_max_pool(v).unwrap(), sample(&[2, 3, 4, 5]));
        check_unary(|t, v| t.avg_pool2(v).unwrap(), sample(&[2, 3, 5, 4]));
        check_unary(|t, v| t.upsample_nearest(v, 5, 7).unwrap(), sample(&[1, 2, 2, 3]));
        check_unary(|t, v| t.sigmoid(v), sample(&[1, 2, 3, 3]));
        check_unary(|t, v| t.relu(v), sample(&[1, 2, 3, 3]));
    }

    #[test]
    fn structural_gradients() {
        check_unary(
            |t, v| {
                let a = t.slice_channels(v, 1, 2).unwrap();
                let b = t.slice_channels(v, 0, 1).unwrap();
                t.concat(&[a, b, a]).unwrap()
            },
            sample(&[2, 4, 3, 3]),
        );
        check_unary(
            |t, v| {
                let g = t.global_avg_pool(v).unwrap();
                let g = t.sigmoid(g);
                t.channel_gate(v, g).unwrap()
            },
            sample(&[2, 3, 3, 4]),
        );
        check_unary(
            |t, v| {
                let g = t.channel_max_pool(v).unwrap();
                let g = t.sigmoid(g);
                t.spatial_gate(v, g).unwrap()
            },
            sample(&[2, 3, 3, 4]),
        );
    }

    #[test]
    fn conv_linear_and_norm_gradients() {
        for spec in [
            ConvSpec { stride: 1, padding: 1, groups: 1 },
            ConvSpec { stride: 2, padding: 1, groups: 1 },
            ConvSpec { stride: 1, padding: 1, groups: 2 },
            ConvSpec { stride: 2, padding: 0, groups: 1 },
        ] {
            let w = weights(&[4, 4 / spec.groups, 3, 3]);
            check_unary(
                move |t, v| {
                    let w = t.leaf(w.clone(), true);
                    t.conv2d(v, w, None, spec).unwrap()
                },
                sample(&[2, 4, 5, 6]),
            );
        }
        let wl = weights(&[3, 6]);
        check_unary(
            move |t, v| {
                let w = t.constant(wl.clone());
                let x = t.reshape(v, &[2, 6]).unwrap();
                t.linear(x, w, None).unwrap()
            },
            sample(&[2, 6, 1, 1]),
        );
        check_unary(
            |t, v| {
                let g = t.constant(Tensor::from_vec(&[3], vec![1.5, -0.7, 0.3]).unwrap());
                let b = t.constant(Tensor::from_vec(&[3], vec![0.1, 0.2, -0.3]).unwrap());
                t.batch_norm(v, g, b, None).unwrap().0
            },
            sample(&[2, 3, 3, 2]),
        );
    }

    #[test]
    fn cross_entropy_and_cosine_gradients() {
        check_unary(
            |t, v| {
                let x = t.reshape(v, &[3, 4]).unwrap();
                t.cross_entropy(x, &[0, 3, 1]).unwrap()
            },
            sample(&[3, 4, 1, 1]),
        );
        let other = sample(&[2, 5, 1, 1]).map(|x| x * 0.5 + 0.1);
        check_unary(
            move |t, v| {
                let o = t.constant(other.clone());
                t.cosine_similarity(o, v).unwrap()
            },
            sample(&[2, 5, 1, 1]),
        );
    }

    #[test]
    fn frozen_branch_gets_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(sample(&[1, 2, 2, 2]), true);
        let frozen = t.leaf(sample(&[1, 2, 2, 2]), false);
        let f2 = t.relu(frozen);
        let s = t.add(a, f2).unwrap();
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).is_some());
        assert!(g.get(frozen).is_none());
        assert!(g.get(f2).is_none());
    }

    #[test]
    fn degenerate_cosine_is_zero() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[1, 4]), true);
        let b = t.constant(Tensor::full(&[1, 4], 1.0));
        let c = t.cosine_similarity(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        assert_eq!(t.degenerate_cosines(), 1);
        let g = t.backward(c).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
