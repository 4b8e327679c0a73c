//! Parameter storage and the basic layers every block is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchMoments, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Named<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Named { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_index.contains_key(&name), "duplicate buffer {name}");
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push(Named { name, tensor });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i].tensor)
    }

    pub fn buffer_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &mut self.buffers[i].tensor)
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Named<T>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values of all
    /// parameters and buffers.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().chain(&self.buffers) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<Named<T>>| {
            v.iter()
                .map(|p| Named {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect()
        };
        ParamStore {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            index: self.index.clone(),
            buffer_index: self.buffer_index.clone(),
        }
    }
}

/// Whether batch norm uses batch statistics (and reports them) or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct BnStatUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub moments: BatchMoments<T>,
}

/// One forward pass: the tape, a leaf per parameter, and pending
/// running-statistic updates.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    params: Vec<Var>,
    mode: Mode,
    bn_updates: Vec<BnStatUpdate<T>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// With `trainable = false` no node of this graph requires a gradient.
    pub fn new(store: &'s ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        Self::with_tape(Tape::new(), store, mode, trainable)
    }

    /// Continues recording on an existing tape (teacher and student share one).
    pub fn with_tape(mut tape: Tape<T>, store: &'s ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        let params = store
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable))
            .collect();
        Graph {
            tape,
            store,
            params,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    /// Gradient per parameter, in store order; `None` where no gradient flowed.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.params.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<BnStatUpdate<T>>) {
        (self.tape, self.bn_updates)
    }
}

/// Applies running-statistic updates: `r = (1 - m) r + m s`, with the
/// unbiased batch variance.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<BnStatUpdate<T>>, momentum: f64) {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for u in updates {
        let c = u.moments.count;
        let unbias = if c > 1 {
            T::from_f64(c as f64 / (c - 1) as f64)
        } else {
            T::one()
        };
        for (r, &s) in store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.moments.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.moments.var) {
            *r = keep * *r + m * s * unbias;
        }
    }
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Convolution with square kernel; weight `(out, in/groups, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let per_group = in_channels / spec.groups;
        // Kaiming normal, fan-out mode
        let fan_out = out_channels * kernel * kernel / spec.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_channels, per_group, kernel, kernel], std),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            spec,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), self.bias.map(|b| g.param(b)));
        g.tape.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel
            + self.bias.map_or(0, |_| self.out_channels)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (self.spec.output_size(h, self.kernel), self.spec.output_size(w, self.kernel))
    }

    /// Multiply-accumulates per image: `C_out · H_out · W_out · C_in · k² / groups`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_size(h, w);
        (self.out_channels * ho * wo * self.in_channels * self.kernel * self.kernel / self.spec.groups)
            as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        match g.mode {
            Mode::Train => {
                let (y, moments) = g.tape.batch_norm(x, gamma, beta, None)?;
                g.bn_updates.push(BnStatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    moments: moments.expect("train-mode batch norm reports moments"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = g.store;
                let mean = store.buffer(self.running_mean).data();
                let var = store.buffer(self.running_var).data();
                Ok(g.tape.batch_norm(x, gamma, beta, Some((mean, var)))?.0)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// `x · Wᵀ + b`; weight `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), normal(rng, &[out_features, in_features], std)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

/// Convolution optionally followed by batch norm. The convolution carries a
/// bias only when normalisation is off.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        normalization: bool,
    ) -> Self {
        let spec = ConvSpec {
            stride,
            padding: kernel / 2,
            groups: 1,
        };
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, spec, !normalization);
        let norm = normalization.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), out_channels));
        ConvNorm { conv, norm }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        match &self.norm {
            Some(bn) => bn.forward(g, y),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.as_ref().map_or(0, |n| n.param_count())
    }
}

/// Depthwise 3×3 followed by pointwise 1×1, no activation. With
/// normalisation the pointwise conv drops its bias and is followed by batch norm.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparable {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub norm: Option<BatchNorm2d>,
}

impl DepthwiseSeparable {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        normalization: bool,
    ) -> Self {
        let dw = ConvSpec {
            stride: 1,
            padding: 1,
            groups: channels,
        };
        let depthwise = Conv2d::new(store, rng, &format!("{name}.dw"), channels, channels, 3, dw, true);
        let pointwise = Conv2d::new(store, rng, &format!("{name}.pw"), channels, channels, 1, ConvSpec::same(1), !normalization);
        let norm = normalization.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), channels));
        DepthwiseSeparable {
            depthwise,
            pointwise,
            norm,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, x)?;
        let y = self.pointwise.forward(g, y)?;
        match &self.norm {
            Some(bn) => bn.forward(g, y),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count() + self.norm.as_ref().map_or(0, |n| n.param_count())
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.depthwise.macs(h, w) + self.pointwise.macs(h, w)
    }
}

/// Fails with a validation error when any element is NaN or infinite.
pub fn ensure_finite<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} contains non-finite values")))
    }
}

/// Draws uniform values in `[-scale, scale)` into every parameter; used by tests
/// and benchmarks that need generic (non-initialised-looking) weights.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.params_mut() {
        for v in p.tensor.data_mut() {
            *v = T::from_f64(rng.random_range(-scale..scale));
        }
    }
}
