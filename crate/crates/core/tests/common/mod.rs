//! Reference implementations for the integration tests.
//!
//! Everything here is written with explicit loops over `f64` slices and looks
//! parameters up by name, so it shares no code path with the library's
//! kernels or autograd tape.

#![allow(dead_code)]

use gmenet::attention::{AttentionKind, MabConfig};
use gmenet::autograd::Var;
use gmenet::global::McbResidual;
use gmenet::network::Network;
use gmenet::nn::{Graph, Mode, ParamStore};
use gmenet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;

/// Dense `(n, c, h, w)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct A4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl A4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        A4 { n, c, h, w, v: vec![0.0; n * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let (n, c, h, w) = t.dims4();
        A4 { n, c, h, w, v: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.n, self.c, self.h, self.w], self.v.clone()).unwrap()
    }

    fn idx(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.v[self.idx(n, c, i, j)]
    }

    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, x: f64) {
        let k = self.idx(n, c, i, j);
        self.v[k] = x;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> A4 {
        A4 { v: self.v.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    pub fn add(&self, o: &A4) -> A4 {
        assert_eq!((self.n, self.c, self.h, self.w), (o.n, o.c, o.h, o.w));
        A4 { v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    pub fn channels(&self, start: usize, len: usize) -> A4 {
        let mut out = A4::zeros(self.n, len, self.h, self.w);
        for n in 0..self.n {
            for c in 0..len {
                for i in 0..self.h {
                    for j in 0..self.w {
                        out.set(n, c, i, j, self.at(n, start + c, i, j));
                    }
                }
            }
        }
        out
    }

    pub fn concat(parts: &[A4]) -> A4 {
        let c: usize = parts.iter().map(|p| p.c).sum();
        let p0 = &parts[0];
        let mut out = A4::zeros(p0.n, c, p0.h, p0.w);
        for n in 0..p0.n {
            let mut base = 0;
            for p in parts {
                for k in 0..p.c {
                    for i in 0..p.h {
                        for j in 0..p.w {
                            out.set(n, base + k, i, j, p.at(n, k, i, j));
                        }
                    }
                }
                base += p.c;
            }
        }
        out
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data()
}

pub fn has_param(store: &ParamStore<f64>, name: &str) -> bool {
    store.by_name(name).is_some()
}

/// Direct convolution; weight `(cout, cin/groups, k, k)`.
pub fn conv(x: &A4, w: &[f64], b: Option<&[f64]>, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> A4 {
    let cpg_in = x.c / groups;
    let cpg_out = cout / groups;
    assert_eq!(w.len(), cout * cpg_in * k * k);
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = A4::zeros(x.n, cout, ho, wo);
    for n in 0..x.n {
        for o in 0..cout {
            let grp = o / cpg_out;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for ci in 0..cpg_in {
                        let c = grp * cpg_in + ci;
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let z = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= x.h as isize || z >= x.w as isize {
                                    continue;
                                }
                                acc += x.at(n, c, y as usize, z as usize) * w[((o * cpg_in + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out.set(n, o, i, j, acc);
                }
            }
        }
    }
    out
}

/// Named convolution; bias used when the store has one.
pub fn conv_named(x: &A4, store: &ParamStore<f64>, name: &str, k: usize, stride: usize, groups: usize) -> A4 {
    let w = store.by_name(&format!("{name}.weight")).unwrap();
    let cout = w.shape()[0];
    let bname = format!("{name}.bias");
    let b = has_param(store, &bname).then(|| param(store, &bname));
    conv(x, w.data(), b, cout, k, stride, k / 2, groups)
}

/// Batch norm on running statistics.
pub fn bn_eval(x: &A4, store: &ParamStore<f64>, name: &str) -> A4 {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    let m = store.buffer_by_name(&format!("{name}.running_mean")).unwrap().data();
    let v = store.buffer_by_name(&format!("{name}.running_var")).unwrap().data();
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..x.h {
                for j in 0..x.w {
                    let y = (x.at(n, c, i, j) - m[c]) / (v[c] + BN_EPS).sqrt() * g[c] + b[c];
                    out.set(n, c, i, j, y);
                }
            }
        }
    }
    out
}

pub fn conv_norm(x: &A4, store: &ParamStore<f64>, name: &str, k: usize, stride: usize) -> A4 {
    let y = conv_named(x, store, &format!("{name}.conv"), k, stride, 1);
    if has_param(store, &format!("{name}.bn.gamma")) {
        bn_eval(&y, store, &format!("{name}.bn"))
    } else {
        y
    }
}

/// Depthwise 3×3 then pointwise 1×1, optional batch norm.
pub fn dws(x: &A4, store: &ParamStore<f64>, name: &str) -> A4 {
    let y = conv_named(x, store, &format!("{name}.dw"), 3, 1, x.c);
    let y = conv_named(&y, store, &format!("{name}.pw"), 1, 1, 1);
    if has_param(store, &format!("{name}.bn.gamma")) {
        bn_eval(&y, store, &format!("{name}.bn"))
    } else {
        y
    }
}

pub fn avg_pool2(x: &A4) -> A4 {
    let mut out = A4::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..x.h / 2 {
                for j in 0..x.w / 2 {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += x.at(n, c, 2 * i + di, 2 * j + dj);
                        }
                    }
                    out.set(n, c, i, j, s / 4.0);
                }
            }
        }
    }
    out
}

pub fn upsample_nearest(x: &A4, h: usize, w: usize) -> A4 {
    let mut out = A4::zeros(x.n, x.c, h, w);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..h {
                for j in 0..w {
                    out.set(n, c, i, j, x.at(n, c, i * x.h / h, j * x.w / w));
                }
            }
        }
    }
    out
}

pub fn refiner(x: &A4, store: &ParamStore<f64>, name: &str) -> A4 {
    let y = dws(x, store, &format!("{name}.dws1"));
    if x.h < 2 || x.w < 2 {
        return dws(&y, store, &format!("{name}.dws2"));
    }
    let d = dws(&avg_pool2(&y), store, &format!("{name}.dws2"));
    upsample_nearest(&d, x.h, x.w)
}

fn refined(x: &A4, store: &ParamStore<f64>, name: &str) -> A4 {
    if has_param(store, &format!("{name}.refine.dws1.dw.weight")) {
        refiner(x, store, &format!("{name}.refine"))
    } else {
        x.clone()
    }
}

fn dense(v: &[f64], store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let w = store.by_name(&format!("{name}.weight")).unwrap();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let b = param(store, &format!("{name}.bias"));
    (0..out)
        .map(|o| b[o] + (0..inp).map(|k| w.data()[o * inp + k] * v[k]).sum::<f64>())
        .collect()
}

/// Channel attention: returns `(gated x, pre-sigmoid map (n, c, 1, 1))`.
pub fn dcam(x: &A4, store: &ParamStore<f64>, name: &str) -> (A4, A4) {
    let fm = refined(x, store, name);
    let mut map = A4::zeros(x.n, x.c, 1, 1);
    let mlp = |v: &[f64]| {
        let h: Vec<f64> = dense(v, store, &format!("{name}.mlp.fc1")).into_iter().map(relu).collect();
        dense(&h, store, &format!("{name}.mlp.fc2"))
    };
    for n in 0..x.n {
        let mut avg = vec![0.0; x.c];
        let mut max = vec![f64::NEG_INFINITY; x.c];
        for c in 0..x.c {
            for i in 0..x.h {
                for j in 0..x.w {
                    let v = fm.at(n, c, i, j);
                    avg[c] += v / (x.h * x.w) as f64;
                    max[c] = max[c].max(v);
                }
            }
        }
        let (a, m) = (mlp(&avg), mlp(&max));
        for c in 0..x.c {
            map.set(n, c, 0, 0, a[c] + m[c]);
        }
    }
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            let g = sigmoid(map.at(n, c, 0, 0));
            for i in 0..x.h {
                for j in 0..x.w {
                    out.set(n, c, i, j, g * x.at(n, c, i, j));
                }
            }
        }
    }
    (out, map)
}

/// Spatial attention: returns `(gated x, pre-sigmoid map (n, 1, h, w))`.
pub fn dsam(x: &A4, store: &ParamStore<f64>, name: &str) -> (A4, A4) {
    let fm = refined(x, store, name);
    let mut pooled = A4::zeros(x.n, 2, x.h, x.w);
    for n in 0..x.n {
        for i in 0..x.h {
            for j in 0..x.w {
                let mut s = 0.0;
                let mut m = f64::NEG_INFINITY;
                for c in 0..x.c {
                    s += fm.at(n, c, i, j);
                    m = m.max(fm.at(n, c, i, j));
                }
                pooled.set(n, 0, i, j, s / x.c as f64);
                pooled.set(n, 1, i, j, m);
            }
        }
    }
    let map = conv_named(&pooled, store, &format!("{name}.conv"), 3, 1, 1);
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..x.h {
                for j in 0..x.w {
                    out.set(n, c, i, j, sigmoid(map.at(n, 0, i, j)) * x.at(n, c, i, j));
                }
            }
        }
    }
    (out, map)
}

/// Channel then spatial attention; returns `(y, channel map, spatial map)`.
pub fn dbam(x: &A4, store: &ParamStore<f64>, name: &str) -> (A4, A4, A4) {
    let (y, mc) = dcam(x, store, &format!("{name}.dcam"));
    let (y, ms) = dsam(&y, store, &format!("{name}.dsam"));
    (y, mc, ms)
}

/// Mixed-attention block; maps are `None` for the plain variant.
pub fn mab(x: &A4, store: &ParamStore<f64>, name: &str, cfg: &MabConfig) -> (A4, Option<(A4, A4)>) {
    let y = conv_norm(x, store, &format!("{name}.conv1"), 3, cfg.stride).map(relu);
    let y = conv_norm(&y, store, &format!("{name}.conv2"), 3, 1);
    let (y, maps) = match cfg.attention {
        AttentionKind::None => (y, None),
        AttentionKind::Cbam => {
            let (y, mc, ms) = dbam(&y, store, &format!("{name}.cbam"));
            (y, Some((mc, ms)))
        }
        AttentionKind::Dbam => {
            let (y, mc, ms) = dbam(&y, store, &format!("{name}.dbam"));
            (y, Some((mc, ms)))
        }
    };
    let skip = if cfg.stride != 1 || cfg.in_channels != cfg.out_channels {
        conv_norm(x, store, &format!("{name}.shortcut"), 1, cfg.stride)
    } else {
        x.clone()
    };
    (y.add(&skip).map(relu), maps)
}

fn cascade(inputs: &[A4; 4], store: &ParamStore<f64>, prefix: &str) -> A4 {
    let mut outs: Vec<A4> = Vec::new();
    outs.push(dws(&inputs[0], store, &format!("{prefix}.0")).map(relu));
    for i in 1..4 {
        let y = dws(&outs[i - 1], store, &format!("{prefix}.{i}")).map(relu);
        outs.push(y.add(&inputs[i]));
    }
    A4::concat(&outs)
}

pub fn mcb_replicate(f: &A4, store: &ParamStore<f64>, name: &str) -> A4 {
    let x = conv_named(f, store, &format!("{name}.reduce"), 1, 1, 1);
    cascade(&[x.clone(), x.clone(), x.clone(), x], store, &format!("{name}.replicate"))
}

pub fn mcb_split(f: &A4, store: &ParamStore<f64>, name: &str) -> A4 {
    let q = f.c / 4;
    let parts = [f.channels(0, q), f.channels(q, q), f.channels(2 * q, q), f.channels(3 * q, q)];
    cascade(&parts, store, &format!("{name}.split"))
}

pub fn mcb(x: &A4, store: &ParamStore<f64>, name: &str, residual: McbResidual) -> A4 {
    let f = conv_norm(x, store, &format!("{name}.entry"), 3, 1);
    let o1 = mcb_replicate(&f, store, name);
    let o2 = mcb_split(&f, store, name);
    let r = match residual {
        McbResidual::EntryConv => &f,
        McbResidual::BlockInput => x,
    };
    o1.add(&o2).add(r).map(relu)
}

/// End-to-end logits `(n, classes)` in evaluation mode.
pub fn network_logits(net: &Network<f64>, images: &A4) -> Vec<Vec<f64>> {
    let store = net.store();
    let mut x = conv_norm(images, store, "stem", 3, 1).map(relu);
    for (s, stage) in net.stages().iter().enumerate() {
        let mut local = x.clone();
        for (b, m) in stage.mabs.iter().enumerate() {
            local = mab(&local, store, &format!("stages.{s}.mab.{b}"), &m.config).0;
        }
        x = if stage.projection.is_some() {
            let mut global = conv_norm(&x, store, &format!("stages.{s}.proj"), 1, 2);
            for (b, m) in stage.mcbs.iter().enumerate() {
                global = mcb(&global, store, &format!("stages.{s}.mcb.{b}"), m.config.residual);
            }
            local.add(&global)
        } else {
            local
        };
    }
    (0..x.n)
        .map(|n| {
            let pooled: Vec<f64> = (0..x.c)
                .map(|c| {
                    let mut s = 0.0;
                    for i in 0..x.h {
                        for j in 0..x.w {
                            s += x.at(n, c, i, j);
                        }
                    }
                    s / (x.h * x.w) as f64
                })
                .collect();
            dense(&pooled, store, "head")
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Uniform parameters in `[-scale, scale)`, batch-norm gammas near one, and
/// non-trivial running statistics.
pub fn randomize_all(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    gmenet::nn::randomize(store, &mut r, scale);
    let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    for name in names.iter().filter(|n| n.ends_with(".gamma")) {
        for v in store.by_name_mut(name).unwrap().data_mut() {
            *v = r.random_range(0.5..1.5);
        }
    }
    let buffers: Vec<String> = store.buffers().iter().map(|p| p.name.clone()).collect();
    for name in buffers {
        let var = name.ends_with("running_var");
        for v in store.buffer_by_name_mut(&name).unwrap().data_mut() {
            *v = if var { r.random_range(0.5..1.5) } else { r.random_range(-0.2..0.2) };
        }
    }
}

/// Pushes every parameter to magnitude at least `floor`, keeping its sign.
/// Under batch statistics a near-zero scale parameter makes the loss sharply
/// curved in that parameter, which a fixed finite-difference step cannot follow.
pub fn away_from_zero(store: &mut ParamStore<f64>, floor: f64) {
    for p in store.params_mut() {
        for v in p.tensor.data_mut() {
            if v.abs() < floor {
                *v = if *v < 0.0 { -floor } else { floor };
            }
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-3;

/// Relative error of one tensor: `max|a - n| / max(max|a|, max|n|, 1e-6)`.
/// The floor keeps gradients that are exactly zero in theory (a bias feeding
/// batch statistics, say) from turning rounding noise into a large ratio.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    max_abs_diff(analytic, numeric) / scale
}

/// Indices of at most `limit` entries, spread across the tensor.
pub fn sample_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        (0..limit).map(|i| i * len / limit).collect()
    }
}

/// Scalar-valued graph builder: given the graph and the input variable,
/// returns the loss variable.
pub type LossFn<'f> = dyn Fn(&mut Graph<'_, f64>, Var) -> gmenet::Result<Var> + 'f;

fn eval_loss(store: &ParamStore<f64>, mode: Mode, input: &Tensor<f64>, f: &LossFn<'_>) -> f64 {
    let mut g = Graph::new(store, mode, false);
    let x = g.input(input.clone());
    let l = f(&mut g, x).unwrap();
    g.tape.value(l).item()
}

/// Outcome of [`gradient_check`].
#[derive(Debug)]
pub struct GradReport {
    /// Largest per-tensor relative error over smooth entries.
    pub worst: f64,
    /// Tensor holding `worst`.
    pub at: String,
    pub checked: usize,
    /// Entries that needed a step below `FD_STEP` to clear a kink.
    pub refined: usize,
    /// Entries no step could resolve.
    pub kinks: usize,
}

impl GradReport {
    /// `worst < tol`, with kinks at most 5% of the checked entries.
    pub fn passes(&self, tol: f64) -> bool {
        self.worst < tol && self.kinks * 20 <= self.checked
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative error {:.3e} at {}, {} entries, {} refined, {} unresolved",
            self.worst, self.at, self.checked, self.refined, self.kinks
        )
    }
}

/// Central difference at `FD_STEP`, refined by halving the step while the
/// estimate at `h` disagrees with the one at `h / 2`. Disagreement means the
/// stencil straddles a ReLU or max-pool kink. Returns the estimate and the
/// number of halvings, or `None` when no step down to `FD_STEP / 16`
/// settles. Agreement to 5e-5 relative bounds the truncation error of the
/// returned estimate well below the tolerances the tests assert.
fn central(mut loss_at: impl FnMut(f64) -> f64) -> Option<(f64, u32)> {
    let mut d = |h: f64| (loss_at(h) - loss_at(-h)) / (2.0 * h);
    let mut h = FD_STEP;
    let mut prev = d(h);
    for halvings in 0..4 {
        h /= 2.0;
        let next = d(h);
        if (prev - next).abs() <= 5e-5 * prev.abs().max(next.abs()).max(1e-2) {
            // Richardson: the O(h²) terms of the two estimates cancel.
            return Some((next + (next - prev) / 3.0, halvings));
        }
        prev = next;
    }
    None
}

/// Compares tape gradients of the scalar `f` against central differences,
/// for the input and every parameter tensor (at most `per_tensor` entries
/// of each).
pub fn gradient_check(
    store: &mut ParamStore<f64>,
    mode: Mode,
    input: &Tensor<f64>,
    per_tensor: usize,
    f: &LossFn<'_>,
) -> GradReport {
    let (analytic_x, analytic_p) = {
        let mut g = Graph::new(store, mode, true);
        let x = g.tape.leaf(input.clone(), true);
        let l = f(&mut g, x).unwrap();
        let mut grads = g.tape.backward(l).unwrap();
        let gx = grads.take(x).unwrap_or_else(|| Tensor::zeros(input.shape()));
        (gx, g.param_grads(&mut grads))
    };
    let mut report = GradReport {
        worst: 0.0,
        at: String::new(),
        checked: 0,
        refined: 0,
        kinks: 0,
    };
    let mut record = |name: &str, pairs: Vec<(f64, Option<(f64, u32)>)>| {
        report.checked += pairs.len();
        report.kinks += pairs.iter().filter(|p| p.1.is_none()).count();
        report.refined += pairs.iter().filter(|p| p.1.is_some_and(|(_, k)| k > 0)).count();
        let (a, n): (Vec<f64>, Vec<f64>) = pairs.into_iter().filter_map(|(a, n)| n.map(|(n, _)| (a, n))).unzip();
        if a.is_empty() {
            return;
        }
        let e = relative_error(&a, &n);
        if e > report.worst || report.at.is_empty() {
            report.worst = e;
            report.at = name.to_string();
        }
    };

    let pairs = sample_indices(input.len(), per_tensor)
        .into_iter()
        .map(|i| {
            let n = central(|h| {
                let mut x = input.clone();
                x.data_mut()[i] += h;
                eval_loss(store, mode, &x, f)
            });
            (analytic_x.data()[i], n)
        })
        .collect();
    record("input", pairs);

    let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = store.params()[pi].tensor.len();
        let a = analytic_p[pi].clone().unwrap_or_else(|| Tensor::zeros(&[len]));
        let mut pairs = Vec::new();
        for i in sample_indices(len, per_tensor) {
            let orig = store.by_name(name).unwrap().data()[i];
            let n = central(|h| {
                store.by_name_mut(name).unwrap().data_mut()[i] = orig + h;
                let l = eval_loss(store, mode, input, f);
                store.by_name_mut(name).unwrap().data_mut()[i] = orig;
                l
            });
            pairs.push((a.data()[i], n));
        }
        record(name, pairs);
    }
    report
}

/// `sum(weights ⊙ y)` with fixed pseudo-random weights, so the loss is not
/// invariant to permutations of `y`.
pub fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> gmenet::Result<Var> {
    let shape = g.tape.value(y).shape().to_vec();
    let w = g.input(random_tensor(&shape, seed, -1.0, 1.0));
    let p = g.tape.mul(y, w)?;
    Ok(g.tape.sum(p))
}

/// In-memory paired dataset of `n` synthetic images (labels cycle through
/// the classes): teacher side is the HR image resized to `input`, student
/// side the degraded image prepared back to `input`, both normalised.
pub fn synthetic_pairs(
    n: usize,
    hr_size: usize,
    input: usize,
    spec: &gmenet::data::DegradationSpec,
    seed: u64,
) -> gmenet::data::PairedDataset<f64> {
    use gmenet::data::synthetic::synthetic_image;
    use gmenet::data::{bicubic_resize, degrade, prepare_student_input, ChannelStats};
    let classes = gmenet::data::SYNTHETIC_CLASSES.len();
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let images: Vec<_> = labels.iter().map(|&c| synthetic_image(c, hr_size, &mut r)).collect();
    let stats = ChannelStats::from_images(&images).unwrap();
    let mut hr = Vec::new();
    let mut lr = Vec::new();
    for img in &images {
        hr.extend(stats.normalize(&bicubic_resize(img, (input, input)).unwrap()).unwrap().data);
        let small = degrade(img, spec).unwrap();
        lr.extend(prepare_student_input(&small, (input, input), spec, Some(&stats)).unwrap().data);
    }
    let shape = [n, 3, input, input];
    gmenet::data::PairedDataset::from_tensors(
        &Tensor::from_vec(&shape, hr).unwrap(),
        &Tensor::from_vec(&shape, lr).unwrap(),
        labels,
    )
    .unwrap()
}
