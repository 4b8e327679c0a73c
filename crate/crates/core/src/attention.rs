//! Depthwise channel/spatial attention and the mixed-attention residual block.
//!
//! DCAM and DSAM each refine their input with two depthwise-separable stacks
//! (the second run at half resolution, then upsampled back) before pooling.
//! The gates multiply the *unrefined* input. Both return their pre-sigmoid
//! maps, which are what the distillation loss compares.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::{ensure_finite, Conv2d, ConvNorm, DepthwiseSeparable, Graph, Linear, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Attention variant inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Plain two-convolution basic block.
    None,
    /// Channel + spatial attention without the depthwise refinement stacks.
    Cbam,
    /// Channel + spatial attention with depthwise refinement.
    Dbam,
}

/// Pre-sigmoid attention maps of one block: channel `(n, c, 1, 1)`, spatial `(n, 1, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapPair<T> {
    pub channel: Tensor<T>,
    pub spatial: Tensor<T>,
}

/// Tape handles of an [`AttentionMapPair`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub channel: Var,
    pub spatial: Var,
}

impl AttentionVars {
    pub fn resolve<T: Scalar>(&self, g: &Graph<'_, T>) -> AttentionMapPair<T> {
        AttentionMapPair {
            channel: g.tape.value(self.channel).clone(),
            spatial: g.tape.value(self.spatial).clone(),
        }
    }
}

/// Hidden width of the shared channel MLP: `C / min(r, C)`.
pub fn mlp_hidden(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels == 0 {
        return Err(Error::Config("reduction ratio and channel count must be positive".into()));
    }
    let r = reduction.min(channels);
    if channels % r != 0 {
        return Err(Error::Config(format!(
            "reduction ratio {r} does not divide channel count {channels}"
        )));
    }
    Ok(channels / r)
}

/// Two depthwise-separable stacks with a 2× average-pool / nearest-upsample
/// round trip between them. The round trip is skipped when `h < 2` or `w < 2`.
#[derive(Clone, Debug)]
pub struct DepthwiseRefiner {
    pub first: DepthwiseSeparable,
    pub second: DepthwiseSeparable,
}

impl DepthwiseRefiner {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        DepthwiseRefiner {
            first: DepthwiseSeparable::new(store, rng, &format!("{name}.dws1"), channels, false),
            second: DepthwiseSeparable::new(store, rng, &format!("{name}.dws2"), channels, false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.tape.value(x).dims4();
        let y = self.first.forward(g, x)?;
        if h < 2 || w < 2 {
            return self.second.forward(g, y);
        }
        let d = g.tape.avg_pool2(y)?;
        let d = self.second.forward(g, d)?;
        g.tape.upsample_nearest(d, h, w)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h2, w2) = if h < 2 || w < 2 { (h, w) } else { (h / 2, w / 2) };
        self.first.macs(h, w) + self.second.macs(h2, w2)
    }
}

fn check_input<T: Scalar>(g: &Graph<'_, T>, x: Var, channels: usize, what: &str) -> Result<()> {
    let t = g.tape.value(x);
    if t.rank() != 4 {
        return Err(Error::Shape(format!("{what}: expected (n, c, h, w), got {:?}", t.shape())));
    }
    if t.shape()[1] != channels {
        return Err(Error::Config(format!(
            "{what}: input has {} channels, block expects {channels}",
            t.shape()[1]
        )));
    }
    Ok(())
}

/// Depthwise channel attention.
#[derive(Clone, Debug)]
pub struct Dcam {
    pub channels: usize,
    pub refiner: Option<DepthwiseRefiner>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Dcam {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        depthwise: bool,
    ) -> Result<Self> {
        let hidden = mlp_hidden(channels, reduction)?;
        Ok(Dcam {
            channels,
            refiner: depthwise.then(|| DepthwiseRefiner::new(store, rng, &format!("{name}.refine"), channels)),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), channels, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, channels),
        })
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<Var> {
        let n = g.tape.value(pooled).shape()[0];
        let flat = g.tape.reshape(pooled, &[n, self.channels])?;
        let h = self.fc1.forward(g, flat)?;
        let h = g.tape.relu(h);
        self.fc2.forward(g, h)
    }

    /// Returns `(sigmoid(M_c) ⊗ x, M_c)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        check_input(g, x, self.channels, "dcam")?;
        let n = g.tape.value(x).shape()[0];
        let fm = match &self.refiner {
            Some(r) => r.forward(g, x)?,
            None => x,
        };
        let avg = g.tape.global_avg_pool(fm)?;
        let max = g.tape.global_max_pool(fm)?;
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, max)?;
        let logits = g.tape.add(a, m)?;
        let map = g.tape.reshape(logits, &[n, self.channels, 1, 1])?;
        let gate = g.tape.sigmoid(map);
        Ok((g.tape.channel_gate(x, gate)?, map))
    }

    pub fn param_count(&self) -> usize {
        self.refiner.as_ref().map_or(0, |r| r.param_count()) + self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.refiner.as_ref().map_or(0, |r| r.macs(h, w)) + 2 * (self.fc1.macs() + self.fc2.macs())
    }
}

/// Depthwise spatial attention.
#[derive(Clone, Debug)]
pub struct Dsam {
    pub channels: usize,
    pub refiner: Option<DepthwiseRefiner>,
    pub conv: Conv2d,
}

impl Dsam {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        depthwise: bool,
    ) -> Self {
        Dsam {
            channels,
            refiner: depthwise.then(|| DepthwiseRefiner::new(store, rng, &format!("{name}.refine"), channels)),
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), 2, 1, 3, ConvSpec::same(3), true),
        }
    }

    /// Returns `(sigmoid(M_s) ⊗ x, M_s)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        check_input(g, x, self.channels, "dsam")?;
        let fm = match &self.refiner {
            Some(r) => r.forward(g, x)?,
            None => x,
        };
        let avg = g.tape.channel_avg_pool(fm)?;
        let max = g.tape.channel_max_pool(fm)?;
        let cat = g.tape.concat(&[avg, max])?;
        let map = self.conv.forward(g, cat)?;
        let gate = g.tape.sigmoid(map);
        Ok((g.tape.spatial_gate(x, gate)?, map))
    }

    pub fn param_count(&self) -> usize {
        self.refiner.as_ref().map_or(0, |r| r.param_count()) + self.conv.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.refiner.as_ref().map_or(0, |r| r.macs(h, w)) + self.conv.macs(h, w)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct Dbam {
    pub channel: Dcam,
    pub spatial: Dsam,
}

impl Dbam {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        depthwise: bool,
    ) -> Result<Self> {
        Ok(Dbam {
            channel: Dcam::new(store, rng, &format!("{name}.dcam"), channels, reduction, depthwise)?,
            spatial: Dsam::new(store, rng, &format!("{name}.dsam"), channels, depthwise),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, AttentionVars)> {
        let (y, channel) = self.channel.forward(g, x)?;
        let (y, spatial) = self.spatial.forward(g, y)?;
        Ok((y, AttentionVars { channel, spatial }))
    }

    pub fn param_count(&self) -> usize {
        self.channel.param_count() + self.spatial.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.channel.macs(h, w) + self.spatial.macs(h, w)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MabConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub attention: AttentionKind,
    pub reduction: usize,
    pub normalization: bool,
}

/// Mixed-attention block:
/// `relu(DSAM(DCAM(conv2(relu(conv1(x))))) + shortcut(x))`.
///
/// The shortcut is the identity unless the block changes stride or width, in
/// which case it is a strided 1×1 projection.
#[derive(Clone, Debug)]
pub struct Mab {
    pub config: MabConfig,
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    pub attention: Option<Dbam>,
    pub shortcut: Option<ConvNorm>,
}

impl Mab {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, config: MabConfig) -> Result<Self> {
        let MabConfig {
            in_channels: cin,
            out_channels: cout,
            stride,
            normalization: norm,
            ..
        } = config;
        if stride == 0 {
            return Err(Error::Config(format!("{name}: stride must be positive")));
        }
        let conv1 = ConvNorm::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, norm);
        let conv2 = ConvNorm::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, norm);
        let attention = match config.attention {
            AttentionKind::None => None,
            AttentionKind::Cbam => Some(Dbam::new(store, rng, &format!("{name}.cbam"), cout, config.reduction, false)?),
            AttentionKind::Dbam => Some(Dbam::new(store, rng, &format!("{name}.dbam"), cout, config.reduction, true)?),
        };
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvNorm::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, stride, norm));
        Ok(Mab {
            config,
            conv1,
            conv2,
            attention,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Option<AttentionVars>)> {
        check_input(g, x, self.config.in_channels, "mab")?;
        let y = self.conv1.forward(g, x)?;
        let y = g.tape.relu(y);
        let y = self.conv2.forward(g, y)?;
        let (y, maps) = match &self.attention {
            Some(att) => {
                let (y, maps) = att.forward(g, y)?;
                (y, Some(maps))
            }
            None => (y, None),
        };
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        let sum = g.tape.add(y, skip)?;
        Ok((g.tape.relu(sum), maps))
    }

    /// Evaluates the block on a tensor without recording gradients.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<AttentionMapPair<T>>)> {
        ensure_finite("mab input", input)?;
        let mut g = Graph::new(store, mode, false);
        let x = g.input(input.clone());
        let (y, maps) = self.forward(&mut g, x)?;
        Ok((g.tape.value(y).clone(), maps.map(|m| m.resolve(&g))))
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.attention.as_ref().map_or(0, |a| a.param_count())
            + self.shortcut.as_ref().map_or(0, |s| s.param_count())
    }

    /// Returns `(macs, (h_out, w_out))` for one image of size `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> (u64, (usize, usize)) {
        let (ho, wo) = self.conv1.conv.output_size(h, w);
        let mut total = self.conv1.conv.macs(h, w) + self.conv2.conv.macs(ho, wo);
        total += self.attention.as_ref().map_or(0, |a| a.macs(ho, wo));
        total += self.shortcut.as_ref().map_or(0, |s| s.conv.macs(h, w));
        (total, (ho, wo))
    }
}

/// Tensor-level DCAM evaluation; returns the gated output and pre-sigmoid map.
pub fn dcam_forward<T: Scalar>(dcam: &Dcam, store: &ParamStore<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_finite("dcam input", input)?;
    let mut g = Graph::new(store, Mode::Eval, false);
    let x = g.input(input.clone());
    let (y, m) = dcam.forward(&mut g, x)?;
    Ok((g.tape.value(y).clone(), g.tape.value(m).clone()))
}

/// Tensor-level DSAM evaluation; returns the gated output and pre-sigmoid map.
pub fn dsam_forward<T: Scalar>(dsam: &Dsam, store: &ParamStore<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_finite("dsam input", input)?;
    let mut g = Graph::new(store, Mode::Eval, false);
    let x = g.input(input.clone());
    let (y, m) = dsam.forward(&mut g, x)?;
    Ok((g.tape.value(y).clone(), g.tape.value(m).clone()))
}

/// Tensor-level DBAM evaluation.
pub fn dbam_forward<T: Scalar>(
    dbam: &Dbam,
    store: &ParamStore<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionMapPair<T>)> {
    ensure_finite("dbam input", input)?;
    let mut g = Graph::new(store, Mode::Eval, false);
    let x = g.input(input.clone());
    let (y, maps) = dbam.forward(&mut g, x)?;
    Ok((g.tape.value(y).clone(), maps.resolve(&g)))
}

/// Tensor-level MAB evaluation (running statistics for batch norm).
pub fn mab_forward<T: Scalar>(
    mab: &Mab,
    store: &ParamStore<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Option<AttentionMapPair<T>>)> {
    mab.apply(store, input, Mode::Eval)
}
