//! Mixed-channel feature extraction block (MCB).
//!
//! After a 3×3 entry convolution producing `F`, two quasi-symmetric branches
//! run the same four-step cascade on `C/4`-channel inputs:
//!
//! ```text
//! out_1 = relu(dws_1(in_1))
//! out_i = relu(dws_i(out_{i-1})) + in_i        i = 2..4
//! ```
//!
//! Branch one feeds a 1×1-reduced copy of `F` to all four steps; branch two
//! feeds the four contiguous channel quarters of `F`. The block returns
//! `relu(concat(branch1) + concat(branch2) + residual)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::{ensure_finite, Conv2d, ConvNorm, DepthwiseSeparable, Graph, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const SCALES: usize = 4;

/// Which map the final residual adds back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McbResidual {
    /// Output of the entry convolution.
    #[default]
    EntryConv,
    /// The raw block input.
    BlockInput,
}

#[derive(Clone, Copy, Debug)]
pub struct McbConfig {
    pub channels: usize,
    pub normalization: bool,
    pub residual: McbResidual,
}

#[derive(Clone, Debug)]
pub struct Mcb {
    pub config: McbConfig,
    pub entry: ConvNorm,
    pub reduce: Conv2d,
    pub replicate_stacks: Vec<DepthwiseSeparable>,
    pub split_stacks: Vec<DepthwiseSeparable>,
}

impl Mcb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, config: McbConfig) -> Result<Self> {
        let c = config.channels;
        if c == 0 || c % SCALES != 0 {
            return Err(Error::Config(format!("{name}: channel count {c} is not divisible by {SCALES}")));
        }
        let q = c / SCALES;
        let entry = ConvNorm::new(store, rng, &format!("{name}.entry"), c, c, 3, 1, config.normalization);
        let reduce = Conv2d::new(store, rng, &format!("{name}.reduce"), c, q, 1, ConvSpec::same(1), true);
        let stacks = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, branch: &str| {
            (0..SCALES)
                .map(|i| DepthwiseSeparable::new(store, rng, &format!("{name}.{branch}.{i}"), q, config.normalization))
                .collect()
        };
        let replicate_stacks = stacks(store, rng, "replicate");
        let split_stacks = stacks(store, rng, "split");
        Ok(Mcb {
            config,
            entry,
            reduce,
            replicate_stacks,
            split_stacks,
        })
    }

    fn check<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, what: &str) -> Result<()> {
        let t = g.tape.value(x);
        if t.rank() != 4 {
            return Err(Error::Shape(format!("{what}: expected (n, c, h, w), got {:?}", t.shape())));
        }
        if t.shape()[1] != self.config.channels {
            return Err(Error::Config(format!(
                "{what}: input has {} channels, block expects {}",
                t.shape()[1],
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Branch one: reduce `F` to `C/4` channels, feed the copy to every cascade step.
    pub fn branch_replicate<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        self.check(g, f, "mcb replicate branch")?;
        let x = self.reduce.forward(g, f)?;
        let outs = cascade(g, &self.replicate_stacks, [x; SCALES])?;
        g.tape.concat(&outs)
    }

    /// Branch two: split `F` into contiguous channel quarters.
    pub fn branch_split<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        self.check(g, f, "mcb split branch")?;
        let q = self.config.channels / SCALES;
        let mut parts = [f; SCALES];
        for (i, p) in parts.iter_mut().enumerate() {
            *p = g.tape.slice_channels(f, i * q, q)?;
        }
        let outs = cascade(g, &self.split_stacks, parts)?;
        g.tape.concat(&outs)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check(g, x, "mcb")?;
        let f = self.entry.forward(g, x)?;
        let o1 = self.branch_replicate(g, f)?;
        let o2 = self.branch_split(g, f)?;
        let residual = match self.config.residual {
            McbResidual::EntryConv => f,
            McbResidual::BlockInput => x,
        };
        let s = g.tape.add(o1, o2)?;
        let s = g.tape.add(s, residual)?;
        Ok(g.tape.relu(s))
    }

    pub fn param_count(&self) -> usize {
        self.entry.param_count()
            + self.reduce.param_count()
            + self
                .replicate_stacks
                .iter()
                .chain(&self.split_stacks)
                .map(|s| s.param_count())
                .sum::<usize>()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.entry.conv.macs(h, w)
            + self.reduce.macs(h, w)
            + self
                .replicate_stacks
                .iter()
                .chain(&self.split_stacks)
                .map(|s| s.macs(h, w))
                .sum::<u64>()
    }
}

/// The four-step cascade shared by both branches; returns the four step outputs.
pub fn cascade<T: Scalar>(
    g: &mut Graph<'_, T>,
    stacks: &[DepthwiseSeparable],
    inputs: [Var; SCALES],
) -> Result<[Var; SCALES]> {
    debug_assert_eq!(stacks.len(), SCALES);
    let mut outs = inputs;
    let first = stacks[0].forward(g, inputs[0])?;
    outs[0] = g.tape.relu(first);
    for i in 1..SCALES {
        let y = stacks[i].forward(g, outs[i - 1])?;
        let y = g.tape.relu(y);
        outs[i] = g.tape.add(y, inputs[i])?;
    }
    Ok(outs)
}

fn eval_with<T: Scalar>(
    store: &ParamStore<T>,
    input: &Tensor<T>,
    f: impl FnOnce(&mut Graph<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    ensure_finite("mcb input", input)?;
    let mut g = Graph::new(store, Mode::Eval, false);
    let x = g.input(input.clone());
    let y = f(&mut g, x)?;
    Ok(g.tape.value(y).clone())
}

/// Branch one applied directly to a feature map `F`.
pub fn mcb_branch_replicate<T: Scalar>(mcb: &Mcb, store: &ParamStore<T>, feature: &Tensor<T>) -> Result<Tensor<T>> {
    eval_with(store, feature, |g, x| mcb.branch_replicate(g, x))
}

/// Branch two applied directly to a feature map `F`.
pub fn mcb_branch_split<T: Scalar>(mcb: &Mcb, store: &ParamStore<T>, feature: &Tensor<T>) -> Result<Tensor<T>> {
    eval_with(store, feature, |g, x| mcb.branch_split(g, x))
}

/// Whole block, batch norm on running statistics.
pub fn mcb_forward<T: Scalar>(mcb: &Mcb, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    eval_with(store, input, |g, x| mcb.forward(g, x))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn block(c: usize, residual: McbResidual) -> (ParamStore<f64>, Mcb) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = McbConfig {
            channels: c,
            normalization: false,
            residual,
        };
        let mcb = Mcb::new(&mut store, &mut rng, "m", cfg).unwrap();
        (store, mcb)
    }

    #[test]
    fn rejects_channels_not_divisible_by_four() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = McbConfig {
            channels: 6,
            normalization: false,
            residual: McbResidual::EntryConv,
        };
        assert!(matches!(Mcb::new(&mut store, &mut rng, "m", cfg), Err(Error::Config(_))));
    }

    #[test]
    fn residual_switch_uses_block_input() {
        let (mut store, mcb) = block(8, McbResidual::BlockInput);
        store.zero_prefix("");
        let x = Tensor::from_fn(&[1, 8, 3, 3], |i| (i % 5) as f64);
        // every weight zero: entry output, both branches vanish; only the input survives
        let y = mcb_forward(&mcb, &store, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn param_count_matches_store() {
        let (store, mcb) = block(16, McbResidual::EntryConv);
        assert_eq!(mcb.param_count(), store.num_params());
    }
}
