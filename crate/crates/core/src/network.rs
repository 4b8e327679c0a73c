//! The two-branch network: a stem, per-stage parallel MAB and MCB stacks
//! fused by addition, and a pooled linear head.
//!
//! Each stage downsamples by two at entry. Branch one does it in the first
//! MAB's first convolution; branch two uses a strided 1×1 projection so both
//! branch outputs have the same shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mlp_hidden, AttentionKind, AttentionMapPair, AttentionVars, Mab, MabConfig};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::global::{Mcb, McbConfig, McbResidual, SCALES};
use crate::nn::{ensure_finite, ConvNorm, Graph, Linear, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_dbam: bool,
    pub use_cbam: bool,
    pub use_global_branch: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_dbam: true,
            use_cbam: false,
            use_global_branch: true,
        }
    }
}

impl Ablation {
    pub fn attention(&self) -> AttentionKind {
        if self.use_dbam {
            AttentionKind::Dbam
        } else if self.use_cbam {
            AttentionKind::Cbam
        } else {
            AttentionKind::None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub initial_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    pub reduction_ratio: usize,
    /// `[height, width]` in pixels.
    pub input_size: [usize; 2],
    pub normalization: bool,
    pub mcb_residual: McbResidual,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            initial_channels: 32,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: vec![3, 4, 6, 3],
            num_classes: 7,
            reduction_ratio: 16,
            input_size: [112, 112],
            normalization: true,
            mcb_residual: McbResidual::EntryConv,
            ablation: Ablation::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.initial_channels == 0 {
            return Err(Error::Config("initial_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.input_size.contains(&0) {
            return Err(Error::Config("input_size must be positive".into()));
        }
        if self.ablation.use_dbam && self.ablation.use_cbam {
            return Err(Error::Config("use_dbam and use_cbam are mutually exclusive".into()));
        }
        for (stage, (&w, &b)) in self.stage_widths.iter().zip(&self.blocks_per_stage).enumerate() {
            if w == 0 || w % SCALES != 0 {
                return Err(Error::Config(format!("stage {stage}: width {w} is not divisible by {SCALES}")));
            }
            if b == 0 {
                return Err(Error::Config(format!("stage {stage}: needs at least one block")));
            }
            mlp_hidden(w, self.reduction_ratio)
                .map_err(|e| Error::Config(format!("stage {stage}: {e}")))?;
        }
        Ok(())
    }

    /// Spatial size after the stem and every stage.
    pub fn feature_size(&self) -> (usize, usize) {
        let [mut h, mut w] = self.input_size;
        for _ in &self.stage_widths {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        (h, w)
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn attention_block_count(&self) -> usize {
        match self.ablation.attention() {
            AttentionKind::None => 0,
            _ => self.total_blocks(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub mabs: Vec<Mab>,
    pub projection: Option<ConvNorm>,
    pub mcbs: Vec<Mcb>,
}

/// Logits plus one attention-map pair per attention block, in network order.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub attention_maps: Vec<AttentionMapPair<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub attention_maps: Vec<AttentionVars>,
}

/// Order in which the two branch outputs are summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionOrder {
    #[default]
    LocalFirst,
    GlobalFirst,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub seed: u64,
    store: ParamStore<T>,
    stem: ConvNorm,
    stages: Vec<Stage>,
    head: Linear,
}

impl<T: Scalar> Network<T> {
    /// Builds and initialises a network; identical `(config, seed)` give identical parameters.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let norm = config.normalization;
        let stem = ConvNorm::new(&mut store, &mut rng, "stem", INPUT_CHANNELS, config.initial_channels, 3, 1, norm);
        let attention = config.ablation.attention();
        let mut stages = Vec::with_capacity(config.stage_widths.len());
        let mut prev = config.initial_channels;
        for (s, (&width, &blocks)) in config.stage_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            let mut mabs = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let cfg = MabConfig {
                    in_channels: if b == 0 { prev } else { width },
                    out_channels: width,
                    stride: if b == 0 { 2 } else { 1 },
                    attention,
                    reduction: config.reduction_ratio,
                    normalization: norm,
                };
                mabs.push(Mab::new(&mut store, &mut rng, &format!("stages.{s}.mab.{b}"), cfg)?);
            }
            let (projection, mcbs) = if config.ablation.use_global_branch {
                let proj = ConvNorm::new(&mut store, &mut rng, &format!("stages.{s}.proj"), prev, width, 1, 2, norm);
                let cfg = McbConfig {
                    channels: width,
                    normalization: norm,
                    residual: config.mcb_residual,
                };
                let mcbs = (0..blocks)
                    .map(|b| Mcb::new(&mut store, &mut rng, &format!("stages.{s}.mcb.{b}"), cfg))
                    .collect::<Result<Vec<_>>>()?;
                (Some(proj), mcbs)
            } else {
                (None, Vec::new())
            };
            stages.push(Stage { mabs, projection, mcbs });
            prev = width;
        }
        let head = Linear::new(&mut store, &mut rng, "head", prev, config.num_classes);
        Ok(Network {
            config: config.clone(),
            seed,
            store,
            stem,
            stages,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn count_parameters(&self) -> usize {
        self.store.num_params()
    }

    /// Analytic multiply-accumulate count for one image of `input_size`
    /// (convolutions and linear layers only).
    pub fn count_multiply_accumulates(&self, input_size: [usize; 2]) -> u64 {
        let [mut h, mut w] = input_size;
        let mut total = self.stem.conv.macs(h, w);
        (h, w) = self.stem.conv.output_size(h, w);
        for stage in &self.stages {
            let (h_in, w_in) = (h, w);
            for mab in &stage.mabs {
                let (m, out) = mab.macs(h, w);
                total += m;
                (h, w) = out;
            }
            if let Some(p) = &stage.projection {
                total += p.conv.macs(h_in, w_in);
                let (ph, pw) = p.conv.output_size(h_in, w_in);
                total += stage.mcbs.iter().map(|m| m.macs(ph, pw)).sum::<u64>();
            }
        }
        total + self.head.macs()
    }

    fn check_images(&self, t: &Tensor<T>) -> Result<()> {
        let [h, w] = self.config.input_size;
        let s = t.shape();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] != h || s[3] != w || s[0] == 0 {
            return Err(Error::Shape(format!(
                "network expects images of shape (n, {INPUT_CHANNELS}, {h}, {w}), got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph<'_, T>, images: Var) -> Result<ForwardVars> {
        self.forward_graph_ordered(g, images, FusionOrder::LocalFirst)
    }

    pub fn forward_graph_ordered(&self, g: &mut Graph<'_, T>, images: Var, order: FusionOrder) -> Result<ForwardVars> {
        self.check_images(g.tape.value(images))?;
        let x = self.stem.forward(g, images)?;
        let mut x = g.tape.relu(x);
        let mut maps = Vec::new();
        for stage in &self.stages {
            let mut local = x;
            for mab in &stage.mabs {
                let (y, m) = mab.forward(g, local)?;
                local = y;
                maps.extend(m);
            }
            x = match &stage.projection {
                Some(proj) => {
                    let mut global = proj.forward(g, x)?;
                    for mcb in &stage.mcbs {
                        global = mcb.forward(g, global)?;
                    }
                    match order {
                        FusionOrder::LocalFirst => g.tape.add(local, global)?,
                        FusionOrder::GlobalFirst => g.tape.add(global, local)?,
                    }
                }
                None => local,
            };
        }
        let pooled = g.tape.global_avg_pool(x)?;
        let n = g.tape.value(pooled).shape()[0];
        let c = g.tape.value(pooled).shape()[1];
        let flat = g.tape.reshape(pooled, &[n, c])?;
        let logits = self.head.forward(g, flat)?;
        Ok(ForwardVars {
            logits,
            attention_maps: maps,
        })
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        self.check_images(images)?;
        ensure_finite("images", images)?;
        let mut g = Graph::new(&self.store, mode, false);
        let x = g.input(images.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(ForwardOutput {
            logits: g.tape.value(out.logits).clone(),
            attention_maps: out.attention_maps.iter().map(|m| m.resolve(&g)).collect(),
        })
    }

    /// Argmax class per image, evaluation mode.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let out = self.forward(images, Mode::Eval)?;
        let k = self.config.num_classes;
        Ok(out
            .logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }

    /// Parameter and buffer names with shapes; equal signatures mean
    /// checkpoint-compatible architectures.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .params()
            .iter()
            .chain(self.store.buffers())
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            seed: self.seed,
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }
}

/// Same as [`Network::new`]; named for symmetry with the other entry points.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    Network::new(config, seed)
}
