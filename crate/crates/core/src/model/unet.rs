//! The shared grid of encoder/decoder blocks and assembly of depth-`d` learners.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_channels, BatchStats, Graph, Var};
use crate::model::block::{
    conv_block_forward, level_channels, BatchNormVars, BlockId, ConvBlockSpec, ConvBlockVars,
};
use crate::model::params::ParamStore;
use crate::model::scse::{he_uniform, reduced_channels, scse_forward, ScseCombine, ScseVars};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// 2×2 stride-2 transposed convolution.
    #[default]
    Transposed,
    /// Bilinear ×2 resize followed by a 1×1 channel projection.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_channels: usize,
    pub classes: usize,
    pub base_filters: usize,
    pub max_depth: usize,
    #[serde(default)]
    pub upsampling: Upsampling,
    pub scse: bool,
    #[serde(default)]
    pub scse_combine: ScseCombine,
    pub deep_supervision: bool,
}

impl ArchConfig {
    pub fn small(image_channels: usize, classes: usize, max_depth: usize) -> Self {
        Self {
            image_channels,
            classes,
            base_filters: 16,
            max_depth,
            upsampling: Upsampling::Transposed,
            scse: true,
            scse_combine: ScseCombine::Max,
            deep_supervision: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Unfrozen blocks are trainable and normalize with batch statistics.
    Train,
    /// No gradients; every block uses running statistics.
    Eval,
}

/// Blocks whose outputs are supervised in the learner of depth `d`:
/// `X^{d,0}, X^{d-1,1}, …, X^{0,d}` (ordered by column).
pub fn supervised_blocks(depth: usize) -> Vec<BlockId> {
    (0..=depth).map(|j| BlockId::new(depth - j, j)).collect()
}

/// Blocks a depth-`d` learner reads: encoders `X^{0,0}…X^{d,0}` and decoders `X^{d-j,j}`.
pub fn learner_blocks(depth: usize) -> Vec<BlockId> {
    let mut v: Vec<BlockId> = (0..=depth).map(|i| BlockId::new(i, 0)).collect();
    v.extend((1..=depth).map(|j| BlockId::new(depth - j, j)));
    v
}

pub fn eta_name(depth: usize) -> String {
    format!("eta.d{depth}")
}

/// Nested UNet parameter grid with per-block freezing.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedUNet<F> {
    pub arch: ArchConfig,
    pub params: ParamStore<F>,
    frozen: BTreeSet<BlockId>,
}

/// Result of one learner forward pass.
pub struct LearnerOutput<F> {
    /// Supervision-head logits keyed by block.
    pub logits: BTreeMap<BlockId, Var>,
    /// Output feature maps of every block evaluated.
    pub features: BTreeMap<BlockId, Var>,
    /// Graph variables of every trainable parameter used.
    pub trainable: BTreeMap<String, Var>,
    /// Batch statistics per norm-layer prefix (e.g. `b1_0.bn2`).
    pub bn_stats: Vec<(String, BatchStats<F>)>,
}

/// A depth-`d` base learner view over the shared grid.
pub struct Learner<'a, F> {
    net: &'a NestedUNet<F>,
    depth: usize,
}

impl<F: Real> NestedUNet<F> {
    pub fn new(arch: ArchConfig) -> Self {
        Self { arch, params: ParamStore::new(), frozen: BTreeSet::new() }
    }

    pub fn from_parts(arch: ArchConfig, params: ParamStore<F>, frozen: BTreeSet<BlockId>) -> Self {
        Self { arch, params, frozen }
    }

    pub fn channels(&self, level: usize) -> usize {
        level_channels(self.arch.base_filters, level)
    }

    pub fn has_block(&self, id: BlockId) -> bool {
        self.params.contains(&format!("{}.conv1.weight", id.prefix()))
    }

    pub fn frozen(&self) -> &BTreeSet<BlockId> {
        &self.frozen
    }

    pub fn is_frozen(&self, id: BlockId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn freeze(&mut self, id: BlockId) -> Result<()> {
        if !self.has_block(id) {
            return Err(Error::Stage(format!("cannot freeze missing block {id}")));
        }
        self.frozen.insert(id);
        Ok(())
    }

    /// Freezes encoders `X^{j,0}` (`j ≤ d`) and the decoders created at stage `d`.
    pub fn freeze_stage(&mut self, depth: usize) -> Result<()> {
        for id in learner_blocks(depth) {
            if id.is_encoder() || id.stage() == depth {
                self.freeze(id)?;
            }
        }
        Ok(())
    }

    /// Whether parameter `name` may be updated.
    pub fn is_trainable(&self, name: &str) -> bool {
        if let Some(id) = BlockId::parse_prefix(name) {
            return !self.frozen.contains(&id) && !name.contains(".running_");
        }
        if let Some(d) = name.strip_prefix("eta.d").and_then(|d| d.parse::<usize>().ok()) {
            return !self.frozen.contains(&BlockId::new(0, d));
        }
        true
    }

    fn conv_block_params(&mut self, id: BlockId, spec: &ConvBlockSpec, rng: &mut impl Rng) {
        let p = id.prefix();
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        self.params.insert(format!("{p}.conv1.weight"), he_uniform(&[cout, cin, 3, 3], cin * 9, rng));
        self.params.insert(format!("{p}.conv2.weight"), he_uniform(&[cout, cout, 3, 3], cout * 9, rng));
        for bn in ["bn1", "bn2"] {
            self.params.insert(format!("{p}.{bn}.gamma"), Tensor::full(&[cout], F::one()));
            self.params.insert(format!("{p}.{bn}.beta"), Tensor::zeros(&[cout]));
            self.params.insert(format!("{p}.{bn}.running_mean"), Tensor::zeros(&[cout]));
            self.params.insert(format!("{p}.{bn}.running_var"), Tensor::full(&[cout], F::one()));
        }
    }

    /// Creates the blocks, heads, gates and block weights introduced by stage `d`.
    pub fn init_stage(&mut self, depth: usize, rng: &mut impl Rng) -> Result<()> {
        if depth == 0 || depth > self.arch.max_depth {
            return Err(Error::Stage(format!("depth {depth} outside 1..={}", self.arch.max_depth)));
        }
        for d in 1..depth {
            if !self.has_block(BlockId::new(d, 0)) {
                return Err(Error::Stage(format!("stage {depth} initialized before stage {d}")));
            }
        }
        let mut new_blocks = Vec::new();
        if depth == 1 {
            new_blocks.push(BlockId::new(0, 0));
        }
        new_blocks.extend(supervised_blocks(depth));
        for id in &new_blocks {
            if self.has_block(*id) {
                return Err(Error::Stage(format!("block {id} already exists")));
            }
        }
        self.create_blocks(&new_blocks, depth, self.arch.scse && depth >= 2, rng);
        Ok(())
    }

    /// Creates every block of `UNet^d` at once, for training a single learner as a
    /// whole (no gates, since nothing is frozen).
    pub fn init_standalone(&mut self, depth: usize, rng: &mut impl Rng) -> Result<()> {
        if depth == 0 || depth > self.arch.max_depth {
            return Err(Error::Stage(format!("depth {depth} outside 1..={}", self.arch.max_depth)));
        }
        if !self.params.is_empty() {
            return Err(Error::Stage("standalone learners need an empty grid".into()));
        }
        self.create_blocks(&learner_blocks(depth), depth, false, rng);
        Ok(())
    }

    fn create_blocks(&mut self, ids: &[BlockId], depth: usize, gates: bool, rng: &mut impl Rng) {
        let c = self.arch.classes;
        for &id in ids {
            let spec = ConvBlockSpec::for_block(id, depth, self.arch.image_channels, self.arch.base_filters);
            let p = id.prefix();
            if !id.is_encoder() {
                let deeper = self.channels(id.level + 1);
                let ch = spec.out_channels;
                match self.arch.upsampling {
                    Upsampling::Transposed => self
                        .params
                        .insert(format!("{p}.up.weight"), he_uniform(&[deeper, ch, 2, 2], deeper, rng)),
                    Upsampling::Bilinear => self
                        .params
                        .insert(format!("{p}.up.weight"), he_uniform(&[ch, deeper, 1, 1], deeper, rng)),
                }
                self.params.insert(format!("{p}.up.bias"), Tensor::zeros(&[ch]));
                if gates {
                    let r = reduced_channels(ch);
                    self.params.insert(format!("{p}.gate.spatial"), he_uniform(&[1, ch, 1, 1], ch, rng));
                    self.params.insert(format!("{p}.gate.squeeze"), he_uniform(&[r, ch], ch, rng));
                    self.params.insert(format!("{p}.gate.excite"), he_uniform(&[ch, r], r, rng));
                }
            }
            self.conv_block_params(id, &spec, rng);
            if id.stage() == depth && (self.arch.deep_supervision || id.column == depth) {
                let ch = spec.out_channels;
                self.params.insert(format!("{p}.head.weight"), he_uniform(&[c, ch, 1, 1], ch, rng));
                self.params.insert(format!("{p}.head.bias"), Tensor::zeros(&[c]));
            }
        }
        self.params.insert(eta_name(depth), Tensor::zeros(&[depth + 1]));
    }

    /// Validates that every block of `UNet^d` exists and returns a view over it.
    pub fn assemble(&self, depth: usize) -> Result<Learner<'_, F>> {
        if depth == 0 || depth > self.arch.max_depth {
            return Err(Error::Stage(format!("depth {depth} outside 1..={}", self.arch.max_depth)));
        }
        for id in learner_blocks(depth) {
            if !self.has_block(id) {
                return Err(Error::Stage(format!("learner of depth {depth} needs missing block {id}")));
            }
        }
        Ok(Learner { net: self, depth })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<F>)], momentum: f64) -> Result<()> {
        let m = F::lit(momentum);
        for (prefix, s) in stats {
            let unbias = if s.count > 1 {
                F::from_usize(s.count).unwrap() / F::from_usize(s.count - 1).unwrap()
            } else {
                F::one()
            };
            let rm = self.params.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (F::one() - m) * *r + m * b;
            }
            let rv = self.params.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = (F::one() - m) * *r + m * b * unbias;
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> NestedUNet<G> {
        let mut params = ParamStore::new();
        for (n, t) in self.params.iter() {
            params.insert(n.clone(), t.cast());
        }
        NestedUNet { arch: self.arch.clone(), params, frozen: self.frozen.clone() }
    }
}

struct Binder<'a, F> {
    net: &'a NestedUNet<F>,
    mode: Mode,
    trainable: BTreeMap<String, Var>,
}

impl<'a, F: Real> Binder<'a, F> {
    fn bind(&mut self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        if let Some(v) = self.trainable.get(name) {
            return Ok(*v);
        }
        let t = self.net.params.get(name)?.clone();
        if self.mode == Mode::Train && self.net.is_trainable(name) {
            let v = g.leaf(t, true);
            self.trainable.insert(name.to_string(), v);
            Ok(v)
        } else {
            Ok(g.constant(t))
        }
    }

    fn batch_norm(&mut self, g: &mut Graph<F>, id: BlockId, bn: &str) -> Result<BatchNormVars<'a, F>> {
        let p = format!("{}.{bn}", id.prefix());
        let gamma = self.bind(g, &format!("{p}.gamma"))?;
        let beta = self.bind(g, &format!("{p}.beta"))?;
        let net = self.net;
        let running = if self.mode == Mode::Train && !net.is_frozen(id) {
            None
        } else {
            Some((
                net.params.get(&format!("{p}.running_mean"))?.data(),
                net.params.get(&format!("{p}.running_var"))?.data(),
            ))
        };
        Ok(BatchNormVars { gamma, beta, running })
    }
}

impl<'a, F: Real> Learner<'a, F> {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn net(&self) -> &'a NestedUNet<F> {
        self.net
    }

    /// Blocks whose heads contribute to this learner's loss and prediction.
    pub fn heads(&self) -> Vec<BlockId> {
        if self.net.arch.deep_supervision {
            supervised_blocks(self.depth)
        } else {
            vec![BlockId::new(0, self.depth)]
        }
    }

    fn block(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'a, F>,
        id: BlockId,
        input: Var,
        bn_stats: &mut Vec<(String, BatchStats<F>)>,
    ) -> Result<Var> {
        let spec = ConvBlockSpec::for_block(id, self.depth, self.net.arch.image_channels, self.net.arch.base_filters);
        let p = id.prefix();
        let vars = ConvBlockVars {
            conv1: binder.bind(g, &format!("{p}.conv1.weight"))?,
            bn1: Some(binder.batch_norm(g, id, "bn1")?),
            conv2: binder.bind(g, &format!("{p}.conv2.weight"))?,
            bn2: Some(binder.batch_norm(g, id, "bn2")?),
        };
        let (out, stats) = conv_block_forward(g, input, &spec, &vars)?;
        for (bn, s) in ["bn1", "bn2"].into_iter().zip(stats) {
            if let Some(s) = s {
                bn_stats.push((format!("{p}.{bn}"), s));
            }
        }
        Ok(out)
    }

    /// Runs the learner on `input [N, channels, H, W]`, emitting logits of shape
    /// `[N, C, H/2^i, W/2^i]` for every supervised block `X^{i,j}`.
    pub fn forward(&self, g: &mut Graph<F>, input: Var, mode: Mode) -> Result<LearnerOutput<F>> {
        let (_, c, h, w) = g.value(input).dims4();
        let div = 1usize << self.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::InputSize { height: h, width: w, divisor: div });
        }
        if c != self.net.arch.image_channels {
            return Err(Error::Dimension(format!(
                "learner expects {} image channels, got {c}",
                self.net.arch.image_channels
            )));
        }
        let mut binder = Binder { net: self.net, mode, trainable: BTreeMap::new() };
        let mut features = BTreeMap::new();
        let mut bn_stats = Vec::new();
        let d = self.depth;

        let mut encoders = Vec::with_capacity(d + 1);
        let mut x = input;
        for i in 0..=d {
            if i > 0 {
                x = g.max_pool2(x)?;
            }
            x = self.block(g, &mut binder, BlockId::new(i, 0), x, &mut bn_stats)?;
            features.insert(BlockId::new(i, 0), x);
            encoders.push(x);
        }

        let mut prev = encoders[d];
        for j in 1..=d {
            let id = BlockId::new(d - j, j);
            let p = id.prefix();
            let up_w = binder.bind(g, &format!("{p}.up.weight"))?;
            let up_b = binder.bind(g, &format!("{p}.up.bias"))?;
            let up = match self.net.arch.upsampling {
                Upsampling::Transposed => g.conv_transpose2x2(prev, up_w, up_b)?,
                Upsampling::Bilinear => {
                    let (_, _, ph, pw) = g.value(prev).dims4();
                    let r = g.resize_bilinear(prev, 2 * ph, 2 * pw);
                    g.conv2d(r, up_w, Some(up_b))?
                }
            };
            let mut skip = encoders[id.level];
            if self.net.arch.scse && self.net.params.contains(&format!("{p}.gate.spatial")) {
                let gate = ScseVars {
                    spatial: binder.bind(g, &format!("{p}.gate.spatial"))?,
                    squeeze: binder.bind(g, &format!("{p}.gate.squeeze"))?,
                    excite: binder.bind(g, &format!("{p}.gate.excite"))?,
                };
                skip = scse_forward(g, skip, &gate, self.net.arch.scse_combine)?;
            }
            let cat = g.concat_channels(skip, up)?;
            prev = self.block(g, &mut binder, id, cat, &mut bn_stats)?;
            features.insert(id, prev);
        }

        let mut logits = BTreeMap::new();
        for id in self.heads() {
            let p = id.prefix();
            let hw = binder.bind(g, &format!("{p}.head.weight"))?;
            let hb = binder.bind(g, &format!("{p}.head.bias"))?;
            let z = g.conv2d(features[&id], hw, Some(hb))?;
            logits.insert(id, z);
        }
        if mode == Mode::Train && self.net.is_trainable(&eta_name(d)) && self.net.arch.deep_supervision {
            binder.bind(g, &eta_name(d))?;
        }
        Ok(LearnerOutput { logits, features, trainable: binder.trainable, bn_stats })
    }

    /// Evaluation-mode per-block probability maps for a batch of images.
    pub fn predict_blocks(&self, images: &Tensor<F>) -> Result<BTreeMap<BlockId, Tensor<F>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(out.logits.iter().map(|(id, v)| (*id, softmax_channels(g.value(*v)))).collect())
    }
}
