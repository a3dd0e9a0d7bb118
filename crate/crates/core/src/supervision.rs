//! Deep supervision with average-pooled masks and learnable block weights.
//!
//! Each supervised block `X^{i,j}` of a depth-`d` learner is scored against the
//! ground-truth mask average-pooled by `2^i`. Block losses are mixed by
//! `η = softmax(raw)` or by its bounded form `η̃ = η/2 + 1/(2(d+1))`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bound_eta, resize_bilinear, softmax_vec};
use crate::model::{supervised_blocks, BlockId};
use crate::tensor::{Real, Tensor};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// Loss weights `η`; the learner predicts with its largest-`η` block.
    Unconstrained,
    /// Loss weights `η̃`; the learner predicts with its largest-`η̃` block.
    Bounded,
    /// Loss weights `η̃`; the learner predicts with the `η̃`-weighted sum of all blocks.
    #[default]
    BoundedSum,
}

impl EtaMode {
    pub fn is_bounded(self) -> bool {
        !matches!(self, EtaMode::Unconstrained)
    }
}

/// Target representation after pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Fractional class mass straight from average pooling.
    #[default]
    Soft,
    /// Pooled masks re-hardened by per-pixel argmax.
    Hard,
}

/// Average-pooled mask: `values` is `[N, C, H/scale, W/scale]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<F> {
    pub values: Tensor<F>,
    pub scale: usize,
}

/// One-hot encodes a label map into `[C, H, W]`.
pub fn one_hot<F: Real>(labels: &[u8], height: usize, width: usize, classes: usize) -> Result<Tensor<F>> {
    if labels.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} labels for a {height}x{width} mask",
            labels.len()
        )));
    }
    let hw = height * width;
    let mut t = Tensor::zeros(&[classes, height, width]);
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::InvalidMask(format!("label {l} outside 0..{classes}")));
        }
        t.data_mut()[l * hw + p] = F::one();
    }
    Ok(t)
}

/// Per-pixel argmax of a `[C, H, W]` map, ties toward the lowest class index.
pub fn argmax_labels<F: Real>(map: &Tensor<F>) -> Vec<u8> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let hw = h * w;
    let d = map.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for ci in 1..c {
                if d[ci * hw + p] > d[best * hw + p] {
                    best = ci;
                }
            }
            best as u8
        })
        .collect()
}

fn check_one_hot<F: Real>(mask: &Tensor<F>) -> Result<()> {
    let (n, c, h, w) = mask.dims4();
    let hw = h * w;
    for ni in 0..n {
        let s = mask.sample(ni);
        for p in 0..hw {
            let mut ones = 0;
            for ci in 0..c {
                let v = s[ci * hw + p];
                if v == F::one() {
                    ones += 1;
                } else if v != F::zero() {
                    return Err(Error::InvalidMask(format!("non-binary value {v} at sample {ni} pixel {p}")));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidMask(format!("pixel {p} of sample {ni} has {ones} active classes")));
            }
        }
    }
    Ok(())
}

/// Mean over non-overlapping `factor × factor` windows, per channel. No validation.
pub fn avg_pool<F: Real>(mask: &Tensor<F>, factor: usize) -> Tensor<F> {
    let (n, c, h, w) = mask.dims4();
    if factor == 1 {
        return mask.clone();
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = F::one() / F::from_usize(factor * factor).unwrap();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = mask.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let plane = &src[nc * h * w..][..h * w];
        let o = &mut dst[nc * oh * ow..][..oh * ow];
        for y in 0..h {
            let row = &plane[y * w..][..w];
            let orow = &mut o[(y / factor) * ow..][..ow];
            for (x, &v) in row.iter().enumerate() {
                orow[x / factor] += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Average-pools a one-hot `[N, C, H, W]` mask by `factor` (a power of two).
pub fn downsample_mask<F: Real>(onehot: &Tensor<F>, factor: usize) -> Result<SoftMask<F>> {
    let (_, _, h, w) = onehot.dims4();
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("factor {factor} is not a power of two")));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InputSize { height: h, width: w, divisor: factor });
    }
    check_one_hot(onehot)?;
    Ok(SoftMask { values: avg_pool(onehot, factor), scale: factor })
}

/// Replaces each pixel's class mass by the one-hot of its argmax.
pub fn harden<F: Real>(soft: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = soft.dims4();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        let labels = argmax_labels(&soft.index0(ni));
        let hw = h * w;
        let dst = out.sample_mut(ni);
        for (p, &l) in labels.iter().enumerate() {
            dst[l as usize * hw + p] = F::one();
        }
    }
    out
}

/// Pixel-wise (optionally class-weighted) cross-entropy
/// `-(1/N) Σ_n Σ_c w_c y_{n,c} log ŷ_{n,c}`, averaged over every pixel of the batch.
pub fn block_loss<F: Real>(probs: &Tensor<F>, target: &SoftMask<F>, class_weights: Option<&[F]>) -> Result<F> {
    if probs.shape() != target.values.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            probs.shape(),
            target.values.shape()
        )));
    }
    let (n, c, h, w) = probs.dims4();
    if let Some(cw) = class_weights {
        if cw.len() != c {
            return Err(Error::Dimension(format!("{} class weights for {c} classes", cw.len())));
        }
    }
    let hw = h * w;
    let floor = F::lit(PROB_FLOOR);
    let mut total = F::zero();
    for ni in 0..n {
        let (p, y) = (probs.sample(ni), target.values.sample(ni));
        for ci in 0..c {
            let wc = class_weights.map_or(F::one(), |cw| cw[ci]);
            for i in ci * hw..(ci + 1) * hw {
                if y[i] != F::zero() {
                    total -= wc * y[i] * p[i].max(floor).ln();
                }
            }
        }
    }
    Ok(total / F::from_usize(n * hw).unwrap())
}

/// Trainable block-importance weights of one learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaWeights {
    pub raw_logits: Vec<f64>,
    pub mode: EtaMode,
}

impl EtaWeights {
    /// Zero logits, i.e. `η = 1/(d+1)` for every block.
    pub fn uniform(depth: usize, mode: EtaMode) -> Self {
        Self { raw_logits: vec![0.0; depth + 1], mode }
    }

    pub fn depth(&self) -> usize {
        self.raw_logits.len() - 1
    }

    /// `η = softmax(raw)`.
    pub fn eta(&self) -> Vec<f64> {
        softmax_vec(&self.raw_logits)
    }

    /// `η̃ = η/2 + 1/(2(d+1))`.
    pub fn eta_tilde(&self) -> Vec<f64> {
        bound_eta(&self.eta())
    }

    /// Loss (and prediction) weights for the configured mode.
    pub fn weights(&self) -> Vec<f64> {
        if self.mode.is_bounded() {
            self.eta_tilde()
        } else {
            self.eta()
        }
    }

    /// Closed bounds `[1/(2(d+1)), (d+2)/(2(d+1))]` of every `η̃` entry.
    pub fn tilde_bounds(depth: usize) -> (f64, f64) {
        let k = 2.0 * (depth as f64 + 1.0);
        (1.0 / k, (depth as f64 + 2.0) / k)
    }

    /// Block with the largest weight (lowest column on ties).
    pub fn dominant_block(&self) -> BlockId {
        let w = self.weights();
        let mut best = 0;
        for (k, v) in w.iter().enumerate() {
            if *v > w[best] {
                best = k;
            }
        }
        supervised_blocks(self.depth())[best]
    }
}

/// Bounded reparameterization `η̃` of the weights, regardless of mode.
pub fn constrain_eta(eta: &EtaWeights) -> Vec<f64> {
    eta.eta_tilde()
}

/// Weighted sum of per-block losses (`η̃` in bounded modes, `η` otherwise).
pub fn combined_loss(block_losses: &[f64], eta: &EtaWeights) -> Result<f64> {
    let w = eta.weights();
    if w.len() != block_losses.len() {
        return Err(Error::Dimension(format!(
            "{} block losses for {} weights",
            block_losses.len(),
            w.len()
        )));
    }
    Ok(w.iter().zip(block_losses).map(|(a, b)| a * b).sum())
}

/// Full-resolution prediction of one learner from its block probability maps
/// (`[N, C, h, w]` each, keyed by block).
///
/// In `BoundedSum` mode every map is bilinearly resized to `target` and mixed
/// by `η̃`; in the other modes the single block with the largest weight is used.
pub fn combined_prediction<F: Real>(
    block_probs: &BTreeMap<BlockId, Tensor<F>>,
    eta: &EtaWeights,
    target: (usize, usize),
) -> Result<Tensor<F>> {
    let blocks = supervised_blocks(eta.depth());
    let fetch = |id: &BlockId| {
        block_probs
            .get(id)
            .ok_or_else(|| Error::Dimension(format!("missing probability map for block {id}")))
    };
    match eta.mode {
        EtaMode::BoundedSum => {
            let weights = eta.eta_tilde();
            let mut acc: Option<Tensor<F>> = None;
            for (id, w) in blocks.iter().zip(weights) {
                let up = resize_bilinear(fetch(id)?, target.0, target.1).scale(F::lit(w));
                match acc.as_mut() {
                    Some(a) => {
                        if a.shape() != up.shape() {
                            return Err(Error::Dimension(format!(
                                "block {id} map {:?} vs {:?}",
                                up.shape(),
                                a.shape()
                            )));
                        }
                        a.add_assign(&up)
                    }
                    None => acc = Some(up),
                }
            }
            Ok(acc.expect("at least one supervised block"))
        }
        EtaMode::Unconstrained | EtaMode::Bounded => {
            let id = eta.dominant_block();
            Ok(resize_bilinear(fetch(&id)?, target.0, target.1))
        }
    }
}
