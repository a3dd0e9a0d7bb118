use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Real;

/// Grid position `(i, j)` of a convolution block: `level` is the resolution
/// index (spatial size `H/2^i`), `column` the decoder column (0 for encoders).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub level: usize,
    pub column: usize,
}

impl BlockId {
    pub const fn new(level: usize, column: usize) -> Self {
        Self { level, column }
    }

    pub fn is_encoder(&self) -> bool {
        self.column == 0
    }

    /// Depth of the learner that creates this block (`i + j`).
    pub fn stage(&self) -> usize {
        self.level + self.column
    }

    /// Prefix used for every parameter owned by the block.
    pub fn prefix(&self) -> String {
        format!("b{}_{}", self.level, self.column)
    }

    pub fn parse_prefix(name: &str) -> Option<Self> {
        let rest = name.strip_prefix('b')?;
        let head = rest.split('.').next()?;
        let (i, j) = head.split_once('_')?;
        Some(Self::new(i.parse().ok()?, j.parse().ok()?))
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "X^{{{},{}}}", self.level, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Encoder,
    Bottleneck,
    Decoder,
}

impl BlockRole {
    /// Role of `id` inside the learner of depth `depth`.
    pub fn of(id: BlockId, depth: usize) -> Self {
        match (id.column, id.level == depth) {
            (0, true) => BlockRole::Bottleneck,
            (0, false) => BlockRole::Encoder,
            _ => BlockRole::Decoder,
        }
    }
}

/// Filter count at resolution level `i`: `base × 2^i`.
pub fn level_channels(base_filters: usize, level: usize) -> usize {
    base_filters << level
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub role: BlockRole,
    pub grid_index: BlockId,
}

impl ConvBlockSpec {
    /// Channel layout of block `id` for an image with `image_channels` channels.
    pub fn for_block(id: BlockId, depth: usize, image_channels: usize, base_filters: usize) -> Self {
        let out_channels = level_channels(base_filters, id.level);
        let in_channels = match (id.level, id.column) {
            (0, 0) => image_channels,
            (i, 0) => level_channels(base_filters, i - 1),
            // skip features concatenated with the upsampled deeper block
            _ => 2 * out_channels,
        };
        Self { in_channels, out_channels, role: BlockRole::of(id, depth), grid_index: id }
    }
}

/// Batch-norm parameters of one layer. `running` selects evaluation-mode
/// normalization with stored statistics; `None` normalizes with batch statistics.
pub struct BatchNormVars<'a, F> {
    pub gamma: Var,
    pub beta: Var,
    pub running: Option<(&'a [F], &'a [F])>,
}

pub struct ConvBlockVars<'a, F> {
    pub conv1: Var,
    pub bn1: Option<BatchNormVars<'a, F>>,
    pub conv2: Var,
    pub bn2: Option<BatchNormVars<'a, F>>,
}

pub const BN_EPS: f64 = 1e-5;

/// Two 3×3 convolutions (unit padding), each followed by batch norm and ReLU.
/// Returns the output and the batch statistics of any training-mode norm layers
/// (`[first, second]`, `None` where running statistics were used).
pub fn conv_block_forward<F: Real>(
    g: &mut Graph<F>,
    input: Var,
    spec: &ConvBlockSpec,
    vars: &ConvBlockVars<'_, F>,
) -> Result<(Var, [Option<BatchStats<F>>; 2])> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != spec.in_channels {
        return Err(Error::Dimension(format!(
            "block {} expects {} input channels, got input of shape {shape:?}",
            spec.grid_index, spec.in_channels
        )));
    }
    let mut stats = [None, None];
    let mut x = input;
    for (slot, (conv, bn)) in [(vars.conv1, &vars.bn1), (vars.conv2, &vars.bn2)].into_iter().enumerate() {
        x = g.conv2d(x, conv, None).map_err(|e| {
            Error::Dimension(format!("block {}: {e}", spec.grid_index))
        })?;
        if let Some(bn) = bn {
            x = match bn.running {
                Some((mean, var)) => {
                    g.batch_norm_eval(x, bn.gamma, bn.beta, mean, var, F::lit(BN_EPS))
                }
                None => {
                    let (y, s) = g.batch_norm_train(x, bn.gamma, bn.beta, F::lit(BN_EPS));
                    stats[slot] = Some(s);
                    y
                }
            };
        }
        x = g.relu(x);
    }
    Ok((x, stats))
}
