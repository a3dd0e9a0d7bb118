//! Concurrent spatial and channel squeeze-and-excitation recalibration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// How the spatially and channel-wise recalibrated maps are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScseCombine {
    #[default]
    Max,
    Add,
}

/// Width of the channel-excitation bottleneck: `max(1, ⌊C/2⌋)`.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 2).max(1)
}

/// Gate weights for `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScseGate<F> {
    /// `[1, C, 1, 1]`: per-location channel squeeze producing the spatial map `q`.
    pub spatial: Tensor<F>,
    /// `[C/2, C]`: first fully connected layer applied to the pooled descriptor.
    pub squeeze: Tensor<F>,
    /// `[C, C/2]`: second fully connected layer restoring `C` channel gates.
    pub excite: Tensor<F>,
}

impl<F: Real> ScseGate<F> {
    pub fn channels(&self) -> usize {
        self.spatial.shape()[1]
    }

    /// He-uniform initialization.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let r = reduced_channels(channels);
        Self {
            spatial: he_uniform(&[1, channels, 1, 1], channels, rng),
            squeeze: he_uniform(&[r, channels], channels, rng),
            excite: he_uniform(&[channels, r], r, rng),
        }
    }

    /// Runs the gate on a single NCHW tensor outside of training.
    pub fn apply(&self, input: &Tensor<F>, combine: ScseCombine) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let vars = ScseVars {
            spatial: g.constant(self.spatial.clone()),
            squeeze: g.constant(self.squeeze.clone()),
            excite: g.constant(self.excite.clone()),
        };
        let y = scse_forward(&mut g, x, &vars, combine)?;
        Ok(g.value(y).clone())
    }
}

pub(crate) fn he_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

#[derive(Debug, Clone, Copy)]
pub struct ScseVars {
    pub spatial: Var,
    pub squeeze: Var,
    pub excite: Var,
}

/// `combine(σ(q) ⊙ U, σ(ẑ) ⊙ U)` with `q = W_sq · U` per location and
/// `ẑ = W_excite · ReLU(W_squeeze · mean_{h,w} U)`.
pub fn scse_forward<F: Real>(
    g: &mut Graph<F>,
    input: Var,
    gate: &ScseVars,
    combine: ScseCombine,
) -> Result<Var> {
    let shape = g.value(input).shape().to_vec();
    let gate_c = g.value(gate.spatial).shape()[1];
    let r = reduced_channels(gate_c);
    if shape.len() != 4
        || shape[1] != gate_c
        || g.value(gate.squeeze).shape() != [r, gate_c]
        || g.value(gate.excite).shape() != [gate_c, r]
    {
        return Err(Error::Dimension(format!(
            "scSE gate for {gate_c} channels applied to input {shape:?}"
        )));
    }
    let q = g.conv2d(input, gate.spatial, None)?;
    let spatial_gate = g.sigmoid(q);
    let spatial = g.mul_spatial(input, spatial_gate);

    let z = g.global_avg_pool(input);
    let hidden = g.linear(z, gate.squeeze)?;
    let hidden = g.relu(hidden);
    let z_hat = g.linear(hidden, gate.excite)?;
    let channel_gate = g.sigmoid(z_hat);
    let channel = g.mul_channel(input, channel_gate);

    Ok(match combine {
        ScseCombine::Max => g.maximum(spatial, channel),
        ScseCombine::Add => g.add(spatial, channel),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduction_floor_and_minimum() {
        assert_eq!(reduced_channels(1), 1);
        assert_eq!(reduced_channels(2), 1);
        assert_eq!(reduced_channels(5), 2);
        assert_eq!(reduced_channels(64), 32);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let gate = ScseGate::<f64>::init(4, &mut ChaCha8Rng::seed_from_u64(0));
        let out = gate.apply(&Tensor::zeros(&[2, 4, 3, 3]), ScseCombine::Max).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_pass_input_through() {
        let c = 3;
        let gate = ScseGate {
            spatial: Tensor::full(&[1, c, 1, 1], 50.0),
            squeeze: Tensor::full(&[1, c], 10.0),
            excite: Tensor::full(&[c, 1], 10.0),
        };
        // positive input so both pre-activations are large and positive
        let input = Tensor::from_vec(&[1, c, 2, 2], (1..=12).map(|v| v as f64 / 4.0).collect()).unwrap();
        let out = gate.apply(&input, ScseCombine::Max).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let gate = ScseGate::<f64>::init(4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(gate.apply(&Tensor::zeros(&[1, 3, 2, 2]), ScseCombine::Max), Err(Error::Dimension(_))));
    }

    /// Scalar-by-scalar evaluation of both recalibration paths on a 2×2×2 map.
    #[test]
    fn matches_hand_evaluation() {
        let u: [f64; 8] = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.1, -2.0]; // [c][h][w]
        let spatial: [f64; 2] = [0.3, -0.6];
        let squeeze: [f64; 2] = [0.8, -0.4]; // 1×2
        let excite: [f64; 2] = [1.2, -0.7]; // 2×1
        let gate = ScseGate {
            spatial: Tensor::from_vec(&[1, 2, 1, 1], spatial.to_vec()).unwrap(),
            squeeze: Tensor::from_vec(&[1, 2], squeeze.to_vec()).unwrap(),
            excite: Tensor::from_vec(&[2, 1], excite.to_vec()).unwrap(),
        };
        let out = gate.apply(&Tensor::from_vec(&[1, 2, 2, 2], u.to_vec()).unwrap(), ScseCombine::Max).unwrap();

        let z = [(u[0] + u[1] + u[2] + u[3]) / 4.0, (u[4] + u[5] + u[6] + u[7]) / 4.0];
        let hidden = (squeeze[0] * z[0] + squeeze[1] * z[1]).max(0.0);
        let cgate = [sigmoid(excite[0] * hidden), sigmoid(excite[1] * hidden)];
        for c in 0..2 {
            for p in 0..4 {
                let q = spatial[0] * u[p] + spatial[1] * u[4 + p];
                let v = u[c * 4 + p];
                let want = (sigmoid(q) * v).max(cgate[c] * v);
                assert!((out.data()[c * 4 + p] - want).abs() < 1e-14);
            }
        }
    }
}
