//! Recalibrate a feature map with a spatial and channel squeeze-and-excitation
//! gate and show how the two branches reweight it.
//!
//! cargo run --release --example scse_gate

use ads_unet::model::{ScseCombine, ScseGate};
use ads_unet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ads_unet::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w) = (8, 6, 6);
    let x = Tensor::<f32>::from_vec(&[1, c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let gate = ScseGate::<f32>::init(c, &mut rng);
    for combine in [ScseCombine::Max, ScseCombine::Add] {
        let y = gate.apply(&x, combine)?;
        let ratio: Vec<f32> = (0..c)
            .map(|k| {
                let (a, b) = (&x.data()[k * h * w..][..h * w], &y.data()[k * h * w..][..h * w]);
                b.iter().map(|v| v.abs()).sum::<f32>() / a.iter().map(|v| v.abs()).sum::<f32>()
            })
            .collect();
        println!("{combine:?}: per-channel output/input magnitude {ratio:.3?}");
    }
    Ok(())
}
