//! Walk through the boosting bookkeeping: weighted error, learner weight,
//! sample re-weighting, and a discarded learner that leaves everything as is.
//!
//! cargo run --release --example boosting_ledger

use ads_unet::boosting::{ensemble_combine, BoostState};
use ads_unet::tensor::Tensor;

fn main() -> ads_unet::error::Result<()> {
    let classes = 4;
    let mut state = BoostState::new(5);
    let stages = [
        vec![0.9, 0.8, 0.4, 0.95, 0.7],
        vec![0.85, 0.9, 0.6, 0.9, 0.5],
        vec![0.1, 0.05, 0.2, 0.1, 0.0],
    ];
    for (d, scores) in stages.iter().enumerate() {
        let v = state.record(d + 1, scores.clone(), classes, true)?;
        println!(
            "stage {}: eps {:.4} alpha {:.4} {} weights {:.4?}",
            d + 1,
            v.error,
            v.alpha,
            if v.accepted { "kept     " } else { "discarded" },
            state.sample_weights
        );
    }
    // a two-pixel, two-class map per learner: alpha-weighted vote
    let maps: Vec<Tensor<f64>> = [[0.7, 0.4], [0.2, 0.45], [0.0, 0.0]]
        .iter()
        .map(|p| Tensor::from_vec(&[2, 1, 2], vec![p[0], p[1], 1.0 - p[0], 1.0 - p[1]]).unwrap())
        .collect();
    let items: Vec<(f64, &Tensor<f64>)> = state.alphas.iter().copied().zip(&maps).collect();
    let (probs, labels) = ensemble_combine(&items)?;
    println!("ensemble class-0 probability {:.3?}, labels {labels:?}", &probs.data()[..2]);
    Ok(())
}
