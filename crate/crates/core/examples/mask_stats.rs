//! Fraction of pooling windows that mix labels, for tiled windows (the
//! pooling grid) and unit-stride windows, on random rectangle masks.
//!
//! cargo run --release --example mask_stats -- [masks] [size]

use ads_unet::analysis::{incorrect_label_ratio, WindowPlacement};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(100, |s| s.parse().expect("masks"));
    let size: usize = args.next().map_or(64, |s| s.parse().expect("size"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let masks: Vec<Vec<u8>> = (0..count)
        .map(|_| {
            let mut m = vec![0u8; size * size];
            for _ in 0..rng.gen_range(1..8) {
                let (y0, x0) = (rng.gen_range(0..size), rng.gen_range(0..size));
                let (h, w) = (rng.gen_range(1..=size - y0), rng.gen_range(1..=size - x0));
                let c = rng.gen_range(0..4);
                for y in y0..y0 + h {
                    m[y * size..][x0..x0 + w].fill(c);
                }
            }
            m
        })
        .collect();
    let refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    for placement in [WindowPlacement::Tiled, WindowPlacement::UnitStride] {
        let r = incorrect_label_ratio(&refs, size, size, &[2, 4, 8, 16], placement)?;
        let cells: Vec<String> = r.factors.iter().map(|f| format!("x{}: {:.2}%", f.factor, 100.0 * f.ratio)).collect();
        println!("{placement:?}: {}", cells.join("  "));
    }
    Ok(())
}
