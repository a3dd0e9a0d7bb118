//! Load a trained run and segment one held-out tile with the ensemble,
//! writing the label map as a grayscale PNG.
//!
//! cargo run --release --example ensemble_predict -- <run_dir> [out.png]

use std::path::PathBuf;

use ads_unet::boosting::EnsembleMode;
use ads_unet::data::{load_dataset, DatasetManifest, Split};
use ads_unet::run::{load_run_config, Ensemble};

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let run = PathBuf::from(args.next().expect("usage: ensemble_predict <run_dir> [out.png]"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "prediction.png".into()));
    let cfg = load_run_config(&run)?;
    let ensemble = Ensemble::load(&run)?;
    let manifest = DatasetManifest::load(&cfg.data.root)?;
    let test = load_dataset(&cfg.data.root, &manifest, Split::Test)?;
    let (images, _) = test.batch(&[0], None)?;
    let (_, labels) = ensemble.predict(&images, EnsembleMode::Alpha)?.remove(0);
    let t = test.tile_size as u32;
    let scale = (255 / (ensemble.classes() - 1).max(1)) as u8;
    let img = image::GrayImage::from_fn(t, t, |x, y| image::Luma([labels[(y * t + x) as usize] * scale]));
    img.save(&out).map_err(|source| ads_unet::error::Error::Image { path: out.clone(), source })?;
    let agree = labels.iter().zip(&test.samples[0].labels).filter(|(a, b)| a == b).count();
    println!("{}: {:.1}% pixel agreement with the mask", out.display(), 100.0 * agree as f64 / labels.len() as f64);
    Ok(())
}
