//! Generate the procedural Voronoi texture dataset and report how mixed its
//! masks become under average pooling.
//!
//! cargo run --release --example gen_synthetic -- [out_dir] [seed]

use std::path::PathBuf;

use ads_unet::analysis::{incorrect_label_ratio, WindowPlacement};
use ads_unet::data::{class_weights, generate_synthetic, load_dataset, Split, SyntheticSpec};

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));

    let spec = SyntheticSpec { seed, ..Default::default() };
    let manifest = generate_synthetic(&spec, &out)?;
    println!("{}: {} train / {} test tiles of {}px, {} classes", out.display(), manifest.train.len(), manifest.test.len(), manifest.tile_size, manifest.classes);
    println!("channel mean {:.3?} std {:.3?}", manifest.mean, manifest.std);

    let train = load_dataset(&out, &manifest, Split::Train)?;
    let masks = train.label_maps();
    println!("class weights {:.3?}", class_weights(&masks, train.classes)?);
    let t = manifest.tile_size;
    let report = incorrect_label_ratio(&masks, t, t, &[2, 4, 8, 16], WindowPlacement::Tiled)?;
    for f in &report.factors {
        println!("factor {:>2}: {:.1}% of pooled pixels mix labels", f.factor, 100.0 * f.ratio);
    }
    Ok(())
}
