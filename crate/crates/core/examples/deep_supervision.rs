//! Train one depth-4 learner with and without supervision of its hidden
//! blocks and compare held-out mIoU, plus the learned block weights.
//!
//! cargo run --release --example deep_supervision -- [train_tiles] [epochs]

use ads_unet::config::ModelConfig;
use ads_unet::data::{generate_synthetic, load_dataset, Split, SyntheticSpec};
use ads_unet::model::NestedUNet;
use ads_unet::supervision::{argmax_labels, EtaMode, EtaWeights};
use ads_unet::train::{pooled_miou, predict_dataset, TrainSettings, Trainer};

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let tiles: usize = args.next().map_or(100, |s| s.parse().expect("tiles"));
    let epochs: usize = args.next().map_or(10, |s| s.parse().expect("epochs"));
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = generate_synthetic(&SyntheticSpec { train_tiles: tiles, test_tiles: 100, ..Default::default() }, dir.path())?;
    let train = load_dataset(dir.path(), &manifest, Split::Train)?;
    let test = load_dataset(dir.path(), &manifest, Split::Test)?;
    for ds in [true, false] {
        let model = ModelConfig { deep_supervision: ds, ..Default::default() };
        let net = NestedUNet::new(model.arch(manifest.channels, manifest.classes));
        let mut t = Trainer::new(net, &train, TrainSettings { epochs, ..Default::default() }, 0)?;
        let report = t.train_standalone(4)?;
        let maps = predict_dataset(&t.net, 4, EtaMode::BoundedSum, &test, 16)?;
        let labels: Vec<Vec<u8>> = maps.iter().map(argmax_labels).collect();
        let miou = pooled_miou(&labels, &test.label_maps(), test.classes);
        print!("deep supervision {ds}: test mIoU {miou:.4}");
        if ds {
            let w = EtaWeights { raw_logits: report.eta.last().unwrap().raw.clone(), mode: EtaMode::BoundedSum };
            print!(", block weights {:.3?}", w.eta_tilde());
        }
        println!();
    }
    Ok(())
}
