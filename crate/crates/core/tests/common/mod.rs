//! Independent reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use ads_unet::graph::Graph;
use ads_unet::model::{ArchConfig, NestedUNet};
use ads_unet::supervision::{EtaMode, TargetKind};
use ads_unet::tensor::Tensor;
use ads_unet::train::{learner_loss, LossTerms};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ_k w_k (1 − s_k)` by plain accumulation.
pub fn error_oracle(scores: &[f64], weights: &[f64]) -> f64 {
    let mut e = 0.0;
    for k in 0..scores.len() {
        e += weights[k] * (1.0 - scores[k]);
    }
    e
}

/// Multi-class learner weight from the log-difference form.
pub fn alpha_oracle(eps: f64, classes: usize) -> f64 {
    if eps >= 1.0 - 1.0 / classes as f64 {
        return 0.0;
    }
    let e = eps.max(1e-6).min(1.0 - 1e-6);
    0.5 * ((1.0 - e).ln() - e.ln()) + ((classes - 1) as f64).ln()
}

pub fn reweight_oracle(weights: &[f64], scores: &[f64]) -> Vec<f64> {
    let mut raw = Vec::new();
    let mut z = 0.0;
    for k in 0..weights.len() {
        let v = weights[k] * (1.0 - scores[k]).exp();
        z += v;
        raw.push(v);
    }
    raw.iter().map(|v| v / z).collect()
}

/// Mean IoU over classes with a non-empty union, from an explicit confusion matrix.
pub fn confusion_miou(pred: &[u8], target: &[u8], classes: usize) -> f64 {
    let mut cm = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(target) {
        cm[t as usize][p as usize] += 1;
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let tp = cm[c][c];
        let row: u64 = cm[c].iter().sum();
        let col: u64 = (0..classes).map(|r| cm[r][c]).sum();
        let union = row + col - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        1.0
    } else {
        sum / present as f64
    }
}

/// Line-by-line port of the published counting listing (windows start at
/// `(i, j)` for `i < H/f`, `j < W/f`). Returns the mixed-window count.
pub fn listing_count(mask: &[u8], size: usize, f: usize) -> usize {
    let mut err = 0;
    let (row, col) = (size / f, size / f);
    for i in 0..row {
        for j in 0..col {
            let mut uniq: Vec<u8> = Vec::new();
            for y in i..i + f {
                for x in j..j + f {
                    let v = mask[y * size + x];
                    if !uniq.contains(&v) {
                        uniq.push(v);
                    }
                }
            }
            if uniq.len() > 1 {
                err += 1;
            }
        }
    }
    err
}

/// Same listing with windows placed at `(i·f, j·f)`, matching the pooling grid.
pub fn tiled_count(mask: &[u8], size: usize, f: usize) -> usize {
    let mut err = 0;
    for i in 0..size / f {
        for j in 0..size / f {
            let mut uniq = std::collections::BTreeSet::new();
            for y in i * f..(i + 1) * f {
                for x in j * f..(j + 1) * f {
                    uniq.insert(mask[y * size + x]);
                }
            }
            err += (uniq.len() > 1) as usize;
        }
    }
    err
}

/// Random label map made of a few axis-aligned rectangles over a background.
pub fn random_mask(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> Vec<u8> {
    let mut m = vec![rng.gen_range(0..classes) as u8; size * size];
    for _ in 0..rng.gen_range(0..6) {
        let (y0, x0) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let (h, w) = (rng.gen_range(1..=size - y0), rng.gen_range(1..=size - x0));
        let c = rng.gen_range(0..classes) as u8;
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                m[y * size + x] = c;
            }
        }
    }
    if rng.gen_bool(0.2) {
        for v in m.iter_mut() {
            *v = rng.gen_range(0..classes) as u8;
        }
    }
    m
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let qr = gaussian(rng, n, n).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_eta: f64,
    pub max_rel_conv: f64,
}

/// Gradient check of the depth-2 deeply supervised loss of an `8×8`, two-class
/// toy model in `f64`: all block-weight logits plus `conv_samples` convolution
/// weights drawn at random, against central differences with step `h`.
pub fn gradient_check(mode: EtaMode, conv_samples: usize, h: f64, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut arch = ArchConfig::small(1, 2, 2);
    arch.base_filters = 2;
    let mut net = NestedUNet::<f64>::new(arch);
    net.init_stage(1, &mut r).unwrap();
    net.freeze_stage(1).unwrap();
    net.init_stage(2, &mut r).unwrap();
    // move the block-weight logits away from the symmetric start
    for v in net.params.get_mut("eta.d2").unwrap().data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    let n = 2;
    let images = Tensor::from_vec(&[n, 1, 8, 8], (0..n * 64).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut masks = Tensor::zeros(&[n, 2, 8, 8]);
    for k in 0..n * 64 {
        let c: usize = r.gen_range(0..2);
        let (s, p) = (k / 64, k % 64);
        masks.data_mut()[(s * 2 + c) * 64 + p] = 1.0;
    }
    let scales = [0.7, 1.3];
    let class_weights = [0.4, 0.6];
    let terms = LossTerms { eta_mode: mode, targets: TargetKind::Soft, sample_scale: &scales, class_weights: Some(&class_weights) };

    let loss_of = |net: &NestedUNet<f64>| {
        let mut g = Graph::new();
        let (total, _) = learner_loss(&mut g, net, 2, images.clone(), &masks, &terms).unwrap();
        g.value(total).item()
    };
    let mut g = Graph::new();
    let (total, out) = learner_loss(&mut g, &net, 2, images.clone(), &masks, &terms).unwrap();
    let grads = g.backward(total);
    let analytic = |name: &str, k: usize| grads.get(out.trainable[name]).map_or(0.0, |t| t.data()[k]);

    let mut targets: Vec<(String, usize)> = (0..3).map(|k| ("eta.d2".to_string(), k)).collect();
    let convs: Vec<(String, usize)> = net
        .params
        .iter()
        .filter(|(name, _)| (name.ends_with("conv1.weight") || name.ends_with("conv2.weight")) && net.is_trainable(name))
        .map(|(name, t)| (name.clone(), t.len()))
        .collect();
    for _ in 0..conv_samples {
        let (name, len) = &convs[r.gen_range(0..convs.len())];
        targets.push((name.clone(), r.gen_range(0..*len)));
    }

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
    let mut out_check = GradCheck { checked: targets.len(), max_rel_eta: 0.0, max_rel_conv: 0.0 };
    let mut probe = net.clone();
    for (name, k) in &targets {
        let base = probe.params.get(name).unwrap().data()[*k];
        probe.params.get_mut(name).unwrap().data_mut()[*k] = base + h;
        let up = loss_of(&probe);
        probe.params.get_mut(name).unwrap().data_mut()[*k] = base - h;
        let down = loss_of(&probe);
        probe.params.get_mut(name).unwrap().data_mut()[*k] = base;
        let numeric = (up - down) / (2.0 * h);
        let e = rel(analytic(name, *k), numeric);
        if name.starts_with("eta") {
            out_check.max_rel_eta = out_check.max_rel_eta.max(e);
        } else {
            out_check.max_rel_conv = out_check.max_rel_conv.max(e);
        }
    }
    out_check
}
