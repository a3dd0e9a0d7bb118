//! The stage loop: train `UNet^d` on re-weighted samples, score it on the
//! training set, derive `α_d`, update sample weights and freeze on acceptance.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boosting::{alpha_from_error, is_accepted, miou_labels, weighted_error, BoostState, StageVerdict};
use crate::data::{AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{eta_name, learner_blocks, BlockId, LearnerOutput, Mode, NestedUNet};
use crate::optim::{Adam, AdamConfig, OneCycle, Schedule};
use crate::supervision::{argmax_labels, avg_pool, combined_prediction, harden, EtaMode, EtaWeights, TargetKind};
use crate::tensor::{Real, Tensor};

/// How boosting weights enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleWeighting {
    /// Each sample's loss is multiplied by `m · w_k`.
    #[default]
    Scale,
    /// Each epoch draws `m` samples with replacement in proportion to `w_k`.
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Epochs for every stage unless overridden by `epochs_per_stage`.
    pub epochs: usize,
    pub epochs_per_stage: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Learning-rate multiplier for the block-weight logits.
    pub eta_lr_scale: f64,
    pub eta_mode: EtaMode,
    pub targets: TargetKind,
    pub class_weighting: bool,
    pub reweighting: bool,
    pub sample_weighting: SampleWeighting,
    pub augment: bool,
    pub shift_margin: f64,
    pub bn_momentum: f64,
    /// Images per forward pass when scoring or predicting.
    pub eval_batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            epochs_per_stage: Vec::new(),
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-7,
            schedule: Schedule::OneCycle,
            eta_lr_scale: 1.0,
            eta_mode: EtaMode::BoundedSum,
            targets: TargetKind::Soft,
            class_weighting: true,
            reweighting: true,
            sample_weighting: SampleWeighting::Scale,
            augment: true,
            shift_margin: 0.1,
            bn_momentum: 0.1,
            eval_batch_size: 16,
        }
    }
}

impl TrainSettings {
    pub fn epochs_for(&self, stage: usize) -> usize {
        self.epochs_per_stage.get(stage - 1).copied().unwrap_or(self.epochs)
    }

    pub fn augmentation(&self) -> Option<AugmentConfig> {
        self.augment.then_some(AugmentConfig { flips: true, shift_margin: self.shift_margin })
    }
}

/// Stream of randomness for `(seed, stage, epoch)`; independent of how many
/// stages ran before in the same process.
pub fn stage_rng(seed: u64, stage: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

/// Epoch index reserved for parameter initialization streams.
const INIT_EPOCH: usize = u32::MAX as usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
}

/// Block weights of the learner at the end of an epoch (epoch 0 = initial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSnapshot {
    pub epoch: usize,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub epochs: Vec<EpochLog>,
    pub eta: Vec<EtaSnapshot>,
    /// Largest `η` / `η̃` entry seen after any optimizer step.
    pub max_eta_seen: f64,
    pub max_eta_tilde_seen: f64,
    pub min_eta_tilde_seen: f64,
    pub scores: Vec<f64>,
    /// Sample weights the learner was trained with.
    pub weights_used: Vec<f64>,
    pub verdict: StageVerdict,
    pub trainable_parameters: usize,
}

/// Full-resolution probability maps `[N, C, H, W]` of learner `depth`.
pub fn predict_learner<F: Real>(net: &NestedUNet<F>, depth: usize, mode: EtaMode, images: &Tensor<F>) -> Result<Tensor<F>> {
    let learner = net.assemble(depth)?;
    let maps = learner.predict_blocks(images)?;
    let (_, _, h, w) = images.dims4();
    if net.arch.deep_supervision {
        let eta = EtaWeights { raw_logits: eta_raw(net, depth)?, mode };
        combined_prediction(&maps, &eta, (h, w))
    } else {
        maps.get(&BlockId::new(0, depth))
            .cloned()
            .ok_or_else(|| Error::Stage(format!("learner {depth} has no output head")))
    }
}

/// Raw block-weight logits of learner `depth`.
pub fn eta_raw<F: Real>(net: &NestedUNet<F>, depth: usize) -> Result<Vec<f64>> {
    Ok(net.params.get(&eta_name(depth))?.data().iter().map(|v| v.to_f64().unwrap()).collect())
}

/// Probability maps `[C, H, W]` of learner `depth` for every sample, in batches.
pub fn predict_dataset(net: &NestedUNet<f32>, depth: usize, mode: EtaMode, data: &Dataset, batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk, None)?;
        let probs = predict_learner(net, depth, mode, &images)?;
        out.extend((0..chunk.len()).map(|k| probs.index0(k)));
    }
    Ok(out)
}

/// Per-sample mIoU of the argmax of `maps` against the dataset masks.
pub fn score_maps(maps: &[Tensor<f32>], data: &Dataset) -> Result<Vec<f64>> {
    maps.iter()
        .zip(&data.samples)
        .map(|(m, s)| miou_labels(&argmax_labels(m), &s.labels, data.classes))
        .collect()
}

/// Everything besides the batch that shapes the training objective.
pub struct LossTerms<'a, F> {
    pub eta_mode: EtaMode,
    pub targets: TargetKind,
    /// Per-sample loss multipliers, in batch order.
    pub sample_scale: &'a [F],
    pub class_weights: Option<&'a [F]>,
}

/// Builds the training loss of learner `depth` on one batch (train-mode
/// forward): block cross-entropies against average-pooled masks, combined by
/// the block weights, or the final head alone without deep supervision.
pub fn learner_loss<F: Real>(
    g: &mut Graph<F>,
    net: &NestedUNet<F>,
    depth: usize,
    images: Tensor<F>,
    masks: &Tensor<F>,
    terms: &LossTerms<'_, F>,
) -> Result<(Var, LearnerOutput<F>)> {
    let learner = net.assemble(depth)?;
    let x = g.constant(images);
    let out = learner.forward(g, x, Mode::Train)?;
    let mut losses = Vec::new();
    for id in learner.heads() {
        let pooled = avg_pool(masks, 1 << id.level);
        let target = match terms.targets {
            TargetKind::Soft => pooled,
            TargetKind::Hard => harden(&pooled),
        };
        losses.push(g.softmax_cross_entropy(out.logits[&id], &target, terms.sample_scale, terms.class_weights)?);
    }
    let total = if net.arch.deep_supervision {
        let name = eta_name(depth);
        let raw = match out.trainable.get(&name) {
            Some(v) => *v,
            None => g.constant(net.params.get(&name)?.clone()),
        };
        g.eta_weighted_sum(raw, &losses, terms.eta_mode.is_bounded())?
    } else {
        losses[0]
    };
    Ok((total, out))
}

/// Sequential stage-wise trainer owning the shared grid and the boosting ledger.
pub struct Trainer<'a> {
    pub net: NestedUNet<f32>,
    pub boost: BoostState,
    pub settings: TrainSettings,
    pub seed: u64,
    data: &'a Dataset,
    class_weights: Option<Vec<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: NestedUNet<f32>, data: &'a Dataset, settings: TrainSettings, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if data.classes != net.arch.classes || data.channels != net.arch.image_channels {
            return Err(Error::Dimension(format!(
                "dataset has {} classes / {} channels, model expects {} / {}",
                data.classes, data.channels, net.arch.classes, net.arch.image_channels
            )));
        }
        let class_weights = if settings.class_weighting {
            Some(crate::data::class_weights(&data.label_maps(), data.classes)?.into_iter().map(|v| v as f32).collect())
        } else {
            None
        };
        let boost = BoostState::new(data.len());
        Ok(Self { net, boost, settings, seed, data, class_weights })
    }

    /// Resumes from a state restored after stage `boost.stage`.
    pub fn resume(net: NestedUNet<f32>, boost: BoostState, data: &'a Dataset, settings: TrainSettings, seed: u64) -> Result<Self> {
        let mut t = Self::new(net, data, settings, seed)?;
        if boost.sample_weights.len() != data.len() {
            return Err(Error::Stage(format!(
                "saved state covers {} samples, dataset has {}",
                boost.sample_weights.len(),
                data.len()
            )));
        }
        t.boost = boost;
        Ok(t)
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    fn sample_order(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f32>) {
        let m = self.data.len();
        let w = &self.boost.sample_weights;
        match self.settings.sample_weighting {
            SampleWeighting::Resample if self.settings.reweighting => {
                let dist = WeightedIndex::new(w).expect("positive weights");
                ((0..m).map(|_| dist.sample(rng)).collect(), vec![1.0; m])
            }
            _ => {
                let mut order: Vec<usize> = (0..m).collect();
                order.shuffle(rng);
                let scale = if self.settings.reweighting {
                    order.iter().map(|&k| (m as f64 * w[k]) as f32).collect()
                } else {
                    vec![1.0; m]
                };
                (order, scale)
            }
        }
    }

    /// One optimizer step on `indices`; returns the batch loss.
    fn step(&mut self, depth: usize, adam: &mut Adam<f32>, lr: f64, indices: &[usize], scales: &[f32], seeds: &[u64]) -> Result<f64> {
        let aug = self.settings.augmentation();
        let (images, masks) = self.data.batch(indices, aug.as_ref().map(|a| (a, seeds)))?;
        let (loss, grads, stats) = {
            let mut g = Graph::new();
            let objective = LossTerms {
                eta_mode: self.settings.eta_mode,
                targets: self.settings.targets,
                sample_scale: scales,
                class_weights: self.class_weights.as_deref(),
            };
            let (total, out) = learner_loss(&mut g, &self.net, depth, images, &masks, &objective)?;
            let loss = g.value(total).item() as f64;
            let mut grads = g.backward(total);
            let named: Vec<(String, Tensor<f32>)> =
                out.trainable.iter().filter_map(|(n, v)| grads.take(*v).map(|t| (n.clone(), t))).collect();
            (loss, named, out.bn_stats)
        };
        if !loss.is_finite() {
            return Err(Error::Stage(format!("stage {depth} diverged: loss {loss}")));
        }
        adam.begin_step();
        let eta = eta_name(depth);
        for (name, grad) in grads {
            let rate = if name == eta { lr * self.settings.eta_lr_scale } else { lr };
            adam.update(&name, self.net.params.get_mut(&name)?, &grad, rate);
        }
        self.net.update_running_stats(&stats, self.settings.bn_momentum)?;
        Ok(loss)
    }

    /// Trains learner `depth` and folds its training-set scores into the boosting state.
    pub fn train_stage(&mut self, depth: usize) -> Result<StageReport> {
        if depth != self.boost.stage + 1 {
            return Err(Error::Stage(format!(
                "stage {depth} requested but the last completed stage is {}",
                self.boost.stage
            )));
        }
        self.net.init_stage(depth, &mut stage_rng(self.seed, depth, INIT_EPOCH))?;
        let weights_used = self.boost.sample_weights.clone();
        let fit = self.fit(depth)?;
        let scores = self.score(depth)?;
        let verdict = self.boost.record(depth, scores.clone(), self.data.classes, self.settings.reweighting)?;
        if verdict.accepted {
            self.net.freeze_stage(depth)?;
        }
        Ok(fit.into_report(depth, scores, weights_used, verdict))
    }

    /// Trains a single depth-`depth` learner with every block created and
    /// optimized at once, outside the boosting loop. The grid must be empty.
    pub fn train_standalone(&mut self, depth: usize) -> Result<StageReport> {
        if self.boost.stage != 0 {
            return Err(Error::Stage("standalone training needs a fresh trainer".into()));
        }
        self.net.init_standalone(depth, &mut stage_rng(self.seed, depth, INIT_EPOCH))?;
        let weights_used = self.boost.sample_weights.clone();
        let fit = self.fit(depth)?;
        let scores = self.score(depth)?;
        let error = weighted_error(&scores, &weights_used)?;
        let verdict = StageVerdict {
            error,
            alpha: alpha_from_error(error, self.data.classes)?,
            accepted: is_accepted(error, self.data.classes),
        };
        Ok(fit.into_report(depth, scores, weights_used, verdict))
    }

    fn score(&self, depth: usize) -> Result<Vec<f64>> {
        let maps = predict_dataset(&self.net, depth, self.settings.eta_mode, self.data, self.settings.eval_batch_size)?;
        score_maps(&maps, self.data)
    }

    fn fit(&mut self, depth: usize) -> Result<Fit> {
        let trainable_parameters = self
            .net
            .params
            .iter()
            .filter(|(n, _)| {
                self.net.is_trainable(n)
                    && BlockId::parse_prefix(n).map_or(**n == eta_name(depth), |id| learner_blocks(depth).contains(&id))
            })
            .map(|(_, t)| t.len())
            .sum();

        let epochs = self.settings.epochs_for(depth);
        let m = self.data.len();
        let bs = self.settings.batch_size.max(1);
        let steps_per_epoch = m.div_ceil(bs);
        let schedule = OneCycle::new(self.settings.learning_rate, (epochs * steps_per_epoch).max(1));
        let mut adam = Adam::new(AdamConfig { weight_decay: self.settings.weight_decay, ..Default::default() });

        let mode = self.settings.eta_mode;
        let mut fit = Fit {
            epochs: Vec::with_capacity(epochs),
            eta: vec![EtaSnapshot { epoch: 0, raw: eta_raw(&self.net, depth)? }],
            max_eta: 0.0,
            max_eta_tilde: 0.0,
            min_eta_tilde: 1.0,
            trainable_parameters,
        };
        fit.track(mode);

        let mut step = 0usize;
        for epoch in 1..=epochs {
            let mut rng = stage_rng(self.seed, depth, epoch);
            let (order, scales) = self.sample_order(&mut rng);
            let seeds: Vec<u64> = (0..m).map(|_| rng.gen()).collect();
            let (mut total, mut lr_epoch) = (0.0, 0.0);
            for b in 0..steps_per_epoch {
                let range = b * bs..((b + 1) * bs).min(m);
                let lr = match self.settings.schedule {
                    Schedule::OneCycle => schedule.lr(step),
                    Schedule::Constant => self.settings.learning_rate,
                };
                lr_epoch = lr;
                let loss = self.step(depth, &mut adam, lr, &order[range.clone()], &scales[range.clone()], &seeds[range.clone()])?;
                total += loss * range.len() as f64;
                step += 1;
                if self.net.arch.deep_supervision {
                    fit.eta.push(EtaSnapshot { epoch, raw: eta_raw(&self.net, depth)? });
                    fit.track(mode);
                    fit.eta.pop();
                }
            }
            fit.epochs.push(EpochLog { epoch, learning_rate: lr_epoch, train_loss: total / m as f64 });
            fit.eta.push(EtaSnapshot { epoch, raw: eta_raw(&self.net, depth)? });
        }
        Ok(fit)
    }
}

struct Fit {
    epochs: Vec<EpochLog>,
    eta: Vec<EtaSnapshot>,
    max_eta: f64,
    max_eta_tilde: f64,
    min_eta_tilde: f64,
    trainable_parameters: usize,
}

impl Fit {
    /// Folds the latest snapshot into the running extremes.
    fn track(&mut self, mode: EtaMode) {
        let e = EtaWeights { raw_logits: self.eta.last().expect("snapshot").raw.clone(), mode };
        let (eta, tilde) = (e.eta(), e.eta_tilde());
        self.max_eta = eta.iter().fold(self.max_eta, |a, &b| a.max(b));
        self.max_eta_tilde = tilde.iter().fold(self.max_eta_tilde, |a, &b| a.max(b));
        self.min_eta_tilde = tilde.iter().fold(self.min_eta_tilde, |a, &b| a.min(b));
    }

    fn into_report(self, stage: usize, scores: Vec<f64>, weights_used: Vec<f64>, verdict: StageVerdict) -> StageReport {
        StageReport {
            stage,
            epochs: self.epochs,
            eta: self.eta,
            max_eta_seen: self.max_eta,
            max_eta_tilde_seen: self.max_eta_tilde,
            min_eta_tilde_seen: self.min_eta_tilde,
            scores,
            weights_used,
            verdict,
            trainable_parameters: self.trainable_parameters,
        }
    }
}

/// Mean per-image score of each learner and of the ensemble on `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub miou: f64,
    /// Dataset-level mIoU from the accumulated confusion matrix.
    pub pooled_miou: f64,
}

/// Dataset-level mIoU: intersections and unions summed over all images.
pub fn pooled_miou(preds: &[Vec<u8>], targets: &[&[u8]], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (p, t) in preds.iter().zip(targets) {
        for (&a, &b) in p.iter().zip(t.iter()) {
            let (a, b) = (a as usize, b as usize);
            union[a] += 1;
            if a == b {
                inter[a] += 1;
            } else {
                union[b] += 1;
            }
        }
    }
    let s: Vec<f64> = inter.iter().zip(&union).filter(|(_, &u)| u > 0).map(|(&i, &u)| i as f64 / u as f64).collect();
    if s.is_empty() {
        1.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Label maps of every sample under weights `weights[d-1]` for learners `1..=T`,
/// given their cached probability maps.
pub fn ensemble_labels(maps: &BTreeMap<usize, Vec<Tensor<f32>>>, weights: &[f64]) -> Result<Vec<Vec<u8>>> {
    let n = maps.values().next().map_or(0, Vec::len);
    (0..n)
        .map(|k| {
            let items: Vec<(f64, &Tensor<f32>)> =
                maps.iter().map(|(d, m)| (weights.get(d - 1).copied().unwrap_or(0.0), &m[k])).collect();
            crate::boosting::ensemble_combine(&items).map(|(_, l)| l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::ArchConfig;

    fn toy(n: usize, t: usize, classes: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = (0..n)
            .map(|k| {
                let labels: Vec<u8> = (0..t * t).map(|p| ((p % t) * classes / t) as u8).collect();
                let image = Tensor::from_vec(
                    &[1, t, t],
                    labels.iter().map(|&l| l as f32 + 0.1 * rng.gen::<f32>()).collect(),
                )
                .unwrap();
                Sample { name: format!("s{k}"), image, labels }
            })
            .collect();
        Dataset { samples, classes, channels: 1, tile_size: t }
    }

    fn arch(depth: usize) -> ArchConfig {
        let mut a = ArchConfig::small(1, 2, depth);
        a.base_filters = 4;
        a
    }

    #[test]
    fn stages_must_run_in_order() {
        let data = toy(4, 8, 2);
        let mut t = Trainer::new(NestedUNet::new(arch(2)), &data, TrainSettings { epochs: 1, ..Default::default() }, 0).unwrap();
        assert!(matches!(t.train_stage(2), Err(Error::Stage(_))));
        let r = t.train_stage(1).unwrap();
        assert_eq!(r.stage, 1);
        assert_eq!(r.eta.len(), 2);
        assert_eq!(t.net.frozen().is_empty(), !r.verdict.accepted);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(6, 8, 2);
        let settings = TrainSettings { epochs: 2, batch_size: 4, ..Default::default() };
        let run = || {
            let mut t = Trainer::new(NestedUNet::new(arch(1)), &data, settings.clone(), 11).unwrap();
            let r = t.train_stage(1).unwrap();
            (r.epochs, r.scores, t.net.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn easy_problem_is_learned() {
        let data = toy(8, 8, 2);
        let settings = TrainSettings { epochs: 15, batch_size: 4, learning_rate: 1e-2, augment: false, ..Default::default() };
        let mut t = Trainer::new(NestedUNet::new(arch(1)), &data, settings, 5).unwrap();
        let r = t.train_stage(1).unwrap();
        assert!(r.epochs.last().unwrap().train_loss < r.epochs[0].train_loss);
        let mean = r.scores.iter().sum::<f64>() / r.scores.len() as f64;
        assert!(mean > 0.9, "mean training mIoU {mean}");
        assert!(r.verdict.accepted && r.verdict.alpha > 0.0);
    }

    #[test]
    fn pooled_miou_matches_single_image_score() {
        let p = vec![vec![0u8, 0, 1, 1]];
        let t: Vec<&[u8]> = vec![&[0, 1, 1, 1]];
        assert_eq!(pooled_miou(&p, &t, 2), miou_labels(&p[0], t[0], 2).unwrap());
    }
}
