//! SAMME-style stage weighting, per-image sample re-weighting and
//! weighted ensemble voting over base learners.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervision::{argmax_labels, EtaMode};
use crate::tensor::{Real, Tensor};

/// Clamp applied to the weighted error before the logarithm in [`alpha_from_error`].
pub const ERROR_CLAMP: f64 = 1e-6;

/// Per-class intersection-over-union from dot products of one-hot maps
/// `[C, H, W]`, averaged over classes present in either map.
///
/// Returns 1 when neither map contains any class (an empty image).
pub fn miou_score<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (c, hw) = (pred.shape()[0], pred.shape()[1] * pred.shape()[2]);
    for (t, what) in [(pred, "prediction"), (target, "target")] {
        for p in 0..hw {
            let mut ones = 0;
            for ci in 0..c {
                let v = t.data()[ci * hw + p];
                if v == F::one() {
                    ones += 1;
                } else if v != F::zero() {
                    return Err(Error::InvalidMask(format!("{what} is not one-hot at pixel {p}")));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidMask(format!("{what} has {ones} active classes at pixel {p}")));
            }
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for ci in 0..c {
        let y = &target.data()[ci * hw..][..hw];
        let p = &pred.data()[ci * hw..][..hw];
        let dot = |a: &[F], b: &[F]| a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum::<f64>();
        let (yp, yy, pp) = (dot(y, p), dot(y, y), dot(p, p));
        let union = yy + pp - yp;
        if union > 0.0 {
            total += yp / union;
            present += 1;
        }
    }
    Ok(if present == 0 { 1.0 } else { total / present as f64 })
}

/// Label-map form of [`miou_score`]; labels must lie in `0..classes`.
pub fn miou_labels(pred: &[u8], target: &[u8], classes: usize) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!("{} predicted vs {} target labels", pred.len(), target.len())));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p as usize, t as usize);
        if p >= classes || t >= classes {
            return Err(Error::InvalidMask(format!("label {} outside 0..{classes}", p.max(t))));
        }
        union[p] += 1;
        if p == t {
            inter[p] += 1;
        } else {
            union[t] += 1;
        }
    }
    let scores: Vec<f64> =
        inter.iter().zip(&union).filter(|(_, &u)| u > 0).map(|(&i, &u)| i as f64 / u as f64).collect();
    Ok(if scores.is_empty() { 1.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 })
}

/// `ε = Σ_k w_k (1 − s_k)`.
pub fn weighted_error(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(Error::Dimension(format!("{} scores for {} weights", scores.len(), weights.len())));
    }
    Ok(scores.iter().zip(weights).map(|(s, w)| w * (1.0 - s)).sum())
}

/// Whether a learner with weighted error `eps` is kept (strictly better than chance).
pub fn is_accepted(eps: f64, classes: usize) -> bool {
    eps < 1.0 - 1.0 / classes as f64
}

/// `α = ½ ln((1−ε)/ε) + ln(C−1)`, or 0 when `ε ≥ 1 − 1/C`.
pub fn alpha_from_error(eps: f64, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if !is_accepted(eps, classes) {
        return Ok(0.0);
    }
    let e = eps.clamp(ERROR_CLAMP, 1.0 - ERROR_CLAMP);
    Ok(0.5 * ((1.0 - e) / e).ln() + ((classes - 1) as f64).ln())
}

/// `w_k ← w_k e^{1−s_k}` followed by renormalization to unit sum.
pub fn update_sample_weights(weights: &[f64], scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != weights.len() {
        return Err(Error::Dimension(format!("{} scores for {} weights", scores.len(), weights.len())));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    let raw: Vec<f64> = weights.iter().zip(scores).map(|(w, s)| w * (1.0 - s).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Bookkeeping carried between boosting stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostState {
    pub sample_weights: Vec<f64>,
    /// Last completed stage (0 before training).
    pub stage: usize,
    pub alphas: Vec<f64>,
    /// `scores[d-1][k]` is the score of sample `k` under learner `d`.
    pub scores: Vec<Vec<f64>>,
    pub errors: Vec<f64>,
}

/// Outcome of folding one learner's training-set scores into the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageVerdict {
    pub error: f64,
    pub alpha: f64,
    pub accepted: bool,
}

impl BoostState {
    pub fn new(samples: usize) -> Self {
        Self {
            sample_weights: vec![1.0 / samples as f64; samples],
            stage: 0,
            alphas: Vec::new(),
            scores: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// Records stage `stage`; weights change only for accepted learners and when `reweight` is set.
    pub fn record(&mut self, stage: usize, scores: Vec<f64>, classes: usize, reweight: bool) -> Result<StageVerdict> {
        if stage != self.stage + 1 {
            return Err(Error::Stage(format!("stage {stage} recorded after stage {}", self.stage)));
        }
        let error = weighted_error(&scores, &self.sample_weights)?;
        let alpha = alpha_from_error(error, classes)?;
        let accepted = is_accepted(error, classes);
        if accepted && reweight {
            self.sample_weights = update_sample_weights(&self.sample_weights, &scores)?;
        }
        self.scores.push(scores);
        self.errors.push(error);
        self.alphas.push(alpha);
        self.stage = stage;
        Ok(StageVerdict { error, alpha, accepted })
    }
}

/// How per-learner maps are combined at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Weighted by each learner's `α`.
    #[default]
    Alpha,
    /// Plain mean over retained learners.
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub depth: usize,
    /// Checkpoint file name, relative to the run directory.
    pub checkpoint: String,
    pub eta_tilde: Vec<f64>,
    pub alpha: f64,
}

/// Trained ensemble description written next to the stage checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub classes: usize,
    pub filter_ladder: Vec<usize>,
    pub seed: u64,
    pub eta_mode: EtaMode,
    pub entries: Vec<EnsembleEntry>,
}

impl EnsembleManifest {
    pub fn validate(&self) -> Result<()> {
        for (k, e) in self.entries.iter().enumerate() {
            if e.depth != k + 1 {
                return Err(Error::Checkpoint(format!("entry {k} has depth {}, expected {}", e.depth, k + 1)));
            }
            if !(e.alpha >= 0.0) {
                return Err(Error::Checkpoint(format!("entry {} has invalid alpha {}", e.depth, e.alpha)));
            }
        }
        if !self.entries.iter().any(|e| e.alpha > 0.0) {
            return Err(Error::EmptyEnsemble);
        }
        Ok(())
    }

    /// Combination weights per entry for `mode` (zero for discarded learners).
    pub fn weights(&self, mode: EnsembleMode) -> Vec<f64> {
        let kept = self.entries.iter().filter(|e| e.alpha > 0.0).count().max(1);
        self.entries
            .iter()
            .map(|e| match (mode, e.alpha > 0.0) {
                (_, false) => 0.0,
                (EnsembleMode::Alpha, true) => e.alpha,
                (EnsembleMode::Avg, true) => 1.0 / kept as f64,
            })
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// `Σ_d a_d ŷ^d / Σ_d a_d` over learners with nonzero weight, plus its per-pixel
/// argmax (ties toward the lowest class). Maps are `[C, H, W]`.
pub fn ensemble_combine<F: Real>(maps: &[(f64, &Tensor<F>)]) -> Result<(Tensor<F>, Vec<u8>)> {
    let kept: Vec<_> = maps.iter().filter(|(a, _)| *a > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let total: f64 = kept.iter().map(|(a, _)| a).sum();
    let shape = kept[0].1.shape().to_vec();
    let mut acc = Tensor::zeros(&shape);
    for (a, m) in kept {
        if m.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("learner map {:?} vs {:?}", m.shape(), shape)));
        }
        let w = F::lit(a / total);
        for (o, &v) in acc.data_mut().iter_mut().zip(m.data()) {
            *o += w * v;
        }
    }
    let labels = argmax_labels(&acc);
    Ok((acc, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::one_hot;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn oh(labels: &[u8], c: usize) -> Tensor<f64> {
        one_hot(labels, 1, labels.len(), c).unwrap()
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou_score(&oh(&[0, 1, 1, 0], 2), &oh(&[0, 1, 1, 0], 2)).unwrap(), 1.0);
        assert_eq!(miou_score(&oh(&[0; 4], 2), &oh(&[1; 4], 2)).unwrap(), 0.0);
        let s = miou_score(&oh(&[0, 0, 1, 1], 2), &oh(&[0, 1, 1, 1], 2)).unwrap();
        assert_abs_diff_eq!(s, 7.0 / 12.0, epsilon = 1e-15);
        assert_eq!(miou_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap(), s);
        // class 2 absent from both is excluded
        assert_eq!(miou_score(&oh(&[0, 1], 3), &oh(&[0, 1], 3)).unwrap(), 1.0);
        let mut bad = oh(&[0, 1], 2);
        bad.data_mut()[0] = 0.5;
        assert!(miou_score(&bad, &oh(&[0, 1], 2)).is_err());
    }

    #[test]
    fn error_and_alpha_examples() {
        assert_eq!(weighted_error(&[1.0, 1.0], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(weighted_error(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert_abs_diff_eq!(weighted_error(&[0.5, 0.75], &[0.2, 0.8]).unwrap(), 0.3, epsilon = 1e-15);
        assert!(weighted_error(&[1.0], &[0.5, 0.5]).is_err());

        assert_eq!(alpha_from_error(0.5, 2).unwrap(), 0.0);
        assert_abs_diff_eq!(alpha_from_error(0.5, 5).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(alpha_from_error(0.0, 2).unwrap(), 6.9078, epsilon = 1e-4);
        assert!(alpha_from_error(0.1, 1).is_err());
    }

    #[test]
    fn reweighting_examples() {
        let w = update_sample_weights(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(w[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], e / (1.0 + e), epsilon = 1e-15);
        let w = update_sample_weights(&[0.5, 0.25, 0.25], &[1.0; 3]).unwrap();
        assert_eq!(w, vec![0.5, 0.25, 0.25]);
        assert!(update_sample_weights(&[1.0], &[1.5]).is_err());
    }

    #[test]
    fn state_discards_without_reweighting() {
        let mut s = BoostState::new(4);
        let v = s.record(1, vec![0.0; 4], 4, true).unwrap();
        assert!(!v.accepted && v.alpha == 0.0 && v.error == 1.0);
        assert_eq!(s.sample_weights, vec![0.25; 4]);
        assert!(s.record(3, vec![1.0; 4], 4, true).is_err());
        let v = s.record(2, vec![1.0, 0.5, 0.5, 0.5], 4, true).unwrap();
        assert!(v.accepted && v.alpha > 0.0);
        assert!(s.sample_weights[0] < s.sample_weights[1]);
    }

    #[test]
    fn ensemble_examples() {
        let a = Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        let (p, l) = ensemble_combine(&[(2.0, &a), (1.0, &b)]).unwrap();
        assert_abs_diff_eq!(p.data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.data()[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(l, vec![0]);
        let (_, l) = ensemble_combine(&[(1.0, &a), (1.0, &b)]).unwrap();
        assert_eq!(l, vec![0]);
        let (single, _) = ensemble_combine(&[(1.0, &b)]).unwrap();
        assert_eq!(single, b);
        let with_discard = ensemble_combine(&[(0.7, &a), (0.0, &b)]).unwrap();
        assert_eq!(with_discard, ensemble_combine(&[(0.7, &a)]).unwrap());
        assert!(matches!(ensemble_combine::<f64>(&[(0.0, &a)]), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn manifest_round_trip_and_weights() {
        let m = EnsembleManifest {
            classes: 3,
            filter_ladder: vec![4, 8],
            seed: 1,
            eta_mode: EtaMode::BoundedSum,
            entries: vec![
                EnsembleEntry { depth: 1, checkpoint: "stage1.bin".into(), eta_tilde: vec![0.5, 0.5], alpha: 1.5 },
                EnsembleEntry { depth: 2, checkpoint: "stage2.bin".into(), eta_tilde: vec![1.0 / 3.0; 3], alpha: 0.0 },
            ],
        };
        assert_eq!(EnsembleManifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);
        m.validate().unwrap();
        assert_eq!(m.weights(EnsembleMode::Avg), vec![1.0, 0.0]);
        let mut none = m.clone();
        none.entries[0].alpha = 0.0;
        assert!(matches!(none.validate(), Err(Error::EmptyEnsemble)));
    }

    proptest! {
        #[test]
        fn weights_stay_normalized(raw in proptest::collection::vec(0.01f64..1.0, 1..20), seed in any::<u64>()) {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let scores: Vec<f64> = (0..w.len()).map(|k| ((seed >> (k % 60)) & 0xff) as f64 / 255.0).collect();
            let nw = update_sample_weights(&w, &scores).unwrap();
            prop_assert!((nw.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(nw.iter().all(|&v| v > 0.0));
            for a in 0..w.len() {
                for b in 0..w.len() {
                    if scores[a] < scores[b] {
                        prop_assert!(nw[a] / nw[b] > w[a] / w[b]);
                    }
                }
            }
        }

        #[test]
        fn alpha_decreases_with_error(c in 2usize..8, a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            let limit = 1.0 - 1.0 / c as f64;
            let (lo, hi) = (a.min(b) * limit, a.max(b) * limit);
            prop_assume!(hi - lo > 1e-9 && lo > 1e-6 && hi < limit);
            prop_assert!(alpha_from_error(lo, c).unwrap() > alpha_from_error(hi, c).unwrap());
        }

        #[test]
        fn labels_invariant_to_alpha_scale(vals in proptest::collection::vec(0.0f64..1.0, 12), k in 0.01f64..100.0) {
            let a = Tensor::from_vec(&[3, 2, 2], vals[..12].to_vec()).unwrap();
            let b = a.map(|v| 1.0 - v);
            let (_, l1) = ensemble_combine(&[(0.3, &a), (1.1, &b)]).unwrap();
            let (_, l2) = ensemble_combine(&[(0.3 * k, &a), (1.1 * k, &b)]).unwrap();
            prop_assert_eq!(l1, l2);
        }
    }
}
