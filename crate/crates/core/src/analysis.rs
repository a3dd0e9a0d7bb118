//! Representation similarity (linear CKA) and label-mixing statistics of
//! average-pooled masks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{BlockId, Mode, NestedUNet};
use crate::tensor::Real;

/// Activations of one layer: rows are examples, columns flattened features.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample {
    pub layer: String,
    pub matrix: DMatrix<f64>,
}

fn centered_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    &c * c.transpose()
}

/// Centered Gram norm negligible relative to the raw activation energy.
fn degenerate(gram_norm: f64, x: &DMatrix<f64>) -> bool {
    !(gram_norm > 1e-12 * x.norm_squared())
}

/// Linear CKA `‖Yᵀ X‖²_F / (‖Xᵀ X‖_F ‖Yᵀ Y‖_F)` on column-centered inputs,
/// evaluated through the `n × n` Gram matrices.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!("{} vs {} examples", x.nrows(), y.nrows())));
    }
    let (k, l) = (centered_gram(x), centered_gram(y));
    let (nk, nl) = (k.norm(), l.norm());
    if degenerate(nk, x) || degenerate(nl, y) {
        return Err(Error::UndefinedSimilarity("activations have zero variance".into()));
    }
    Ok((k.dot(&l) / (nk * nl)).clamp(0.0, 1.0))
}

/// Centered Gram matrix of one layer and its Frobenius norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGram {
    pub layer: String,
    pub gram: DMatrix<f64>,
    pub norm: f64,
}

impl LayerGram {
    pub fn new(sample: &ActivationSample) -> Result<Self> {
        let gram = centered_gram(&sample.matrix);
        let norm = gram.norm();
        if degenerate(norm, &sample.matrix) {
            return Err(Error::UndefinedSimilarity(format!("layer {} has zero variance", sample.layer)));
        }
        Ok(Self { layer: sample.layer.clone(), gram, norm })
    }
}

/// Pairwise linear CKA over precomputed Gram matrices.
pub fn cka_from_grams(grams: &[LayerGram]) -> Result<DMatrix<f64>> {
    if grams.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 layers, got {}", grams.len())));
    }
    let rows = grams[0].gram.nrows();
    if let Some(g) = grams.iter().find(|g| g.gram.nrows() != rows) {
        return Err(Error::Dimension(format!(
            "layer {} has {} examples, {} has {rows}",
            g.layer,
            g.gram.nrows(),
            grams[0].layer
        )));
    }
    let n = grams.len();
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        m[(a, a)] = 1.0;
        for b in a + 1..n {
            let v = (grams[a].gram.dot(&grams[b].gram) / (grams[a].norm * grams[b].norm)).clamp(0.0, 1.0);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    Ok(m)
}

/// Pairwise linear CKA over layers; errors name the offending layer.
pub fn cka_matrix(samples: &[ActivationSample]) -> Result<DMatrix<f64>> {
    if let Some(s) = samples.iter().find(|s| s.matrix.nrows() != samples[0].matrix.nrows()) {
        return Err(Error::Dimension(format!(
            "layer {} has {} examples, {} has {}",
            s.layer,
            s.matrix.nrows(),
            samples[0].layer,
            samples[0].matrix.nrows()
        )));
    }
    let grams = samples.iter().map(LayerGram::new).collect::<Result<Vec<_>>>()?;
    cka_from_grams(&grams)
}

/// Elementwise `a − b` of two similarity matrices of equal shape.
pub fn matrix_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a - b)
}

/// Forward `images` (eval mode) through learner `depth` and flatten the
/// features of `blocks` into `examples × (C·h·w)` matrices.
pub fn collect_activations<F: Real>(
    net: &NestedUNet<F>,
    depth: usize,
    images: &crate::tensor::Tensor<F>,
    blocks: &[BlockId],
) -> Result<Vec<ActivationSample>> {
    let learner = net.assemble(depth)?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = learner.forward(&mut g, x, Mode::Eval)?;
    blocks
        .iter()
        .map(|id| {
            let v = out
                .features
                .get(id)
                .ok_or_else(|| Error::Stage(format!("block {id} is not part of learner {depth}")))?;
            let t = g.value(*v);
            let n = t.shape()[0];
            let per = t.len() / n;
            Ok(ActivationSample {
                layer: format!("{id}@{depth}"),
                matrix: DMatrix::from_row_iterator(n, per, t.data().iter().map(|v| v.to_f64().unwrap())),
            })
        })
        .collect()
}

/// Where the `f × f` windows of a mask are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPlacement {
    /// Non-overlapping tiles `[i·f, (i+1)·f)`, one per pooled pixel.
    #[default]
    Tiled,
    /// Windows starting at `(i, j)` for `i < H/f, j < W/f`, as in the original counting listing.
    UnitStride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCount {
    pub factor: usize,
    pub mixed_windows: usize,
    pub windows: usize,
    pub ratio: f64,
}

/// Fraction of pooling windows holding more than one label, per factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelErrorReport {
    pub placement: WindowPlacement,
    pub factors: Vec<FactorCount>,
}

/// Counts windows with more than one distinct label over `masks` of `height × width`.
pub fn incorrect_label_ratio(
    masks: &[&[u8]],
    height: usize,
    width: usize,
    factors: &[usize],
    placement: WindowPlacement,
) -> Result<LabelErrorReport> {
    let mut out = Vec::with_capacity(factors.len());
    for &f in factors {
        if f == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::InputSize { height, width, divisor: f });
        }
        let (rows, cols) = (height / f, width / f);
        let step = match placement {
            WindowPlacement::Tiled => f,
            WindowPlacement::UnitStride => 1,
        };
        let mut mixed = 0;
        for m in masks {
            if m.len() != height * width {
                return Err(Error::Dimension(format!("mask of {} pixels, expected {height}x{width}", m.len())));
            }
            for i in 0..rows {
                for j in 0..cols {
                    let (y0, x0) = (i * step, j * step);
                    let first = m[y0 * width + x0];
                    let differs = (y0..y0 + f).any(|y| m[y * width + x0..y * width + x0 + f].iter().any(|&v| v != first));
                    mixed += differs as usize;
                }
            }
        }
        let windows = rows * cols * masks.len();
        out.push(FactorCount {
            factor: f,
            mixed_windows: mixed,
            windows,
            ratio: if windows == 0 { 0.0 } else { mixed as f64 / windows as f64 },
        });
    }
    Ok(LabelErrorReport { placement, factors: out })
}

/// Writes a labelled square matrix as CSV (`layer,<labels...>`).
pub fn write_matrix_csv(path: &std::path::Path, labels: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["layer".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (r, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..m.ncols()).map(|c| format!("{}", m[(r, c)])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_label_report_csv(path: &std::path::Path, report: &LabelErrorReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["factor", "mixed_windows", "windows", "ratio"])?;
    for f in &report.factors {
        w.write_record([f.factor.to_string(), f.mixed_windows.to_string(), f.windows.to_string(), f.ratio.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn cka_identities() {
        let x = random(20, 6, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((linear_cka(&x, &(&x * 3.0)).unwrap() - 1.0).abs() < 1e-12);
        let y = random(20, 9, 2);
        let (a, b) = (linear_cka(&x, &y).unwrap(), linear_cka(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-14 && (0.0..=1.0).contains(&a));
        assert!(matches!(linear_cka(&DMatrix::from_element(5, 3, 2.0), &random(5, 3, 3)), Err(Error::UndefinedSimilarity(_))));
        assert!(linear_cka(&random(4, 2, 0), &random(5, 2, 0)).is_err());
    }

    /// Direct feature-space form `‖YᵀX‖²/(‖XᵀX‖‖YᵀY‖)` against the Gram form.
    #[test]
    fn gram_form_matches_feature_form() {
        let center = |m: &DMatrix<f64>| {
            let mut c = m.clone();
            for mut col in c.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
            c
        };
        let (x, y) = (random(512, 32, 4), random(512, 32, 5));
        let (xc, yc) = (center(&x), center(&y));
        let direct = (yc.transpose() * &xc).norm_squared() / ((xc.transpose() * &xc).norm() * (yc.transpose() * &yc).norm());
        assert!((linear_cka(&x, &y).unwrap() - direct).abs() < 1e-12);
        // independent Gaussian-like features: small but positive similarity
        assert!(direct > 0.0 && direct < 0.15);
    }

    #[test]
    fn matrix_examples() {
        let x = ActivationSample { layer: "a".into(), matrix: random(10, 4, 1) };
        let m = cka_matrix(&[x.clone(), x.clone(), x]).unwrap();
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(matrix_diff(&m, &m).unwrap().iter().all(|&v| v == 0.0));
        let flat = ActivationSample { layer: "flat".into(), matrix: DMatrix::from_element(10, 4, 1.0) };
        let err = cka_matrix(&[ActivationSample { layer: "a".into(), matrix: random(10, 4, 1) }, flat]).unwrap_err();
        assert!(err.to_string().contains("flat"));
    }

    #[test]
    fn label_ratio_examples() {
        let constant = vec![3u8; 32 * 32];
        let r = incorrect_label_ratio(&[&constant], 32, 32, &[2, 4, 8, 16], WindowPlacement::Tiled).unwrap();
        assert!(r.factors.iter().all(|f| f.ratio == 0.0));
        let checker: Vec<u8> = (0..32 * 32).map(|p| ((p / 32 + p % 32) % 2) as u8).collect();
        for placement in [WindowPlacement::Tiled, WindowPlacement::UnitStride] {
            let r = incorrect_label_ratio(&[&checker], 32, 32, &[2], placement).unwrap();
            assert_eq!(r.factors[0].ratio, 1.0);
            assert_eq!(r.factors[0].windows, 256);
        }
        assert!(incorrect_label_ratio(&[&checker], 32, 32, &[3], WindowPlacement::Tiled).is_err());
    }
}
