use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::features::{layer_distance, normalized_layers, FeatureExtractor, NormalizedLayers};
use crate::dataset::{IndexMask, RgbImage};
use crate::error::{config_err, shape_err, Error, Result};

/// Added to both covariances before the matrix square root.
pub const COV_EPS: f64 = 1e-6;

/// Duplicate threshold as a fraction of the mean intra-train distance.
pub const DUP_FRACTION: f64 = 0.01;

fn empty(what: &str) -> Error {
    config_err(format!("{what} is empty"))
}

/// Sample mean and unbiased covariance (zero for a single sample).
pub fn mean_cov(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(empty("feature set"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(shape_err("feature vectors differ in length"));
    }
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for f in features {
            let c = DVector::from_column_slice(f) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, the trace term taken
/// as `Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2))`.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let sa = sym_sqrt(cov_a);
    let inner = &sa * cov_b * &sa;
    let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets, with
/// `COV_EPS * I` added to each covariance.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, mut ca) = mean_cov(a)?;
    let (mu_b, mut cb) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(shape_err("feature dimensions differ"));
    }
    let d = mu_a.len();
    ca += DMatrix::identity(d, d) * COV_EPS;
    cb += DMatrix::identity(d, d) * COV_EPS;
    Ok(frechet_distance(&mu_a, &ca, &mu_b, &cb))
}

pub fn embed_all(f: &dyn FeatureExtractor, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| f.embed(i)).collect()
}

pub fn fid(a: &[RgbImage], b: &[RgbImage], f: &dyn FeatureExtractor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(empty("image set"));
    }
    fid_from_features(&embed_all(f, a)?, &embed_all(f, b)?)
}

fn normalize_all(f: &dyn FeatureExtractor, images: &[RgbImage]) -> Result<Vec<NormalizedLayers>> {
    images.iter().map(|i| normalized_layers(f, i)).collect()
}

/// Mean over `i < j` of the pairwise distance, summed in that order.
pub fn mean_pairwise(items: &[NormalizedLayers]) -> f64 {
    let n = items.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += layer_distance(&items[i], &items[j]);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Mean perceptual distance over all unordered pairs.
pub fn diversity(images: &[RgbImage], f: &dyn FeatureExtractor) -> Result<f64> {
    if images.len() < 2 {
        return Err(config_err("diversity needs at least two images"));
    }
    Ok(mean_pairwise(&normalize_all(f, images)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memorization {
    pub mean_nn_distance: f64,
    pub duplicate_fraction: f64,
    /// Distance at or below which a generated image counts as a copy.
    pub tau_dup: f64,
}

/// Nearest-training-neighbour statistics of generated images.
pub fn memorization(gen: &[RgbImage], train: &[RgbImage], f: &dyn FeatureExtractor) -> Result<Memorization> {
    if gen.is_empty() || train.is_empty() {
        return Err(empty("image set"));
    }
    let g = normalize_all(f, gen)?;
    let t = normalize_all(f, train)?;
    let tau_dup = if t.len() > 1 { DUP_FRACTION * mean_pairwise(&t) } else { 0.0 };
    let nn: Vec<f64> = g
        .iter()
        .map(|x| t.iter().map(|y| layer_distance(x, y)).fold(f64::INFINITY, f64::min))
        .collect();
    let dups = nn.iter().filter(|&&d| d <= tau_dup).count();
    Ok(Memorization {
        mean_nn_distance: nn.iter().sum::<f64>() / nn.len() as f64,
        duplicate_fraction: dups as f64 / nn.len() as f64,
        tau_dup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Indexed by class; `None` where the class never occurs in either
    /// predictions or ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over scored classes; `None` if none qualified.
    pub mean: Option<f64>,
    pub include_background: bool,
}

impl MiouReport {
    /// Mean IoU, counting "nothing to score" as zero.
    pub fn mean_or_zero(&self) -> f64 {
        self.mean.unwrap_or(0.0)
    }
}

/// Per-class `(intersection, union)` pixel counts summed over all pairs.
pub fn class_counts(preds: &[IndexMask], gts: &[IndexMask], n_classes: usize) -> Result<Vec<(u64, u64)>> {
    if preds.len() != gts.len() {
        return Err(shape_err(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut counts = vec![(0u64, 0u64); n_classes];
    for (p, g) in preds.iter().zip(gts) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(shape_err(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.height, p.width, g.height, g.width
            )));
        }
        for (&a, &b) in p.data.iter().zip(&g.data) {
            let (a, b) = (a as usize, b as usize);
            for v in [a, b] {
                if v >= n_classes {
                    return Err(Error::Range {
                        value: v as i64,
                        context: format!("class index must be < {n_classes}"),
                    });
                }
            }
            if a == b {
                counts[a].0 += 1;
                counts[a].1 += 1;
            } else {
                counts[a].1 += 1;
                counts[b].1 += 1;
            }
        }
    }
    Ok(counts)
}

/// Dataset-level IoU per class, mean over defect classes that occur.
pub fn miou(preds: &[IndexMask], gts: &[IndexMask], n_classes: usize) -> Result<MiouReport> {
    miou_with(preds, gts, n_classes, false)
}

pub fn miou_with(preds: &[IndexMask], gts: &[IndexMask], n_classes: usize, include_background: bool) -> Result<MiouReport> {
    let counts = class_counts(preds, gts, n_classes)?;
    let per_class_iou: Vec<Option<f64>> = counts
        .iter()
        .map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let first = if include_background { 0 } else { 1 };
    let scored: Vec<f64> = per_class_iou.iter().skip(first).flatten().copied().collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(MiouReport {
        per_class_iou,
        mean,
        include_background,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLabel {
    Benign,
    Defective,
}

impl ImageLabel {
    pub fn name(self) -> &'static str {
        match self {
            ImageLabel::Benign => "benign",
            ImageLabel::Defective => "defective",
        }
    }
}

/// Image-level confusion with defective as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `TP / (FN + TP)`, absent without defective ground truth.
    pub recall: Option<f64>,
    /// `FP / (TN + FP)`, absent without benign ground truth.
    pub fpr: Option<f64>,
}

pub fn image_confusion(pred: &[ImageLabel], gt: &[ImageLabel]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(shape_err(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        match (p, g) {
            (ImageLabel::Defective, ImageLabel::Defective) => tp += 1,
            (ImageLabel::Defective, ImageLabel::Benign) => fp += 1,
            (ImageLabel::Benign, ImageLabel::Benign) => tn += 1,
            (ImageLabel::Benign, ImageLabel::Defective) => fn_ += 1,
        }
    }
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        recall: (tp + fn_ > 0).then(|| tp as f64 / (fn_ + tp) as f64),
        fpr: (tn + fp > 0).then(|| fp as f64 / (tn + fp) as f64),
    })
}
