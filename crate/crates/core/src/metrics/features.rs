use serde::{Deserialize, Serialize};

use crate::dataset::RgbImage;
use crate::error::{config_err, Result};
use crate::nn::{avg_pool, Conv2d};
use crate::rng::{keyed_rng, Domain};
use crate::tensor::Tensor;

/// Identity of an extractor, recorded in reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorId {
    pub variant: String,
    pub seed: u64,
    pub dim: usize,
}

/// Multi-layer image embedding. Implementations must be deterministic.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> ExtractorId;
    /// Per-layer feature maps, each `[1, c, h, w]`.
    fn layers(&self, image: &RgbImage) -> Result<Vec<Tensor<f32>>>;
    /// Fixed-length global embedding of dimension `id().dim`.
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Leaky ReLU keeps random features from dying.
fn leaky(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| if v >= 0.0 { v } else { 0.2 * v })
}

/// Fixed random four-layer conv encoder: each layer is a 3x3 conv, leaky
/// ReLU and 2x2 average pool.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    convs: Vec<Conv2d<f32>>,
}

impl RandomConvExtractor {
    pub const WIDTHS: [usize; 4] = [16, 32, 32, 32];

    pub fn new(seed: u64) -> Self {
        let rng = &mut keyed_rng(seed, Domain::Extractor, 0, 0);
        let mut cin = 3;
        let convs = Self::WIDTHS
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(cin, c, 3, rng);
                cin = c;
                conv
            })
            .collect();
        Self { seed, convs }
    }
}

fn image_tensor(image: &RgbImage) -> Result<Tensor<f32>> {
    Tensor::from_vec([1, 3, image.height, image.width], image.data.clone())
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> ExtractorId {
        ExtractorId {
            variant: "random-conv4".into(),
            seed: self.seed,
            dim: *Self::WIDTHS.last().unwrap(),
        }
    }

    fn layers(&self, image: &RgbImage) -> Result<Vec<Tensor<f32>>> {
        let depth = self.convs.len();
        if !image.height.is_multiple_of(1 << depth) || !image.width.is_multiple_of(1 << depth) {
            return Err(config_err(format!(
                "extractor needs sides divisible by {}, got {}x{}",
                1 << depth,
                image.height,
                image.width
            )));
        }
        let mut h = image_tensor(image)?;
        let mut out = Vec::with_capacity(depth);
        for conv in &self.convs {
            h = avg_pool(&leaky(&conv.forward(&h)), 2);
            out.push(h.clone());
        }
        Ok(out)
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let last = self.layers(image)?.pop().expect("non-empty encoder");
        let plane = last.plane();
        Ok(last
            .data()
            .chunks(plane)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
            .collect())
    }
}

/// Layer maps with every pixel's channel vector scaled to unit length.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLayers(Vec<Tensor<f32>>);

pub fn normalized_layers(f: &dyn FeatureExtractor, image: &RgbImage) -> Result<NormalizedLayers> {
    let layers = f
        .layers(image)?
        .into_iter()
        .map(|mut t| {
            let [_, c, h, w] = t.shape();
            let plane = h * w;
            let data = t.data_mut();
            for p in 0..plane {
                let norm = (0..c).map(|k| (data[k * plane + p] as f64).powi(2)).sum::<f64>().sqrt();
                let scale = (1.0 / (norm + 1e-10)) as f32;
                for k in 0..c {
                    data[k * plane + p] *= scale;
                }
            }
            t
        })
        .collect();
    Ok(NormalizedLayers(layers))
}

/// Sum over layers of the spatial mean of squared differences between
/// unit-normalized feature vectors.
pub fn layer_distance(a: &NormalizedLayers, b: &NormalizedLayers) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| {
            let plane = x.plane() as f64;
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| {
                    let d = p as f64 - q as f64;
                    d * d
                })
                .sum::<f64>()
                / plane
        })
        .sum()
}

/// Perceptual distance between two images.
pub fn perceptual_distance(f: &dyn FeatureExtractor, a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(layer_distance(&normalized_layers(f, a)?, &normalized_layers(f, b)?))
}
