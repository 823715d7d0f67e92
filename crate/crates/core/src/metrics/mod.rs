//! Fidelity, diversity, memorization, segmentation and image-level scores.

mod features;
mod scores;

pub use features::{
    layer_distance, normalized_layers, perceptual_distance, ExtractorId, FeatureExtractor, NormalizedLayers,
    RandomConvExtractor,
};
pub use scores::{
    class_counts, diversity, embed_all, fid, fid_from_features, frechet_distance, image_confusion, mean_cov,
    mean_pairwise, memorization, miou, miou_with, Confusion, ImageLabel, Memorization, MiouReport, COV_EPS,
    DUP_FRACTION,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassMap, RgbImage};
use crate::error::Result;
use crate::sampler::{decode_batch, sample_two_stage, SamplerConfig, DEFAULT_THRESHOLD};
use crate::schedule::NoiseSchedule;
use crate::unet::NoisePredictor;

/// Generation quality summary for one set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub diversity: f64,
    pub memorization: Memorization,
    pub generated: usize,
    pub reference: usize,
    pub extractor: ExtractorId,
}

impl MetricReport {
    pub fn compute(generated: &[RgbImage], reference: &[RgbImage], f: &dyn FeatureExtractor) -> Result<Self> {
        Ok(Self {
            fid: fid(generated, reference, f)?,
            diversity: diversity(generated, f)?,
            memorization: memorization(generated, reference, f)?,
            generated: generated.len(),
            reference: reference.len(),
            extractor: f.id(),
        })
    }

    /// One `key=value` per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let e = &self.extractor;
        let _ = writeln!(s, "fid={}", self.fid);
        let _ = writeln!(s, "diversity={}", self.diversity);
        let _ = writeln!(s, "memorization.mean_nn_distance={}", self.memorization.mean_nn_distance);
        let _ = writeln!(s, "memorization.duplicate_fraction={}", self.memorization.duplicate_fraction);
        let _ = writeln!(s, "memorization.tau_dup={}", self.memorization.tau_dup);
        let _ = writeln!(s, "count.generated={}", self.generated);
        let _ = writeln!(s, "count.reference={}", self.reference);
        let _ = writeln!(s, "extractor.variant={}", e.variant);
        let _ = writeln!(s, "extractor.seed={}", e.seed);
        let _ = writeln!(s, "extractor.dim={}", e.dim);
        s
    }
}

/// One cell of a switch sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rf_preset: String,
    pub u: usize,
    pub fid: f64,
    pub diversity: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("rf_preset,u,fid,diversity\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.rf_preset, r.u, r.fid, r.diversity);
    }
    s
}

/// Samples `batch` pairs at each switch value and scores their images
/// against `reference`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_switch(
    large: &dyn NoisePredictor,
    small: &dyn NoisePredictor,
    small_name: &str,
    schedule: &NoiseSchedule,
    switches: &[usize],
    batch: usize,
    seed: u64,
    class_map: &ClassMap,
    reference: &[RgbImage],
    f: &dyn FeatureExtractor,
) -> Result<Vec<SweepRow>> {
    switches
        .iter()
        .map(|&u| {
            let cfg = SamplerConfig::new(schedule.steps(), u, batch, seed);
            let out = sample_two_stage(large, small, schedule, &cfg)?;
            let images: Vec<RgbImage> = decode_batch(&out, class_map, "gen_", DEFAULT_THRESHOLD)?
                .into_iter()
                .map(|s| s.image)
                .collect();
            Ok(SweepRow {
                rf_preset: small_name.to_string(),
                u,
                fid: fid(&images, reference, f)?,
                diversity: diversity(&images, f)?,
            })
        })
        .collect()
}
