//! Single-model and two-stage ancestral sampling, and export of generated
//! pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    export_dataset, split_pair, validate_sample, ClassMap, Dataset, DatasetManifest, DefectSample, EncodedPair,
    Provenance, RgbImage,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::unet::NoisePredictor;

/// Samples pushed through a model call at once.
const CHUNK: usize = 16;

/// Mask planes at or above this value count as defect.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Chain length T.
    pub steps: usize,
    /// Number of initial reverse steps run by the large model.
    pub switch: usize,
    pub batch: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, switch: usize, batch: usize, seed: u64) -> Self {
        Self {
            steps,
            switch,
            batch,
            seed,
        }
    }

    /// `ceil(0.05 T)`.
    pub fn default_switch(steps: usize) -> usize {
        (steps * 5).div_ceil(100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err("T must be at least 1"));
        }
        if self.switch > self.steps {
            return Err(Error::Range {
                value: self.switch as i64,
                context: format!("switch u must lie in 0..={}", self.steps),
            });
        }
        if self.batch == 0 {
            return Err(config_err("batch must be at least 1"));
        }
        Ok(())
    }
}

fn stack_noise(stream: &NoiseStream, ids: &[u64], step: u64, item: [usize; 3]) -> Result<Tensor<f32>> {
    let draws: Vec<Tensor<f32>> = ids.iter().map(|&i| stream.draw(i, step, item)).collect();
    Tensor::stack(&draws)
}

/// Runs the reverse chain for one chunk of sample ids. Reverse step `k`
/// (1-based, at timestep `t = T - k + 1`) uses `large` when `k <= u`.
fn run_chain(
    large: &dyn NoisePredictor,
    small: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    ids: &[u64],
    item: [usize; 3],
) -> Result<Vec<Tensor<f32>>> {
    let stream = NoiseStream::new(cfg.seed);
    let mut x = stack_noise(&stream, ids, 0, item)?;
    let t_max = cfg.steps;
    for t in (1..=t_max).rev() {
        let k = t_max - t + 1;
        let model = if k <= cfg.switch { large } else { small };
        let ts = vec![t; ids.len()];
        let eps = model.predict(&x, &ts)?;
        let noise = if t > 1 {
            Some(stack_noise(&stream, ids, t as u64, item)?)
        } else {
            None
        };
        x = schedule.reverse_step(&eps, &x, t, noise.as_ref())?;
    }
    Ok(x.unstack())
}

fn check(schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if schedule.steps() != cfg.steps {
        return Err(config_err(format!(
            "schedule has T = {}, sampler expects {}",
            schedule.steps(),
            cfg.steps
        )));
    }
    Ok(())
}

/// Large model for the first `cfg.switch` reverse steps, small model for
/// the rest. Returns `cfg.batch` tensors of shape `[1, n_total, R, R]`.
pub fn sample_two_stage(
    large: &dyn NoisePredictor,
    small: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<f32>>> {
    sample_ids(large, small, schedule, cfg, 0)
}

/// Like [`sample_two_stage`] for sample ids `first..first + cfg.batch`.
/// Sample `i` is identical whichever call produces it.
pub fn sample_ids(
    large: &dyn NoisePredictor,
    small: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    first: u64,
) -> Result<Vec<Tensor<f32>>> {
    check(schedule, cfg)?;
    let item = large.item_shape();
    if small.item_shape() != item {
        return Err(shape_err(format!(
            "large model produces {:?}, small model {:?}",
            item,
            small.item_shape()
        )));
    }
    let ids: Vec<u64> = (first..first + cfg.batch as u64).collect();
    let mut out = Vec::with_capacity(cfg.batch);
    for chunk in ids.chunks(CHUNK) {
        out.extend(run_chain(large, small, schedule, cfg, chunk, item)?);
    }
    Ok(out)
}

/// Full reverse chain with one model; `cfg.switch` is validated but
/// otherwise unused.
pub fn sample_single(model: &dyn NoisePredictor, schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<Tensor<f32>>> {
    cfg.validate()?;
    let cfg = SamplerConfig { switch: 0, ..*cfg };
    sample_two_stage(model, model, schedule, &cfg)
}

/// Decodes generated tensors into samples, quantizing images to 8 bits
/// exactly as export does.
pub fn decode_batch(batch: &[Tensor<f32>], class_map: &ClassMap, prefix: &str, threshold: f64) -> Result<Vec<DefectSample>> {
    let n_defect = class_map.n_defect();
    batch
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let pair = EncodedPair::from_tensor(x.clone(), n_defect)?;
            let (image, mask) = split_pair(&pair, threshold)?;
            let image = RgbImage::from_rgb8(image.height, image.width, &image.to_rgb8())?;
            let sample = DefectSample {
                sample_id: format!("{prefix}{i:05}"),
                image,
                mask,
                caption: None,
            };
            validate_sample(&sample, class_map).into_result()?;
            Ok(sample)
        })
        .collect()
}

/// Recorded next to exported pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub steps: usize,
    pub switch: usize,
    pub seed: u64,
    pub count: usize,
    pub threshold: f64,
    pub large_weights_hash: Option<String>,
    pub small_weights_hash: Option<String>,
}

/// Writes generated pairs as a synthetic split under `out_root` plus
/// `generation_meta.json` in the split directory.
pub fn export_pairs(
    batch: &[Tensor<f32>],
    class_map: &ClassMap,
    out_root: &Path,
    split: &str,
    meta: &GenerationMeta,
) -> Result<DatasetManifest> {
    let samples = decode_batch(batch, class_map, "gen_", meta.threshold)?;
    let dataset = Dataset::new(split, class_map.clone(), samples, Provenance::Synthetic);
    let dir = export_dataset(&dataset, out_root)?;
    let path = dir.join("generation_meta.json");
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let mut manifest = dataset.manifest;
    manifest.root = Some(out_root.to_path_buf());
    Ok(manifest)
}
