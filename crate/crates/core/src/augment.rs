//! Merging generated pairs into segmentation training sets, and sweeps over
//! the synthetic-to-real ratio.

use std::fmt::Write as _;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassMap, Dataset, DatasetManifest, DefectSample, ManifestEntry, Provenance};
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::{keyed_rng, Domain};
use crate::sampler::{decode_batch, sample_ids, SamplerConfig, DEFAULT_THRESHOLD};
use crate::schedule::NoiseSchedule;
use crate::seg::{eval_seg, train_seg, SegConfig};
use crate::unet::NoisePredictor;

/// Candidates drawn per requested synthetic sample before giving up.
pub const MAX_OVERSAMPLING: usize = 10;

const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFilter {
    /// Keep every validator-clean sample.
    ValidOnly,
    /// Also drop samples whose mask is entirely background.
    #[default]
    RequireDefect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPlan {
    pub ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub filter: SampleFilter,
}

impl AugmentPlan {
    pub fn new(ratio: f64, seed: u64) -> Self {
        Self {
            ratio,
            seed,
            filter: SampleFilter::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ratio.is_finite() || self.ratio < 0.0 {
            return Err(config_err(format!("ratio must be a finite value >= 0, got {}", self.ratio)));
        }
        Ok(())
    }

    /// `round_half_up(ratio * n_real)`.
    pub fn synthetic_count(&self, n_real: usize) -> usize {
        (self.ratio * n_real as f64 + 0.5).floor() as usize
    }
}

/// Trained generator pair and the chain settings used to draw from it.
pub struct Generator<'a> {
    pub large: &'a dyn NoisePredictor,
    pub small: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub switch: usize,
    pub threshold: f64,
}

impl<'a> Generator<'a> {
    pub fn new(large: &'a dyn NoisePredictor, small: &'a dyn NoisePredictor, schedule: &'a NoiseSchedule, switch: usize) -> Self {
        Self {
            large,
            small,
            schedule,
            switch,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    fn check(&self, class_map: &ClassMap, resolution: (usize, usize)) -> Result<()> {
        let [c, h, w] = self.large.item_shape();
        if c != 3 + class_map.n_defect() {
            return Err(shape_err(format!(
                "generator emits {} channels, class map needs {}",
                c,
                3 + class_map.n_defect()
            )));
        }
        if (h, w) != resolution {
            return Err(shape_err(format!("generator resolution {h}x{w}, real data {:?}", resolution)));
        }
        Ok(())
    }

    /// The first `count` accepted samples of the candidate stream for `seed`.
    /// The result for a smaller count is always a prefix of a larger one.
    pub fn synthesize(&self, class_map: &ClassMap, count: usize, seed: u64, filter: SampleFilter) -> Result<Vec<DefectSample>> {
        let sampler_seed = keyed_rng(seed, Domain::Augment, 0, 0).next_u64();
        let budget = count * MAX_OVERSAMPLING;
        let mut out = Vec::with_capacity(count);
        let mut next = 0usize;
        while out.len() < count {
            if next >= budget {
                return Err(Error::Dataset {
                    sample_id: String::new(),
                    reason: format!("only {} of {count} synthetic samples passed the filter after {budget} draws", out.len()),
                });
            }
            let n = CHUNK.min(budget - next);
            let cfg = SamplerConfig::new(self.schedule.steps(), self.switch, n, sampler_seed);
            let batch = sample_ids(self.large, self.small, self.schedule, &cfg, next as u64)?;
            for (k, mut s) in decode_batch(&batch, class_map, "", self.threshold)?.into_iter().enumerate() {
                if filter == SampleFilter::RequireDefect && s.mask.is_background() {
                    continue;
                }
                if out.len() < count {
                    s.sample_id = format!("syn{seed}_{:05}", next + k);
                    out.push(s);
                }
            }
            next += n;
        }
        Ok(out)
    }
}

fn merge(real: &Dataset, synthetic: Vec<DefectSample>) -> Dataset {
    let mut samples = real.samples.clone();
    let mut entries = real.manifest.entries.clone();
    entries.extend(synthetic.iter().map(|s| ManifestEntry {
        sample_id: s.sample_id.clone(),
        provenance: Provenance::Synthetic,
    }));
    samples.extend(synthetic);
    Dataset {
        manifest: DatasetManifest {
            root: None,
            split: real.manifest.split.clone(),
            class_map: real.class_map().clone(),
            entries,
        },
        samples,
    }
}

/// Real samples followed by `plan.synthetic_count(|real|)` generated ones.
pub fn build_augmented(real: &Dataset, plan: &AugmentPlan, generator: &Generator) -> Result<Dataset> {
    plan.validate()?;
    let count = plan.synthetic_count(real.len());
    if count == 0 {
        return Ok(real.clone());
    }
    generator.check(real.class_map(), real.resolution()?)?;
    let synthetic = generator.synthesize(real.class_map(), count, plan.seed, plan.filter)?;
    Ok(merge(real, synthetic))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    /// Mean mIoU in percentage points.
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub stddev: f64,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSweep {
    pub rows: Vec<RatioRow>,
}

impl RatioSweep {
    pub fn row(&self, ratio: f64) -> Option<&RatioRow> {
        self.rows.iter().find(|r| r.ratio == ratio)
    }

    /// `ratio,seed,miou`
    pub fn raw_csv(&self) -> String {
        let mut s = String::from("ratio,seed,miou\n");
        for r in &self.rows {
            for (seed, v) in r.seeds.iter().zip(&r.values) {
                let _ = writeln!(s, "{},{},{:.6}", r.ratio, seed, v);
            }
        }
        s
    }

    /// `ratio,mean,stddev`
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("ratio,mean,stddev\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.ratio, r.mean, r.stddev);
        }
        s
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For every ratio and seed: augment `real` (seeded by `seed`), train the
/// segmenter with `seg.seed = seed`, and score it on the real `val` split.
pub fn ratio_sweep(
    real: &Dataset,
    val: &Dataset,
    ratios: &[f64],
    seeds: &[u64],
    generator: &Generator,
    filter: SampleFilter,
    seg: &SegConfig,
) -> Result<RatioSweep> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(config_err("ratio sweep needs at least one ratio and one seed"));
    }
    if val.manifest.count(Provenance::Synthetic) > 0 {
        return Err(config_err("validation split must contain only real samples"));
    }
    let mut sorted = ratios.to_vec();
    for &r in &sorted {
        AugmentPlan::new(r, 0).validate()?;
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let max_count = AugmentPlan::new(sorted[sorted.len() - 1], 0).synthetic_count(real.len());
    if max_count > 0 {
        generator.check(real.class_map(), real.resolution()?)?;
    }
    let mut values = vec![Vec::with_capacity(seeds.len()); sorted.len()];
    for &seed in seeds {
        let pool = if max_count > 0 {
            generator.synthesize(real.class_map(), max_count, seed, filter)?
        } else {
            Vec::new()
        };
        for (ri, &ratio) in sorted.iter().enumerate() {
            let count = AugmentPlan::new(ratio, seed).synthetic_count(real.len());
            let train = merge(real, pool[..count].to_vec());
            let cfg = SegConfig { seed, ..seg.clone() };
            let model = train_seg(&train, &cfg)?.model;
            values[ri].push(100.0 * eval_seg(&model, val)?.mean_or_zero());
        }
    }
    let rows = sorted
        .into_iter()
        .zip(values)
        .map(|(ratio, values)| {
            let (mean, stddev) = mean_std(&values);
            RatioRow {
                ratio,
                mean,
                stddev,
                seeds: seeds.to_vec(),
                values,
            }
        })
        .collect();
    Ok(RatioSweep { rows })
}
