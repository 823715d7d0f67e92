//! TOML run configuration. Every field except `seed` has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use defectgen_core::augment::SampleFilter;
use defectgen_core::dataset::{DefectKind, Texture, ToySpec};
use defectgen_core::qc::UnlistedPolicy;
use defectgen_core::sampler::{SamplerConfig, DEFAULT_THRESHOLD};
use defectgen_core::schedule::ScheduleParams;
use defectgen_core::seg::{SegConfig, TINY_UNET};
use defectgen_core::trainer::TrainConfig;
use defectgen_core::unet::Preset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default = "ModelSection::large")]
    pub model_large: ModelSection,
    #[serde(default = "ModelSection::small")]
    pub model_small: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub qc: QcSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub seg: SegSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Dataset root holding `classmap.json` and one directory per split.
    pub root: PathBuf,
    pub split: String,
    pub val_split: String,
    pub toy: ToySection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            split: "train".into(),
            val_split: "val".into(),
            toy: ToySection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub train_count: usize,
    pub val_count: usize,
    pub resolution: usize,
    pub n_defect: usize,
    pub defect_kinds: Vec<DefectKind>,
    pub textures: Vec<Texture>,
    pub pool_factor: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            train_count: 25,
            val_count: 40,
            resolution: 64,
            n_defect: 1,
            defect_kinds: Vec::new(),
            textures: vec![Texture::Banded],
            pool_factor: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    /// Overrides of the step-scaled DDPM endpoints.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: None,
            beta_end: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_base() -> usize {
    16
}

impl ModelSection {
    fn large() -> Self {
        Self {
            preset: "large".into(),
            base_channels: default_base(),
            checkpoint: None,
        }
    }

    fn small() -> Self {
        Self {
            preset: "small".into(),
            ..Self::large()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 2e-3,
            batch_size: 4,
            weight_decay: 2e-3,
            ema_decay: Some(0.995),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Defaults to `ceil(0.05 T)`.
    pub switch: Option<usize>,
    pub count: usize,
    pub threshold: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            switch: None,
            count: 16,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub extractor_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct QcSection {
    pub unlisted: UnlistedPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub ratio: f64,
    pub filter: SampleFilter,
    pub seeds: Vec<u64>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            ratio: 1.0,
            filter: SampleFilter::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub width: usize,
    pub backbone: String,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for SegSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 2e-3,
            batch_size: 4,
            width: 16,
            backbone: TINY_UNET.into(),
            class_weights: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.schedule_params().build()?;
        self.train_config().validate()?;
        for m in [&self.model_large, &self.model_small] {
            parse_preset(&m.preset)?;
            if m.base_channels == 0 {
                return Err(CliError::Config("base_channels must be at least 1".into()));
            }
        }
        self.checked_sampler(self.switch(), self.sampler.count.max(1))?;
        if !(0.0..=1.0).contains(&self.sampler.threshold) {
            return Err(CliError::Config("sampler.threshold must lie in [0, 1]".into()));
        }
        self.seg_config(self.seed).validate()?;
        if self.augment.ratio.is_nan() || self.augment.ratio < 0.0 {
            return Err(CliError::Config("augment.ratio must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, first 12 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        let mut p = ScheduleParams::ddpm_scaled(self.schedule.steps);
        if let Some(b) = self.schedule.beta_start {
            p.beta_start = b;
        }
        if let Some(b) = self.schedule.beta_end {
            p.beta_end = b;
        }
        p
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            iterations: t.iterations,
            weight_decay: t.weight_decay,
            checkpoint_every: t.checkpoint_every,
            ema_decay: t.ema_decay,
            schedule: self.schedule_params(),
            ..TrainConfig::reference(self.seed)
        }
    }

    pub fn switch(&self) -> usize {
        self.sampler
            .switch
            .unwrap_or_else(|| SamplerConfig::default_switch(self.schedule.steps))
    }

    pub fn sampler_config(&self, switch: usize, count: usize) -> SamplerConfig {
        SamplerConfig::new(self.schedule.steps, switch, count, self.seed)
    }

    /// Sampler settings, with out-of-range values reported as config errors.
    pub fn checked_sampler(&self, switch: usize, count: usize) -> CliResult<SamplerConfig> {
        let sc = self.sampler_config(switch, count);
        sc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(sc)
    }

    pub fn seg_config(&self, seed: u64) -> SegConfig {
        let s = &self.seg;
        SegConfig {
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            seed,
            backbone: s.backbone.clone(),
            width: s.width,
            class_weights: s.class_weights.clone(),
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        let t = &self.dataset.toy;
        ToySpec {
            defect_kinds: t.defect_kinds.clone(),
            textures: t.textures.clone(),
            pool_factor: t.pool_factor,
            split: self.dataset.split.clone(),
            ..ToySpec::new(t.train_count + t.val_count, t.resolution, t.resolution, t.n_defect, self.seed)
        }
    }

    /// The model section whose preset is `name`, preferring the large one.
    pub fn model_for(&self, name: &str) -> Option<&ModelSection> {
        [&self.model_large, &self.model_small]
            .into_iter()
            .find(|m| m.preset == name)
    }
}

pub fn parse_preset(name: &str) -> CliResult<Preset> {
    Preset::parse(name).ok_or_else(|| CliError::Config(format!("unknown preset {name:?}; use large, medium or small")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3").unwrap();
        assert_eq!(cfg.schedule.steps, 200);
        assert_eq!(cfg.model_large.preset, "large");
        assert_eq!(cfg.switch(), 10);
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        assert!(toml::from_str::<RunConfig>("").is_err());
        assert!(toml::from_str::<RunConfig>("seed = 1\nbogus = 2").is_err());
        assert!(toml::from_str::<RunConfig>("seed = 1\n[train]\nlr = 2").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a: RunConfig = toml::from_str("seed = 3").unwrap();
        let b: RunConfig = toml::from_str("seed = 4").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
