//! Few-shot denoiser training and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{concat_pair, Dataset};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{AdamW, Parameterized};
use crate::rng::{keyed_rng, standard_normal, Domain};
use crate::schedule::{training_loss, training_loss_grad, NoiseSchedule, ScheduleParams};
use crate::tensor::{Real, Tensor};
use crate::unet::{Denoiser, UNetConfig};

/// Number of trailing loss values kept in checkpoint metadata.
pub const LOSS_TAIL: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Decoupled (AdamW-style) decay coefficient.
    pub weight_decay: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub schedule: ScheduleParams,
    /// Exponential moving average of weights; `None` trains without one.
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

impl TrainConfig {
    /// Reference hyperparameters: Adam at 1e-4, batch 2, 150k iterations,
    /// weight decay 2e-3, T = 1000.
    pub fn reference(seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            iterations: 150_000,
            optimizer: Optimizer::Adam,
            weight_decay: 2e-3,
            seed,
            checkpoint_every: 0,
            schedule: ScheduleParams::ddpm_scaled(1000),
            ema_decay: None,
        }
    }

    /// Short-chain settings for CPU-scale experiments.
    pub fn desk(steps: usize, iterations: usize, seed: u64) -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 4,
            iterations,
            schedule: ScheduleParams::ddpm_scaled(steps),
            ..Self::reference(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(config_err(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(config_err("iterations must be at least 1"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config_err("weight_decay must be non-negative"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(config_err(format!("ema_decay must lie in [0, 1), got {d}")));
            }
        }
        self.schedule.build().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: Optimizer,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
}

/// Sidecar written next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub unet: UNetConfig,
    pub iteration: usize,
    pub seed: u64,
    pub loss_tail: Vec<f64>,
    pub schedule: ScheduleParams,
    pub optimizer: OptimizerMeta,
    pub ema_decay: Option<f64>,
    pub weights_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.meta.schedule.build()
    }
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Encodes every sample and checks it against the model geometry.
pub fn encode_dataset(config: &UNetConfig, data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    if data.is_empty() {
        return Err(Error::Dataset {
            sample_id: String::new(),
            reason: "training set is empty".into(),
        });
    }
    let n_total = data.class_map().n_defect() + 3;
    if n_total != config.in_channels {
        return Err(shape_err(format!(
            "dataset has {n_total} channels, model expects {}",
            config.in_channels
        )));
    }
    let r = config.input_resolution;
    data.samples
        .iter()
        .map(|s| {
            if (s.image.height, s.image.width) != (r, r) {
                return Err(shape_err(format!(
                    "sample {} is {}x{}, model expects {r}x{r}",
                    s.sample_id, s.image.height, s.image.width
                )));
            }
            Ok(concat_pair(s, data.class_map())?.x)
        })
        .collect()
}

/// One optimisation batch: data indices, timesteps and target noise.
pub struct Batch<S> {
    pub indices: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
}

/// Draws the batch for `iteration`; a pure function of its arguments.
pub fn draw_batch<S: Real>(seed: u64, iteration: usize, batch: usize, n_data: usize, steps: usize, item: [usize; 3]) -> Batch<S> {
    let mut rng = keyed_rng(seed, Domain::TrainBatch, iteration as u64, 0);
    let indices = (0..batch).map(|_| rng.random_range(0..n_data)).collect();
    let t = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    let [c, h, w] = item;
    let eps = standard_normal(&mut rng, [batch, c, h, w]);
    Batch { indices, t, eps }
}

/// Noised inputs `x_t` for a batch.
pub fn noised_inputs<S: Real>(schedule: &NoiseSchedule, x0: &[&Tensor<S>], t: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
    let eps_items = eps.unstack();
    let items = x0
        .iter()
        .zip(t)
        .zip(&eps_items)
        .map(|((x, &t), e)| schedule.q_sample(x, t, e))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Epsilon-prediction loss of `model` on an explicit batch.
pub fn batch_loss<S: Real>(
    model: &Denoiser<S>,
    schedule: &NoiseSchedule,
    x0: &[&Tensor<S>],
    t: &[usize],
    eps: &Tensor<S>,
) -> Result<f64> {
    let x_t = noised_inputs(schedule, x0, t, eps)?;
    training_loss(&model.forward(&x_t, t)?, eps)
}

/// Accumulates gradients of [`batch_loss`] into `model` and returns the loss.
pub fn batch_gradients<S: Real>(
    model: &mut Denoiser<S>,
    schedule: &NoiseSchedule,
    x0: &[&Tensor<S>],
    t: &[usize],
    eps: &Tensor<S>,
) -> Result<f64> {
    let x_t = noised_inputs(schedule, x0, t, eps)?;
    let (eps_hat, cache) = model.forward_train(&x_t, t)?;
    let loss = training_loss(&eps_hat, eps)?;
    model.backward(&cache, &training_loss_grad(&eps_hat, eps));
    Ok(loss)
}

fn optimizer_meta(opt: &AdamW, kind: Optimizer) -> OptimizerMeta {
    OptimizerMeta {
        kind,
        learning_rate: opt.lr,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        weight_decay: opt.weight_decay,
        decoupled_weight_decay: true,
    }
}

fn snapshot(model: &Denoiser<f32>, ema: Option<&[f32]>, iteration: usize, tc: &TrainConfig, opt: &AdamW, losses: &[f64]) -> Checkpoint {
    let mut model = model.clone();
    if let Some(w) = ema {
        model.load_flat(w);
    }
    let tail = losses[losses.len().saturating_sub(LOSS_TAIL)..].to_vec();
    let meta = CheckpointMeta {
        config_hash: model.config().arch_hash(),
        unet: model.config().clone(),
        iteration,
        seed: tc.seed,
        loss_tail: tail,
        schedule: tc.schedule,
        optimizer: optimizer_meta(opt, tc.optimizer),
        ema_decay: tc.ema_decay,
        weights_hash: model.weights_hash(),
    };
    Checkpoint { model, meta }
}

pub fn train(config: &UNetConfig, data: &Dataset, tc: &TrainConfig) -> Result<TrainRun> {
    train_with(config, data, tc, &mut |_| Ok(()))
}

/// Like [`train`], calling `on_checkpoint` every `tc.checkpoint_every`
/// iterations.
pub fn train_with(
    config: &UNetConfig,
    data: &Dataset,
    tc: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    tc.validate()?;
    config.validate()?;
    let schedule = tc.schedule.build()?;
    let pairs = encode_dataset(config, data)?;
    let mut model = Denoiser::<f32>::new(config.clone(), tc.seed)?;
    let mut opt = AdamW::new(tc.learning_rate, tc.weight_decay);
    let mut ema: Option<Vec<f32>> = tc.ema_decay.map(|_| model.flat_values());
    let item = [config.in_channels, config.input_resolution, config.input_resolution];
    let mut losses = Vec::with_capacity(tc.iterations);

    for it in 0..tc.iterations {
        let b = draw_batch::<f32>(tc.seed, it, tc.batch_size, pairs.len(), schedule.steps(), item);
        let x0: Vec<&Tensor<f32>> = b.indices.iter().map(|&i| &pairs[i]).collect();
        model.zero_grad();
        let loss = batch_gradients(&mut model, &schedule, &x0, &b.t, &b.eps)?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("training diverged at iteration {it} (loss {loss})")));
        }
        opt.step(&mut model);
        losses.push(loss);
        if let (Some(w), Some(d)) = (ema.as_mut(), tc.ema_decay) {
            let d = d as f32;
            for (e, v) in w.iter_mut().zip(model.flat_values()) {
                *e = d * *e + (1.0 - d) * v;
            }
        }
        let done = it + 1;
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.iterations {
            on_checkpoint(&snapshot(&model, ema.as_deref(), done, tc, &opt, &losses))?;
        }
    }
    let checkpoint = snapshot(&model, ema.as_deref(), tc.iterations, tc, &opt, &losses);
    on_checkpoint(&checkpoint)?;
    Ok(TrainRun { checkpoint, losses })
}

const WEIGHTS_FILE: &str = "weights.bin";
const META_FILE: &str = "meta.json";

/// Writes `weights.bin` (little-endian f32 in parameter order) and
/// `meta.json` into directory `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(ckpt.model.num_params() * 4);
    for v in ckpt.model.flat_values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let wp = path.join(WEIGHTS_FILE);
    fs::write(&wp, bytes).map_err(|e| Error::io(&wp, e))?;
    let mp = path.join(META_FILE);
    let text = serde_json::to_string_pretty(&ckpt.meta).map_err(|e| Error::format(&mp, e))?;
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(path.to_path_buf())
}

/// Loads a checkpoint directory, rebuilding the architecture from metadata.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = path.join(META_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e))?;
    let found = meta.unet.arch_hash();
    if found != meta.config_hash {
        return Err(Error::HashMismatch {
            expected: meta.config_hash,
            found,
        });
    }
    let mut model = Denoiser::<f32>::new(meta.unet.clone(), 0)?;
    let wp = path.join(WEIGHTS_FILE);
    let bytes = fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
    if bytes.len() != model.num_params() * 4 {
        return Err(Error::format(
            &wp,
            format!("{} bytes for {} parameters", bytes.len(), model.num_params()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    model.load_flat(&values);
    let hash = model.weights_hash();
    if hash != meta.weights_hash {
        return Err(Error::HashMismatch {
            expected: meta.weights_hash,
            found: hash,
        });
    }
    Ok(Checkpoint { model, meta })
}

/// Loads a checkpoint that must match `expected`'s architecture.
pub fn load_checkpoint_for(path: &Path, expected: &UNetConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let want = expected.arch_hash();
    if ckpt.meta.config_hash != want {
        return Err(Error::HashMismatch {
            expected: want,
            found: ckpt.meta.config_hash,
        });
    }
    Ok(ckpt)
}
