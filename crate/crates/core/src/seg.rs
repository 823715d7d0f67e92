//! Reference segmentation model, training and evaluation, with a registry
//! for alternative backbones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassMap, Dataset, IndexMask};
use crate::error::{config_err, shape_err, Error, Result};
use crate::metrics::{miou, MiouReport};
use crate::nn::{
    avg_pool, avg_pool_backward, concat_channels, silu, silu_backward, split_channels, upsample_backward,
    upsample_nearest, AdamW, Conv2d, Param, Parameterized,
};
use crate::rng::{keyed_rng, Domain};
use crate::tensor::Tensor;

pub const TINY_UNET: &str = "tiny-unet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_backbone")]
    pub backbone: String,
    /// First-level channel width of the backbone.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Per-class loss weights, background first; unweighted when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

fn default_backbone() -> String {
    TINY_UNET.to_string()
}

fn default_width() -> usize {
    16
}

impl SegConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate: 2e-3,
            batch_size: 4,
            seed,
            backbone: default_backbone(),
            width: default_width(),
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err("epochs must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(config_err("learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.width == 0 {
            return Err(config_err("batch_size and width must be at least 1"));
        }
        Ok(())
    }
}

/// Construction arguments handed to backbone builders.
#[derive(Clone, Debug)]
pub struct BackboneSpec {
    pub n_classes: usize,
    pub width: usize,
    pub seed: u64,
}

/// Image `[n, 3, h, w]` to per-class logits `[n, k, h, w]`.
pub trait SegBackbone: Parameterized<f32> + Send {
    fn name(&self) -> &str;
    fn n_classes(&self) -> usize;
    /// Required divisor of the input sides.
    fn side_multiple(&self) -> usize;
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// Forward pass, then backward with the logit gradient returned by
    /// `loss_grad`; returns the logits.
    fn forward_backward(
        &mut self,
        x: &Tensor<f32>,
        loss_grad: &mut dyn FnMut(&Tensor<f32>) -> Tensor<f32>,
    ) -> Result<Tensor<f32>>;
}

pub type BackboneBuilder = fn(&BackboneSpec) -> Result<Box<dyn SegBackbone>>;

/// Backbones by name.
#[derive(Clone)]
pub struct BackboneRegistry {
    builders: BTreeMap<String, BackboneBuilder>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register(TINY_UNET, |spec| Ok(Box::new(TinyUNet::new(spec))));
        r
    }
}

impl BackboneRegistry {
    pub fn register(&mut self, name: &str, builder: BackboneBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, spec: &BackboneSpec) -> Result<Box<dyn SegBackbone>> {
        let b = self
            .builders
            .get(name)
            .ok_or_else(|| config_err(format!("unknown backbone {name:?}; known: {:?}", self.names())))?;
        let model = b(spec)?;
        if model.n_classes() != spec.n_classes {
            return Err(config_err(format!("backbone {name:?} ignored the requested class count")));
        }
        Ok(model)
    }
}

/// Two 3x3 conv + SiLU layers.
#[derive(Clone, Debug)]
struct DoubleConv {
    c1: Conv2d<f32>,
    c2: Conv2d<f32>,
}

struct DoubleCache {
    x: Tensor<f32>,
    p1: Tensor<f32>,
    a1: Tensor<f32>,
    p2: Tensor<f32>,
}

impl DoubleConv {
    fn new(cin: usize, cout: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(cin, cout, 3, rng),
            c2: Conv2d::new(cout, cout, 3, rng),
        }
    }

    fn forward(&self, x: &Tensor<f32>) -> (Tensor<f32>, DoubleCache) {
        let p1 = self.c1.forward(x);
        let a1 = silu(&p1);
        let p2 = self.c2.forward(&a1);
        let y = silu(&p2);
        (
            y,
            DoubleCache {
                x: x.clone(),
                p1,
                a1,
                p2,
            },
        )
    }

    fn backward(&mut self, c: &DoubleCache, dy: &Tensor<f32>) -> Tensor<f32> {
        let dp2 = silu_backward(&c.p2, dy);
        let da1 = self.c2.backward(&c.a1, &dp2);
        let dp1 = silu_backward(&c.p1, &da1);
        self.c1.backward(&c.x, &dp1)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.c1.visit(f);
        self.c2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
    }
}

/// Three-level encoder-decoder with concatenated skips.
#[derive(Clone, Debug)]
pub struct TinyUNet {
    n_classes: usize,
    enc1: DoubleConv,
    enc2: DoubleConv,
    mid: DoubleConv,
    dec2: DoubleConv,
    dec1: DoubleConv,
    head: Conv2d<f32>,
}

impl TinyUNet {
    pub fn new(spec: &BackboneSpec) -> Self {
        let w = spec.width;
        let rng = &mut keyed_rng(spec.seed, Domain::Seg, 0, 0);
        Self {
            n_classes: spec.n_classes,
            enc1: DoubleConv::new(3, w, rng),
            enc2: DoubleConv::new(w, 2 * w, rng),
            mid: DoubleConv::new(2 * w, 4 * w, rng),
            dec2: DoubleConv::new(6 * w, 2 * w, rng),
            dec1: DoubleConv::new(3 * w, w, rng),
            head: Conv2d::new(w, spec.n_classes, 1, rng),
        }
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err(format!("tiny-unet needs [n, 3, 4k, 4k] input, got {:?}", x.shape())));
        }
        Ok(())
    }
}

impl Parameterized<f32> for TinyUNet {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        for b in [&self.enc1, &self.enc2, &self.mid, &self.dec2, &self.dec1] {
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        for b in [&mut self.enc1, &mut self.enc2, &mut self.mid, &mut self.dec2, &mut self.dec1] {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl SegBackbone for TinyUNet {
    fn name(&self) -> &str {
        TINY_UNET
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn side_multiple(&self) -> usize {
        4
    }

    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check(x)?;
        let (e1, _) = self.enc1.forward(x);
        let (e2, _) = self.enc2.forward(&avg_pool(&e1, 2));
        let (m, _) = self.mid.forward(&avg_pool(&e2, 2));
        let (d2, _) = self.dec2.forward(&concat_channels(&upsample_nearest(&m, 2), &e2));
        let (d1, _) = self.dec1.forward(&concat_channels(&upsample_nearest(&d2, 2), &e1));
        Ok(self.head.forward(&d1))
    }

    fn forward_backward(
        &mut self,
        x: &Tensor<f32>,
        loss_grad: &mut dyn FnMut(&Tensor<f32>) -> Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        self.check(x)?;
        let (e1, c_e1) = self.enc1.forward(x);
        let (e2, c_e2) = self.enc2.forward(&avg_pool(&e1, 2));
        let (m, c_m) = self.mid.forward(&avg_pool(&e2, 2));
        let u2 = upsample_nearest(&m, 2);
        let (d2, c_d2) = self.dec2.forward(&concat_channels(&u2, &e2));
        let u1 = upsample_nearest(&d2, 2);
        let (d1, c_d1) = self.dec1.forward(&concat_channels(&u1, &e1));
        let logits = self.head.forward(&d1);

        let dl = loss_grad(&logits);
        let dd1 = self.head.backward(&d1, &dl);
        let (du1, mut de1) = split_channels(&self.dec1.backward(&c_d1, &dd1), u1.channels());
        let dd2 = upsample_backward(&du1, 2);
        let (du2, mut de2) = split_channels(&self.dec2.backward(&c_d2, &dd2), u2.channels());
        let dm = upsample_backward(&du2, 2);
        de2.add_assign(&avg_pool_backward(&self.mid.backward(&c_m, &dm), 2));
        de1.add_assign(&avg_pool_backward(&self.enc2.backward(&c_e2, &de2), 2));
        self.enc1.backward(&c_e1, &de1);
        Ok(logits)
    }
}

/// Mean (optionally class-weighted) softmax cross-entropy and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &Tensor<f32>, targets: &[&IndexMask], weights: Option<&[f64]>) -> Result<(f64, Tensor<f32>)> {
    let [n, k, h, w] = logits.shape();
    if targets.len() != n {
        return Err(shape_err(format!("{} targets for {n} logit maps", targets.len())));
    }
    let plane = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let mut total_w = 0.0;
    let mut probs = vec![0.0f64; k];
    let mut pixel_w = Vec::with_capacity(n * plane);
    for (i, t) in targets.iter().enumerate() {
        if (t.height, t.width) != (h, w) {
            return Err(shape_err("target mask size differs from logits"));
        }
        let li = logits.item(i);
        for p in 0..plane {
            let y = t.data[p] as usize;
            if y >= k {
                return Err(Error::Range {
                    value: y as i64,
                    context: format!("target class must be < {k}"),
                });
            }
            let wy = weights.map_or(1.0, |ws| ws[y]);
            let max = (0..k).map(|c| li[c * plane + p] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                probs[c] = (li[c * plane + p] as f64 - max).exp();
                z += probs[c];
            }
            loss -= wy * (probs[y] / z).ln();
            total_w += wy;
            pixel_w.push((wy, y));
            let gi = grad.item_mut(i);
            for c in 0..k {
                gi[c * plane + p] = (wy * probs[c] / z) as f32;
            }
        }
    }
    let norm = if total_w > 0.0 { 1.0 / total_w } else { 0.0 };
    for (i, _) in targets.iter().enumerate() {
        let gi = grad.item_mut(i);
        for p in 0..plane {
            let (wy, y) = pixel_w[i * plane + p];
            gi[y * plane + p] -= wy as f32;
            for c in 0..k {
                gi[c * plane + p] *= norm as f32;
            }
        }
    }
    Ok((loss * norm, grad))
}

pub struct SegModel {
    pub backbone: Box<dyn SegBackbone>,
    pub class_map: ClassMap,
    pub resolution: (usize, usize),
    pub config: SegConfig,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("backbone", &self.backbone.name())
            .field("resolution", &self.resolution)
            .finish()
    }
}

impl SegModel {
    pub fn weights_hash(&self) -> String {
        self.backbone.weights_hash()
    }

    /// Per-pixel argmax over class logits, background included.
    pub fn predict(&self, image: &crate::dataset::RgbImage) -> Result<IndexMask> {
        if (image.height, image.width) != self.resolution {
            return Err(shape_err(format!(
                "model trained at {:?}, image is {}x{}",
                self.resolution, image.height, image.width
            )));
        }
        let x = Tensor::from_vec([1, 3, image.height, image.width], image.data.clone())?;
        let logits = self.backbone.logits(&x)?;
        let [_, k, h, w] = logits.shape();
        let plane = h * w;
        let d = logits.data();
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * plane + p] > d[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        IndexMask::new(h, w, labels)
    }
}

#[derive(Debug)]
pub struct SegTrainRun {
    pub model: SegModel,
    pub epoch_losses: Vec<f64>,
}

pub fn train_seg(data: &Dataset, cfg: &SegConfig) -> Result<SegTrainRun> {
    train_seg_with(data, cfg, &BackboneRegistry::default())
}

pub fn train_seg_with(data: &Dataset, cfg: &SegConfig, registry: &BackboneRegistry) -> Result<SegTrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset {
            sample_id: String::new(),
            reason: "segmentation training set is empty".into(),
        });
    }
    let (h, w) = data.resolution()?;
    let n_classes = data.class_map().n_classes();
    if let Some(ws) = &cfg.class_weights {
        if ws.len() != n_classes || ws.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(config_err(format!("class_weights needs {n_classes} non-negative entries")));
        }
    }
    let mut backbone = registry.build(
        &cfg.backbone,
        &BackboneSpec {
            n_classes,
            width: cfg.width,
            seed: cfg.seed,
        },
    )?;
    let m = backbone.side_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(shape_err(format!("{h}x{w} images are not divisible by {m}")));
    }
    let images: Vec<Tensor<f32>> = data
        .samples
        .iter()
        .map(|s| Tensor::from_vec([1, 3, h, w], s.image.data.clone()))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.learning_rate, 0.0);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut keyed_rng(cfg.seed, Domain::Seg, 1, epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
            let targets: Vec<&IndexMask> = chunk.iter().map(|&i| &data.samples[i].mask).collect();
            let mut loss = 0.0;
            let mut err = None;
            backbone.zero_grad();
            backbone.forward_backward(&x, &mut |logits| {
                match cross_entropy(logits, &targets, cfg.class_weights.as_deref()) {
                    Ok((l, g)) => {
                        loss = l;
                        g
                    }
                    Err(e) => {
                        err = Some(e);
                        Tensor::zeros(logits.shape())
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            opt.step(backbone.as_mut());
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(SegTrainRun {
        model: SegModel {
            backbone,
            class_map: data.class_map().clone(),
            resolution: (h, w),
            config: cfg.clone(),
        },
        epoch_losses,
    })
}

/// Predictions for every sample and their dataset-level mIoU.
pub fn eval_seg(model: &SegModel, data: &Dataset) -> Result<MiouReport> {
    if data.class_map() != &model.class_map {
        return Err(config_err("evaluation class map differs from the training class map"));
    }
    let preds = predict_all(model, data)?;
    let gts: Vec<IndexMask> = data.samples.iter().map(|s| s.mask.clone()).collect();
    miou(&preds, &gts, model.class_map.n_classes())
}

pub fn predict_all(model: &SegModel, data: &Dataset) -> Result<Vec<IndexMask>> {
    data.samples.iter().map(|s| model.predict(&s.image)).collect()
}

/// `meta.json` of a saved segmentation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModelMeta {
    pub config: SegConfig,
    pub class_names: Vec<String>,
    pub resolution: (usize, usize),
    pub weights_hash: String,
}

/// Writes `weights.bin` (little-endian f32) and `meta.json` into `dir`.
pub fn save_seg_model(model: &SegModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = model.backbone.flat_values().iter().flat_map(|v| v.to_le_bytes()).collect();
    let wp = dir.join("weights.bin");
    fs::write(&wp, bytes).map_err(|e| Error::io(&wp, e))?;
    let meta = SegModelMeta {
        config: model.config.clone(),
        class_names: model.class_map.names().to_vec(),
        resolution: model.resolution,
        weights_hash: model.weights_hash(),
    };
    let mp = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&mp, e))?;
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn load_seg_model(dir: &Path) -> Result<SegModel> {
    load_seg_model_with(dir, &BackboneRegistry::default())
}

pub fn load_seg_model_with(dir: &Path, registry: &BackboneRegistry) -> Result<SegModel> {
    let mp = dir.join("meta.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: SegModelMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e))?;
    let class_map = ClassMap::new(meta.class_names.clone())?;
    let mut backbone = registry.build(
        &meta.config.backbone,
        &BackboneSpec {
            n_classes: class_map.n_classes(),
            width: meta.config.width,
            seed: meta.config.seed,
        },
    )?;
    let wp = dir.join("weights.bin");
    let bytes = fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if bytes.len() % 4 != 0 || !backbone.load_flat(&values) {
        return Err(Error::format(&wp, "weight count does not match the backbone"));
    }
    let found = backbone.weights_hash();
    if found != meta.weights_hash {
        return Err(Error::HashMismatch {
            expected: meta.weights_hash,
            found,
        });
    }
    Ok(SegModel {
        backbone,
        class_map,
        resolution: meta.resolution,
        config: meta.config,
    })
}
