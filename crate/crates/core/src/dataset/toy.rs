//! Procedural textured surfaces with drawn defects and exact masks.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassMap, Dataset, DefectSample, IndexMask, Provenance, RgbImage};
use crate::error::{config_err, Result};
use crate::rng::{keyed_rng, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    Stain,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Blob, DefectKind::Scratch, DefectKind::Stain];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::Stain => "stain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Banded,
    Cellular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub n_defect: usize,
    /// Empty means the first `n_defect` of blob, scratch, stain.
    #[serde(default)]
    pub defect_kinds: Vec<DefectKind>,
    pub seed: u64,
    #[serde(default = "default_textures")]
    pub textures: Vec<Texture>,
    /// Both dimensions must be multiples of this (the largest model pool factor).
    #[serde(default = "default_pool_factor")]
    pub pool_factor: usize,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_textures() -> Vec<Texture> {
    vec![Texture::Banded]
}

fn default_pool_factor() -> usize {
    32
}

fn default_split() -> String {
    "train".into()
}

impl ToySpec {
    pub fn new(count: usize, height: usize, width: usize, n_defect: usize, seed: u64) -> Self {
        Self {
            count,
            height,
            width,
            n_defect,
            defect_kinds: Vec::new(),
            seed,
            textures: default_textures(),
            pool_factor: default_pool_factor(),
            split: default_split(),
        }
    }

    pub fn kinds(&self) -> Result<Vec<DefectKind>> {
        let kinds = if self.defect_kinds.is_empty() {
            if self.n_defect == 0 || self.n_defect > DefectKind::ALL.len() {
                return Err(config_err(format!(
                    "n_defect must be 1..=3 without explicit kinds, got {}",
                    self.n_defect
                )));
            }
            DefectKind::ALL[..self.n_defect].to_vec()
        } else {
            self.defect_kinds.clone()
        };
        if kinds.len() != self.n_defect {
            return Err(config_err(format!(
                "{} defect kinds listed for n_defect = {}",
                kinds.len(),
                self.n_defect
            )));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(config_err(format!("defect kind {k:?} listed twice")));
            }
        }
        Ok(kinds)
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(config_err("count must be at least 1"));
        }
        if self.textures.is_empty() {
            return Err(config_err("at least one texture is required"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(config_err("toy images must be at least 8x8"));
        }
        let f = self.pool_factor.max(1);
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(config_err(format!(
                "{}x{} is not divisible by pool factor {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: isize, x: isize, color: [f64; 3], alpha: f64, class: u8) {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            return;
        }
        let p = y as usize * self.w + x as usize;
        for (c, col) in color.iter().enumerate() {
            self.rgb[p][c] = self.rgb[p][c] * (1.0 - alpha) + col * alpha;
        }
        self.mask[p] = class;
    }
}

/// Deterministic toy dataset; identical specs give identical samples.
pub fn synth_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    spec.validate()?;
    let kinds = spec.kinds()?;
    let class_map = ClassMap::with_defects(kinds.iter().map(|k| k.name()))?;
    let mut style = keyed_rng(spec.seed, Domain::Toy, u64::MAX, 0);
    let base = [
        style.random_range(90.0..150.0),
        style.random_range(90.0..150.0),
        style.random_range(90.0..150.0),
    ];
    let mut defect_counter = 0usize;
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = keyed_rng(spec.seed, Domain::Toy, i as u64, 0);
        let texture = spec.textures[rng.random_range(0..spec.textures.len())];
        let mut canvas = Canvas {
            h: spec.height,
            w: spec.width,
            rgb: background(texture, spec.height, spec.width, base, &mut rng),
            mask: vec![0; spec.height * spec.width],
        };
        let n_defects = if rng.random_bool(0.1) {
            0
        } else {
            rng.random_range(1..=3)
        };
        let mut drawn = Vec::with_capacity(n_defects);
        for _ in 0..n_defects {
            let class = defect_counter % kinds.len();
            defect_counter += 1;
            let kind = kinds[class];
            draw_defect(&mut canvas, kind, class as u8 + 1, &mut rng);
            drawn.push(kind.name());
        }
        let rgb8: Vec<u8> = canvas
            .rgb
            .iter()
            .flat_map(|px| px.map(|v| v.round().clamp(0.0, 255.0) as u8))
            .collect();
        let caption = match drawn.len() {
            0 => format!("{texture:?} surface without defects").to_lowercase(),
            _ => format!("{:?} surface with {}", texture, drawn.join(", ")).to_lowercase(),
        };
        samples.push(DefectSample {
            sample_id: format!("toy_{i:04}"),
            image: RgbImage::from_rgb8(spec.height, spec.width, &rgb8)?,
            mask: IndexMask::new(spec.height, spec.width, canvas.mask)?,
            caption: Some(caption),
        });
    }
    Ok(Dataset::new(&spec.split, class_map, samples, Provenance::Real))
}

fn background(texture: Texture, h: usize, w: usize, base: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let jitter = rng.random_range(-12.0..12.0);
    let mut out = Vec::with_capacity(h * w);
    match texture {
        Texture::Banded => {
            let period = h as f64 / 4.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            let tilt = rng.random_range(-0.15..0.15);
            for y in 0..h {
                for x in 0..w {
                    let s = (2.0 * PI * (y as f64 + tilt * x as f64) / period + phase).sin();
                    let grain = rng.random_range(-4.0..4.0);
                    out.push(base.map(|b| b + jitter + 35.0 * s + grain));
                }
            }
        }
        Texture::Cellular => {
            let sites: Vec<(f64, f64)> = (0..6)
                .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
                .collect();
            let scale = h.min(w) as f64 / 3.0;
            for y in 0..h {
                for x in 0..w {
                    let d = sites
                        .iter()
                        .map(|(sy, sx)| ((y as f64 - sy).powi(2) + (x as f64 - sx).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min);
                    let s = (d / scale).min(1.0) * 2.0 - 1.0;
                    let grain = rng.random_range(-4.0..4.0);
                    out.push(base.map(|b| b + jitter + 35.0 * s + grain));
                }
            }
        }
    }
    out
}

fn draw_defect(canvas: &mut Canvas, kind: DefectKind, class: u8, rng: &mut ChaCha8Rng) {
    let (h, w) = (canvas.h as f64, canvas.w as f64);
    let small = h.min(w);
    match kind {
        DefectKind::Blob => {
            let rx = rng.random_range((small / 16.0).max(2.0)..(small / 6.0).max(3.0));
            let ry = rng.random_range((small / 16.0).max(2.0)..(small / 6.0).max(3.0));
            let cy = rng.random_range(ry..h - ry);
            let cx = rng.random_range(rx..w - rx);
            let shade = rng.random_range(20.0..50.0);
            let color = [shade, shade * 0.8, shade * 0.8];
            for y in (cy - ry).floor() as isize..=(cy + ry).ceil() as isize {
                for x in (cx - rx).floor() as isize..=(cx + rx).ceil() as isize {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    if dx * dx + dy * dy <= 1.0 {
                        canvas.paint(y, x, color, 1.0, class);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let len = rng.random_range(small / 4.0..small / 2.0);
            let angle = rng.random_range(0.0..PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            let cy = rng.random_range(h * 0.2..h * 0.8);
            let cx = rng.random_range(w * 0.2..w * 0.8);
            let thick = if small >= 64.0 { 1 } else { 0 };
            let bright = rng.random_range(215.0..245.0);
            let steps = (len * 2.0).ceil() as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64 - 0.5;
                let y = (cy + t * len * dy).round() as isize;
                let x = (cx + t * len * dx).round() as isize;
                for oy in -thick..=thick {
                    for ox in -thick..=thick {
                        canvas.paint(y + oy, x + ox, [bright, bright, bright * 0.95], 1.0, class);
                    }
                }
            }
        }
        DefectKind::Stain => {
            let cy = rng.random_range(h * 0.2..h * 0.8);
            let cx = rng.random_range(w * 0.2..w * 0.8);
            let tint = [rng.random_range(150.0..190.0), 110.0, 40.0];
            let discs: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let r = rng.random_range((small / 12.0).max(1.5)..(small / 8.0).max(2.0));
                    (
                        cy + rng.random_range(-r..r),
                        cx + rng.random_range(-r..r),
                        r,
                    )
                })
                .collect();
            for y in 0..canvas.h as isize {
                for x in 0..canvas.w as isize {
                    let inside = discs.iter().any(|(sy, sx, r)| {
                        (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2) <= r * r
                    });
                    if inside {
                        canvas.paint(y, x, tint, 0.6, class);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_sample;

    #[test]
    fn generation_is_deterministic() {
        let spec = ToySpec::new(25, 64, 64, 2, 7);
        assert_eq!(synth_toy_dataset(&spec).unwrap(), synth_toy_dataset(&spec).unwrap());
    }

    #[test]
    fn generated_samples_validate() {
        let mut spec = ToySpec::new(25, 32, 32, 3, 3);
        spec.textures = vec![Texture::Banded, Texture::Cellular];
        let ds = synth_toy_dataset(&spec).unwrap();
        for s in &ds.samples {
            assert!(validate_sample(s, ds.class_map()).is_clean(), "{}", s.sample_id);
        }
    }

    #[test]
    fn single_kind_masks_use_only_that_class() {
        let mut spec = ToySpec::new(10, 32, 32, 1, 1);
        spec.defect_kinds = vec![DefectKind::Blob];
        let ds = synth_toy_dataset(&spec).unwrap();
        assert_eq!(ds.class_map().name(1), Some("blob"));
        assert!(ds.samples.iter().all(|s| s.mask.data.iter().all(|&v| v <= 1)));
        assert!(ds.samples.iter().any(|s| !s.mask.is_background()));
    }

    #[test]
    fn kinds_are_balanced() {
        let spec = ToySpec::new(40, 32, 32, 3, 5);
        let ds = synth_toy_dataset(&spec).unwrap();
        // Count drawn defects per kind from captions (masks may overlap).
        let mut counts = [0usize; 3];
        for s in &ds.samples {
            let cap = s.caption.as_deref().unwrap();
            for (i, k) in DefectKind::ALL.iter().enumerate() {
                counts[i] += cap.matches(k.name()).count();
            }
        }
        let total: usize = counts.iter().sum();
        let uniform = total as f64 / 3.0;
        for c in counts {
            assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "{counts:?}");
        }
    }

    #[test]
    fn rejects_indivisible_resolution() {
        assert!(synth_toy_dataset(&ToySpec::new(2, 48, 48, 1, 0)).is_err());
        let mut ok = ToySpec::new(2, 48, 48, 1, 0);
        ok.pool_factor = 16;
        assert!(synth_toy_dataset(&ok).is_ok());
        assert!(synth_toy_dataset(&ToySpec::new(0, 32, 32, 1, 0)).is_err());
    }
}
