//! Defect samples, class maps, validation and the on-disk dataset layout.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/classmap.json                     {"0":"background","1":"scratch",...}
//! root/captions.jsonl                    optional {"sample_id":..,"caption":..} per line
//! root/<split>/images/<sample_id>.png    8-bit RGB
//! root/<split>/masks/<sample_id>.png     8-bit gray, pixel value = class index
//! root/<split>/manifest.json             sample ids + provenance
//! ```

mod encode;
mod io;
mod toy;

pub use encode::{concat_pair, decode_mask, one_hot_encode, split_pair, EncodedPair};
pub use io::{export_dataset, load_dataset, load_mask_png, save_mask_png};
pub use toy::{synth_toy_dataset, DefectKind, Texture, ToySpec};

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Class index to name; index 0 is always background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    /// `names[0]` must be `"background"`.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some("background") {
            return Err(config_err("class 0 must be \"background\""));
        }
        if names.len() > 256 {
            return Err(config_err("at most 255 defect classes fit an 8-bit mask"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(config_err(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(config_err(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Background plus the given defect class names.
    pub fn with_defects<I, T>(defects: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut names = vec!["background".to_string()];
        names.extend(defects.into_iter().map(Into::into));
        Self::new(names)
    }

    pub fn n_defect(&self) -> usize {
        self.names.len() - 1
    }

    /// Including background.
    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `{"0": "background", ...}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &str> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (i.to_string(), n.as_str()))
            .collect();
        // Sort numerically, not lexically, so "10" follows "9".
        let mut entries: Vec<_> = map.into_iter().collect();
        entries.sort_by_key(|(k, _)| k.parse::<usize>().unwrap_or(usize::MAX));
        let body: Vec<String> = entries
            .iter()
            .map(|(k, v)| format!("  {}: {}", serde_json::json!(k), serde_json::json!(v)))
            .collect();
        format!("{{\n{}\n}}\n", body.join(",\n"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| config_err(format!("classmap: {e}")))?;
        let mut indexed = Vec::with_capacity(raw.len());
        for (k, v) in raw {
            let idx: usize = k
                .parse()
                .map_err(|_| config_err(format!("classmap key {k:?} is not an index")))?;
            indexed.push((idx, v));
        }
        indexed.sort_by_key(|(i, _)| *i);
        for (expect, (idx, _)) in indexed.iter().enumerate() {
            if *idx != expect {
                return Err(config_err(format!(
                    "classmap indices must be contiguous from 0; missing {expect}"
                )));
            }
        }
        Self::new(indexed.into_iter().map(|(_, v)| v).collect())
    }
}

/// RGB image stored channel-major with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `[3, height, width]`.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_rgb8(height: usize, width: usize, interleaved: &[u8]) -> Result<Self> {
        if interleaved.len() != 3 * height * width {
            return Err(Error::Shape("rgb8 buffer length".into()));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in interleaved.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = u8_to_unit(px[c]);
            }
        }
        Self::new(height, width, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push(unit_to_u8(self.data[c * plane + p]));
            }
        }
        out
    }
}

/// Maps `[0, 255]` onto `[-1, 1]`; exact inverse of [`unit_to_u8`] on this grid.
pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// One class index per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl IndexMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    /// Pixel count per class index (length `n_classes`, larger values ignored).
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &v in &self.data {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        counts
    }

    pub fn is_background(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectSample {
    pub sample_id: String,
    pub image: RgbImage,
    pub mask: IndexMask,
    pub caption: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Set once the dataset lives on disk.
    pub root: Option<PathBuf>,
    pub split: String,
    pub class_map: ClassMap,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance == provenance)
            .count()
    }
}

/// A manifest together with its loaded samples, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<DefectSample>,
}

impl Dataset {
    pub fn new(split: &str, class_map: ClassMap, samples: Vec<DefectSample>, provenance: Provenance) -> Self {
        let entries = samples
            .iter()
            .map(|s| ManifestEntry {
                sample_id: s.sample_id.clone(),
                provenance,
            })
            .collect();
        Self {
            manifest: DatasetManifest {
                root: None,
                split: split.to_string(),
                class_map,
                entries,
            },
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.manifest.class_map
    }

    /// Common `(height, width)`, or an error if samples disagree.
    pub fn resolution(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| config_err("dataset is empty"))?;
        let hw = (first.image.height, first.image.width);
        for s in &self.samples {
            if (s.image.height, s.image.width) != hw {
                return Err(Error::Dataset {
                    sample_id: s.sample_id.clone(),
                    reason: format!(
                        "resolution {}x{} differs from {}x{}",
                        s.image.height, s.image.width, hw.0, hw.1
                    ),
                });
            }
        }
        Ok(hw)
    }

    /// Splits off the first `n` samples as one dataset and the rest as another.
    pub fn split_at(&self, n: usize, first: &str, second: &str) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |range: std::ops::Range<usize>, split: &str| Dataset {
            manifest: DatasetManifest {
                root: None,
                split: split.to_string(),
                class_map: self.manifest.class_map.clone(),
                entries: self.manifest.entries[range.clone()].to_vec(),
            },
            samples: self.samples[range].to_vec(),
        };
        (part(0..n, first), part(n..self.len(), second))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    ShapeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    MaskOutOfRange { row: usize, col: usize, value: u8 },
    ImageOutOfRange { channel: usize, row: usize, col: usize, value: f32 },
    NotDivisible { height: usize, width: usize, factor: usize },
    /// More violations of one kind than are listed individually.
    Truncated { kind: &'static str, omitted: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ShapeMismatch { image, mask } => write!(
                f,
                "shape mismatch: image {}x{}, mask {}x{}",
                image.0, image.1, mask.0, mask.1
            ),
            Violation::MaskOutOfRange { row, col, value } => {
                write!(f, "mask value out of range at ({row},{col}): {value}")
            }
            Violation::ImageOutOfRange {
                channel,
                row,
                col,
                value,
            } => write!(
                f,
                "image value out of [-1,1] at ({row},{col}) channel {channel}: {value}"
            ),
            Violation::NotDivisible {
                height,
                width,
                factor,
            } => write!(f, "resolution {height}x{width} not divisible by pool factor {factor}"),
            Violation::Truncated { kind, omitted } => write!(f, "{omitted} more {kind} violations"),
        }
    }
}

/// Violations found in one sample; empty means valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub sample_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_clean() {
            Ok(())
        } else {
            Err(Error::Validation {
                sample_id: self.sample_id,
                violations: self.violations.iter().map(ToString::to_string).collect(),
            })
        }
    }
}

const MAX_LISTED: usize = 32;

pub fn validate_sample(sample: &DefectSample, class_map: &ClassMap) -> ValidationReport {
    validate_sample_with(sample, class_map, None)
}

/// Like [`validate_sample`], also requiring both dimensions to be multiples
/// of `pool_factor` when given.
pub fn validate_sample_with(
    sample: &DefectSample,
    class_map: &ClassMap,
    pool_factor: Option<usize>,
) -> ValidationReport {
    let mut violations = Vec::new();
    let (ih, iw) = (sample.image.height, sample.image.width);
    let (mh, mw) = (sample.mask.height, sample.mask.width);
    if (ih, iw) != (mh, mw) {
        violations.push(Violation::ShapeMismatch {
            image: (ih, iw),
            mask: (mh, mw),
        });
    }
    let max_class = class_map.n_defect();
    let mut bad_mask = 0;
    for (p, &v) in sample.mask.data.iter().enumerate() {
        if v as usize > max_class {
            if bad_mask < MAX_LISTED {
                violations.push(Violation::MaskOutOfRange {
                    row: p / mw.max(1),
                    col: p % mw.max(1),
                    value: v,
                });
            }
            bad_mask += 1;
        }
    }
    if bad_mask > MAX_LISTED {
        violations.push(Violation::Truncated {
            kind: "mask range",
            omitted: bad_mask - MAX_LISTED,
        });
    }
    let plane = (ih * iw).max(1);
    let mut bad_img = 0;
    for (i, &v) in sample.image.data.iter().enumerate() {
        if !(-1.0..=1.0).contains(&v) {
            if bad_img < MAX_LISTED {
                let p = i % plane;
                violations.push(Violation::ImageOutOfRange {
                    channel: i / plane,
                    row: p / iw.max(1),
                    col: p % iw.max(1),
                    value: v,
                });
            }
            bad_img += 1;
        }
    }
    if bad_img > MAX_LISTED {
        violations.push(Violation::Truncated {
            kind: "image range",
            omitted: bad_img - MAX_LISTED,
        });
    }
    if let Some(factor) = pool_factor {
        if factor > 0 && (ih % factor != 0 || iw % factor != 0) {
            violations.push(Violation::NotDivisible {
                height: ih,
                width: iw,
                factor,
            });
        }
    }
    ValidationReport {
        sample_id: sample.sample_id.clone(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, mh: usize, mw: usize) -> DefectSample {
        DefectSample {
            sample_id: "s".into(),
            image: RgbImage::new(h, w, vec![0.0; 3 * h * w]).unwrap(),
            mask: IndexMask::zeros(mh, mw),
            caption: None,
        }
    }

    fn two_class() -> ClassMap {
        ClassMap::with_defects(["scratch", "blob"]).unwrap()
    }

    #[test]
    fn well_formed_sample_is_clean() {
        let mut s = sample(64, 64, 64, 64);
        s.mask.set(3, 4, 2);
        assert!(validate_sample(&s, &two_class()).is_clean());
    }

    #[test]
    fn out_of_range_mask_value_is_reported_with_position() {
        let mut s = sample(64, 64, 64, 64);
        s.mask.set(5, 7, 5);
        let r = validate_sample(&s, &two_class());
        assert_eq!(
            r.violations,
            vec![Violation::MaskOutOfRange {
                row: 5,
                col: 7,
                value: 5
            }]
        );
        assert!(r.violations[0].to_string().contains("mask value out of range at (5,7)"));
    }

    #[test]
    fn shape_mismatch_is_one_violation() {
        let r = validate_sample(&sample(64, 64, 32, 32), &two_class());
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].to_string().starts_with("shape mismatch"));
    }

    #[test]
    fn divisibility_is_optional() {
        let s = sample(48, 48, 48, 48);
        assert!(validate_sample(&s, &two_class()).is_clean());
        let r = validate_sample_with(&s, &two_class(), Some(32));
        assert!(matches!(r.violations[..], [Violation::NotDivisible { .. }]));
    }

    #[test]
    fn class_map_json_round_trip_and_errors() {
        let names: Vec<String> = std::iter::once("background".to_string())
            .chain((1..12).map(|i| format!("c{i}")))
            .collect();
        let cm = ClassMap::new(names).unwrap();
        assert_eq!(ClassMap::from_json(&cm.to_json()).unwrap(), cm);
        assert!(ClassMap::from_json(r#"{"0":"background","2":"x"}"#).is_err());
        assert!(ClassMap::from_json(r#"{"0":"bg"}"#).is_err());
        assert!(ClassMap::with_defects(["a", "a"]).is_err());
        assert!(ClassMap::with_defects([""]).is_err());
    }

    #[test]
    fn u8_grid_round_trips_exactly() {
        for v in 0..=255u8 {
            assert_eq!(unit_to_u8(u8_to_unit(v)), v);
        }
    }
}
