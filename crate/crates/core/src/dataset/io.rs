use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassMap, Dataset, DatasetManifest, DefectSample, IndexMask, ManifestEntry, Provenance, RgbImage};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    split: String,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    sample_id: String,
    caption: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

/// Returns `(width, height, color, pixels)` for 8-bit PNGs.
pub(crate) fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNGs are supported"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn save_mask_png(path: &Path, mask: &IndexMask) -> Result<()> {
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, &mask.data)
}

pub fn load_mask_png(path: &Path) -> Result<IndexMask> {
    let (w, h, color, data) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::format(path, "mask must be single-channel"));
    }
    IndexMask::new(h, w, data)
}

fn load_image_png(path: &Path) -> Result<RgbImage> {
    let (w, h, color, data) = read_png(path)?;
    if color != png::ColorType::Rgb {
        return Err(Error::format(path, "image must be 8-bit RGB"));
    }
    RgbImage::from_rgb8(h, w, &data)
}

fn split_dirs(root: &Path, split: &str) -> (PathBuf, PathBuf, PathBuf) {
    let base = root.join(split);
    (base.join("images"), base.join("masks"), base.join("manifest.json"))
}

fn read_captions(root: &Path) -> Result<BTreeMap<String, String>> {
    let path = root.join("captions.jsonl");
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut out = BTreeMap::new();
    for (i, line) in read_text(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: CaptionLine = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        out.insert(c.sample_id, c.caption);
    }
    Ok(out)
}

/// Writes `dataset` under `root` and returns the split directory.
///
/// The class map is written (or must already match); captions are merged
/// into the shared `captions.jsonl`.
pub fn export_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    let split = &dataset.manifest.split;
    let (img_dir, mask_dir, manifest_path) = split_dirs(root, split);
    create_dir(&img_dir)?;
    create_dir(&mask_dir)?;

    let cm_path = root.join("classmap.json");
    if cm_path.exists() {
        let existing = ClassMap::from_json(&read_text(&cm_path)?)
            .map_err(|e| Error::format(&cm_path, e))?;
        if &existing != dataset.class_map() {
            return Err(Error::format(&cm_path, "existing class map differs from dataset"));
        }
    } else {
        write_bytes(&cm_path, dataset.class_map().to_json().as_bytes())?;
    }

    for s in &dataset.samples {
        write_png(
            &img_dir.join(format!("{}.png", s.sample_id)),
            s.image.width,
            s.image.height,
            png::ColorType::Rgb,
            &s.image.to_rgb8(),
        )?;
        save_mask_png(&mask_dir.join(format!("{}.png", s.sample_id)), &s.mask)?;
    }

    let mut captions = read_captions(root)?;
    let mut touched = false;
    for s in &dataset.samples {
        if let Some(c) = &s.caption {
            captions.insert(s.sample_id.clone(), c.clone());
            touched = true;
        }
    }
    if touched {
        let path = root.join("captions.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (sample_id, caption) in captions {
            let line = serde_json::to_string(&CaptionLine { sample_id, caption })
                .map_err(|e| Error::format(&path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let manifest = ManifestFile {
        split: split.clone(),
        samples: dataset.manifest.entries.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&manifest_path, e))?;
    write_bytes(&manifest_path, text.as_bytes())?;
    Ok(root.join(split))
}

/// Loads one split. A split without a manifest lists whatever images exist
/// (as real samples); an empty or absent split yields zero samples.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let cm_path = root.join("classmap.json");
    let class_map = ClassMap::from_json(&read_text(&cm_path)?).map_err(|e| Error::format(&cm_path, e))?;
    let (img_dir, mask_dir, manifest_path) = split_dirs(root, split);

    let entries = if manifest_path.exists() {
        let m: ManifestFile = serde_json::from_str(&read_text(&manifest_path)?)
            .map_err(|e| Error::format(&manifest_path, e))?;
        m.samples
    } else if img_dir.is_dir() {
        let mut ids: Vec<String> = fs::read_dir(&img_dir)
            .map_err(|e| Error::io(&img_dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("png"))
                    .then(|| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                    .flatten()
            })
            .collect();
        ids.sort();
        ids.into_iter()
            .map(|sample_id| ManifestEntry {
                sample_id,
                provenance: Provenance::Real,
            })
            .collect()
    } else {
        Vec::new()
    };

    let captions = read_captions(root)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let id = &e.sample_id;
        let img_path = img_dir.join(format!("{id}.png"));
        let mask_path = mask_dir.join(format!("{id}.png"));
        if !img_path.exists() {
            return Err(Error::Dataset {
                sample_id: id.clone(),
                reason: format!("image file {} is missing", img_path.display()),
            });
        }
        if !mask_path.exists() {
            return Err(Error::Dataset {
                sample_id: id.clone(),
                reason: format!("mask file {} is missing", mask_path.display()),
            });
        }
        let image = load_image_png(&img_path)?;
        let mask = load_mask_png(&mask_path)?;
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::Dataset {
                sample_id: id.clone(),
                reason: format!(
                    "image {}x{} and mask {}x{} differ",
                    image.height, image.width, mask.height, mask.width
                ),
            });
        }
        samples.push(DefectSample {
            sample_id: id.clone(),
            image,
            mask,
            caption: captions.get(id).cloned(),
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            root: Some(root.to_path_buf()),
            split: split.to_string(),
            class_map,
            entries,
        },
        samples,
    })
}
