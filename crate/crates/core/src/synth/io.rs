//! On-disk dataset layout:
//!
//! ```text
//! <root>/spec.json
//! <root>/<split>/labels.csv            path,label,family,index
//! <root>/<split>/images/<stem>.png
//! <root>/<split>/masks/<stem>.png      fakes only
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{generate_split, Family, Provenance, Split, SyntheticSample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    path: String,
    label: u8,
    family: String,
    index: usize,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel map with values in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, image: &FeatureMap) -> Result<()> {
    let (c, h, w) = image.shape();
    let result = match c {
        3 => RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|ch| to_u8(image.get(ch, y, x))))
        })
        .save(path),
        1 => GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(image.get(0, y as usize, x as usize))])).save(path),
        _ => {
            return Err(Error::InvalidInput(format!("cannot store {c}-channel image as PNG")));
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::corrupt(path, other.to_string()),
    })
}

/// Reads a PNG as an RGB map in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<FeatureMap> {
    if !path.exists() {
        return Err(Error::corrupt(path, "missing image file"));
    }
    let img = image::open(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = FeatureMap::zeros(3, h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, f64::from(px.0[c]) / 255.0);
        }
    }
    Ok(out)
}

fn save_mask(path: &Path, mask: &[u8], size: usize) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        GrayImage::from_fn(size as u32, size as u32, |x, y| Luma([mask[y as usize * size + x as usize] * 255]));
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::corrupt(path, other.to_string()),
    })
}

fn load_mask(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::corrupt(path, "missing mask file"));
    }
    let img = image::open(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(img.to_luma8().pixels().map(|p| u8::from(p.0[0] >= 128)).collect())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_split(root: &Path, split: Split, samples: &[SyntheticSample]) -> Result<()> {
    let dir = root.join(split.as_str());
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let labels_path = dir.join("labels.csv");
    let mut writer = csv::Writer::from_path(&labels_path).map_err(|e| csv_error(&labels_path, e))?;
    for s in samples {
        let rel = format!("images/{}.png", s.stem());
        save_png(&dir.join(&rel), &s.image)?;
        if s.label == 1 {
            save_mask(&dir.join(format!("masks/{}.png", s.stem())), &s.mask, s.image.height)?;
        }
        writer
            .serialize(LabelRow {
                path: rel,
                label: s.label,
                family: s.family_name().to_string(),
                index: s.provenance.index,
            })
            .map_err(|e| csv_error(&labels_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&labels_path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::corrupt(path, format!("{other:?}")),
        }
    } else {
        Error::corrupt(path, e.to_string())
    }
}

/// Generates every split of `spec` and writes it under `root`.
pub fn write_dataset(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    create_dir(root)?;
    let spec_path = root.join("spec.json");
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))?;
    for split in Split::ALL {
        write_split(root, split, &generate_split(spec, split)?)?;
    }
    Ok(())
}

pub fn load_spec(root: &Path) -> Result<SyntheticSpec> {
    let path = root.join("spec.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<SyntheticSample>> {
    let spec = load_spec(root)?;
    let dir = root.join(split.as_str());
    let labels_path = dir.join("labels.csv");
    if !labels_path.exists() {
        return Err(Error::corrupt(&labels_path, "missing labels.csv"));
    }
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| csv_error(&labels_path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| csv_error(&labels_path, e))?;
        let image_path: PathBuf = dir.join(&row.path);
        let family = match row.family.as_str() {
            "none" => None,
            name => Some(name.parse::<Family>().map_err(|_| {
                Error::corrupt(&labels_path, format!("unknown family '{name}' for {}", row.path))
            })?),
        };
        if row.label > 1 || (row.label == 1) != family.is_some() {
            return Err(Error::corrupt(
                &labels_path,
                format!("label {} inconsistent with family '{}' for {}", row.label, row.family, row.path),
            ));
        }
        let image = load_png(&image_path)?;
        if image.height != spec.image_size || image.width != spec.image_size {
            return Err(Error::corrupt(
                &image_path,
                format!("expected {0}x{0} pixels", spec.image_size),
            ));
        }
        let plane = spec.image_size * spec.image_size;
        let mut sample = SyntheticSample {
            image,
            label: row.label,
            family,
            mask: vec![0; plane],
            provenance: Provenance {
                seed: spec.seed,
                split,
                index: row.index,
            },
        };
        if row.label == 1 {
            let mask_path = dir.join(format!("masks/{}.png", sample.stem()));
            let mask = load_mask(&mask_path)?;
            if mask.len() != plane || !mask.contains(&1) {
                return Err(Error::corrupt(&mask_path, "fake sample without a tamper region"));
            }
            sample.mask = mask;
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub splits: BTreeMap<Split, Vec<SyntheticSample>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let spec = load_spec(root)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        splits.insert(split, load_split(root, split)?);
    }
    Ok(Dataset { spec, splits })
}
