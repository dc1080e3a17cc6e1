//! Datasets on disk and PNG conversion.
//!
//! A dataset directory holds `dataset.toml` (the generating config),
//! `manifest.jsonl` (one [`ManifestEntry`] per item), exact `hr/<id>.tvqf`
//! and `lr/<id>.tvqf` float images, and 8-bit PNG previews of both.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use texvq_core::dataset::{synth_dataset, train_count, DatasetConfig, Sample};
use texvq_core::degradation::DegradationRecipe;
use texvq_core::image::ImagePatch;
use texvq_core::textures::Texture;

use crate::formats::{decode_image, encode_image, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub index: usize,
    pub split: Split,
    pub texture: Texture,
    pub recipe: DegradationRecipe,
}

/// Train and validation items.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn synthesize(config: &DatasetConfig) -> anyhow::Result<Self> {
        let (train, val) = synth_dataset(config)?;
        Ok(Dataset { config: config.clone(), train, val })
    }

    /// Loads `dir` when given, otherwise synthesizes in memory.
    pub fn resolve(dir: Option<&Path>, config: &DatasetConfig) -> anyhow::Result<Self> {
        match dir {
            Some(d) => {
                let ds = load_dataset(d)?;
                if &ds.config != config {
                    bail!("dataset at {} was generated with a different data config", d.display());
                }
                Ok(ds)
            }
            None => Dataset::synthesize(config),
        }
    }
}

pub fn patch_to_rgb(img: &ImagePatch) -> anyhow::Result<image::RgbImage> {
    let (c, h, w) = img.dims();
    if c != 3 && c != 1 {
        bail!("cannot encode a {c}-channel image as PNG");
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| (img.get(if c == 1 { 0 } else { ch }, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImagePatch) -> anyhow::Result<()> {
    patch_to_rgb(img)?.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Reads any PNG as an RGB patch with values in [0, 1].
pub fn read_png(path: &Path) -> anyhow::Result<ImagePatch> {
    let rgb = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ImagePatch::new(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

/// Reads a `.tvqf` float image, or a PNG for any other extension.
pub fn read_image(path: &Path) -> anyhow::Result<ImagePatch> {
    if path.extension().is_some_and(|e| e == "tvqf") {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(decode_image(&bytes)?)
    } else {
        read_png(path)
    }
}

fn item_paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    [
        dir.join("hr").join(format!("{id}.tvqf")),
        dir.join("lr").join(format!("{id}.tvqf")),
        dir.join("hr").join(format!("{id}.png")),
        dir.join("lr").join(format!("{id}.png")),
    ]
}

/// Writes a dataset directory. `dir` must be empty or absent.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> anyhow::Result<()> {
    fs::create_dir_all(dir.join("hr"))?;
    fs::create_dir_all(dir.join("lr"))?;
    let cfg = toml::to_string(&ds.config)?;
    fs::write(dir.join("dataset.toml"), cfg)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    let items = ds.train.iter().map(|s| (s, Split::Train)).chain(ds.val.iter().map(|s| (s, Split::Val)));
    for (s, split) in items {
        let entry = ManifestEntry {
            id: s.id.clone(),
            index: s.index,
            split,
            texture: s.texture.clone(),
            recipe: s.recipe.clone(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
        let [hr, lr, hr_png, lr_png] = item_paths(dir, &s.id);
        write_atomic(&hr, &encode_image(&s.hr))?;
        write_atomic(&lr, &encode_image(&s.lr))?;
        write_png(&hr_png, &s.hr)?;
        write_png(&lr_png, &s.lr)?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let cfg_path = dir.join("dataset.toml");
    let config: DatasetConfig =
        toml::from_str(&fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?)?;
    let file = fs::File::open(dir.join("manifest.jsonl")).context("opening dataset manifest")?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let entry: ManifestEntry = serde_json::from_str(&line?).with_context(|| format!("manifest line {}", n + 1))?;
        let [hr, lr, _, _] = item_paths(dir, &entry.id);
        let sample = Sample {
            id: entry.id,
            index: entry.index,
            texture: entry.texture,
            recipe: entry.recipe,
            hr: read_image(&hr)?,
            lr: read_image(&lr)?,
        };
        match entry.split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
        }
    }
    if train.len() + val.len() != config.count || train.len() != train_count(config.count) {
        bail!("manifest lists {} train + {} val items, config expects {}", train.len(), val.len(), config.count);
    }
    Ok(Dataset { config, train, val })
}
