//! Annotated synthetic datasets on disk.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.jsonl      line 1: ManifestHeader, then one SynthRecord per line
//! images/000000.png   plate images, named by record index
//! ```
//!
//! Record `i` is generated from `derive_seed(seed, i)` alone, so the output
//! does not depend on thread scheduling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, ImageBuffer};

use super::augment::{augment_with, AugmentConfig, AugmentParams};
use super::derive_seed;
use super::format::{generate_plate_string, PlateFormat};
use super::render::{render_plate, RenderStyle, Spectrum};

pub const MANIFEST_FORMAT: &str = "platedpm-synth";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    /// `(train, val)` fractions; must sum to 1.
    pub split: (f64, f64),
    /// Fraction of NIR-style plates.
    pub nir_fraction: f64,
    pub seed: u64,
    pub format: PlateFormat,
    /// Applied to the train split only.
    pub augment: AugmentConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            split: (0.8, 0.2),
            nir_fraction: 0.5,
            seed: 0,
            format: PlateFormat::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Parameter("dataset size must be at least 1".into()));
        }
        let (t, v) = self.split;
        if t < 0.0 || v < 0.0 || ((t + v) - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions ({t}, {v}) must be non-negative and sum to 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.nir_fraction) {
            return Err(Error::Parameter(format!(
                "NIR fraction {} outside [0, 1]",
                self.nir_fraction
            )));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        ((self.n as f64 * self.split.0).round() as usize).min(self.n)
    }

    /// Spreads NIR plates evenly over the record indices.
    pub fn spectrum_of(&self, index: usize) -> Spectrum {
        let f = |i: usize| (i as f64 * self.nir_fraction).floor();
        if f(index + 1) > f(index) {
            Spectrum::Nir
        } else {
            Spectrum::Rgb
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharAnnotation {
    pub label: char,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub index: usize,
    /// Relative to the dataset directory.
    pub image: String,
    pub text: String,
    pub split: Split,
    pub plate_box: BoundingBox,
    pub chars: Vec<CharAnnotation>,
    pub style: RenderStyle,
    pub augment: Option<AugmentParams>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub train: usize,
    pub val: usize,
    pub config: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<SynthRecord>,
}

impl Manifest {
    pub fn image_path(&self, record: &SynthRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Renders record `index` without touching the disk.
pub fn generate_record(config: &DatasetConfig, index: usize) -> Result<(SynthRecord, ImageBuffer)> {
    let seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = generate_plate_string(&config.format, &mut rng);
    let style = RenderStyle::sample(config.spectrum_of(index), &mut rng);
    let (img, boxes) = render_plate(&text, &style, &mut rng)?;
    let split = if index < config.train_count() {
        Split::Train
    } else {
        Split::Val
    };
    let (img, boxes, augment) = if split == Split::Train {
        let params = AugmentParams::sample(&config.augment, img.width(), &mut rng);
        let (out, warp) = augment_with(&img, &params, &mut rng)?;
        let boxes = boxes
            .into_iter()
            .map(|(c, b)| (c, warp.apply_box(&b).clamp_to(out.width(), out.height())))
            .collect();
        (out, boxes, Some(params))
    } else {
        (img, boxes, None)
    };
    let record = SynthRecord {
        index,
        image: format!("images/{index:06}.png"),
        text,
        split,
        plate_box: img.full_box(),
        chars: boxes
            .into_iter()
            .map(|(label, bbox)| CharAnnotation { label, bbox })
            .collect(),
        style,
        augment,
        seed,
    };
    Ok((record, img))
}

/// Generates `config.n` plates under `out_dir` and writes the manifest.
pub fn generate_dataset(config: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let root = out_dir.as_ref();
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let (record, img) = generate_record(config, i)?;
            img.save_png(root.join(&record.image))?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    let train = config.train_count();
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        train,
        val: config.n - train,
        config: config.clone(),
    };
    let path = root.join(MANIFEST_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(&path, e));
    line(serde_json::to_string(&header)?)?;
    for r in &records {
        line(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Manifest {
        root: root.to_path_buf(),
        header,
        records,
    })
}

/// Reads a manifest; `path` is either the file or its dataset directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let (file, root) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), root)
    };
    let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Manifest("empty manifest".into()))?
        .map_err(|e| Error::io(&file, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| Error::Manifest(format!("header: {e}")))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest {} v{}",
            header.format, header.version
        )));
    }
    let mut records = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(|e| Error::io(&file, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let r: SynthRecord = serde_json::from_str(&l)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 2)))?;
        let labels: String = r.chars.iter().map(|c| c.label).collect();
        if labels != r.text {
            return Err(Error::Manifest(format!(
                "record {}: character labels '{labels}' disagree with text '{}'",
                r.index, r.text
            )));
        }
        records.push(r);
    }
    Ok(Manifest {
        root,
        header,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_fractions() {
        let c = DatasetConfig {
            n: 90000,
            split: (0.8, 0.2),
            ..DatasetConfig::default()
        };
        assert_eq!(c.train_count(), 72000);
        let bad = DatasetConfig {
            split: (0.8, 0.3),
            ..DatasetConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spectrum_mix_is_exact() {
        let c = DatasetConfig {
            nir_fraction: 0.5,
            ..DatasetConfig::default()
        };
        let nir = (0..1000)
            .filter(|&i| c.spectrum_of(i) == Spectrum::Nir)
            .count();
        assert_eq!(nir, 500);
        let all = DatasetConfig {
            nir_fraction: 1.0,
            ..DatasetConfig::default()
        };
        assert!((0..10).all(|i| all.spectrum_of(i) == Spectrum::Nir));
    }

    #[test]
    fn records_are_pure_functions_of_seed_and_index() {
        let c = DatasetConfig {
            n: 4,
            seed: 11,
            ..DatasetConfig::default()
        };
        for i in 0..4 {
            let (a, ia) = generate_record(&c, i).unwrap();
            let (b, ib) = generate_record(&c, i).unwrap();
            assert_eq!(a, b);
            assert_eq!(ia, ib);
            assert!(c.format.validate(&a.text));
        }
    }
}
