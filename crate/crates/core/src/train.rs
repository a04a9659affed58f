//! Latent-SVM training of the per-class tree models.
//!
//! Each class is trained on its own: positives are relabelled with the
//! current model inside a small window around the annotation, hard
//! negatives are mined from a shared pool of plate images (with the class's
//! own instances masked out), and the regularised hinge loss is minimised by
//! SGD under the decaying learning rate of [`lr_schedule`].

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpm::{
    configuration_features, CharacterMixtureSet, CharacterTreeModel, ClassMixture, LevelInference,
    PartPlacement, RootWindow,
};
use crate::error::{Error, Result};
use crate::hog::{build_pyramid, HogCellGrid, HogConfig, HogPyramid, PyramidConfig, HOG_DIM};
use crate::imaging::{self, BoundingBox, ImageBuffer};
use crate::synth::{derive_seed, Manifest, Split};

/// Mined windows overlapping an instance of the class by more than this IoU
/// are not used as negatives.
const EXCLUDE_IOU: f64 = 0.3;
/// Per-image suppression of mined windows.
const MINING_NMS_IOU: f64 = 0.5;
/// Extra cells kept around the latent window of every positive.
const POSITIVE_MARGIN: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda0: f64,
    /// Per-epoch learning-rate factor.
    pub decay: f64,
    /// SGD epochs per latent round.
    pub epochs: usize,
    /// Small classes cycle through their samples until an epoch has taken
    /// at least this many steps.
    pub min_steps_per_epoch: usize,
    pub latent_rounds: usize,
    pub reg_c: f64,
    pub negatives_per_positive: usize,
    /// Lower bound on the hard-negative budget of a component.
    pub min_negatives: usize,
    pub rng_seed: u64,
    pub mixtures: usize,
    pub max_positives_per_class: Option<usize>,
    /// Number of plate images used for negative mining.
    pub background_pool: usize,
    /// Root filter size `(w, h)` in cells.
    pub root_cells: (usize, usize),
    pub part_cells: (usize, usize),
    /// Latent search radius around the annotated centre, in cells.
    pub latent_radius: usize,
    pub alphabet: Vec<char>,
    pub hog: HogConfig,
    pub pyramid: PyramidConfig,
    pub canonical_height: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.0003,
            decay: 0.9,
            epochs: 10,
            min_steps_per_epoch: 6000,
            latent_rounds: 3,
            reg_c: 0.01,
            negatives_per_positive: 5,
            min_negatives: 3000,
            rng_seed: 0,
            mixtures: 1,
            max_positives_per_class: Some(1000),
            background_pool: 300,
            root_cells: (4, 8),
            part_cells: (4, 4),
            latent_radius: 1,
            alphabet: crate::ALPHABET.chars().collect(),
            hog: HogConfig::default(),
            pyramid: PyramidConfig::default(),
            canonical_height: 64,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 {} must be positive", self.lambda0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} outside (0, 1]", self.decay));
        }
        if self.reg_c < 0.0 {
            return bad(format!("reg_c {} is negative", self.reg_c));
        }
        if self.mixtures == 0 {
            return bad("at least one mixture component is required".into());
        }
        if self.alphabet.is_empty() {
            return bad("empty alphabet".into());
        }
        if self.part_cells.0 > self.root_cells.0 || self.part_cells.1 > self.root_cells.1 {
            return bad("part filters must fit inside the root".into());
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, obtained by applying the per-epoch decay
/// `epoch` times to `lambda0`.
pub fn lr_schedule(config: &TrainingConfig, epoch: usize) -> f64 {
    let mut lr = config.lambda0;
    for _ in 0..epoch {
        lr *= config.decay;
    }
    lr
}

/// One annotated region. Positives carry a label; negatives mark regions
/// known to contain no character.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub image: usize,
    pub label: Option<char>,
    /// In canonical plate pixels.
    pub bbox: BoundingBox,
}

impl TrainingSample {
    pub fn is_positive(&self) -> bool {
        self.label.is_some()
    }
}

/// Canonical grayscale plates plus their annotations.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub images: Vec<ImageBuffer>,
    pub samples: Vec<TrainingSample>,
}

/// Grayscale, resized to `height`, with boxes scaled along.
pub fn canonical_plate(
    plate: &ImageBuffer,
    boxes: &[BoundingBox],
    height: usize,
) -> Result<(ImageBuffer, Vec<BoundingBox>)> {
    let gray = imaging::to_grayscale(plate);
    let out = imaging::resize_to_height(&gray, height)?;
    let sx = out.width() as f64 / plate.width() as f64;
    let sy = out.height() as f64 / plate.height() as f64;
    let boxes = boxes
        .iter()
        .map(|b| b.scaled(sx, sy).clamp_to(out.width(), out.height()))
        .collect();
    Ok((out, boxes))
}

impl TrainingSet {
    /// Adds a plate crop with its labelled character boxes (plate pixels).
    pub fn push_plate(
        &mut self,
        plate: &ImageBuffer,
        chars: &[(char, BoundingBox)],
        canonical_height: usize,
    ) -> Result<usize> {
        let boxes: Vec<BoundingBox> = chars.iter().map(|c| c.1).collect();
        let (img, boxes) = canonical_plate(plate, &boxes, canonical_height)?;
        let image = self.images.len();
        self.images.push(img);
        for (&(c, _), bbox) in chars.iter().zip(boxes) {
            self.samples.push(TrainingSample {
                image,
                label: Some(c),
                bbox,
            });
        }
        Ok(image)
    }

    /// Loads one split of a synthetic dataset.
    pub fn from_manifest(
        manifest: &Manifest,
        split: Split,
        canonical_height: usize,
    ) -> Result<Self> {
        let records: Vec<_> = manifest.split(split).collect();
        let loaded = records
            .par_iter()
            .map(|r| {
                let img = ImageBuffer::open(manifest.image_path(r))?;
                let plate = imaging::crop(&img, &r.plate_box)?;
                let chars: Vec<(char, BoundingBox)> = r
                    .chars
                    .iter()
                    .map(|c| (c.label, c.bbox.translated(-r.plate_box.x, -r.plate_box.y)))
                    .collect();
                let boxes: Vec<BoundingBox> = chars.iter().map(|c| c.1).collect();
                let (canon, boxes) = canonical_plate(&plate, &boxes, canonical_height)?;
                Ok((
                    canon,
                    chars.iter().map(|c| c.0).zip(boxes).collect::<Vec<_>>(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = TrainingSet::default();
        for (img, chars) in loaded {
            let image = set.images.len();
            set.images.push(img);
            set.samples
                .extend(chars.into_iter().map(|(c, bbox)| TrainingSample {
                    image,
                    label: Some(c),
                    bbox,
                }));
        }
        Ok(set)
    }
}

/// Plate features used for negative mining; root windows overlapping an
/// `exclude` box are skipped.
#[derive(Debug, Clone)]
pub struct Background<'a> {
    pub pyramid: &'a HogPyramid,
    pub exclude: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegative {
    pub features: Vec<f64>,
    pub placement: PartPlacement,
    pub image: usize,
    pub score: f64,
}

fn root_box(
    model: &CharacterTreeModel,
    pyramid: &HogPyramid,
    level: usize,
    x: usize,
    y: usize,
) -> BoundingBox {
    let lv = &pyramid.levels[level];
    let cell = lv.grid.cell_size as f64 / lv.scale;
    let r = model.root_filter();
    BoundingBox::new(
        x as f64 * cell,
        y as f64 * cell,
        r.w_cells as f64 * cell,
        r.h_cells as f64 * cell,
    )
}

/// Top-`k` root placements over the background images, best first.
///
/// Each image contributes at most `ceil(2k / images)` mutually
/// non-overlapping windows. Ties go to the lower image index, then level,
/// then smaller y and x.
pub fn mine_hard_negatives(
    model: &CharacterTreeModel,
    backgrounds: &[Background<'_>],
    k: usize,
) -> Result<Vec<MinedNegative>> {
    mine_above(model, backgrounds, k, f64::NEG_INFINITY)
}

fn mine_above(
    model: &CharacterTreeModel,
    backgrounds: &[Background<'_>],
    k: usize,
    min_score: f64,
) -> Result<Vec<MinedNegative>> {
    if backgrounds.is_empty() {
        return Err(Error::precondition(
            "negative mining needs at least one background image",
        ));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    model.validate()?;
    let per_image = (2 * k).div_ceil(backgrounds.len()).max(1);
    let mined = backgrounds
        .par_iter()
        .enumerate()
        .map(|(img, bg)| -> Result<Vec<(f64, usize, PartPlacement)>> {
            let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
            let mut tables = Vec::with_capacity(bg.pyramid.len());
            for (li, lv) in bg.pyramid.levels.iter().enumerate() {
                let inf = LevelInference::compute(model, &lv.grid)?;
                if let Some(inf) = &inf {
                    let m = &inf.root_scores;
                    for y in 0..m.height {
                        for x in 0..m.width {
                            let s = m.get(x, y);
                            if s >= min_score {
                                cands.push((s, li, y, x));
                            }
                        }
                    }
                }
                tables.push(inf);
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut kept: Vec<(BoundingBox, f64, usize, PartPlacement)> = Vec::new();
            for (s, li, y, x) in cands {
                if kept.len() >= per_image {
                    break;
                }
                let b = root_box(model, bg.pyramid, li, x, y);
                if bg.exclude.iter().any(|e| e.iou(&b) > EXCLUDE_IOU)
                    || kept.iter().any(|k| k.0.iou(&b) > MINING_NMS_IOU)
                {
                    continue;
                }
                let positions = tables[li].as_ref().expect("scored level").backtrack(x, y);
                kept.push((
                    b,
                    s,
                    img,
                    PartPlacement {
                        level: li,
                        positions,
                    },
                ));
            }
            Ok(kept.into_iter().map(|(_, s, i, p)| (s, i, p)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<(f64, usize, PartPlacement)> = mined.into_iter().flatten().collect();
    // stable sort keeps the per-image (level, y, x) order among equal scores
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter()
        .map(|(score, image, placement)| {
            let grid = &backgrounds[image].pyramid.levels[placement.level].grid;
            Ok(MinedNegative {
                features: configuration_features(model, grid, &placement)?,
                placement,
                image,
                score,
            })
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_model(model: &mut CharacterTreeModel) {
    for e in &mut model.edges {
        e.deformation.project();
    }
}

/// `reg_c / 2 * |w|^2 + mean hinge`, the bias excluded from the regulariser.
pub fn hinge_objective(
    model: &CharacterTreeModel,
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    reg_c: f64,
) -> f64 {
    let w = model.to_params();
    let n = positives.len() + negatives.len();
    let reg = 0.5 * reg_c * w[..w.len() - 1].iter().map(|v| v * v).sum::<f64>();
    if n == 0 {
        return reg;
    }
    let hinge: f64 = positives
        .iter()
        .map(|p| (1.0 - dot(&w, p)).max(0.0))
        .chain(negatives.iter().map(|q| (1.0 + dot(&w, q)).max(0.0)))
        .sum();
    reg + hinge / n as f64
}

/// One shuffled pass of per-sample SGD on [`hinge_objective`], followed by
/// projection of the deformation coefficients.
pub fn sgd_hinge_epoch(
    model: &CharacterTreeModel,
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    lr: f64,
    reg_c: f64,
    min_steps: usize,
    rng: &mut impl Rng,
) -> CharacterTreeModel {
    let mut w = model.to_params();
    let nb = w.len() - 1;
    let base: Vec<(bool, usize)> = (0..positives.len())
        .map(|i| (true, i))
        .chain((0..negatives.len()).map(|i| (false, i)))
        .collect();
    let mut order = base.clone();
    order.shuffle(rng);
    while !base.is_empty() && order.len() < min_steps {
        let mut pass = base.clone();
        pass.shuffle(rng);
        pass.truncate(min_steps - order.len());
        order.extend(pass);
    }
    let shrink = 1.0 - lr * reg_c;
    for (pos, i) in order {
        let (x, y) = if pos {
            (&positives[i], 1.0)
        } else {
            (&negatives[i], -1.0)
        };
        let margin = y * dot(&w, x);
        w[..nb].iter_mut().for_each(|v| *v *= shrink);
        if margin < 1.0 {
            for (wv, xv) in w.iter_mut().zip(x) {
                *wv += lr * y * xv;
            }
        }
    }
    let mut out = model.clone();
    out.set_params(&w);
    project_model(&mut out);
    out
}

/// Full-batch subgradient step on [`hinge_objective`], then projection.
pub fn full_batch_step(
    model: &CharacterTreeModel,
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    lr: f64,
    reg_c: f64,
) -> CharacterTreeModel {
    let w = model.to_params();
    let nb = w.len() - 1;
    let n = (positives.len() + negatives.len()).max(1) as f64;
    let mut grad: Vec<f64> = w.iter().map(|v| reg_c * v).collect();
    grad[nb] = 0.0;
    let samples = positives
        .iter()
        .map(|p| (p, 1.0))
        .chain(negatives.iter().map(|q| (q, -1.0)));
    for (x, y) in samples {
        if y * dot(&w, x) < 1.0 {
            for (g, xv) in grad.iter_mut().zip(x) {
                *g -= y * xv / n;
            }
        }
    }
    let next: Vec<f64> = w.iter().zip(&grad).map(|(v, g)| v - lr * g).collect();
    let mut out = model.clone();
    out.set_params(&next);
    project_model(&mut out);
    out
}

/// Pyramid level whose root height best matches `bbox`, and the root
/// positions within `radius` cells of the box centre. `None` if no level
/// can hold the root there.
pub fn positive_window(
    pyramid: &HogPyramid,
    root: (usize, usize),
    bbox: &BoundingBox,
    radius: usize,
) -> Option<RootWindow> {
    let mut levels: Vec<(f64, usize)> = pyramid
        .levels
        .iter()
        .enumerate()
        .filter(|(_, lv)| lv.grid.cells_x >= root.0 && lv.grid.cells_y >= root.1)
        .map(|(i, lv)| {
            let target = (root.1 * lv.grid.cell_size) as f64;
            ((bbox.h * lv.scale / target).ln().abs(), i)
        })
        .collect();
    levels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let &(_, level) = levels.first()?;
    let lv = &pyramid.levels[level];
    let cs = lv.grid.cell_size as f64;
    let (cx, cy) = bbox.center();
    let max_x = lv.grid.cells_x - root.0;
    let max_y = lv.grid.cells_y - root.1;
    let fx = (cx * lv.scale / cs - root.0 as f64 / 2.0).round();
    let fy = (cy * lv.scale / cs - root.1 as f64 / 2.0).round();
    let r = radius as f64;
    let lo = |f: f64| (f - r).max(0.0) as usize;
    let hi = |f: f64, max: usize| ((f + r).max(0.0) as usize).min(max);
    let (x0, x1) = (lo(fx), hi(fx, max_x));
    let (y0, y1) = (lo(fy), hi(fy, max_y));
    if fx + r < 0.0 || fy + r < 0.0 || x0 > x1 || y0 > y1 {
        return None;
    }
    Some(RootWindow {
        level,
        x0,
        x1,
        y0,
        y1,
    })
}

/// Best placement of `model` on a positive: the root restricted to the
/// window around the annotated box at its best-matching level.
pub fn latent_positive_relabel(
    model: &CharacterTreeModel,
    pyramid: &HogPyramid,
    bbox: &BoundingBox,
    radius: usize,
) -> Result<Option<(f64, PartPlacement)>> {
    let root = model.root_filter();
    let Some(window) = positive_window(pyramid, (root.w_cells, root.h_cells), bbox, radius) else {
        return Ok(None);
    };
    crate::dpm::infer_best_restricted(model, pyramid, &[window])
}

/// A positive reduced to the features around its latent window.
#[derive(Debug, Clone)]
struct Positive {
    grid: HogCellGrid,
    /// Window in `grid` coordinates.
    window: RootWindow,
    aspect: f64,
}

fn crop_grid(grid: &HogCellGrid, x0: usize, y0: usize, w: usize, h: usize) -> HogCellGrid {
    let mut data = Vec::with_capacity(w * h * HOG_DIM);
    for y in y0..y0 + h {
        data.extend_from_slice(grid.row_span(x0, y, w));
    }
    HogCellGrid::from_data(w, h, grid.cell_size, data).expect("cropped grid is consistent")
}

fn extract_positive(
    pyramid: &HogPyramid,
    root: (usize, usize),
    bbox: &BoundingBox,
    radius: usize,
) -> Option<Positive> {
    let w = positive_window(pyramid, root, bbox, radius)?;
    let grid = &pyramid.levels[w.level].grid;
    let gx0 = w.x0.saturating_sub(POSITIVE_MARGIN);
    let gy0 = w.y0.saturating_sub(POSITIVE_MARGIN);
    let gx1 = (w.x1 + root.0 + POSITIVE_MARGIN).min(grid.cells_x);
    let gy1 = (w.y1 + root.1 + POSITIVE_MARGIN).min(grid.cells_y);
    Some(Positive {
        grid: crop_grid(grid, gx0, gy0, gx1 - gx0, gy1 - gy0),
        window: RootWindow {
            level: 0,
            x0: w.x0 - gx0,
            x1: w.x1 - gx0,
            y0: w.y0 - gy0,
            y1: w.y1 - gy0,
        },
        aspect: bbox.w / bbox.h.max(1e-9),
    })
}

fn relabel(model: &CharacterTreeModel, p: &Positive) -> Result<Option<Vec<f64>>> {
    let Some(inf) = LevelInference::compute(model, &p.grid)? else {
        return Ok(None);
    };
    let Some((_, x, y)) = inf.best_in(Some(&p.window)) else {
        return Ok(None);
    };
    let placement = PartPlacement {
        level: 0,
        positions: inf.backtrack(x, y),
    };
    configuration_features(model, &p.grid, &placement).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub class: char,
    pub component: usize,
    pub round: usize,
    /// Global epoch index fed to [`lr_schedule`].
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<EpochLog>,
}

impl fmt::Display for TrainingLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "class\tcomp\tround\tepoch\tlr\tloss\tpositives\tnegatives"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{:.6e}\t{:.6}\t{}\t{}",
                e.class, e.component, e.round, e.epoch, e.lr, e.loss, e.positives, e.negatives
            )?;
        }
        Ok(())
    }
}

struct SharedFeatures {
    /// Plate pyramids used for mining, with their labelled boxes.
    pool: Vec<(HogPyramid, Vec<(char, BoundingBox)>)>,
    /// Pyramids of explicit negative regions.
    extra: Vec<HogPyramid>,
    /// Mean cell feature over the pool.
    mean_cell: Vec<f64>,
}

/// Trains one model per class of `config.alphabet`.
pub fn train_character_models(
    set: &TrainingSet,
    config: &TrainingConfig,
) -> Result<CharacterMixtureSet> {
    Ok(train_with_log(set, config)?.0)
}

pub fn train_with_log(
    set: &TrainingSet,
    config: &TrainingConfig,
) -> Result<(CharacterMixtureSet, TrainingLog)> {
    config.validate()?;
    for c in &config.alphabet {
        if !set.samples.iter().any(|s| s.label == Some(*c)) {
            return Err(Error::MissingClass(*c));
        }
    }
    let positives = collect_positives(set, config)?;
    let shared = shared_features(set, config)?;
    let trained = config
        .alphabet
        .par_iter()
        .enumerate()
        .map(|(ci, &label)| {
            let seed = derive_seed(config.rng_seed, ci as u64);
            train_class(label, &positives[ci], &shared, config, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log = TrainingLog::default();
    let mut classes = Vec::with_capacity(trained.len());
    for (class, entries) in trained {
        classes.push(class);
        log.entries.extend(entries);
    }
    let set = CharacterMixtureSet {
        alphabet: config.alphabet.clone(),
        classes,
        hog: config.hog,
        pyramid: config.pyramid,
        canonical_height: config.canonical_height,
    };
    set.validate()?;
    Ok((set, log))
}

fn collect_positives(set: &TrainingSet, config: &TrainingConfig) -> Result<Vec<Vec<Positive>>> {
    let mut by_image: Vec<Vec<(usize, BoundingBox)>> = vec![Vec::new(); set.images.len()];
    for s in &set.samples {
        let Some(label) = s.label else { continue };
        let Some(ci) = config.alphabet.iter().position(|&c| c == label) else {
            continue;
        };
        let slot = by_image.get_mut(s.image).ok_or_else(|| {
            Error::precondition(format!("sample refers to missing image {}", s.image))
        })?;
        slot.push((ci, s.bbox));
    }
    let extracted = set
        .images
        .par_iter()
        .zip(&by_image)
        .map(|(img, samples)| -> Result<Vec<(usize, Positive)>> {
            if samples.is_empty() {
                return Ok(Vec::new());
            }
            let pyramid = match build_pyramid(img, &config.pyramid, &config.hog, config.root_cells)
            {
                Ok(p) => p,
                Err(Error::EmptyPyramid) => return Ok(Vec::new()),
                Err(e) => return Err(e),
            };
            Ok(samples
                .iter()
                .filter_map(|(ci, b)| {
                    extract_positive(&pyramid, config.root_cells, b, config.latent_radius)
                        .map(|p| (*ci, p))
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Vec<Positive>> = vec![Vec::new(); config.alphabet.len()];
    for (ci, p) in extracted.into_iter().flatten() {
        if config
            .max_positives_per_class
            .is_none_or(|m| out[ci].len() < m)
        {
            out[ci].push(p);
        }
    }
    if let Some(ci) = out.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass(config.alphabet[ci]));
    }
    Ok(out)
}

fn shared_features(set: &TrainingSet, config: &TrainingConfig) -> Result<SharedFeatures> {
    let n = set.images.len();
    let take = config.background_pool.min(n);
    // evenly spaced over the image list
    let picks: Vec<usize> = (0..take).map(|i| i * n / take.max(1)).collect();
    let mut labelled: Vec<Vec<(char, BoundingBox)>> = vec![Vec::new(); n];
    let mut regions = Vec::new();
    for s in &set.samples {
        match s.label {
            Some(c) => {
                if let Some(v) = labelled.get_mut(s.image) {
                    v.push((c, s.bbox));
                }
            }
            None => regions.push(*s),
        }
    }
    let build = |img: &ImageBuffer| match build_pyramid(
        img,
        &config.pyramid,
        &config.hog,
        config.root_cells,
    ) {
        Ok(p) => Ok(Some(p)),
        Err(Error::EmptyPyramid) => Ok(None),
        Err(e) => Err(e),
    };
    let pool: Vec<_> = picks
        .par_iter()
        .map(|&i| Ok(build(&set.images[i])?.map(|p| (p, labelled[i].clone()))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let extra: Vec<_> = regions
        .par_iter()
        .map(|s| {
            let img = set.images.get(s.image).ok_or_else(|| {
                Error::precondition(format!("sample refers to missing image {}", s.image))
            })?;
            build(&imaging::crop(img, &s.bbox)?)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if pool.is_empty() && extra.is_empty() {
        return Err(Error::precondition(
            "no background images for negative mining",
        ));
    }
    let mut mean_cell = vec![0.0; HOG_DIM];
    let mut count = 0usize;
    for lv in pool
        .iter()
        .flat_map(|p| &p.0.levels)
        .chain(extra.iter().flat_map(|p| &p.levels))
    {
        for y in 0..lv.grid.cells_y {
            for x in 0..lv.grid.cells_x {
                for (m, v) in mean_cell.iter_mut().zip(lv.grid.cell(x, y)) {
                    *m += v;
                }
                count += 1;
            }
        }
    }
    mean_cell.iter_mut().for_each(|m| *m /= count.max(1) as f64);
    Ok(SharedFeatures {
        pool,
        extra,
        mean_cell,
    })
}

/// Root filter from the mean positive features, centred on the mean
/// background cell and scaled so the two means score `+1` and `-1`.
fn initial_model(
    label: char,
    positives: &[&Positive],
    shared: &SharedFeatures,
    config: &TrainingConfig,
) -> CharacterTreeModel {
    let mut model = CharacterTreeModel::three_part(label, config.root_cells, config.part_cells);
    let (rw, rh) = config.root_cells;
    let mut mean = vec![0.0; rw * rh * HOG_DIM];
    for p in positives {
        let x = (p.window.x0 + p.window.x1) / 2;
        let y = (p.window.y0 + p.window.y1) / 2;
        for v in 0..rh {
            for (m, f) in mean[v * rw * HOG_DIM..(v + 1) * rw * HOG_DIM]
                .iter_mut()
                .zip(p.grid.row_span(x, y + v, rw))
            {
                *m += f;
            }
        }
    }
    let n = positives.len().max(1) as f64;
    let bg: Vec<f64> = (0..rw * rh)
        .flat_map(|_| shared.mean_cell.iter().copied())
        .collect();
    let t: Vec<f64> = mean.iter().zip(&bg).map(|(m, b)| m / n - b).collect();
    let norm2 = dot(&t, &t);
    if norm2 > 1e-12 {
        let w: Vec<f64> = t.iter().map(|v| 2.0 * v / norm2).collect();
        let mid: f64 = mean
            .iter()
            .zip(&bg)
            .zip(&w)
            .map(|((m, b), wv)| 0.5 * (m / n + b) * wv)
            .sum();
        model.parts[model.root].weights = w;
        model.bias = -mid;
    }
    model
}

fn train_class(
    label: char,
    positives: &[Positive],
    shared: &SharedFeatures,
    config: &TrainingConfig,
    seed: u64,
) -> Result<(ClassMixture, Vec<EpochLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // components split the positives by aspect ratio
    let mut idx: Vec<usize> = (0..positives.len()).collect();
    idx.sort_by(|&a, &b| {
        positives[a]
            .aspect
            .total_cmp(&positives[b].aspect)
            .then(a.cmp(&b))
    });
    let m = config.mixtures.min(positives.len()).max(1);
    let groups: Vec<Vec<&Positive>> = (0..m)
        .map(|g| {
            idx[g * idx.len() / m..(g + 1) * idx.len() / m]
                .iter()
                .map(|&i| &positives[i])
                .collect()
        })
        .collect();
    let backgrounds: Vec<Background<'_>> = shared
        .pool
        .iter()
        .map(|(p, labels)| Background {
            pyramid: p,
            exclude: labels
                .iter()
                .filter(|(c, _)| *c == label)
                .map(|l| l.1)
                .collect(),
        })
        .chain(shared.extra.iter().map(|p| Background {
            pyramid: p,
            exclude: Vec::new(),
        }))
        .collect();

    let mut components = Vec::with_capacity(m);
    let mut log = Vec::new();
    for (comp, group) in groups.iter().enumerate() {
        let mut model = initial_model(label, group, shared, config);
        let k = (config.negatives_per_positive * group.len()).max(config.min_negatives);
        let mut cache: Vec<MinedNegative> = Vec::new();
        let mut seen: HashSet<(usize, usize, Vec<(usize, usize)>)> = HashSet::new();
        let mut epoch = 0;
        for round in 0..config.latent_rounds {
            if config.epochs == 0 {
                break;
            }
            let pos: Vec<Vec<f64>> = group
                .iter()
                .map(|p| relabel(&model, p))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            for n in mine_above(&model, &backgrounds, k, -1.0)? {
                if seen.insert((n.image, n.placement.level, n.placement.positions.clone())) {
                    cache.push(n);
                }
            }
            let neg: Vec<Vec<f64>> = cache.iter().map(|n| n.features.clone()).collect();
            for _ in 0..config.epochs {
                let lr = lr_schedule(config, epoch);
                model = sgd_hinge_epoch(
                    &model,
                    &pos,
                    &neg,
                    lr,
                    config.reg_c,
                    config.min_steps_per_epoch,
                    &mut rng,
                );
                let loss = hinge_objective(&model, &pos, &neg, config.reg_c);
                if !loss.is_finite() {
                    return Err(Error::TrainingDivergence(format!(
                        "class '{label}' epoch {epoch}: loss {loss}"
                    )));
                }
                log.push(EpochLog {
                    class: label,
                    component: comp,
                    round,
                    epoch,
                    lr,
                    loss,
                    positives: pos.len(),
                    negatives: neg.len(),
                });
                epoch += 1;
            }
            // keep the hardest cached negatives under the new model
            let w = model.to_params();
            let mut scored: Vec<(f64, MinedNegative)> =
                cache.drain(..).map(|n| (dot(&w, &n.features), n)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            scored.truncate(2 * k);
            cache = scored.into_iter().map(|(_, n)| n).collect();
            seen = cache
                .iter()
                .map(|n| (n.image, n.placement.level, n.placement.positions.clone()))
                .collect();
        }
        components.push(model);
    }
    Ok((ClassMixture { label, components }, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> CharacterTreeModel {
        CharacterTreeModel::three_part('A', (1, 2), (1, 1))
    }

    #[test]
    fn lr_schedule_examples() {
        let c = TrainingConfig::default();
        assert_eq!(lr_schedule(&c, 0), 0.0003);
        assert_eq!(lr_schedule(&c, 1), 0.00027);
        let flat = TrainingConfig {
            decay: 1.0,
            ..TrainingConfig::default()
        };
        assert_eq!(lr_schedule(&flat, 57), flat.lambda0);
    }

    #[test]
    fn zero_lr_only_projects() {
        let mut m = toy_model();
        m.edges[0].deformation.a = 0.5;
        let x = vec![1.0; m.param_len()];
        let out = sgd_hinge_epoch(
            &m,
            &[x.clone()],
            &[x],
            0.0,
            0.01,
            0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let mut expected = m.clone();
        project_model(&mut expected);
        assert_eq!(out, expected);
    }

    #[test]
    fn satisfied_margins_only_shrink() {
        let mut m = toy_model();
        let n = m.param_len();
        let mut w = vec![0.0; n];
        w[0] = 2.0;
        m.set_params(&w);
        let mut pos = vec![0.0; n];
        pos[0] = 1.0;
        let neg: Vec<f64> = pos.iter().map(|v| -v).collect();
        // S(pos) = 2, S(neg) = -2
        let out = sgd_hinge_epoch(
            &m,
            &[pos],
            &[neg],
            0.1,
            0.5,
            0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let p = out.to_params();
        assert!((p[0] - 2.0 * 0.95f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn separable_toy_problem_converges() {
        let m = toy_model();
        let n = m.param_len();
        let mut pos = vec![0.0; n];
        pos[3] = 1.0;
        pos[n - 1] = 1.0;
        let mut neg = vec![0.0; n];
        neg[5] = 1.0;
        neg[n - 1] = 1.0;
        let mut model = m;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            model = sgd_hinge_epoch(
                &model,
                &[pos.clone()],
                &[neg.clone()],
                0.5,
                0.0,
                0,
                &mut rng,
            );
        }
        assert_eq!(hinge_objective(&model, &[pos], &[neg], 0.0), 0.0);
    }

    #[test]
    fn mining_requires_backgrounds_and_honours_zero_k() {
        let m = toy_model();
        assert!(mine_hard_negatives(&m, &[], 3).is_err());
        let img = ImageBuffer::filled(32, 32, 1, 0.5).unwrap();
        let p = build_pyramid(
            &img,
            &PyramidConfig::default(),
            &HogConfig::default(),
            (1, 2),
        )
        .unwrap();
        let bg = [Background {
            pyramid: &p,
            exclude: vec![],
        }];
        assert!(mine_hard_negatives(&m, &bg, 0).unwrap().is_empty());
        let mined = mine_hard_negatives(&m, &bg, 4).unwrap();
        assert_eq!(mined.len(), 4);
        assert!(mined.iter().all(|n| n.score == 0.0));
        assert_eq!(mined[0].placement.level, 0);
        assert_eq!(mined[0].placement.positions[0], (0, 0));
    }

    #[test]
    fn positive_window_centres_on_box() {
        let img = ImageBuffer::filled(160, 64, 1, 0.5).unwrap();
        let p = build_pyramid(
            &img,
            &PyramidConfig::default(),
            &HogConfig::default(),
            (4, 8),
        )
        .unwrap();
        // 32 px tall box matches level 0 exactly
        let w = positive_window(&p, (4, 8), &BoundingBox::new(40.0, 16.0, 16.0, 32.0), 1).unwrap();
        assert_eq!(w.level, 0);
        assert_eq!((w.x0, w.x1, w.y0, w.y1), (9, 11, 3, 5));
    }
}
