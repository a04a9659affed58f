use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hog::{build_pyramid, HogPyramid};
use crate::imaging::{self, BoundingBox, ImageBuffer};

use super::infer::LevelInference;
use super::model::{CharacterMixtureSet, ClassMixture, Detection, Label};

/// Smallest plate crop (either side, pixels) accepted by the detector.
pub const MIN_PLATE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub threshold: f64,
    /// Same-class suppression threshold, as intersection over the smaller box.
    pub nms_overlap: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            nms_overlap: 0.5,
        }
    }
}

/// Greedy suppression: keeps a detection unless its intersection with an
/// already kept one exceeds `overlap` of the smaller box. Input order is the
/// priority order.
pub fn non_maximum_suppression(sorted: Vec<Detection>, overlap: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.bbox.min_area_overlap(&d.bbox) <= overlap)
        {
            kept.push(d);
        }
    }
    kept
}

/// Final ordering of detector output: score descending, then label, then x.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.label.cmp(&b.label))
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

/// Resizes a plate crop to the canonical height and builds its pyramid.
pub fn plate_pyramid(mixtures: &CharacterMixtureSet, plate: &ImageBuffer) -> Result<HogPyramid> {
    if plate.width() < MIN_PLATE_SIDE || plate.height() < MIN_PLATE_SIDE {
        return Err(Error::precondition(format!(
            "plate crop {}x{} is below the {MIN_PLATE_SIDE}px minimum",
            plate.width(),
            plate.height()
        )));
    }
    let gray = imaging::to_grayscale(plate);
    let canonical = imaging::resize_to_height(&gray, mixtures.canonical_height)?;
    let (min_root, _) = mixtures.min_max_root_cells();
    build_pyramid(&canonical, &mixtures.pyramid, &mixtures.hog, min_root).map_err(|e| match e {
        Error::EmptyPyramid => Error::precondition(format!(
            "plate crop {}x{} too small for the character filters",
            plate.width(),
            plate.height()
        )),
        other => other,
    })
}

/// Runs every class detector over a plate crop.
///
/// Root scores above `threshold` become detections (boxes in plate pixels);
/// overlapping detections of one class are reduced by NMS so only the best
/// mixture component and position survive.
pub fn detect_characters(
    mixtures: &CharacterMixtureSet,
    plate: &ImageBuffer,
    threshold: f64,
) -> Result<Vec<Detection>> {
    let config = DetectorConfig {
        threshold,
        ..DetectorConfig::default()
    };
    let pyramid = plate_pyramid(mixtures, plate)?;
    detect_on_pyramid(mixtures, &pyramid, plate.width(), plate.height(), &config)
}

pub fn detect_on_pyramid(
    mixtures: &CharacterMixtureSet,
    pyramid: &HogPyramid,
    plate_w: usize,
    plate_h: usize,
    config: &DetectorConfig,
) -> Result<Vec<Detection>> {
    if config.threshold == f64::INFINITY {
        return Ok(Vec::new());
    }
    let sx = plate_w as f64 / pyramid.source_width as f64;
    let sy = plate_h as f64 / pyramid.source_height as f64;
    let per_class = mixtures
        .classes
        .par_iter()
        .map(|class| detect_class(class, pyramid, (sx, sy), (plate_w, plate_h), config))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<Detection> = per_class.into_iter().flatten().collect();
    all.sort_by(detection_order);
    Ok(all)
}

fn detect_class(
    class: &ClassMixture,
    pyramid: &HogPyramid,
    (sx, sy): (f64, f64),
    (plate_w, plate_h): (usize, usize),
    config: &DetectorConfig,
) -> Result<Vec<Detection>> {
    // (score, level, y, x, component) for a deterministic priority order
    let mut cands: Vec<(f64, usize, usize, usize, usize, BoundingBox)> = Vec::new();
    for (ci, model) in class.components.iter().enumerate() {
        let root = model.root_filter();
        for (li, level) in pyramid.levels.iter().enumerate() {
            let Some(inf) = LevelInference::compute(model, &level.grid)? else {
                continue;
            };
            let cell = level.grid.cell_size as f64 / level.scale;
            let map = &inf.root_scores;
            for y in 0..map.height {
                for x in 0..map.width {
                    let s = map.get(x, y);
                    if s > config.threshold {
                        let b = BoundingBox::new(
                            x as f64 * cell,
                            y as f64 * cell,
                            root.w_cells as f64 * cell,
                            root.h_cells as f64 * cell,
                        )
                        .scaled(sx, sy)
                        .clamp_to(plate_w, plate_h);
                        if b.is_valid() {
                            cands.push((s, li, y, x, ci, b));
                        }
                    }
                }
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
            .then(a.4.cmp(&b.4))
    });
    let dets = cands
        .into_iter()
        .map(|(score, .., bbox)| Detection {
            bbox,
            label: Label::Char(class.label),
            score,
        })
        .collect();
    Ok(non_maximum_suppression(dets, config.nms_overlap))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x, 0.0, 10.0, 10.0),
            label: Label::Char('A'),
            score,
        }
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let out = non_maximum_suppression(vec![det(0.0, 0.9), det(2.0, 0.8), det(30.0, 0.1)], 0.5);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.1);
        // a box nested in a kept one goes even though their IoU is small
        let mut inner = det(2.0, 0.5);
        inner.bbox = BoundingBox::new(2.0, 2.0, 4.0, 4.0);
        assert_eq!(
            non_maximum_suppression(vec![det(0.0, 0.9), inner], 0.5).len(),
            1
        );
    }
}
