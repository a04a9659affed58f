//! Plate localisation, character detection and string assembly.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpm::{detect_characters, CharacterMixtureSet, Detection, Label};
use crate::error::{Error, Result};
use crate::hog::compute_gradients;
use crate::imaging::{self, BoundingBox, ImageBuffer};
use crate::synth::StrokeFont;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMetric {
    /// Intersection over the smaller box.
    MinArea,
    Iou,
}

impl OverlapMetric {
    pub fn ratio(&self, a: &BoundingBox, b: &BoundingBox) -> f64 {
        match self {
            OverlapMetric::MinArea => a.min_area_overlap(b),
            OverlapMetric::Iou => a.iou(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub threshold: f64,
    pub overlap_ratio: f64,
    pub overlap_metric: OverlapMetric,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            overlap_ratio: 0.7,
            overlap_metric: OverlapMetric::MinArea,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub min_aspect: f64,
    pub max_aspect: f64,
    /// Smallest plate height considered, pixels.
    pub min_height: usize,
    /// Edge strength is compared against this multiple of the image mean.
    pub contrast: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            min_aspect: 3.0,
            max_aspect: 6.0,
            min_height: 12,
            contrast: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlateLocalizer {
    /// The image is already a plate crop.
    WholeImage,
    /// Plate boxes keyed by image id, e.g. from a detections file.
    Annotation(HashMap<String, BoundingBox>),
    Projection(ProjectionConfig),
}

/// Finds the plate in `img`. `image_id` keys the annotation backend.
pub fn localize_plate(
    img: &ImageBuffer,
    loc: &PlateLocalizer,
    image_id: &str,
) -> Result<Option<BoundingBox>> {
    match loc {
        PlateLocalizer::WholeImage => Ok(Some(img.full_box())),
        PlateLocalizer::Annotation(boxes) => {
            let b = boxes
                .get(image_id)
                .ok_or_else(|| Error::Lookup(image_id.to_string()))?;
            if !b.within(img.width(), img.height()) {
                return Err(Error::Bounds(b.to_string(), img.width(), img.height()));
            }
            Ok(Some(*b))
        }
        PlateLocalizer::Projection(cfg) => Ok(projection_localize(img, cfg)),
    }
}

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0)
    }
}

/// Max-sum rectangle of centred vertical-edge energy over the admissible
/// aspect ratios, then each side pulled in to where the row and column
/// edge profiles drop off.
fn projection_localize(img: &ImageBuffer, cfg: &ProjectionConfig) -> Option<BoundingBox> {
    let gray = imaging::to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    if w < 3 || h < 3 || h < cfg.min_height {
        return None;
    }
    let grad = compute_gradients(&gray).ok()?;
    let edge: Vec<f64> = grad
        .magnitude
        .iter()
        .zip(&grad.orientation)
        .map(|(m, o)| m * o.cos().abs())
        .collect();
    let mean = edge.iter().sum::<f64>() / edge.len() as f64;
    if mean <= 1e-9 {
        return None;
    }
    let centred: Vec<f64> = edge.iter().map(|e| e - cfg.contrast * mean).collect();
    let integral = Integral::new(&centred, w, h);
    let mut best: Option<(f64, usize, usize, usize, usize)> = None;
    let mut ph = cfg.min_height as f64;
    while ph.round() as usize <= h {
        let bh = ph.round() as usize;
        let step = (bh / 8).max(1);
        let mut aspect = cfg.min_aspect;
        while aspect <= cfg.max_aspect + 1e-9 {
            let bw = (bh as f64 * aspect).round() as usize;
            if bw <= w {
                for y in (0..=h - bh).step_by(step) {
                    for x in (0..=w - bw).step_by(step) {
                        let s = integral.rect(x, y, x + bw, y + bh);
                        if best.is_none_or(|b| s > b.0) {
                            best = Some((s, x, y, x + bw, y + bh));
                        }
                    }
                }
            }
            aspect += 0.5;
        }
        ph *= 1.15;
    }
    let (score, mut x0, mut y0, mut x1, mut y1) = best?;
    if score <= 0.0 {
        return None;
    }
    // grow or shrink each side while the boundary line still carries excess edge energy
    let col = |x: usize, y0: usize, y1: usize| integral.rect(x, y0, x + 1, y1);
    let row = |y: usize, x0: usize, x1: usize| integral.rect(x0, y, x1, y + 1);
    let limit = (y1 - y0) / 2;
    for _ in 0..limit {
        let mut changed = false;
        if x0 > 0 && col(x0 - 1, y0, y1) > 0.0 {
            x0 -= 1;
            changed = true;
        } else if x1 - x0 > 2 && col(x0, y0, y1) < 0.0 {
            x0 += 1;
            changed = true;
        }
        if x1 < w && col(x1, y0, y1) > 0.0 {
            x1 += 1;
            changed = true;
        } else if x1 - x0 > 2 && col(x1 - 1, y0, y1) < 0.0 {
            x1 -= 1;
            changed = true;
        }
        if y0 > 0 && row(y0 - 1, x0, x1) > 0.0 {
            y0 -= 1;
            changed = true;
        } else if y1 - y0 > 2 && row(y0, x0, x1) < 0.0 {
            y0 += 1;
            changed = true;
        }
        if y1 < h && row(y1, x0, x1) > 0.0 {
            y1 += 1;
            changed = true;
        } else if y1 - y0 > 2 && row(y1 - 1, x0, x1) < 0.0 {
            y1 -= 1;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    Some(BoundingBox::new(
        x0 as f64,
        y0 as f64,
        (x1 - x0) as f64,
        (y1 - y0) as f64,
    ))
}

/// Left-to-right order by box centre; ties by centre y, then higher score.
pub fn order_by_center(dets: &[Detection]) -> Vec<Detection> {
    let mut out = dets.to_vec();
    out.sort_by(|a, b| {
        let (ax, ay) = a.bbox.center();
        let (bx, by) = b.bbox.center();
        ax.total_cmp(&bx)
            .then(ay.total_cmp(&by))
            .then(b.score.total_cmp(&a.score))
            .then(a.label.cmp(&b.label))
    });
    out
}

/// Greedy by descending score: a detection survives if its overlap with
/// every survivor is at most `ratio`. Returns `(kept, suppressed)`, each in
/// input order.
pub fn suppress_overlaps_with(
    dets: &[Detection],
    ratio: f64,
    metric: OverlapMetric,
) -> (Vec<Detection>, Vec<Detection>) {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in idx {
        if kept
            .iter()
            .all(|&k| metric.ratio(&dets[k].bbox, &dets[i].bbox) <= ratio)
        {
            keep[i] = true;
            kept.push(i);
        }
    }
    let (k, s): (Vec<_>, Vec<_>) = dets.iter().zip(&keep).partition(|(_, &kp)| kp);
    (
        k.into_iter().map(|(d, _)| *d).collect(),
        s.into_iter().map(|(d, _)| *d).collect(),
    )
}

/// [`suppress_overlaps_with`] using the min-area overlap ratio.
pub fn suppress_overlaps(dets: &[Detection], ratio: f64) -> Vec<Detection> {
    suppress_overlaps_with(dets, ratio, OverlapMetric::MinArea).0
}

/// Outcome of the digit rule on an ordered detection list.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitRuleOutcome {
    pub kept: Vec<Detection>,
    pub dropped: Vec<Detection>,
    /// False when two leading or two trailing digits cannot be found; `kept`
    /// is then the input unchanged.
    pub satisfiable: bool,
}

/// Drops letters from both ends until the first two and the last two
/// positions hold digits. Interior detections are untouched.
pub fn enforce_digit_positions(dets: &[Detection]) -> DigitRuleOutcome {
    let unsat = || DigitRuleOutcome {
        kept: dets.to_vec(),
        dropped: Vec::new(),
        satisfiable: false,
    };
    let mut kept = dets.to_vec();
    let mut dropped = Vec::new();
    let mut i = 0;
    while i < 2 {
        match kept.get(i) {
            None => return unsat(),
            Some(d) if d.label.is_digit() => i += 1,
            Some(_) => dropped.push(kept.remove(i)),
        }
    }
    let mut j = 0;
    while j < 2 {
        let pos = kept.len() - 1 - j;
        if kept[pos].label.is_digit() {
            j += 1;
        } else {
            dropped.push(kept.remove(pos));
        }
    }
    DigitRuleOutcome {
        kept,
        dropped,
        satisfiable: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionReason {
    OverlapSuppressed,
    DigitRuleIgnored,
    BelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub detection: Detection,
    pub reason: RejectionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateReading {
    pub plate_box: BoundingBox,
    pub detections: Vec<Detection>,
    pub text: String,
    pub scores: Vec<f64>,
    pub rejected: Vec<Rejected>,
    /// False when the digit rule could not be satisfied.
    pub valid: bool,
}

impl PlateReading {
    /// Weakest kept character score; low values mark doubtful readings.
    pub fn min_score(&self) -> Option<f64> {
        self.scores.iter().copied().reduce(f64::min)
    }
}

/// Applies ordering, overlap suppression and the digit rule to raw
/// detections (plate coordinates).
pub fn assemble_reading(
    plate_box: BoundingBox,
    raw: &[Detection],
    config: &PipelineConfig,
) -> PlateReading {
    let mut rejected = Vec::new();
    let (pass, low): (Vec<Detection>, Vec<Detection>) = raw
        .iter()
        .filter(|d| d.label != Label::Plate)
        .partition(|d| d.score > config.threshold);
    rejected.extend(low.into_iter().map(|detection| Rejected {
        detection,
        reason: RejectionReason::BelowThreshold,
    }));
    let ordered = order_by_center(&pass);
    let (kept, suppressed) =
        suppress_overlaps_with(&ordered, config.overlap_ratio, config.overlap_metric);
    rejected.extend(suppressed.into_iter().map(|detection| Rejected {
        detection,
        reason: RejectionReason::OverlapSuppressed,
    }));
    let rule = enforce_digit_positions(&kept);
    rejected.extend(rule.dropped.into_iter().map(|detection| Rejected {
        detection,
        reason: RejectionReason::DigitRuleIgnored,
    }));
    let text = rule.kept.iter().filter_map(|d| d.label.as_char()).collect();
    PlateReading {
        plate_box,
        scores: rule.kept.iter().map(|d| d.score).collect(),
        detections: rule.kept,
        text,
        rejected,
        valid: rule.satisfiable,
    }
}

/// Detects characters on a plate crop and assembles the plate string.
pub fn recognize_plate(
    plate: &ImageBuffer,
    models: &CharacterMixtureSet,
    config: &PipelineConfig,
) -> Result<PlateReading> {
    let dets = detect_characters(models, plate, config.threshold)?;
    Ok(assemble_reading(plate.full_box(), &dets, config))
}

/// Localises, crops and reads a plate. Detection boxes are reported in
/// image coordinates.
pub fn recognize_image(
    img: &ImageBuffer,
    image_id: &str,
    loc: &PlateLocalizer,
    models: &CharacterMixtureSet,
    config: &PipelineConfig,
) -> Result<Option<PlateReading>> {
    let Some(plate_box) = localize_plate(img, loc, image_id)? else {
        return Ok(None);
    };
    let crop = imaging::crop(img, &plate_box)?;
    let mut reading = recognize_plate(&crop, models, config)?;
    // crop() snaps to whole pixels
    let (ox, oy) = (plate_box.x.round(), plate_box.y.round());
    reading.plate_box = plate_box;
    for d in &mut reading.detections {
        d.bbox = d.bbox.translated(ox, oy);
    }
    for r in &mut reading.rejected {
        r.detection.bbox = r.detection.bbox.translated(ox, oy);
    }
    Ok(Some(reading))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateAnnotation {
    pub image: String,
    pub plate_box: BoundingBox,
}

/// Reads a detections file: one JSON object per line with `image` and
/// `plate_box`. Blank lines and lines starting with `#` are skipped.
pub fn read_plate_annotations(path: impl AsRef<Path>) -> Result<HashMap<String, BoundingBox>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let a: PlateAnnotation = serde_json::from_str(t)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if out.insert(a.image.clone(), a.plate_box).is_some() {
            return Err(Error::Keying(format!("duplicate image id '{}'", a.image)));
        }
    }
    Ok(out)
}

/// One line of a readings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingRecord {
    pub image: String,
    pub reading: Option<PlateReading>,
}

fn draw_rect(px: &mut [f32], w: usize, h: usize, b: &BoundingBox, color: [f32; 3]) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(w).saturating_sub(1);
    let y1 = (b.bottom().ceil() as usize).min(h).saturating_sub(1);
    let mut put = |x: usize, y: usize| {
        px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_text(
    px: &mut [f32],
    w: usize,
    h: usize,
    text: &str,
    x: f64,
    y: f64,
    size: f64,
    color: [f32; 3],
) {
    let font = StrokeFont::bundled();
    let scale = size / crate::synth::font::EM_HEIGHT;
    let mut ox = x;
    for c in text.chars() {
        let Ok(g) = font.glyph(c) else {
            ox += 6.0 * scale;
            continue;
        };
        for &((x0, y0), (x1, y1)) in &g.segments {
            let steps = (((x1 - x0).abs().max((y1 - y0).abs()) * scale).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let fx = ox + (x0 + (x1 - x0) * t) * scale;
                let fy = y + (y0 + (y1 - y0) * t) * scale;
                if fx >= 0.0 && fy >= 0.0 && (fx as usize) < w && (fy as usize) < h {
                    let i = (fy as usize * w + fx as usize) * 3;
                    px[i..i + 3].copy_from_slice(&color);
                }
            }
        }
        ox += g.advance * scale;
    }
}

/// Copy of `img` with the plate box, kept detections (label and score) and
/// the final string drawn on top.
pub fn draw_overlay(img: &ImageBuffer, reading: &PlateReading) -> Result<ImageBuffer> {
    let rgb = if img.channels() == 1 {
        imaging::nir_to_three_channel(img)?
    } else {
        img.clone()
    };
    let (w, h) = (rgb.width(), rgb.height());
    let mut px = rgb.into_pixels();
    draw_rect(&mut px, w, h, &reading.plate_box, [0.0, 0.4, 1.0]);
    for d in &reading.detections {
        draw_rect(&mut px, w, h, &d.bbox, [0.0, 0.85, 0.0]);
        let size = (d.bbox.h * 0.3).clamp(8.0, 24.0);
        let label = format!("{}{:.1}", d.label, d.score);
        draw_text(
            &mut px,
            w,
            h,
            &label,
            d.bbox.x + 1.0,
            d.bbox.y + 1.0,
            size,
            [1.0, 0.1, 0.1],
        );
    }
    let size = (reading.plate_box.h * 0.25).clamp(10.0, 32.0);
    let ty = (reading.plate_box.bottom() + 2.0).min(h as f64 - size);
    let color = if reading.valid {
        [0.0, 0.85, 0.0]
    } else {
        [1.0, 0.5, 0.0]
    };
    draw_text(
        &mut px,
        w,
        h,
        &reading.text,
        reading.plate_box.x,
        ty.max(0.0),
        size,
        color,
    );
    ImageBuffer::new(w, h, 3, px)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(c: char, x: f64, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x, 0.0, 10.0, 20.0),
            label: Label::Char(c),
            score,
        }
    }

    fn labels(d: &[Detection]) -> String {
        d.iter().filter_map(|d| d.label.as_char()).collect()
    }

    fn plate(s: &str) -> Vec<Detection> {
        s.chars()
            .enumerate()
            .map(|(i, c)| det(c, i as f64 * 12.0, 1.0))
            .collect()
    }

    #[test]
    fn ordering_examples() {
        assert!(order_by_center(&[]).is_empty());
        let p = plate("18LH344");
        assert_eq!(order_by_center(&p), p);
        let mut rev = p.clone();
        rev.reverse();
        assert_eq!(labels(&order_by_center(&rev)), "18LH344");
    }

    #[test]
    fn suppression_examples() {
        let a = det('A', 0.0, 0.9);
        let b = det('B', 0.0, 0.6);
        assert_eq!(suppress_overlaps(&[a, b], 0.7), vec![a]);
        let far = det('C', 50.0, 0.1);
        assert_eq!(suppress_overlaps(&[a, far], 0.7).len(), 2);
        // three 10x10 boxes, every pairwise min-area overlap about 0.8
        let boxes = [(0.0, 0.0, 0.9), (2.0, 0.0, 0.8), (1.0, 1.0, 0.7)];
        let dets: Vec<_> = boxes
            .iter()
            .map(|&(x, y, s)| Detection {
                bbox: BoundingBox::new(x, y, 10.0, 10.0),
                label: Label::Char('D'),
                score: s,
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let r = dets[i].bbox.min_area_overlap(&dets[j].bbox);
                assert!((0.79..=0.82).contains(&r), "{r}");
            }
        }
        assert_eq!(suppress_overlaps(&dets, 0.7), vec![dets[0]]);
    }

    #[test]
    fn digit_rule_examples() {
        let out = enforce_digit_positions(&plate("O18LH344"));
        assert_eq!(labels(&out.kept), "18LH344");
        assert!(out.satisfiable);
        let out = enforce_digit_positions(&plate("18LH34B"));
        assert_eq!(labels(&out.kept), "18LH34");
        let out = enforce_digit_positions(&plate("ABCDE"));
        assert!(!out.satisfiable);
        assert_eq!(labels(&out.kept), "ABCDE");
        assert!(!enforce_digit_positions(&[]).satisfiable);
    }

    #[test]
    fn empty_reading_is_flagged() {
        let r = assemble_reading(
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            &[],
            &PipelineConfig::default(),
        );
        assert_eq!(r.text, "");
        assert!(!r.valid);
    }

    #[test]
    fn blank_image_has_no_plate() {
        let img = ImageBuffer::filled(200, 100, 3, 0.4).unwrap();
        let loc = PlateLocalizer::Projection(ProjectionConfig::default());
        assert_eq!(localize_plate(&img, &loc, "x").unwrap(), None);
    }

    #[test]
    fn annotation_backend_passes_through() {
        let img = ImageBuffer::filled(200, 100, 3, 0.4).unwrap();
        let b = BoundingBox::new(10.0, 20.0, 90.0, 30.0);
        let loc = PlateLocalizer::Annotation(HashMap::from([("car".to_string(), b)]));
        assert_eq!(localize_plate(&img, &loc, "car").unwrap(), Some(b));
        assert!(matches!(
            localize_plate(&img, &loc, "bus"),
            Err(Error::Lookup(_))
        ));
    }
}
