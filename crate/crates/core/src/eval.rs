//! Plate detection accuracy, string accuracy, character confusions and
//! latency.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dpm::Detection;
use crate::error::{Error, Result};
use crate::imaging::BoundingBox;
use crate::pipeline::{PlateReading, ReadingRecord};
use crate::synth::{CharAnnotation, ManifestHeader, Split, SynthRecord, MANIFEST_FILE};

/// Character pairs that are easy to mix up on plates.
pub const CONFUSABLE_PAIRS: [(char, char); 4] = [('0', 'D'), ('S', '8'), ('3', '9'), ('Y', 'V')];

fn check_keys<A, B>(a: &BTreeMap<String, A>, b: &BTreeMap<String, B>) -> Result<()> {
    if let Some(k) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(Error::Keying(format!("'{k}' has no ground truth")));
    }
    if let Some(k) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(Error::Keying(format!("'{k}' has no prediction")));
    }
    Ok(())
}

/// Counts predictions whose IoU with the ground truth exceeds `threshold`
/// (strictly). A missing prediction counts as wrong.
pub fn plate_detection_accuracy(
    preds: &BTreeMap<String, Option<BoundingBox>>,
    gts: &BTreeMap<String, BoundingBox>,
    threshold: f64,
) -> Result<(usize, f64)> {
    check_keys(preds, gts)?;
    let correct = gts
        .iter()
        .filter(|(k, gt)| preds[*k].is_some_and(|p| p.iou(gt) > threshold))
        .count();
    let acc = if gts.is_empty() {
        0.0
    } else {
        correct as f64 / gts.len() as f64
    };
    Ok((correct, acc))
}

/// Whitespace removed, upper-cased.
pub fn normalize_plate(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect()
}

/// Minimal unit-cost edit alignment of `gt` against `pred`. Each pair is
/// `(gt char, predicted char)`; `None` marks a deletion or insertion.
pub fn align(gt: &[char], pred: &[char]) -> Vec<(Option<char>, Option<char>)> {
    let (n, m) = (gt.len(), pred.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(gt[i - 1] != pred[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(gt[i - 1] != pred[j - 1]) {
            out.push((Some(gt[i - 1]), Some(pred[j - 1])));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.push((Some(gt[i - 1]), None));
            i -= 1;
        } else {
            out.push((None, Some(pred[j - 1])));
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Rows are ground-truth characters plus a final "inserted" row; columns
/// are predicted characters plus a final "missed" column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub alphabet: Vec<char>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(alphabet: &[char]) -> Self {
        let n = alphabet.len() + 1;
        Self {
            alphabet: alphabet.to_vec(),
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, c: Option<char>) -> Option<usize> {
        match c {
            None => Some(self.alphabet.len()),
            Some(c) => self.alphabet.iter().position(|&a| a == c),
        }
    }

    /// Records one aligned pair; characters outside the alphabet are
    /// treated like gaps.
    pub fn add(&mut self, gt: Option<char>, pred: Option<char>) {
        let r = self.index(gt).unwrap_or(self.alphabet.len());
        let c = self.index(pred).unwrap_or(self.alphabet.len());
        if r == self.alphabet.len() && c == self.alphabet.len() {
            return;
        }
        self.counts[r][c] += 1;
    }

    pub fn get(&self, gt: Option<char>, pred: Option<char>) -> u64 {
        match (self.index(gt), self.index(pred)) {
            (Some(r), Some(c)) => self.counts[r][c],
            _ => 0,
        }
    }

    pub fn row_sum(&self, gt: Option<char>) -> u64 {
        self.index(gt).map_or(0, |r| self.counts[r].iter().sum())
    }

    pub fn missed_total(&self) -> u64 {
        let last = self.alphabet.len();
        self.counts.iter().map(|r| r[last]).sum()
    }

    /// Off-diagonal cells, largest first.
    pub fn top_confusions(&self, n: usize) -> Vec<(char, char, u64)> {
        let mut v = Vec::new();
        for (r, &a) in self.alphabet.iter().enumerate() {
            for (c, &b) in self.alphabet.iter().enumerate() {
                if r != c && self.counts[r][c] > 0 {
                    v.push((a, b, self.counts[r][c]));
                }
            }
        }
        v.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        v.truncate(n);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub a: char,
    pub b: char,
    /// Ground truth `a` read as `b`.
    pub a_as_b: u64,
    pub b_as_a: u64,
}

pub fn confusable_report(m: &ConfusionMatrix) -> Vec<ConfusablePair> {
    CONFUSABLE_PAIRS
        .iter()
        .map(|&(a, b)| ConfusablePair {
            a,
            b,
            a_as_b: m.get(Some(a), Some(b)),
            b_as_a: m.get(Some(b), Some(a)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionSummary {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Exact-match string accuracy plus the alignment confusion matrix.
pub fn recognition_accuracy(
    readings: &BTreeMap<String, Option<PlateReading>>,
    gts: &BTreeMap<String, String>,
    alphabet: &[char],
) -> Result<RecognitionSummary> {
    check_keys(readings, gts)?;
    let mut confusion = ConfusionMatrix::new(alphabet);
    let mut correct = 0;
    for (k, gt) in gts {
        let pred = readings[k].as_ref().map(|r| r.text.as_str()).unwrap_or("");
        let (g, p) = (normalize_plate(gt), normalize_plate(pred));
        if g == p {
            correct += 1;
        }
        let gc: Vec<char> = g.chars().collect();
        let pc: Vec<char> = p.chars().collect();
        for (a, b) in align(&gc, &pc) {
            confusion.add(a, b);
        }
    }
    let n = gts.len();
    Ok(RecognitionSummary {
        n,
        correct,
        accuracy: if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        },
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrecisionRecall {
    pub label: char,
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

impl ClassPrecisionRecall {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.detections)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.ground_truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterDetectionStats {
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub per_class: Vec<ClassPrecisionRecall>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Matches detections to ground-truth characters of the same label, best
/// score first, when the boxes overlap by at least `min_overlap` of the
/// smaller box. Each ground-truth box is matched at most once.
pub fn character_detection_stats(
    images: &[(Vec<Detection>, Vec<(char, BoundingBox)>)],
    alphabet: &[char],
    min_overlap: f64,
) -> CharacterDetectionStats {
    let mut per: BTreeMap<char, (usize, usize, usize)> =
        alphabet.iter().map(|&c| (c, (0, 0, 0))).collect();
    for (dets, gts) in images {
        let mut order: Vec<&Detection> = dets.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; gts.len()];
        for (c, _) in gts {
            per.entry(*c).or_default().2 += 1;
        }
        for d in order {
            let Some(label) = d.label.as_char() else {
                continue;
            };
            per.entry(label).or_default().1 += 1;
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, (c, b))| {
                    !used[*i] && *c == label && d.bbox.min_area_overlap(b) >= min_overlap
                })
                .max_by(|x, y| {
                    d.bbox
                        .min_area_overlap(&x.1 .1)
                        .total_cmp(&d.bbox.min_area_overlap(&y.1 .1))
                        .then(y.0.cmp(&x.0))
                });
            if let Some((i, _)) = best {
                used[i] = true;
                per.entry(label).or_default().0 += 1;
            }
        }
    }
    let tp = per.values().map(|v| v.0).sum();
    let det = per.values().map(|v| v.1).sum();
    let gt = per.values().map(|v| v.2).sum();
    CharacterDetectionStats {
        true_positives: tp,
        detections: det,
        ground_truth: gt,
        precision: ratio(tp, det),
        recall: ratio(tp, gt),
        per_class: per
            .into_iter()
            .map(|(label, (t, d, g))| ClassPrecisionRecall {
                label,
                true_positives: t,
                detections: d,
                ground_truth: g,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the given samples.
    pub fn from_samples(ms: &[f64]) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::Parameter("no latency samples".into()));
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Ok(Self {
            samples: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            max_ms: s[s.len() - 1],
        })
    }
}

/// Wall-clock latency of `f` per item, after `warmup` untimed passes.
pub fn timing_benchmark<T, R>(
    mut f: impl FnMut(&T) -> R,
    items: &[T],
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(Error::Parameter("reps must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(Error::Parameter("no benchmark inputs".into()));
    }
    for _ in 0..warmup {
        for it in items {
            std::hint::black_box(f(it));
        }
    }
    let mut ms = Vec::with_capacity(reps * items.len());
    for _ in 0..reps {
        for it in items {
            let t = Instant::now();
            std::hint::black_box(f(it));
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    LatencyStats::from_samples(&ms)
}

/// Annotation of one image. Manifest records parse as ground truth, so a
/// synthetic dataset can be scored directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: String,
    pub text: String,
    pub plate_box: BoundingBox,
    #[serde(default)]
    pub chars: Vec<CharAnnotation>,
}

impl From<&SynthRecord> for GroundTruth {
    fn from(r: &SynthRecord) -> Self {
        Self {
            image: r.image.clone(),
            text: r.text.clone(),
            plate_box: r.plate_box,
            chars: r.chars.clone(),
        }
    }
}

/// Reads ground truth from a dataset directory, a manifest or a plain JSONL
/// file of [`GroundTruth`] lines. `split` filters manifest records and is
/// ignored for plain files.
pub fn read_ground_truth(path: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
    let mut out = Vec::new();
    let mut manifest = false;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&file, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if i == 0 && serde_json::from_str::<ManifestHeader>(t).is_ok() {
            manifest = true;
            continue;
        }
        let bad =
            |e: serde_json::Error| Error::Manifest(format!("{}:{}: {e}", file.display(), i + 1));
        if manifest {
            let r: SynthRecord = serde_json::from_str(t).map_err(bad)?;
            if split.is_none_or(|s| s == r.split) {
                out.push(GroundTruth::from(&r));
            }
        } else {
            out.push(serde_json::from_str(t).map_err(bad)?);
        }
    }
    Ok(out)
}

/// Scores reading records against ground truth keyed by image id.
/// Character statistics only cover images whose truth lists character boxes.
pub fn evaluate(
    readings: &[ReadingRecord],
    truth: &[GroundTruth],
    alphabet: &[char],
    plate_iou: f64,
    char_overlap: f64,
) -> Result<EvalReport> {
    let mut preds = BTreeMap::new();
    for r in readings {
        if preds.insert(r.image.clone(), r.reading.clone()).is_some() {
            return Err(Error::Keying(format!(
                "duplicate reading for '{}'",
                r.image
            )));
        }
    }
    let mut gts = BTreeMap::new();
    for g in truth {
        if gts.insert(g.image.clone(), g).is_some() {
            return Err(Error::Keying(format!(
                "duplicate ground truth for '{}'",
                g.image
            )));
        }
    }
    let boxes: BTreeMap<String, Option<BoundingBox>> = preds
        .iter()
        .map(|(k, r)| (k.clone(), r.as_ref().map(|r| r.plate_box)))
        .collect();
    let gt_boxes: BTreeMap<String, BoundingBox> =
        gts.iter().map(|(k, g)| (k.clone(), g.plate_box)).collect();
    let (detect_correct, detect_acc) = plate_detection_accuracy(&boxes, &gt_boxes, plate_iou)?;
    let texts: BTreeMap<String, String> = gts
        .iter()
        .map(|(k, g)| (k.clone(), g.text.clone()))
        .collect();
    let summary = recognition_accuracy(&preds, &texts, alphabet)?;
    let chars: Vec<_> = gts
        .iter()
        .filter(|(_, g)| !g.chars.is_empty())
        .map(|(k, g)| {
            let dets = preds[k]
                .as_ref()
                .map(|r| r.detections.clone())
                .unwrap_or_default();
            (dets, g.chars.iter().map(|c| (c.label, c.bbox)).collect())
        })
        .collect();
    Ok(EvalReport {
        n_images: gts.len(),
        plate_detect_correct: Some(detect_correct),
        plate_detect_accuracy: Some(detect_acc),
        recog_correct: summary.correct,
        recog_accuracy: summary.accuracy,
        characters: character_detection_stats(&chars, alphabet, char_overlap),
        confusable: confusable_report(&summary.confusion),
        confusion: summary.confusion,
        latency: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub plate_detect_correct: Option<usize>,
    pub plate_detect_accuracy: Option<f64>,
    pub recog_correct: usize,
    pub recog_accuracy: f64,
    pub characters: CharacterDetectionStats,
    pub confusion: ConfusionMatrix,
    pub confusable: Vec<ConfusablePair>,
    pub latency: Option<LatencyStats>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images                 {}", self.n_images)?;
        if let (Some(c), Some(a)) = (self.plate_detect_correct, self.plate_detect_accuracy) {
            writeln!(f, "plate detection        {c}/{} = {a:.4}", self.n_images)?;
        }
        writeln!(
            f,
            "full-string accuracy   {}/{} = {:.4}",
            self.recog_correct, self.n_images, self.recog_accuracy
        )?;
        let ch = &self.characters;
        writeln!(
            f,
            "character precision    {}/{} = {:.4}",
            ch.true_positives, ch.detections, ch.precision
        )?;
        writeln!(
            f,
            "character recall       {}/{} = {:.4}",
            ch.true_positives, ch.ground_truth, ch.recall
        )?;
        if let Some(l) = &self.latency {
            writeln!(
                f,
                "latency ms             mean {:.2}  p50 {:.2}  p95 {:.2}  max {:.2}  (n={})",
                l.mean_ms, l.p50_ms, l.p95_ms, l.max_ms, l.samples
            )?;
        }
        writeln!(f, "confusable pairs")?;
        for p in &self.confusable {
            writeln!(
                f,
                "  {} -> {}: {:<5} {} -> {}: {}",
                p.a, p.b, p.a_as_b, p.b, p.a, p.b_as_a
            )?;
        }
        let top = self.confusion.top_confusions(10);
        if !top.is_empty() {
            writeln!(f, "most frequent confusions (truth -> read)")?;
            for (a, b, n) in top {
                writeln!(f, "  {a} -> {b}: {n}")?;
            }
        }
        writeln!(
            f,
            "missed characters      {}",
            self.confusion.missed_total()
        )?;
        let inserted: u64 = self.confusion.counts[self.confusion.alphabet.len()]
            .iter()
            .sum();
        write!(f, "inserted characters    {inserted}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyed<T: Clone>(v: &[(&str, T)]) -> BTreeMap<String, T> {
        v.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
    }

    #[test]
    fn plate_accuracy_examples() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let far = BoundingBox::new(50.0, 0.0, 10.0, 10.0);
        let gts = keyed(&[("a", b), ("b", b)]);
        let preds = keyed(&[("a", Some(b)), ("b", Some(far))]);
        assert_eq!(
            plate_detection_accuracy(&preds, &gts, 0.8).unwrap(),
            (1, 0.5)
        );
        let missing = keyed(&[("a", Some(b))]);
        assert!(matches!(
            plate_detection_accuracy(&missing, &gts, 0.8),
            Err(Error::Keying(_))
        ));
    }

    #[test]
    fn alignment_and_confusion() {
        let g: Vec<char> = "03CH756".chars().collect();
        let p: Vec<char> = "03PII756".chars().collect();
        let a = align(&g, &p);
        assert_eq!(a.iter().filter(|x| x.0.is_some()).count(), 7);
        assert_eq!(a.len(), 8);
        let alpha: Vec<char> = crate::ALPHABET.chars().collect();
        let mut m = ConfusionMatrix::new(&alpha);
        for (x, y) in a {
            m.add(x, y);
        }
        for c in "03CH756".chars() {
            assert_eq!(m.row_sum(Some(c)), 1);
        }
    }

    #[test]
    fn string_accuracy_examples() {
        let alpha: Vec<char> = crate::ALPHABET.chars().collect();
        let reading = |t: &str| PlateReading {
            plate_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            detections: vec![],
            text: t.to_string(),
            scores: vec![],
            rejected: vec![],
            valid: true,
        };
        let readings = keyed(&[
            ("1", Some(reading("18LH344"))),
            ("2", Some(reading("03PII756"))),
        ]);
        let gts = keyed(&[("1", "18 LH 344".to_string()), ("2", "03CH756".to_string())]);
        let s = recognition_accuracy(&readings, &gts, &alpha).unwrap();
        assert_eq!((s.correct, s.accuracy), (1, 0.5));

        let empty = keyed(&[("1", None), ("2", Some(reading("")))]);
        let s = recognition_accuracy(&empty, &gts, &alpha).unwrap();
        assert_eq!(s.accuracy, 0.0);
        assert_eq!(s.confusion.missed_total(), 14);
    }

    #[test]
    fn latency_mean_and_percentiles() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.p50_ms, 2.0);
        assert_eq!(s.p95_ms, 4.0);
        let t = timing_benchmark(|x: &u32| x + 1, &[1], 0, 1).unwrap();
        assert!(t.mean_ms >= 0.0);
        assert!(timing_benchmark(|x: &u32| *x, &[1], 0, 0).is_err());
    }
}
