//! Histogram-of-oriented-gradients cell features and feature pyramids.
//!
//! Each cell carries 9 unsigned orientation bins normalised against the four
//! 2x2-cell blocks that contain it, giving [`HOG_DIM`] = 36 values per cell,
//! each truncated at [`HogConfig::clamp`].

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageBuffer};

pub const HOG_BINS: usize = 9;
pub const HOG_DIM: usize = HOG_BINS * 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    pub cell_size: usize,
    /// Truncation applied after block normalisation.
    pub clamp: f64,
    /// Added to block energies before normalisation.
    pub epsilon: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell_size: 4,
            clamp: 0.2,
            epsilon: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: usize,
    pub scale_step: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            scale_step: 2f64.powf(-0.25),
        }
    }
}

/// Per-pixel gradient magnitude and unsigned orientation in `[0, pi)`.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    pub orientation: Vec<f64>,
}

/// Central differences in the interior, one-sided differences on the border.
pub fn compute_gradients(img: &ImageBuffer) -> Result<GradientField> {
    if img.channels() != 1 {
        return Err(Error::precondition("gradients need a 1-channel image"));
    }
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::precondition(format!(
            "gradients need at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let px = img.pixels();
    let at = |x: usize, y: usize| px[y * w + x] as f64;
    let mut magnitude = Vec::with_capacity(w * h);
    let mut orientation = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 {
                at(1, y) - at(0, y)
            } else if x == w - 1 {
                at(w - 1, y) - at(w - 2, y)
            } else {
                0.5 * (at(x + 1, y) - at(x - 1, y))
            };
            let gy = if y == 0 {
                at(x, 1) - at(x, 0)
            } else if y == h - 1 {
                at(x, h - 1) - at(x, h - 2)
            } else {
                0.5 * (at(x, y + 1) - at(x, y - 1))
            };
            magnitude.push((gx * gx + gy * gy).sqrt());
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += PI;
            }
            if theta >= PI {
                theta -= PI;
            }
            orientation.push(theta);
        }
    }
    Ok(GradientField {
        width: w,
        height: h,
        magnitude,
        orientation,
    })
}

/// Raw (unnormalised) orientation histograms: `cells_x * cells_y * HOG_BINS`.
///
/// Votes are interpolated bilinearly between neighbouring orientation bins
/// and between the four nearest cell centres.
pub fn cell_histograms(img: &ImageBuffer, cell_size: usize) -> Result<(usize, usize, Vec<f64>)> {
    if cell_size == 0 {
        return Err(Error::precondition("cell size must be positive"));
    }
    if img.width() < 2 * cell_size || img.height() < 2 * cell_size {
        return Err(Error::precondition(format!(
            "HOG needs at least {0}x{0} pixels for cell size {1}, got {2}x{3}",
            2 * cell_size,
            cell_size,
            img.width(),
            img.height()
        )));
    }
    let grad = compute_gradients(img)?;
    let cx = img.width() / cell_size;
    let cy = img.height() / cell_size;
    let mut hist = vec![0.0; cx * cy * HOG_BINS];
    let bin_width = PI / HOG_BINS as f64;
    let cs = cell_size as f64;
    for y in 0..grad.height {
        let fy = (y as f64 + 0.5) / cs - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0 = y0 as isize;
        for x in 0..grad.width {
            let mag = grad.magnitude[y * grad.width + x];
            if mag == 0.0 {
                continue;
            }
            let fb = grad.orientation[y * grad.width + x] / bin_width - 0.5;
            let b0 = fb.floor();
            let tb = fb - b0;
            let b0 = (b0 as isize).rem_euclid(HOG_BINS as isize) as usize;
            let b1 = (b0 + 1) % HOG_BINS;

            let fx = (x as f64 + 0.5) / cs - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0 = x0 as isize;
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let cyi = y0 + dy;
                if cyi < 0 || cyi >= cy as isize || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let cxi = x0 + dx;
                    if cxi < 0 || cxi >= cx as isize || wx == 0.0 {
                        continue;
                    }
                    let base = (cyi as usize * cx + cxi as usize) * HOG_BINS;
                    let v = mag * wx * wy;
                    hist[base + b0] += v * (1.0 - tb);
                    hist[base + b1] += v * tb;
                }
            }
        }
    }
    Ok((cx, cy, hist))
}

/// Dense grid of block-normalised HOG cells.
#[derive(Debug, Clone, PartialEq)]
pub struct HogCellGrid {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: usize,
    data: Vec<f64>,
}

impl HogCellGrid {
    /// Wraps raw feature data; `data.len()` must equal `cells_x * cells_y * HOG_DIM`.
    pub fn from_data(
        cells_x: usize,
        cells_y: usize,
        cell_size: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != cells_x * cells_y * HOG_DIM {
            return Err(Error::precondition("HOG data length does not match grid"));
        }
        Ok(Self {
            cells_x,
            cells_y,
            cell_size,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.cells_x + x) * HOG_DIM;
        &self.data[base..base + HOG_DIM]
    }

    /// Contiguous features of `len` cells starting at `(x, y)` along a row.
    pub fn row_span(&self, x: usize, y: usize, len: usize) -> &[f64] {
        let base = (y * self.cells_x + x) * HOG_DIM;
        &self.data[base..base + len * HOG_DIM]
    }
}

pub fn hog_cells(img: &ImageBuffer, config: &HogConfig) -> Result<HogCellGrid> {
    let (cx, cy, hist) = cell_histograms(img, config.cell_size)?;
    let energy: Vec<f64> = hist
        .chunks_exact(HOG_BINS)
        .map(|h| h.iter().map(|v| v * v).sum())
        .collect();
    let e = |x: isize, y: isize| {
        let x = x.clamp(0, cx as isize - 1) as usize;
        let y = y.clamp(0, cy as isize - 1) as usize;
        energy[y * cx + x]
    };
    let mut data = vec![0.0; cx * cy * HOG_DIM];
    for y in 0..cy as isize {
        for x in 0..cx as isize {
            let h = &hist[(y as usize * cx + x as usize) * HOG_BINS..][..HOG_BINS];
            let out = &mut data[(y as usize * cx + x as usize) * HOG_DIM..][..HOG_DIM];
            for (k, (ox, oy)) in [(-1, -1), (0, -1), (-1, 0), (0, 0)].into_iter().enumerate() {
                let block = e(x + ox, y + oy)
                    + e(x + ox + 1, y + oy)
                    + e(x + ox, y + oy + 1)
                    + e(x + ox + 1, y + oy + 1);
                let norm = 1.0 / (block + config.epsilon).sqrt();
                for b in 0..HOG_BINS {
                    out[k * HOG_BINS + b] = (h[b] * norm).min(config.clamp);
                }
            }
        }
    }
    Ok(HogCellGrid {
        cells_x: cx,
        cells_y: cy,
        cell_size: config.cell_size,
        data,
    })
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// Nominal scale factor relative to the source image.
    pub scale: f64,
    pub grid: HogCellGrid,
}

#[derive(Debug, Clone)]
pub struct HogPyramid {
    pub levels: Vec<PyramidLevel>,
    pub source_width: usize,
    pub source_height: usize,
}

impl HogPyramid {
    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }
}

/// Builds up to `pyramid.levels` levels, level `k` from the image resized by
/// `scale_step^k`. Levels with fewer than `min_cells` cells in either axis
/// are dropped.
pub fn build_pyramid(
    img: &ImageBuffer,
    pyramid: &PyramidConfig,
    hog: &HogConfig,
    min_cells: (usize, usize),
) -> Result<HogPyramid> {
    if !(pyramid.scale_step > 0.0 && pyramid.scale_step < 1.0) {
        return Err(Error::Parameter(format!(
            "scale step {} outside (0, 1)",
            pyramid.scale_step
        )));
    }
    if pyramid.levels == 0 {
        return Err(Error::Parameter("pyramid needs at least one level".into()));
    }
    let gray = imaging::to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    let min_cx = min_cells.0.max(2);
    let min_cy = min_cells.1.max(2);
    let plans: Vec<(f64, usize, usize)> = (0..pyramid.levels)
        .map(|k| {
            let s = pyramid.scale_step.powi(k as i32);
            let sw = ((w as f64 * s).round() as usize).max(1);
            let sh = ((h as f64 * s).round() as usize).max(1);
            (s, sw, sh)
        })
        .take_while(|&(_, sw, sh)| sw / hog.cell_size >= min_cx && sh / hog.cell_size >= min_cy)
        .collect();
    if plans.is_empty() {
        return Err(Error::EmptyPyramid);
    }
    let levels = plans
        .into_par_iter()
        .map(|(scale, sw, sh)| {
            let resized = imaging::resize(&gray, sw, sh)?;
            Ok(PyramidLevel {
                scale,
                grid: hog_cells(&resized, hog)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HogPyramid {
        levels,
        source_width: w,
        source_height: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |x, y, _| f(x, y)).unwrap()
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let g = compute_gradients(&gray(8, 8, |_, _| 0.4)).unwrap();
        assert!(g.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn vertical_step_edge_is_horizontal_gradient() {
        let img = gray(10, 6, |x, _| if x < 5 { 0.0 } else { 1.0 });
        let g = compute_gradients(&img).unwrap();
        for y in 0..6 {
            let i = y * 10 + 5;
            assert!(g.magnitude[i] > 0.0);
            assert!(g.orientation[i].abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_gradient_matches_analytic_value() {
        let w = 20;
        let img = gray(w, 5, |x, _| x as f32 / w as f32);
        let g = compute_gradients(&img).unwrap();
        for y in 0..5 {
            for x in 1..w - 1 {
                let expected = 1.0 / w as f64;
                assert!((g.magnitude[y * w + x] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tiny_image_rejected() {
        assert!(compute_gradients(&gray(2, 5, |_, _| 0.0)).is_err());
        assert!(hog_cells(&gray(7, 20, |_, _| 0.0), &HogConfig::default()).is_err());
    }

    #[test]
    fn constant_image_has_zero_features() {
        let grid = hog_cells(&gray(32, 16, |_, _| 0.7), &HogConfig::default()).unwrap();
        assert_eq!((grid.cells_x, grid.cells_y), (8, 4));
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_by_180_keeps_histogram_totals() {
        let img = gray(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let rot = gray(16, 16, |x, y| img.get(15 - x, 15 - y, 0));
        let (_, _, a) = cell_histograms(&img, 4).unwrap();
        let (_, _, b) = cell_histograms(&rot, 4).unwrap();
        let totals = |h: &[f64]| {
            let mut t = [0.0; HOG_BINS];
            for cell in h.chunks_exact(HOG_BINS) {
                for (acc, v) in t.iter_mut().zip(cell) {
                    *acc += v;
                }
            }
            t
        };
        for (x, y) in totals(&a).iter().zip(totals(&b)) {
            assert!((x - y).abs() < 1e-9);
        }
        // cell (i, j) of the rotated image mirrors cell (3 - i, 3 - j)
        for cy in 0..4 {
            for cx in 0..4 {
                let ha = &a[(cy * 4 + cx) * HOG_BINS..][..HOG_BINS];
                let hb = &b[((3 - cy) * 4 + (3 - cx)) * HOG_BINS..][..HOG_BINS];
                for (x, y) in ha.iter().zip(hb) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn diagonal_edge_votes_into_45_degree_bin() {
        // gradient direction (1, 1) / sqrt(2): 45 degrees, inside bin [40, 60)
        let img = gray(16, 16, |x, y| if x + y > 16 { 1.0 } else { 0.0 });
        let (_, _, h) = cell_histograms(&img, 4).unwrap();
        let mut totals = [0.0; HOG_BINS];
        for cell in h.chunks_exact(HOG_BINS) {
            for (acc, v) in totals.iter_mut().zip(cell) {
                *acc += v;
            }
        }
        let best = (0..HOG_BINS)
            .max_by(|&a, &b| totals[a].total_cmp(&totals[b]))
            .unwrap();
        assert_eq!(best, 2);
        assert!(totals[2] > 2.0 * totals[1]);
    }

    #[test]
    fn diagonal_ramp_splits_votes_between_neighbouring_bins() {
        // 45 deg sits 3/4 of the way from the 30 deg centre to the 50 deg centre
        let img = gray(16, 16, |x, y| (x + y) as f32 / 32.0);
        let (_, _, h) = cell_histograms(&img, 4).unwrap();
        for cell in h.chunks_exact(HOG_BINS) {
            assert!(cell[2] > 0.0);
            assert!((cell[1] / cell[2] - 1.0 / 3.0).abs() < 1e-6);
            let rest: f64 = cell
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != 1 && *b != 2)
                .map(|(_, v)| v)
                .sum();
            assert_eq!(rest, 0.0);
        }
    }

    #[test]
    fn pyramid_levels() {
        let img = gray(64, 32, |x, y| ((x / 3 + y / 5) % 2) as f32);
        let hog = HogConfig::default();
        let one = build_pyramid(
            &img,
            &PyramidConfig {
                levels: 1,
                scale_step: 0.5,
            },
            &hog,
            (1, 1),
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.levels[0].grid, hog_cells(&img, &hog).unwrap());

        let p = build_pyramid(
            &img,
            &PyramidConfig {
                levels: 4,
                scale_step: 0.5,
            },
            &hog,
            (1, 1),
        )
        .unwrap();
        let dims: Vec<_> = p
            .levels
            .iter()
            .map(|l| (l.grid.cells_x, l.grid.cells_y))
            .collect();
        assert_eq!(dims, vec![(16, 8), (8, 4), (4, 2)]);

        assert!(matches!(
            build_pyramid(
                &img,
                &PyramidConfig {
                    levels: 3,
                    scale_step: 0.5
                },
                &hog,
                (20, 20)
            ),
            Err(Error::EmptyPyramid)
        ));
        assert!(build_pyramid(
            &img,
            &PyramidConfig {
                levels: 3,
                scale_step: 1.0
            },
            &hog,
            (1, 1)
        )
        .is_err());
    }

    #[test]
    fn constant_pyramid_is_zero() {
        let img = gray(64, 64, |_, _| 0.25);
        let p = build_pyramid(
            &img,
            &PyramidConfig::default(),
            &HogConfig::default(),
            (2, 2),
        )
        .unwrap();
        assert!(p
            .levels
            .iter()
            .all(|l| l.grid.data().iter().all(|&v| v == 0.0)));
    }
}
