use crate::error::{Error, Result};
use crate::hog::{HogCellGrid, HOG_DIM};

use super::model::PartFilter;

/// Dense 2-D map of real scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Dot product with four independent accumulators so the loop vectorises
/// while keeping a fixed summation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Correlates a part filter with a HOG grid over all valid placements.
///
/// `map[x, y] = sum_{u,v} <w(u, v), phi(x + u, y + v)>`, no padding.
pub fn appearance_response(filter: &PartFilter, grid: &HogCellGrid) -> Result<ScoreMap> {
    if filter.w_cells > grid.cells_x || filter.h_cells > grid.cells_y {
        return Err(Error::precondition(format!(
            "{}x{} filter does not fit a {}x{} grid",
            filter.w_cells, filter.h_cells, grid.cells_x, grid.cells_y
        )));
    }
    let mw = grid.cells_x - filter.w_cells + 1;
    let mh = grid.cells_y - filter.h_cells + 1;
    let row_len = filter.w_cells * HOG_DIM;
    let mut data = vec![0.0; mw * mh];
    for y in 0..mh {
        for x in 0..mw {
            let mut s = 0.0;
            for v in 0..filter.h_cells {
                s += dot(filter.row(v), grid.row_span(x, y + v, filter.w_cells));
            }
            data[y * mw + x] = s;
        }
    }
    debug_assert_eq!(row_len, filter.row(0).len());
    Ok(ScoreMap::new(mw, mh, data))
}

/// Dot product of a filter with the grid window whose top-left cell is `(x, y)`.
pub(crate) fn window_score(filter: &PartFilter, grid: &HogCellGrid, x: usize, y: usize) -> f64 {
    (0..filter.h_cells)
        .map(|v| dot(filter.row(v), grid.row_span(x, y + v, filter.w_cells)))
        .sum()
}

/// Appends the grid window under a filter placed at `(x, y)`, in filter layout.
pub(crate) fn extract_window(
    out: &mut Vec<f64>,
    grid: &HogCellGrid,
    x: usize,
    y: usize,
    w_cells: usize,
    h_cells: usize,
) {
    for v in 0..h_cells {
        out.extend_from_slice(grid.row_span(x, y + v, w_cells));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, cx: usize, cy: usize) -> HogCellGrid {
        let data = (0..cx * cy * HOG_DIM)
            .map(|_| rng.random_range(0.0..0.2))
            .collect();
        HogCellGrid::from_data(cx, cy, 4, data).unwrap()
    }

    fn random_filter(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PartFilter {
        let mut f = PartFilter::zeros(w, h, (0, 0));
        for v in &mut f.weights {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn zero_filter_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = random_grid(&mut rng, 5, 4);
        let map = appearance_response(&PartFilter::zeros(2, 2, (0, 0)), &grid).unwrap();
        assert_eq!((map.width, map.height), (4, 3));
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_cell_filter_equal_to_cell_gives_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = random_grid(&mut rng, 5, 5);
        let mut f = PartFilter::zeros(1, 1, (0, 0));
        f.weights.copy_from_slice(grid.cell(3, 1));
        let map = appearance_response(&f, &grid).unwrap();
        let norm2: f64 = grid.cell(3, 1).iter().map(|v| v * v).sum();
        assert!((map.get(3, 1) - norm2).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let grid = random_grid(&mut rng, 5, 5);
            let f = random_filter(&mut rng, 2, 2);
            let map = appearance_response(&f, &grid).unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    let mut naive = 0.0;
                    for v in 0..2 {
                        for u in 0..2 {
                            for k in 0..HOG_DIM {
                                naive += f.weights[(v * 2 + u) * HOG_DIM + k]
                                    * grid.cell(x + u, y + v)[k];
                            }
                        }
                    }
                    assert!((map.get(x, y) - naive).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn oversized_filter_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = random_grid(&mut rng, 3, 3);
        assert!(appearance_response(&PartFilter::zeros(4, 1, (0, 0)), &grid).is_err());
    }
}
