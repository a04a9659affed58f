use crate::error::{Error, Result};
use crate::hog::{HogCellGrid, HogPyramid};

use super::dt::{distance_transform_message, DtMessage};
use super::model::{CharacterTreeModel, PartPlacement};
use super::response::{appearance_response, extract_window, window_score, ScoreMap};

/// Sum of part appearance scores, edge deformation terms and the bias for a
/// fixed placement of every part.
pub fn score_configuration(
    model: &CharacterTreeModel,
    grid: &HogCellGrid,
    placement: &PartPlacement,
) -> Result<f64> {
    check_placement(model, grid, placement)?;
    let pos = &placement.positions;
    let mut score = 0.0;
    for (part, &(x, y)) in model.parts.iter().zip(pos) {
        score += window_score(part, grid, x, y);
    }
    for e in &model.edges {
        let (dx, dy) = displacement(model, placement, e.parent, e.child);
        score += e.deformation.term(dx, dy);
    }
    Ok(score + model.bias)
}

/// Feature vector `psi` with `score_configuration = <model.to_params(), psi>`:
/// the HOG window under every part, `(dx^2, dy^2, dx, dy)` per edge, then 1.
pub fn configuration_features(
    model: &CharacterTreeModel,
    grid: &HogCellGrid,
    placement: &PartPlacement,
) -> Result<Vec<f64>> {
    check_placement(model, grid, placement)?;
    let mut out = Vec::with_capacity(model.param_len());
    for (part, &(x, y)) in model.parts.iter().zip(&placement.positions) {
        extract_window(&mut out, grid, x, y, part.w_cells, part.h_cells);
    }
    for e in &model.edges {
        let (dx, dy) = displacement(model, placement, e.parent, e.child);
        out.extend_from_slice(&[dx * dx, dy * dy, dx, dy]);
    }
    out.push(1.0);
    Ok(out)
}

fn displacement(
    model: &CharacterTreeModel,
    placement: &PartPlacement,
    parent: usize,
    child: usize,
) -> (f64, f64) {
    let (px, py) = placement.positions[parent];
    let (qx, qy) = placement.positions[child];
    let (ax, ay) = model.parts[child].anchor;
    (
        qx as f64 - px as f64 - ax as f64,
        qy as f64 - py as f64 - ay as f64,
    )
}

fn check_placement(
    model: &CharacterTreeModel,
    grid: &HogCellGrid,
    placement: &PartPlacement,
) -> Result<()> {
    if placement.positions.len() != model.parts.len() {
        return Err(Error::precondition(format!(
            "placement has {} positions for {} parts",
            placement.positions.len(),
            model.parts.len()
        )));
    }
    for (i, (part, &(x, y))) in model.parts.iter().zip(&placement.positions).enumerate() {
        if x + part.w_cells > grid.cells_x || y + part.h_cells > grid.cells_y {
            return Err(Error::precondition(format!(
                "part {i} at ({x}, {y}) leaves the {}x{} grid",
                grid.cells_x, grid.cells_y
            )));
        }
    }
    Ok(())
}

/// Dynamic-programming tables for one model on one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelInference {
    /// Best total score for every root position, bias included.
    pub root_scores: ScoreMap,
    /// Message (and argmax) from each non-root part onto its parent.
    messages: Vec<Option<DtMessage>>,
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    root: usize,
}

impl LevelInference {
    /// Runs leaf-to-root message passing. Returns `None` when some part does
    /// not fit on the grid.
    pub fn compute(model: &CharacterTreeModel, grid: &HogCellGrid) -> Result<Option<Self>> {
        if model
            .parts
            .iter()
            .any(|p| p.w_cells > grid.cells_x || p.h_cells > grid.cells_y)
        {
            return Ok(None);
        }
        let n = model.parts.len();
        let order = model.topological_order();
        let mut children = vec![Vec::new(); n];
        for e in &model.edges {
            children[e.parent].push(e.child);
        }
        let mut scores: Vec<Option<ScoreMap>> = vec![None; n];
        let mut messages: Vec<Option<DtMessage>> = vec![None; n];
        for &i in order.iter().rev() {
            let mut s = appearance_response(&model.parts[i], grid)?;
            for e in model.edges.iter().filter(|e| e.parent == i) {
                let child = scores[e.child].take().expect("children scored first");
                let msg = distance_transform_message(
                    &child,
                    &e.deformation,
                    model.parts[e.child].anchor,
                    (s.width, s.height),
                )?;
                for (acc, m) in s.data.iter_mut().zip(&msg.values.data) {
                    *acc += m;
                }
                messages[e.child] = Some(msg);
            }
            scores[i] = Some(s);
        }
        let mut root_scores = scores[model.root].take().expect("root scored");
        for v in &mut root_scores.data {
            *v += model.bias;
        }
        Ok(Some(Self {
            root_scores,
            messages,
            order,
            children,
            root: model.root,
        }))
    }

    /// Recovers every part position for a root placed at `(x, y)`.
    pub fn backtrack(&self, x: usize, y: usize) -> Vec<(usize, usize)> {
        let mut pos = vec![(0, 0); self.children.len()];
        pos[self.root] = (x, y);
        for &i in &self.order {
            for &c in &self.children[i] {
                let (px, py) = pos[i];
                pos[c] = self.messages[c]
                    .as_ref()
                    .expect("message for every child")
                    .argmax_at(px, py);
            }
        }
        pos
    }

    /// Highest root score inside `window` (smallest y, then x, on ties).
    pub fn best_in(&self, window: Option<&RootWindow>) -> Option<(f64, usize, usize)> {
        let m = &self.root_scores;
        let (x0, x1, y0, y1) = match window {
            Some(w) => (
                w.x0,
                w.x1.min(m.width.saturating_sub(1)),
                w.y0,
                w.y1.min(m.height.saturating_sub(1)),
            ),
            None => (0, m.width - 1, 0, m.height - 1),
        };
        let mut best: Option<(f64, usize, usize)> = None;
        for y in y0..=y1.min(m.height - 1) {
            for x in x0..=x1.min(m.width - 1) {
                let v = m.get(x, y);
                if best.is_none_or(|b| v > b.0) {
                    best = Some((v, x, y));
                }
            }
        }
        best
    }
}

/// Inclusive range of allowed root cells on one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootWindow {
    pub level: usize,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub score: f64,
    pub placement: PartPlacement,
    /// Root score map per pyramid level (`None` where the model does not fit).
    pub root_maps: Vec<Option<ScoreMap>>,
}

/// Best configuration over every level and root position.
///
/// Ties go to the lowest level, then the smallest y, then the smallest x.
pub fn infer_best(model: &CharacterTreeModel, pyramid: &HogPyramid) -> Result<InferenceResult> {
    if pyramid.is_empty() {
        return Err(Error::EmptyPyramid);
    }
    model.validate()?;
    let mut best: Option<(f64, usize, usize, usize)> = None;
    let mut tables = Vec::with_capacity(pyramid.len());
    for (level, lv) in pyramid.levels.iter().enumerate() {
        let inf = LevelInference::compute(model, &lv.grid)?;
        if let Some(inf) = &inf {
            if let Some((v, x, y)) = inf.best_in(None) {
                if best.is_none_or(|b| v > b.0) {
                    best = Some((v, level, x, y));
                }
            }
        }
        tables.push(inf);
    }
    let (score, level, x, y) = best.ok_or(Error::EmptyPyramid)?;
    let positions = tables[level]
        .as_ref()
        .expect("best level has tables")
        .backtrack(x, y);
    Ok(InferenceResult {
        score,
        placement: PartPlacement { level, positions },
        root_maps: tables
            .into_iter()
            .map(|t| t.map(|t| t.root_scores))
            .collect(),
    })
}

/// Like [`infer_best`] but the root may only occupy cells inside `windows`.
/// Returns `None` when no window admits a placement.
pub fn infer_best_restricted(
    model: &CharacterTreeModel,
    pyramid: &HogPyramid,
    windows: &[RootWindow],
) -> Result<Option<(f64, PartPlacement)>> {
    model.validate()?;
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| w.level);
    let mut best: Option<(f64, PartPlacement)> = None;
    for w in &sorted {
        let Some(level) = pyramid.levels.get(w.level) else {
            continue;
        };
        let Some(inf) = LevelInference::compute(model, &level.grid)? else {
            continue;
        };
        if w.x0 >= inf.root_scores.width || w.y0 >= inf.root_scores.height {
            continue;
        }
        if let Some((v, x, y)) = inf.best_in(Some(w)) {
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((
                    v,
                    PartPlacement {
                        level: w.level,
                        positions: inf.backtrack(x, y),
                    },
                ));
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpm::model::{DeformationParams, PartFilter, TreeEdge};
    use crate::hog::{PyramidLevel, HOG_DIM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, cx: usize, cy: usize) -> HogCellGrid {
        let data = (0..cx * cy * HOG_DIM)
            .map(|_| rng.random_range(0.0..0.2))
            .collect();
        HogCellGrid::from_data(cx, cy, 4, data).unwrap()
    }

    fn random_chain(rng: &mut ChaCha8Rng) -> CharacterTreeModel {
        let mut parts = Vec::new();
        for i in 0..3 {
            let mut p = PartFilter::zeros(
                rng.random_range(1..3),
                rng.random_range(1..3),
                if i == 0 {
                    (0, 0)
                } else {
                    (rng.random_range(-1..2), rng.random_range(-1..2))
                },
            );
            for v in &mut p.weights {
                *v = rng.random_range(-1.0..1.0);
            }
            parts.push(p);
        }
        let def = |rng: &mut ChaCha8Rng| {
            DeformationParams::new(
                -rng.random_range(0.01..1.0),
                -rng.random_range(0.01..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        };
        CharacterTreeModel {
            label: 'A',
            parts,
            edges: vec![
                TreeEdge {
                    parent: 0,
                    child: 1,
                    deformation: def(rng),
                },
                TreeEdge {
                    parent: 1,
                    child: 2,
                    deformation: def(rng),
                },
            ],
            root: 0,
            bias: rng.random_range(-1.0..1.0),
        }
    }

    #[test]
    fn single_part_model_is_global_response_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = random_chain(&mut rng);
        m.parts.truncate(1);
        m.edges.clear();
        m.bias = 0.0;
        let pyr = HogPyramid {
            levels: vec![
                PyramidLevel {
                    scale: 1.0,
                    grid: random_grid(&mut rng, 6, 5),
                },
                PyramidLevel {
                    scale: 0.8,
                    grid: random_grid(&mut rng, 4, 4),
                },
            ],
            source_width: 24,
            source_height: 20,
        };
        let res = infer_best(&m, &pyr).unwrap();
        let global = pyr
            .levels
            .iter()
            .flat_map(|l| appearance_response(&m.parts[0], &l.grid).unwrap().data)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.score, global);
    }

    #[test]
    fn zero_filters_score_only_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let grid = random_grid(&mut rng, 8, 12);
        let mut m = CharacterTreeModel::three_part('B', (4, 8), (4, 4));
        m.bias = -0.75;
        let placement = PartPlacement {
            level: 0,
            positions: vec![(2, 3), (2, 3), (2, 7)],
        };
        assert_eq!(score_configuration(&m, &grid, &placement).unwrap(), -0.75);
    }

    #[test]
    fn chain_score_equals_manual_sum_and_feature_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid = random_grid(&mut rng, 6, 6);
        let m = random_chain(&mut rng);
        let placement = PartPlacement {
            level: 0,
            positions: vec![(1, 2), (2, 3), (0, 4)],
        };
        let mut manual = m.bias;
        for (p, &(x, y)) in m.parts.iter().zip(&placement.positions) {
            for v in 0..p.h_cells {
                for u in 0..p.w_cells {
                    for k in 0..HOG_DIM {
                        manual += p.weights[(v * p.w_cells + u) * HOG_DIM + k]
                            * grid.cell(x + u, y + v)[k];
                    }
                }
            }
        }
        for e in &m.edges {
            let (px, py) = placement.positions[e.parent];
            let (qx, qy) = placement.positions[e.child];
            let (ax, ay) = m.parts[e.child].anchor;
            let dx = qx as f64 - px as f64 - ax as f64;
            let dy = qy as f64 - py as f64 - ay as f64;
            manual += e.deformation.term(dx, dy);
        }
        let s = score_configuration(&m, &grid, &placement).unwrap();
        assert!((s - manual).abs() < 1e-9);
        let psi = configuration_features(&m, &grid, &placement).unwrap();
        let dot: f64 = psi.iter().zip(m.to_params()).map(|(a, b)| a * b).sum();
        assert!((s - dot).abs() < 1e-9);
    }

    #[test]
    fn invalid_placement_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let grid = random_grid(&mut rng, 6, 9);
        let m = CharacterTreeModel::three_part('C', (4, 8), (4, 4));
        let bad = PartPlacement {
            level: 0,
            positions: vec![(3, 0), (0, 0), (0, 4)],
        };
        assert!(score_configuration(&m, &grid, &bad).is_err());
    }

    #[test]
    fn restricted_search_with_zero_model_uses_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let m = CharacterTreeModel::three_part('D', (4, 8), (4, 4));
        let pyr = HogPyramid {
            levels: vec![PyramidLevel {
                scale: 1.0,
                grid: random_grid(&mut rng, 10, 12),
            }],
            source_width: 40,
            source_height: 48,
        };
        let w = RootWindow {
            level: 0,
            x0: 2,
            x1: 4,
            y0: 1,
            y1: 3,
        };
        let (score, placement) = infer_best_restricted(&m, &pyr, &[w]).unwrap().unwrap();
        assert_eq!(score, 0.0);
        assert_eq!(placement.positions, vec![(2, 1), (2, 1), (2, 5)]);
        let full = infer_best(&m, &pyr).unwrap();
        assert_eq!(full.placement.positions[0], (0, 0));
    }
}
