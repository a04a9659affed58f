use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hog::{HogConfig, PyramidConfig, HOG_DIM};
use crate::imaging::BoundingBox;

/// Upper bound on the quadratic deformation coefficients: `a, b <= -EPS`.
pub const DEFORMATION_EPS: f64 = 1e-3;

/// One part template, `w_cells x h_cells` HOG cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartFilter {
    pub w_cells: usize,
    pub h_cells: usize,
    /// Row-major over cells, `HOG_DIM` values per cell.
    pub weights: Vec<f64>,
    /// Expected offset (cells) of this part's top-left corner from its parent's.
    pub anchor: (i32, i32),
}

impl PartFilter {
    pub fn zeros(w_cells: usize, h_cells: usize, anchor: (i32, i32)) -> Self {
        Self {
            w_cells,
            h_cells,
            weights: vec![0.0; w_cells * h_cells * HOG_DIM],
            anchor,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weights of filter row `v`, contiguous over `w_cells * HOG_DIM`.
    pub fn row(&self, v: usize) -> &[f64] {
        let n = self.w_cells * HOG_DIM;
        &self.weights[v * n..(v + 1) * n]
    }
}

/// Coefficients of `a dx^2 + b dy^2 + c dx + d dy` for one tree edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl DeformationParams {
    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    /// Deformation score for a displacement `(dx, dy)` away from the anchor.
    #[inline]
    pub fn term(&self, dx: f64, dy: f64) -> f64 {
        self.a * dx * dx + self.b * dy * dy + self.c * dx + self.d * dy
    }

    pub fn is_concave(&self) -> bool {
        self.a <= -DEFORMATION_EPS && self.b <= -DEFORMATION_EPS
    }

    /// Clamps the quadratic coefficients into the concave region.
    pub fn project(&mut self) {
        self.a = self.a.min(-DEFORMATION_EPS);
        self.b = self.b.min(-DEFORMATION_EPS);
    }
}

pub fn deformation_term(params: &DeformationParams, dx: f64, dy: f64) -> f64 {
    params.term(dx, dy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub parent: usize,
    pub child: usize,
    pub deformation: DeformationParams,
}

/// One mixture component: part filters joined by a tree of deformation edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterTreeModel {
    pub label: char,
    pub parts: Vec<PartFilter>,
    pub edges: Vec<TreeEdge>,
    pub root: usize,
    pub bias: f64,
}

impl CharacterTreeModel {
    /// Zero-initialised three-part model: a root covering the glyph and two
    /// children covering its upper and lower halves.
    pub fn three_part(label: char, root: (usize, usize), part: (usize, usize)) -> Self {
        let lower = root.1.saturating_sub(part.1) as i32;
        let def = DeformationParams::new(-0.05, -0.05, 0.0, 0.0);
        Self {
            label,
            parts: vec![
                PartFilter::zeros(root.0, root.1, (0, 0)),
                PartFilter::zeros(part.0, part.1, (0, 0)),
                PartFilter::zeros(part.0, part.1, (0, lower)),
            ],
            edges: vec![
                TreeEdge {
                    parent: 0,
                    child: 1,
                    deformation: def,
                },
                TreeEdge {
                    parent: 0,
                    child: 2,
                    deformation: def,
                },
            ],
            root: 0,
            bias: 0.0,
        }
    }

    pub fn root_filter(&self) -> &PartFilter {
        &self.parts[self.root]
    }

    /// Checks the tree structure and the concavity of every edge.
    pub fn validate(&self) -> Result<()> {
        let n = self.parts.len();
        if n == 0 || self.root >= n {
            return Err(Error::Parameter("model has no valid root part".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.w_cells == 0
                || p.h_cells == 0
                || p.weights.len() != p.w_cells * p.h_cells * HOG_DIM
            {
                return Err(Error::Parameter(format!(
                    "part {i} has inconsistent filter size"
                )));
            }
        }
        if self.parts[self.root].anchor != (0, 0) {
            return Err(Error::Parameter("root anchor must be (0, 0)".into()));
        }
        if self.edges.len() != n - 1 {
            return Err(Error::Parameter(format!(
                "{} parts need {} edges, found {}",
                n,
                n - 1,
                self.edges.len()
            )));
        }
        let mut parent = vec![None; n];
        for e in &self.edges {
            if e.parent >= n || e.child >= n || e.child == self.root || e.parent == e.child {
                return Err(Error::Parameter(format!(
                    "bad edge {} -> {}",
                    e.parent, e.child
                )));
            }
            if parent[e.child].replace(e.parent).is_some() {
                return Err(Error::Parameter(format!(
                    "part {} has two parents",
                    e.child
                )));
            }
            if !e.deformation.is_concave() {
                return Err(Error::Parameter(format!(
                    "edge {} -> {} is not concave (a = {}, b = {})",
                    e.parent, e.child, e.deformation.a, e.deformation.b
                )));
            }
        }
        if self.topological_order().len() != n {
            return Err(Error::Parameter(
                "edges do not span the parts from the root".into(),
            ));
        }
        Ok(())
    }

    /// Parts ordered parent-before-child, starting at the root.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            for e in self.edges.iter().filter(|e| e.parent == p) {
                if !order.contains(&e.child) {
                    order.push(e.child);
                }
            }
            i += 1;
        }
        order
    }

    /// Number of scalar parameters: filters, four per edge, one bias.
    pub fn param_len(&self) -> usize {
        self.parts.iter().map(PartFilter::len).sum::<usize>() + 4 * self.edges.len() + 1
    }

    /// Flattens the model into the parameter vector matching
    /// [`crate::dpm::configuration_features`].
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for p in &self.parts {
            out.extend_from_slice(&p.weights);
        }
        for e in &self.edges {
            let d = e.deformation;
            out.extend_from_slice(&[d.a, d.b, d.c, d.d]);
        }
        out.push(self.bias);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_len(), "parameter vector length");
        let mut off = 0;
        for p in &mut self.parts {
            let n = p.weights.len();
            p.weights.copy_from_slice(&params[off..off + n]);
            off += n;
        }
        for e in &mut self.edges {
            e.deformation = DeformationParams::new(
                params[off],
                params[off + 1],
                params[off + 2],
                params[off + 3],
            );
            off += 4;
        }
        self.bias = params[off];
    }

    /// Index ranges of the parameter vector that hold deformation `a` and `b`.
    pub fn quadratic_param_indices(&self) -> Vec<usize> {
        let base: usize = self.parts.iter().map(PartFilter::len).sum();
        (0..self.edges.len())
            .flat_map(|k| [base + 4 * k, base + 4 * k + 1])
            .collect()
    }

    /// Multiplies every filter weight, deformation coefficient and the bias by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut m = self.clone();
        let params: Vec<f64> = self.to_params().into_iter().map(|v| v * alpha).collect();
        m.set_params(&params);
        m
    }
}

/// Mixture components for one character class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMixture {
    pub label: char,
    pub components: Vec<CharacterTreeModel>,
}

/// Detector for a whole alphabet together with the feature settings it was
/// trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterMixtureSet {
    pub alphabet: Vec<char>,
    pub classes: Vec<ClassMixture>,
    pub hog: HogConfig,
    pub pyramid: PyramidConfig,
    /// Plate crops are resized to this height before feature extraction.
    pub canonical_height: usize,
}

impl CharacterMixtureSet {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.len() != self.classes.len() {
            return Err(Error::Parameter(
                "alphabet and class list differ in length".into(),
            ));
        }
        for (c, class) in self.alphabet.iter().zip(&self.classes) {
            if *c != class.label {
                return Err(Error::Parameter(format!(
                    "class '{}' stored under alphabet entry '{}'",
                    class.label, c
                )));
            }
            if class.components.is_empty() {
                return Err(Error::Parameter(format!(
                    "class '{c}' has no mixture component"
                )));
            }
            for m in &class.components {
                m.validate()?;
            }
        }
        if self.canonical_height < 2 * self.hog.cell_size {
            return Err(Error::Parameter("canonical height too small".into()));
        }
        Ok(())
    }

    /// True when the set covers exactly the 33-character alphabet.
    pub fn is_complete(&self) -> bool {
        self.alphabet.iter().collect::<String>() == crate::ALPHABET
    }

    pub fn class(&self, label: char) -> Option<&ClassMixture> {
        self.classes.iter().find(|c| c.label == label)
    }

    /// Largest root filter over all components, in cells.
    pub fn max_root_cells(&self) -> (usize, usize) {
        self.min_max_root_cells().1
    }

    pub(crate) fn min_max_root_cells(&self) -> ((usize, usize), (usize, usize)) {
        let mut lo = (usize::MAX, usize::MAX);
        let mut hi = (0, 0);
        for m in self.classes.iter().flat_map(|c| &c.components) {
            let r = m.root_filter();
            lo = (lo.0.min(r.w_cells), lo.1.min(r.h_cells));
            hi = (hi.0.max(r.w_cells), hi.1.max(r.h_cells));
        }
        (lo, hi)
    }
}

/// Detected object class. Serialized as the character itself or `"PLATE"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Label {
    Char(char),
    Plate,
}

impl Label {
    pub fn as_char(&self) -> Option<char> {
        match self {
            Label::Char(c) => Some(*c),
            Label::Plate => None,
        }
    }

    pub fn is_digit(&self) -> bool {
        matches!(self, Label::Char(c) if c.is_ascii_digit())
    }
}

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for Label {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Ok(Label::Char(c)),
            _ if s == "PLATE" => Ok(Label::Plate),
            _ => Err(format!("unknown label '{s}'")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Char(c) => write!(f, "{c}"),
            Label::Plate => f.write_str("PLATE"),
        }
    }
}

/// Cell positions (top-left corner) of every part, at one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartPlacement {
    pub level: usize,
    pub positions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: Label,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deformation_examples() {
        let any = DeformationParams::new(-0.3, -7.0, 2.0, -1.5);
        assert_eq!(any.term(0.0, 0.0), 0.0);
        let unit = DeformationParams::new(-1.0, -1.0, 0.0, 0.0);
        assert_eq!(unit.term(1.0, 2.0), -5.0);
        // hand-evaluated: -1*4 - 2*1 + 3*2 - 4*1 = -4
        let p = DeformationParams::new(-1.0, -2.0, 3.0, -4.0);
        assert_eq!(deformation_term(&p, 2.0, 1.0), -4.0);
    }

    #[test]
    fn labels_serialize_as_strings() {
        let d = Detection {
            bbox: BoundingBox::new(1.0, 2.0, 3.0, 4.0),
            label: Label::Char('7'),
            score: 0.5,
        };
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains(r#""label":"7""#), "{s}");
        assert_eq!(serde_json::from_str::<Detection>(&s).unwrap(), d);
        let p: Label = serde_json::from_str(r#""PLATE""#).unwrap();
        assert_eq!(p, Label::Plate);
        assert!(serde_json::from_str::<Label>(r#""AB""#).is_err());
    }

    #[test]
    fn three_part_model_is_a_valid_tree() {
        let m = CharacterTreeModel::three_part('A', (4, 8), (4, 4));
        m.validate().unwrap();
        assert_eq!(m.parts.len(), 3);
        assert_eq!(m.parts[2].anchor, (0, 4));
        assert_eq!(m.topological_order(), vec![0, 1, 2]);
        assert_eq!(m.param_len(), (32 + 16 + 16) * HOG_DIM + 8 + 1);
    }

    #[test]
    fn validation_rejects_broken_trees() {
        let mut m = CharacterTreeModel::three_part('A', (4, 8), (4, 4));
        m.edges[1].child = 1;
        assert!(m.validate().is_err());

        let mut m = CharacterTreeModel::three_part('A', (4, 8), (4, 4));
        m.edges[0].deformation.a = 0.5;
        assert!(m.validate().is_err());

        let mut m = CharacterTreeModel::three_part('A', (4, 8), (4, 4));
        m.edges.pop();
        assert!(m.validate().is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut m = CharacterTreeModel::three_part('7', (2, 3), (2, 2));
        let params: Vec<f64> = (0..m.param_len()).map(|i| i as f64 * 0.5 - 3.0).collect();
        m.set_params(&params);
        assert_eq!(m.to_params(), params);
        assert_eq!(m.bias, *params.last().unwrap());
        let idx = m.quadratic_param_indices();
        assert_eq!(m.edges[0].deformation.a, params[idx[0]]);
        assert_eq!(m.edges[1].deformation.b, params[idx[3]]);
    }
}
