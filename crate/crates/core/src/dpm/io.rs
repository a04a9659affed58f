//! Model file container.
//!
//! Layout (all integers `u32`, all reals `f64`, little-endian):
//!
//! ```text
//! magic        8 bytes  "PLTDPM\0\0"
//! version      u32      = 1
//! cell_size    u32
//! hog_clamp    f64
//! hog_epsilon  f64
//! levels       u32
//! scale_step   f64
//! canon_height u32
//! n_classes    u32
//! per class:
//!   label        u32 (Unicode scalar)
//!   n_components u32
//!   per component:
//!     bias     f64
//!     root     u32
//!     n_parts  u32
//!     per part:  w u32, h u32, anchor_x i32, anchor_y i32, w*h*36 f64 weights
//!     n_edges  u32
//!     per edge:  parent u32, child u32, a f64, b f64, c f64, d f64
//! ```
//!
//! The class list doubles as the alphabet. [`to_json`] gives a readable dump
//! of the same content.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hog::{HogConfig, PyramidConfig, HOG_DIM};

use super::model::{
    CharacterMixtureSet, CharacterTreeModel, ClassMixture, DeformationParams, PartFilter, TreeEdge,
};

pub const MAGIC: &[u8; 8] = b"PLTDPM\0\0";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("count fits in u32"));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self, max: usize, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(Error::ModelFormat(format!(
                "{what} count {n} exceeds {max}"
            )));
        }
        Ok(n)
    }
    fn label(&mut self) -> Result<char> {
        let v = self.u32()?;
        char::from_u32(v).ok_or_else(|| Error::ModelFormat(format!("bad label code {v}")))
    }
}

pub fn to_bytes(set: &CharacterMixtureSet) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(set.hog.cell_size);
    w.f64(set.hog.clamp);
    w.f64(set.hog.epsilon);
    w.len(set.pyramid.levels);
    w.f64(set.pyramid.scale_step);
    w.len(set.canonical_height);
    w.len(set.classes.len());
    for class in &set.classes {
        w.u32(class.label as u32);
        w.len(class.components.len());
        for m in &class.components {
            w.f64(m.bias);
            w.len(m.root);
            w.len(m.parts.len());
            for p in &m.parts {
                w.len(p.w_cells);
                w.len(p.h_cells);
                w.i32(p.anchor.0);
                w.i32(p.anchor.1);
                for &v in &p.weights {
                    w.f64(v);
                }
            }
            w.len(m.edges.len());
            for e in &m.edges {
                w.len(e.parent);
                w.len(e.child);
                let d = e.deformation;
                for v in [d.a, d.b, d.c, d.d] {
                    w.f64(v);
                }
            }
        }
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<CharacterMixtureSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::ModelFormat("bad magic header".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let hog = HogConfig {
        cell_size: r.count(1 << 10, "cell size")?,
        clamp: r.f64()?,
        epsilon: r.f64()?,
    };
    let pyramid = PyramidConfig {
        levels: r.count(1 << 10, "level")?,
        scale_step: r.f64()?,
    };
    let canonical_height = r.count(1 << 16, "canonical height")?;
    let n_classes = r.count(1 << 12, "class")?;
    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let label = r.label()?;
        let n_comp = r.count(1 << 8, "component")?;
        let mut components = Vec::with_capacity(n_comp);
        for _ in 0..n_comp {
            let bias = r.f64()?;
            let root = r.u32()? as usize;
            let n_parts = r.count(1 << 8, "part")?;
            let mut parts = Vec::with_capacity(n_parts);
            for _ in 0..n_parts {
                let w_cells = r.count(1 << 10, "filter width")?;
                let h_cells = r.count(1 << 10, "filter height")?;
                let anchor = (r.i32()?, r.i32()?);
                let n = w_cells * h_cells * HOG_DIM;
                let weights = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                parts.push(PartFilter {
                    w_cells,
                    h_cells,
                    weights,
                    anchor,
                });
            }
            let n_edges = r.count(1 << 8, "edge")?;
            let mut edges = Vec::with_capacity(n_edges);
            for _ in 0..n_edges {
                let parent = r.u32()? as usize;
                let child = r.u32()? as usize;
                let deformation = DeformationParams::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                edges.push(TreeEdge {
                    parent,
                    child,
                    deformation,
                });
            }
            components.push(CharacterTreeModel {
                label,
                parts,
                edges,
                root,
                bias,
            });
        }
        classes.push(ClassMixture { label, components });
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let set = CharacterMixtureSet {
        alphabet: classes.iter().map(|c| c.label).collect(),
        classes,
        hog,
        pyramid,
        canonical_height,
    };
    set.validate()
        .map_err(|e| Error::ModelFormat(format!("invalid model: {e}")))?;
    Ok(set)
}

pub fn save(set: &CharacterMixtureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(set)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<CharacterMixtureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Pretty-printed JSON with the same content as the binary container.
pub fn to_json(set: &CharacterMixtureSet) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Export<'a> {
        format: &'static str,
        version: u32,
        #[serde(flatten)]
        set: &'a CharacterMixtureSet,
    }
    Ok(serde_json::to_string_pretty(&Export {
        format: "platedpm-model",
        version: FORMAT_VERSION,
        set,
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> CharacterMixtureSet {
        let classes = ['0', 'A']
            .iter()
            .map(|&c| {
                let mut m = CharacterTreeModel::three_part(c, (2, 3), (2, 2));
                let params: Vec<f64> = (0..m.param_len()).map(|i| (i as f64).sin()).collect();
                m.set_params(&params);
                for e in &mut m.edges {
                    e.deformation.project();
                }
                ClassMixture {
                    label: c,
                    components: vec![m],
                }
            })
            .collect();
        CharacterMixtureSet {
            alphabet: vec!['0', 'A'],
            classes,
            hog: HogConfig::default(),
            pyramid: PyramidConfig::default(),
            canonical_height: 64,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let set = sample_set();
        let bytes = to_bytes(&set);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&sample_set());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::ModelFormat(_))));
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }

    #[test]
    fn json_export_names_format() {
        let json = to_json(&sample_set()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["format"], "platedpm-model");
        assert_eq!(v["classes"].as_array().unwrap().len(), 2);
    }
}
