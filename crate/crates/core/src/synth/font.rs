//! Stroke font loaded from `assets/plate_font.txt`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../assets/plate_font.txt");

/// Units spanned from cap line to baseline.
pub const EM_HEIGHT: f64 = 10.0;

pub type Segment = ((f64, f64), (f64, f64));

#[derive(Debug, Clone, PartialEq)]
pub struct Glyph {
    pub advance: f64,
    pub segments: Vec<Segment>,
}

impl Glyph {
    /// Ink bounds `(x0, y0, x1, y1)` in font units for a given stroke width.
    pub fn ink_bounds(&self, stroke: f64) -> (f64, f64, f64, f64) {
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &((x0, y0), (x1, y1)) in &self.segments {
            b.0 = b.0.min(x0).min(x1);
            b.1 = b.1.min(y0).min(y1);
            b.2 = b.2.max(x0).max(x1);
            b.3 = b.3.max(y0).max(y1);
        }
        let h = 0.5 * stroke;
        (b.0 - h, b.1 - h, b.2 + h, b.3 + h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrokeFont {
    pub name: String,
    /// Stroke width in font units.
    pub stroke: f64,
    glyphs: BTreeMap<char, Glyph>,
}

impl StrokeFont {
    /// The sans-serif plate font shipped with the crate.
    pub fn bundled() -> &'static StrokeFont {
        static FONT: OnceLock<StrokeFont> = OnceLock::new();
        FONT.get_or_init(|| StrokeFont::parse("plate-sans", BUNDLED).expect("bundled font parses"))
    }

    pub fn glyph(&self, c: char) -> Result<&Glyph> {
        self.glyphs.get(&c).ok_or(Error::MissingGlyph(c))
    }

    pub fn has_glyph(&self, c: char) -> bool {
        self.glyphs.contains_key(&c)
    }

    pub fn parse(name: &str, text: &str) -> Result<StrokeFont> {
        let mut stroke = None;
        let mut glyphs = BTreeMap::new();
        let mut current: Option<(char, Glyph)> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Font(format!("line {}: {msg}", lineno + 1));
            let mut tok = line.split_whitespace();
            let cmd = tok.next().unwrap();
            let rest: Vec<&str> = tok.collect();
            let nums = || -> Result<Vec<f64>> {
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err("bad number")))
                    .collect()
            };
            match cmd {
                "stroke" => {
                    stroke = Some(*nums()?.first().ok_or_else(|| err("missing width"))?);
                }
                "glyph" => {
                    if let Some((c, g)) = current.take() {
                        glyphs.insert(c, g);
                    }
                    let mut chars = rest.first().ok_or_else(|| err("missing char"))?.chars();
                    let c = chars.next().ok_or_else(|| err("missing char"))?;
                    let advance = rest
                        .get(1)
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| err("missing advance"))?;
                    current = Some((
                        c,
                        Glyph {
                            advance,
                            segments: Vec::new(),
                        },
                    ));
                }
                "L" => {
                    let v = nums()?;
                    if v.len() < 4 || v.len() % 2 != 0 {
                        return Err(err("polyline needs at least two points"));
                    }
                    let g = &mut current
                        .as_mut()
                        .ok_or_else(|| err("stroke outside glyph"))?
                        .1;
                    for w in v.chunks_exact(2).collect::<Vec<_>>().windows(2) {
                        g.segments.push(((w[0][0], w[0][1]), (w[1][0], w[1][1])));
                    }
                }
                "A" => {
                    let v = nums()?;
                    if v.len() != 6 {
                        return Err(err("arc needs cx cy rx ry a0 a1"));
                    }
                    let g = &mut current
                        .as_mut()
                        .ok_or_else(|| err("stroke outside glyph"))?
                        .1;
                    let (cx, cy, rx, ry, a0, a1) = (v[0], v[1], v[2], v[3], v[4], v[5]);
                    let steps = (((a1 - a0).abs() / 7.5).ceil() as usize).max(1);
                    let pt = |k: usize| {
                        let a = (a0 + (a1 - a0) * k as f64 / steps as f64).to_radians();
                        (cx + rx * a.cos(), cy + ry * a.sin())
                    };
                    for k in 0..steps {
                        g.segments.push((pt(k), pt(k + 1)));
                    }
                }
                other => return Err(err(&format!("unknown command '{other}'"))),
            }
        }
        if let Some((c, g)) = current.take() {
            glyphs.insert(c, g);
        }
        Ok(StrokeFont {
            name: name.to_string(),
            stroke: stroke.ok_or_else(|| Error::Font("missing stroke width".into()))?,
            glyphs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_font_covers_alphabet() {
        let font = StrokeFont::bundled();
        for c in crate::ALPHABET.chars() {
            let g = font.glyph(c).unwrap();
            assert!(!g.segments.is_empty(), "{c}");
            let (x0, y0, x1, y1) = g.ink_bounds(font.stroke);
            assert!(x0 >= -0.01 && x1 <= g.advance + 0.01, "{c}: {x0}..{x1}");
            assert!(y0 >= -0.01 && y1 <= EM_HEIGHT + 0.01, "{c}: {y0}..{y1}");
        }
        assert!(matches!(font.glyph('Q'), Err(Error::MissingGlyph('Q'))));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = StrokeFont::parse("t", "stroke 1\nglyph A 6\nL 0 0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
