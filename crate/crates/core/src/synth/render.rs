use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{nir_to_three_channel, BoundingBox, ImageBuffer};

use super::font::{StrokeFont, EM_HEIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spectrum {
    Rgb,
    Nir,
}

/// Rendering parameters for one plate. Lengths are pixels; colours are
/// `[0, 1]` RGB (NIR uses the first component only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub spectrum: Spectrum,
    pub font: String,
    pub char_height: f64,
    pub char_gap: f64,
    /// Extra space inserted where digits meet letters.
    pub group_gap: f64,
    pub margin_x: f64,
    pub margin_y: f64,
    pub background: [f32; 3],
    pub foreground: [f32; 3],
    /// Width of the plate frame line; 0 draws none.
    pub border: f64,
}

impl RenderStyle {
    /// Plain style used by tests and examples.
    pub fn plain(spectrum: Spectrum, char_height: f64) -> Self {
        Self {
            spectrum,
            font: StrokeFont::bundled().name.clone(),
            char_height,
            char_gap: 0.2 * char_height,
            group_gap: 0.4 * char_height,
            margin_x: 0.4 * char_height,
            margin_y: 0.25 * char_height,
            background: [0.92, 0.92, 0.92],
            foreground: [0.08, 0.08, 0.08],
            border: 0.0,
        }
    }

    /// Random style in the ranges used for dataset generation.
    pub fn sample(spectrum: Spectrum, rng: &mut impl Rng) -> Self {
        let h = rng.random_range(24.0..44.0f64).round();
        let (background, foreground) = match spectrum {
            Spectrum::Nir => {
                let bg = rng.random_range(0.6..0.95f32);
                let fg = rng.random_range(0.02..0.3f32);
                ([bg; 3], [fg; 3])
            }
            Spectrum::Rgb => {
                let base = rng.random_range(0.75..0.97f32);
                // white or pale-yellow stock with a slight tint
                let yellow = rng.random_bool(0.3);
                let bg = [
                    base,
                    base * rng.random_range(0.95..1.0f32),
                    if yellow {
                        base * rng.random_range(0.55..0.75f32)
                    } else {
                        base * rng.random_range(0.93..1.0f32)
                    },
                ];
                let fg_base = rng.random_range(0.02..0.25f32);
                let fg = [
                    fg_base,
                    fg_base * rng.random_range(0.8..1.2f32),
                    fg_base * rng.random_range(0.8..1.3f32),
                ];
                (bg, fg)
            }
        };
        Self {
            spectrum,
            font: StrokeFont::bundled().name.clone(),
            char_height: h,
            char_gap: (h * rng.random_range(0.12..0.3)).max(2.0),
            group_gap: h * rng.random_range(0.25..0.6),
            margin_x: h * rng.random_range(0.3..0.6),
            margin_y: h * rng.random_range(0.18..0.32),
            background,
            foreground: foreground.map(|v| v.clamp(0.0, 1.0)),
            border: if rng.random_bool(0.5) {
                (0.06 * h).round().max(1.0)
            } else {
                0.0
            },
        }
    }
}

fn segment_distance(px: f64, py: f64, ((x0, y0), (x1, y1)): ((f64, f64), (f64, f64))) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx - px, y0 + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// Rasterises `text` and returns the plate image with one tight ink box per
/// character, left to right. NIR plates come back channel-cloned.
pub fn render_plate(
    text: &str,
    style: &RenderStyle,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer, Vec<(char, BoundingBox)>)> {
    let font = StrokeFont::bundled();
    if style.font != font.name {
        return Err(Error::Font(format!("unknown font '{}'", style.font)));
    }
    if style.char_height < 16.0 {
        return Err(Error::Parameter(format!(
            "character height {} below 16 px",
            style.char_height
        )));
    }
    if text.is_empty() {
        return Err(Error::Parameter("empty plate text".into()));
    }
    let glyphs = text
        .chars()
        .map(|c| font.glyph(c).map(|g| (c, g)))
        .collect::<Result<Vec<_>>>()?;

    let scale = style.char_height / EM_HEIGHT;
    let half_stroke = 0.5 * font.stroke * scale;
    // layout: glyph origins in pixels
    let mut origins = Vec::with_capacity(glyphs.len());
    let mut x = style.margin_x;
    let mut prev_digit: Option<bool> = None;
    for &(c, g) in &glyphs {
        if let Some(pd) = prev_digit {
            x += style.char_gap;
            if pd != c.is_ascii_digit() {
                x += style.group_gap;
            }
        }
        let jx = rng.random_range(-0.5..=0.5);
        let jy = rng.random_range(-0.5..=0.5);
        origins.push((x + jx, style.margin_y + jy));
        x += g.advance * scale;
        prev_digit = Some(c.is_ascii_digit());
    }
    let width = (x + style.margin_x).ceil() as usize;
    let height = (style.char_height + 2.0 * style.margin_y).ceil() as usize;

    let mut coverage = vec![0.0f32; width * height];
    let mut boxes = Vec::with_capacity(glyphs.len());
    for (&(c, g), &(ox, oy)) in glyphs.iter().zip(&origins) {
        let segs: Vec<_> = g
            .segments
            .iter()
            .map(|&((x0, y0), (x1, y1))| {
                (
                    (ox + x0 * scale, oy + y0 * scale),
                    (ox + x1 * scale, oy + y1 * scale),
                )
            })
            .collect();
        let (bx0, by0, bx1, by1) = g.ink_bounds(font.stroke);
        let ink = BoundingBox::new(
            ox + bx0 * scale,
            oy + by0 * scale,
            (bx1 - bx0) * scale,
            (by1 - by0) * scale,
        )
        .clamp_to(width, height);
        let px0 = (ink.x - 1.0).floor().max(0.0) as usize;
        let py0 = (ink.y - 1.0).floor().max(0.0) as usize;
        let px1 = ((ink.right() + 1.0).ceil() as usize).min(width);
        let py1 = ((ink.bottom() + 1.0).ceil() as usize).min(height);
        for py in py0..py1 {
            for px in px0..px1 {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let d = segs
                    .iter()
                    .map(|&s| segment_distance(cx, cy, s))
                    .fold(f64::MAX, f64::min);
                let cov = (half_stroke - d + 0.5).clamp(0.0, 1.0) as f32;
                let slot = &mut coverage[py * width + px];
                *slot = slot.max(cov);
            }
        }
        boxes.push((c, ink));
    }
    if style.border > 0.0 {
        let b = style.border;
        for py in 0..height {
            for px in 0..width {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                if fx < b || fy < b || fx > width as f64 - b || fy > height as f64 - b {
                    coverage[py * width + px] = 1.0;
                }
            }
        }
    }

    let compose = |ch: usize, cov: f32| {
        let (bg, fg) = (style.background[ch], style.foreground[ch]);
        (bg + (fg - bg) * cov).clamp(0.0, 1.0)
    };
    let img = match style.spectrum {
        Spectrum::Nir => {
            let px = coverage.iter().map(|&c| compose(0, c)).collect();
            nir_to_three_channel(&ImageBuffer::new(width, height, 1, px)?)?
        }
        Spectrum::Rgb => {
            let px = coverage
                .iter()
                .flat_map(|&c| [compose(0, c), compose(1, c), compose(2, c)])
                .collect();
            ImageBuffer::new(width, height, 3, px)?
        }
    };
    Ok((img, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn renders_reference_plate_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let style = RenderStyle::plain(Spectrum::Rgb, 32.0);
        let (img, boxes) = render_plate("18LH344", &style, &mut rng).unwrap();
        let labels: String = boxes.iter().map(|b| b.0).collect();
        assert_eq!(labels, "18LH344");
        for w in boxes.windows(2) {
            assert!(w[0].1.right() < w[1].1.x);
        }
        for (i, a) in boxes.iter().enumerate() {
            assert!(a.1.within(img.width(), img.height()));
            for b in &boxes[i + 1..] {
                assert_eq!(a.1.intersection_area(&b.1), 0.0);
            }
        }
    }

    #[test]
    fn nir_render_is_channel_cloned() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let style = RenderStyle::sample(Spectrum::Nir, &mut rng);
        let (img, _) = render_plate("01DY500", &style, &mut rng).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img
            .pixels()
            .chunks_exact(3)
            .all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn missing_glyph_and_small_font_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let style = RenderStyle::plain(Spectrum::Rgb, 32.0);
        assert!(matches!(
            render_plate("18QH344", &style, &mut rng),
            Err(Error::MissingGlyph('Q'))
        ));
        let tiny = RenderStyle::plain(Spectrum::Rgb, 12.0);
        assert!(render_plate("18LH344", &tiny, &mut rng).is_err());
    }
}
