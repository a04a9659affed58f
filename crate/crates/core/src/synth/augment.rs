//! Seeded photometric and geometric degradation of rendered plates.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, ImageBuffer};

/// Upper bounds of each degradation; a zero disables it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Relative brightness jitter, e.g. 0.2 for ±20%.
    pub brightness: f64,
    pub contrast: f64,
    pub rotation_deg: f64,
    /// Corner jitter as a fraction of the image width.
    pub perspective: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            noise_sigma: 0.05,
            brightness: 0.2,
            contrast: 0.2,
            rotation_deg: 3.0,
            perspective: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            rotation_deg: 0.0,
            perspective: 0.0,
        }
    }
}

/// Concrete degradation drawn for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Additive offset.
    pub brightness: f64,
    /// Multiplicative gain around mid-grey.
    pub contrast: f64,
    pub rotation_deg: f64,
    /// Per-corner displacement in pixels (TL, TR, BR, BL).
    pub corners: [(f64, f64); 4],
}

fn symmetric(rng: &mut impl Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

impl AugmentParams {
    pub fn sample(config: &AugmentConfig, width: usize, rng: &mut impl Rng) -> Self {
        let blur_sigma = if config.blur_sigma > 0.0 {
            rng.random_range(0.0..=config.blur_sigma)
        } else {
            0.0
        };
        let noise_sigma = if config.noise_sigma > 0.0 {
            rng.random_range(0.0..=config.noise_sigma)
        } else {
            0.0
        };
        let brightness = symmetric(rng, config.brightness);
        let contrast = 1.0 + symmetric(rng, config.contrast);
        let rotation_deg = symmetric(rng, config.rotation_deg);
        let p = config.perspective * width as f64;
        let corners = std::array::from_fn(|_| (symmetric(rng, p), symmetric(rng, p)));
        Self {
            blur_sigma,
            noise_sigma,
            brightness,
            contrast,
            rotation_deg,
            corners,
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.corners.iter().all(|&(x, y)| x == 0.0 && y == 0.0)
    }
}

/// Projective map from source to augmented pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    forward: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl Warp {
    pub fn identity() -> Self {
        Self {
            forward: Matrix3::identity(),
            inverse: Matrix3::identity(),
        }
    }

    /// Homography taking each `src[i]` to `dst[i]`.
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Parameter("degenerate warp correspondences".into()))?;
        let forward = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
        let inverse = forward
            .try_inverse()
            .ok_or_else(|| Error::Parameter("singular warp".into()))?;
        Ok(Self { forward, inverse })
    }

    /// Rotation about the image centre followed by corner jitter.
    pub fn from_params(params: &AugmentParams, width: usize, height: usize) -> Result<Self> {
        if params.is_rigid_identity() {
            return Ok(Self::identity());
        }
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = (0.5 * w, 0.5 * h);
        let (s, c) = params.rotation_deg.to_radians().sin_cos();
        let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let dst = std::array::from_fn(|i| {
            let (x, y) = (src[i].0 - cx, src[i].1 - cy);
            let (jx, jy) = params.corners[i];
            (cx + c * x - s * y + jx, cy + s * x + c * y + jy)
        });
        Self::from_correspondences(&src, &dst)
    }

    fn project(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
        let p = m * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        Self::project(&self.forward, x, y)
    }

    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        Self::project(&self.inverse, x, y)
    }

    /// Axis-aligned hull of the warped box corners.
    pub fn apply_box(&self, b: &BoundingBox) -> BoundingBox {
        let pts = [
            self.apply(b.x, b.y),
            self.apply(b.right(), b.y),
            self.apply(b.right(), b.bottom()),
            self.apply(b.x, b.bottom()),
        ];
        let x0 = pts.iter().map(|p| p.0).fold(f64::MAX, f64::min);
        let y0 = pts.iter().map(|p| p.1).fold(f64::MAX, f64::min);
        let x1 = pts.iter().map(|p| p.0).fold(f64::MIN, f64::max);
        let y1 = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

fn warp_image(img: &ImageBuffer, warp: &Warp) -> Result<ImageBuffer> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let px = img.pixels();
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = warp.apply_inverse(x as f64 + 0.5, y as f64 + 0.5);
            let fx = (sx - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
            for c in 0..ch {
                let at = |xx: usize, yy: usize| px[(yy * w + xx) * ch + c];
                let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * tx;
                let bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * tx;
                out.push((top + (bot - top) * ty).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(w, h, ch, out)
}

fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f64;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (xx, yy) = if horizontal {
                            ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                        };
                        acc += kv * src[(yy * w + xx) * ch + c] as f64;
                    }
                    dst[(y * w + x) * ch + c] = (acc as f32).clamp(0.0, 1.0);
                }
            }
        }
        dst
    };
    let tmp = pass(img.pixels(), true);
    ImageBuffer::new(w, h, ch, pass(&tmp, false))
}

/// Applies `params` and returns the degraded image plus the geometric warp
/// that was used, so annotations can follow the pixels.
pub fn augment_with(
    img: &ImageBuffer,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer, Warp)> {
    let warp = Warp::from_params(params, img.width(), img.height())?;
    let mut out = if warp == Warp::identity() {
        img.clone()
    } else {
        warp_image(img, &warp)?
    };
    if params.blur_sigma > 0.0 {
        out = gaussian_blur(&out, params.blur_sigma)?;
    }
    let photometric = params.brightness != 0.0 || params.contrast != 1.0;
    if photometric || params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma.max(0.0))
            .map_err(|e| Error::Parameter(e.to_string()))?;
        let ch = out.channels();
        let (w, h) = (out.width(), out.height());
        let mut px = out.into_pixels();
        for pixel in px.chunks_exact_mut(ch) {
            // one draw per pixel keeps cloned channels identical
            let n = if params.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            for v in pixel {
                let mut x = *v as f64;
                if photometric {
                    x = (x - 0.5) * params.contrast + 0.5 + params.brightness;
                }
                *v = (x + n).clamp(0.0, 1.0) as f32;
            }
        }
        out = ImageBuffer::new(w, h, ch, px)?;
    }
    Ok((out, warp))
}

/// Degrades `img` with parameters drawn from the default ranges.
pub fn augment(img: &ImageBuffer, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let params = AugmentParams::sample(&AugmentConfig::default(), img.width(), rng);
    Ok(augment_with(img, &params, rng)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> ImageBuffer {
        ImageBuffer::from_fn(40, 20, 3, |x, y, c| {
            ((x * 7 + y * 3 + c * 11) % 17) as f32 / 16.0
        })
        .unwrap()
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AugmentParams::sample(&AugmentConfig::none(), img.width(), &mut rng);
        let (out, warp) = augment_with(&img, &p, &mut rng).unwrap();
        assert_eq!(out, img);
        assert_eq!(warp, Warp::identity());
    }

    #[test]
    fn seeded_output_is_reproducible_and_clamped() {
        let img = test_image();
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn homography_maps_correspondences() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 5.0), (0.0, 5.0)];
        let dst = [(0.3, -0.2), (10.1, 0.4), (9.6, 5.2), (-0.1, 4.9)];
        let warp = Warp::from_correspondences(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = warp.apply(s.0, s.1);
            assert!((u - d.0).abs() < 1e-9 && (v - d.1).abs() < 1e-9);
            let (x, y) = warp.apply_inverse(d.0, d.1);
            assert!((x - s.0).abs() < 1e-9 && (y - s.1).abs() < 1e-9);
        }
    }

    #[test]
    fn grey_images_stay_channel_cloned() {
        let grey = ImageBuffer::from_fn(30, 16, 3, |x, y, _| ((x + y) % 5) as f32 / 4.0).unwrap();
        let out = augment(&grey, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(out
            .pixels()
            .chunks_exact(3)
            .all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}
