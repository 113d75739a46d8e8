//! Label-preserving training augmentation.
//!
//! Flips and quarter turns leave every attribute unchanged (a C-shaped body
//! stays C-shaped), translations keep every box inside the frame, and the
//! photometric jitter scales brightness and contrast uniformly across channels
//! so species hue is preserved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::ImageData;
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::schema::ImageTargets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Random horizontal/vertical flips, plus quarter turns on square images.
    pub dihedral: bool,
    /// Largest translation as a fraction of the image side.
    pub max_shift: f64,
    /// Brightness and contrast jitter amplitude.
    pub photometric: f64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.max_shift) {
            return Err(Error::Config(format!(
                "train.augment.max_shift {} outside [0, 0.5]",
                self.max_shift
            )));
        }
        if !(0.0..=0.5).contains(&self.photometric) {
            return Err(Error::Config(format!(
                "train.augment.photometric {} outside [0, 0.5]",
                self.photometric
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.dihedral && self.max_shift == 0.0 && self.photometric == 0.0
    }
}

/// One element of the symmetry group of the square: optional transpose
/// followed by optional mirrors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Dihedral {
    fn apply(self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = if self.transpose { (v, u) } else { (u, v) };
        (
            if self.flip_x { 1.0 - u } else { u },
            if self.flip_y { 1.0 - v } else { v },
        )
    }
}

/// Applies `d` to an image and its boxes.
pub fn apply_dihedral(img: &ImageData, t: &ImageTargets, d: Dihedral) -> Result<(ImageData, ImageTargets)> {
    if d.transpose && img.width != img.height {
        return Err(Error::Contract(format!(
            "quarter turns need a square image, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut pixels = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut nx, mut ny) = if d.transpose { (y, x) } else { (x, y) };
            if d.flip_x {
                nx = w - 1 - nx;
            }
            if d.flip_y {
                ny = h - 1 - ny;
            }
            let (src, dst) = ((y * w + x) * 3, (ny * w + nx) * 3);
            pixels[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
        }
    }
    let mut targets = t.clone();
    for b in &mut targets.boxes {
        let (u0, v0) = d.apply(b.x_min, b.y_min);
        let (u1, v1) = d.apply(b.x_max, b.y_max);
        *b = BoxXyxy::new(u0.min(u1), v0.min(v1), u0.max(u1), v0.max(v1));
    }
    Ok((ImageData { pixels, ..img.clone() }, targets))
}

/// Shifts content by whole pixels; vacated pixels take the mean border colour.
pub fn translate(img: &ImageData, t: &ImageTargets, dx: i64, dy: i64) -> (ImageData, ImageTargets) {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut fill = [0.0f32; 3];
    let mut n = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                let i = ((y * w + x) * 3) as usize;
                for c in 0..3 {
                    fill[c] += img.pixels[i + c];
                }
                n += 1.0;
            }
        }
    }
    fill.iter_mut().for_each(|v| *v /= n);
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if (0..w).contains(&sx) && (0..h).contains(&sy) {
                let i = ((sy * w + sx) * 3) as usize;
                pixels.extend_from_slice(&img.pixels[i..i + 3]);
            } else {
                pixels.extend_from_slice(&fill);
            }
        }
    }
    let mut targets = t.clone();
    let (ox, oy) = (dx as f64 / w as f64, dy as f64 / h as f64);
    for b in &mut targets.boxes {
        *b = BoxXyxy::new(b.x_min + ox, b.y_min + oy, b.x_max + ox, b.y_max + oy);
    }
    (ImageData { pixels, ..img.clone() }, targets)
}

/// `v' = clamp(mean + contrast·(v − mean) + brightness)` over all channels.
pub fn photometric(img: &ImageData, brightness: f32, contrast: f32) -> ImageData {
    let mean = img.pixels.iter().sum::<f32>() / img.pixels.len().max(1) as f32;
    let pixels = img
        .pixels
        .iter()
        .map(|v| (mean + contrast * (v - mean) + brightness).clamp(0.0, 1.0))
        .collect();
    ImageData { pixels, ..img.clone() }
}

/// Pixel shift range along one axis that keeps `[lo, hi]` (normalized) in frame.
fn shift_range(lo: f64, hi: f64, side: usize, max_shift: f64) -> (i64, i64) {
    let limit = (max_shift * side as f64).floor() as i64;
    let down = (-(lo * side as f64).floor() as i64).max(-limit);
    let up = (((1.0 - hi) * side as f64).floor() as i64).min(limit);
    if down > up {
        (0, 0)
    } else {
        (down, up)
    }
}

/// Draws and applies a random augmentation.
pub fn augment<R: Rng>(
    cfg: &AugmentConfig,
    img: &ImageData,
    t: &ImageTargets,
    rng: &mut R,
) -> Result<(ImageData, ImageTargets)> {
    let (mut img, mut t) = (img.clone(), t.clone());
    if cfg.dihedral {
        let d = Dihedral {
            transpose: img.width == img.height && rng.random_bool(0.5),
            flip_x: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
        };
        (img, t) = apply_dihedral(&img, &t, d)?;
    }
    if cfg.max_shift > 0.0 {
        let fold = |f: fn(&BoxXyxy) -> (f64, f64)| {
            t.boxes.iter().map(f).fold((1.0f64, 0.0f64), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)))
        };
        let (x0, x1) = fold(|b| (b.x_min, b.x_max));
        let (y0, y1) = fold(|b| (b.y_min, b.y_max));
        let (xr, yr) = if t.boxes.is_empty() {
            let lx = (cfg.max_shift * img.width as f64) as i64;
            let ly = (cfg.max_shift * img.height as f64) as i64;
            ((-lx, lx), (-ly, ly))
        } else {
            (
                shift_range(x0, x1, img.width, cfg.max_shift),
                shift_range(y0, y1, img.height, cfg.max_shift),
            )
        };
        let (dx, dy) = (rng.random_range(xr.0..=xr.1), rng.random_range(yr.0..=yr.1));
        if (dx, dy) != (0, 0) {
            (img, t) = translate(&img, &t, dx, dy);
        }
    }
    if cfg.photometric > 0.0 {
        let j = cfg.photometric;
        let brightness = rng.random_range(-j..=j) as f32 * 0.5;
        let contrast = 1.0 + rng.random_range(-j..=j) as f32;
        img = photometric(&img, brightness, contrast);
    }
    Ok((img, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A dark 3×2 block on a white 8×6 image, with its tight box.
    fn block_image(w: usize, h: usize) -> (ImageData, ImageTargets) {
        let mut pixels = vec![1.0f32; w * h * 3];
        for y in 2..4 {
            for x in 1..4 {
                let i = (y * w + x) * 3;
                pixels[i..i + 3].copy_from_slice(&[0.0, 0.0, 0.0]);
            }
        }
        let img = ImageData {
            id: 1,
            file_name: "x".into(),
            width: w,
            height: h,
            pixels,
        };
        let t = ImageTargets {
            boxes: vec![BoxXyxy::new(1.0 / w as f64, 2.0 / h as f64, 4.0 / w as f64, 4.0 / h as f64)],
            species: vec![0],
            attributes: vec![[0; 5]],
        };
        (img, t)
    }

    /// Tight normalized box of the dark pixels.
    fn dark_box(img: &ImageData) -> BoxXyxy {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                if img.pixels[(y * img.width + x) * 3] < 0.5 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        let (w, h) = (img.width as f64, img.height as f64);
        BoxXyxy::new(x0 as f64 / w, y0 as f64 / h, x1 as f64 / w, y1 as f64 / h)
    }

    fn close(a: &BoxXyxy, b: &BoxXyxy) -> bool {
        a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn boxes_follow_pixels_under_every_symmetry() {
        let (img, t) = block_image(8, 8);
        for k in 0..8 {
            let d = Dihedral {
                transpose: k & 1 == 1,
                flip_x: k & 2 == 2,
                flip_y: k & 4 == 4,
            };
            let (a, at) = apply_dihedral(&img, &t, d).unwrap();
            assert!(close(&dark_box(&a), &at.boxes[0]), "{d:?}");
        }
        let (img, t) = block_image(8, 6);
        let (a, at) = apply_dihedral(&img, &t, Dihedral { flip_y: true, ..Default::default() }).unwrap();
        assert!(close(&dark_box(&a), &at.boxes[0]));
        assert!(apply_dihedral(&img, &t, Dihedral { transpose: true, ..Default::default() }).is_err());
    }

    #[test]
    fn translation_moves_box_with_content() {
        let (img, t) = block_image(8, 6);
        let (a, at) = translate(&img, &t, 3, -2);
        assert!(close(&dark_box(&a), &at.boxes[0]));
    }

    #[test]
    fn random_augmentation_keeps_boxes_in_frame_and_tight() {
        let (img, t) = block_image(8, 8);
        let cfg = AugmentConfig {
            dihedral: true,
            max_shift: 0.5,
            photometric: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (a, at) = augment(&cfg, &img, &t, &mut rng).unwrap();
            let b = at.boxes[0];
            assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 1.0 && b.y_max <= 1.0);
            assert!(close(&dark_box(&a), &b));
            assert_eq!(at.attributes, t.attributes);
        }
    }

    #[test]
    fn photometric_preserves_channel_order() {
        let img = ImageData {
            id: 0,
            file_name: String::new(),
            width: 1,
            height: 2,
            pixels: vec![0.2, 0.5, 0.7, 0.9, 0.1, 0.4],
        };
        let out = photometric(&img, 0.05, 1.2);
        for px in out.pixels.chunks(3).zip(img.pixels.chunks(3)) {
            let rank = |p: &[f32]| {
                let mut i = [0, 1, 2];
                i.sort_by(|a, b| p[*a].total_cmp(&p[*b]));
                i
            };
            assert_eq!(rank(px.0), rank(px.1));
        }
    }
}
