//! Rasterization of parasite draw plans.
//!
//! Bodies are built by stamping disks of radius `r(t)` along a spine curve. All
//! coverage is binary (pixel centre inside a stamp) so instance masks, and the
//! boxes derived from them, are exact.

use std::f64::consts::PI;

/// A disk stamped into a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamp {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// HWC float raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend(rgb.iter().map(|&c| c as f32));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Alpha-blends `rgb` over every pixel set in `mask`.
    pub fn blend(&mut self, mask: &Mask, rgb: [f64; 3], alpha: f64) {
        for (p, &on) in mask.bits.iter().enumerate() {
            if on {
                for c in 0..3 {
                    let v = &mut self.data[p * 3 + c];
                    *v = ((1.0 - alpha) * *v as f64 + alpha * rgb[c]) as f32;
                }
            }
        }
    }

    /// Quantized 8-bit RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn stamp(&mut self, s: &Stamp) {
        let x0 = ((s.x - s.r).floor().max(0.0)) as usize;
        let y0 = ((s.y - s.r).floor().max(0.0)) as usize;
        let x1 = ((s.x + s.r).ceil().min(self.width as f64 - 1.0)).max(-1.0);
        let y1 = ((s.y + s.r).ceil().min(self.height as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            return;
        }
        let r2 = s.r * s.r;
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let dx = x as f64 + 0.5 - s.x;
                let dy = y as f64 + 0.5 - s.y;
                if dx * dx + dy * dy <= r2 {
                    self.bits[y * self.width + x] = true;
                }
            }
        }
    }

    pub fn union(&mut self, other: &Mask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight pixel bounds `[x_min, y_min, x_max, y_max)` of the set pixels.
    pub fn bounds(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => [x, y, x + 1, y + 1],
                        Some([a, c, d, e]) => [a.min(x), c.min(y), d.max(x + 1), e.max(y + 1)],
                    });
                }
            }
        }
        b
    }
}

/// Rasterizes a list of stamps.
pub fn mask_from_stamps(width: usize, height: usize, stamps: &[Stamp]) -> Mask {
    let mut m = Mask::new(width, height);
    for s in stamps {
        m.stamp(s);
    }
    m
}

/// Spine in local coordinates: arc-length samples of a curve of length `length`
/// with the given bend, centred on the origin and aligned with +x.
///
/// `turn` is the total turning angle of a circular arc (radians); `wave` is the
/// amplitude of a one-period sine bend, as a fraction of `length`.
pub fn spine(length: f64, turn: f64, wave: f64, samples: usize) -> Vec<[f64; 2]> {
    let n = samples.max(2);
    let mut pts: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let s = t * length;
            let (mut x, mut y) = if turn.abs() < 1e-6 {
                (s, 0.0)
            } else {
                // symmetric about the midpoint so both ends sit level
                let k = turn / length;
                let u = s - 0.5 * length;
                ((k * u).sin() / k, (1.0 - (k * u).cos()) / k)
            };
            if wave != 0.0 {
                y += wave * length * (2.0 * PI * t).sin();
                // keep sine-bent spines from stretching
                x = s;
            }
            [x, y]
        })
        .collect();
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    for p in &mut pts {
        p[0] -= cx;
        p[1] -= cy;
    }
    pts
}

/// Unit tangent and left normal at sample `i`.
pub fn frame(pts: &[[f64; 2]], i: usize) -> ([f64; 2], [f64; 2]) {
    let a = pts[i.saturating_sub(1)];
    let b = pts[(i + 1).min(pts.len() - 1)];
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt().max(1e-9);
    let t = [dx / len, dy / len];
    (t, [-t[1], t[0]])
}

/// Rotates by `angle` then translates by `origin`.
pub fn place(p: [f64; 2], angle: f64, origin: [f64; 2]) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [
        origin[0] + c * p[0] - s * p[1],
        origin[1] + s * p[0] + c * p[1],
    ]
}
