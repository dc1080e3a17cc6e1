//! Procedural high-resolution content: checkerboards, sinusoidal gratings,
//! smooth blobs and piecewise-constant edge charts.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::image::ImagePatch;
use crate::math;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HalfPlane {
    /// Unit normal.
    pub normal: [f64; 2],
    /// Offset in pixels along the normal.
    pub offset: f64,
    /// Color added where `normal . p > offset`.
    pub delta: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TextureKind {
    Checkerboard,
    Grating,
    Blobs,
    EdgeChart,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] =
        [TextureKind::Checkerboard, TextureKind::Grating, TextureKind::Blobs, TextureKind::EdgeChart];
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Texture {
    Checkerboard { cell: usize, offset: [usize; 2], colors: [Rgb; 2] },
    Grating { period: f64, angle: f64, phase: f64, colors: [Rgb; 2] },
    Blobs { background: Rgb, blobs: Vec<Blob> },
    EdgeChart { base: Rgb, edges: Vec<HalfPlane> },
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    let base = rng.random_range(0.15..0.85);
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = (base + rng.random_range(-0.15..0.15_f64)).clamp(0.05, 0.95);
    }
    c
}

fn contrasting_pair<R: Rng + ?Sized>(rng: &mut R) -> [Rgb; 2] {
    loop {
        let a = color(rng);
        let b = color(rng);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| math::abs(x - y)).sum();
        if diff > 0.45 {
            return [a, b];
        }
    }
}

impl Texture {
    pub fn kind(&self) -> TextureKind {
        match self {
            Texture::Checkerboard { .. } => TextureKind::Checkerboard,
            Texture::Grating { .. } => TextureKind::Grating,
            Texture::Blobs { .. } => TextureKind::Blobs,
            Texture::EdgeChart { .. } => TextureKind::EdgeChart,
        }
    }

    /// Random texture of a uniformly chosen kind, for a `size x size` canvas.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let kind = TextureKind::ALL[rng.random_range(0..TextureKind::ALL.len())];
        Self::sample_kind(rng, kind, size)
    }

    pub fn sample_kind<R: Rng + ?Sized>(rng: &mut R, kind: TextureKind, size: usize) -> Self {
        let s = size as f64;
        match kind {
            TextureKind::Checkerboard => {
                let cell = rng.random_range(4..=12);
                Texture::Checkerboard {
                    cell,
                    offset: [rng.random_range(0..cell), rng.random_range(0..cell)],
                    colors: contrasting_pair(rng),
                }
            }
            TextureKind::Grating => Texture::Grating {
                period: rng.random_range(6.0..20.0),
                angle: rng.random_range(0.0..core::f64::consts::PI),
                phase: rng.random_range(0.0..core::f64::consts::TAU),
                colors: contrasting_pair(rng),
            },
            TextureKind::Blobs => {
                let n = rng.random_range(2..=5);
                Texture::Blobs {
                    background: color(rng),
                    blobs: (0..n)
                        .map(|_| Blob {
                            center: [rng.random_range(0.0..s), rng.random_range(0.0..s)],
                            radius: rng.random_range(0.08 * s..0.3 * s),
                            color: {
                                let mut c = [0.0; 3];
                                for v in &mut c {
                                    *v = rng.random_range(-0.4..0.4);
                                }
                                c
                            },
                        })
                        .collect(),
                }
            }
            TextureKind::EdgeChart => {
                let n = rng.random_range(1..=3);
                Texture::EdgeChart {
                    base: color(rng),
                    edges: (0..n)
                        .map(|_| {
                            let angle: f64 = rng.random_range(0.0..core::f64::consts::TAU);
                            let normal = [math::cos(angle), math::sin(angle)];
                            let px = rng.random_range(0.25 * s..0.75 * s);
                            let py = rng.random_range(0.25 * s..0.75 * s);
                            let mut delta = [0.0; 3];
                            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            let mag = rng.random_range(0.25..0.45);
                            for v in &mut delta {
                                *v = sign * mag + rng.random_range(-0.05..0.05);
                            }
                            HalfPlane { normal, offset: normal[0] * px + normal[1] * py, delta }
                        })
                        .collect(),
                }
            }
        }
    }

    pub fn render(&self, height: usize, width: usize) -> ImagePatch {
        let mut img = ImagePatch::new(3, height, width);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = self.color_at(x, y, px, py);
                for (c, v) in rgb.iter().enumerate() {
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    fn color_at(&self, x: usize, y: usize, px: f64, py: f64) -> Rgb {
        match self {
            Texture::Checkerboard { cell, offset, colors } => {
                let cx = (x + offset[0]) / cell;
                let cy = (y + offset[1]) / cell;
                colors[(cx + cy) % 2]
            }
            Texture::Grating { period, angle, phase, colors } => {
                let t = (math::cos(*angle) * px + math::sin(*angle) * py) / period;
                let m = 0.5 + 0.5 * math::sin(core::f64::consts::TAU * t + phase);
                let mut c = [0.0; 3];
                for (i, v) in c.iter_mut().enumerate() {
                    *v = colors[0][i] * (1.0 - m) + colors[1][i] * m;
                }
                c
            }
            Texture::Blobs { background, blobs } => {
                let mut c = *background;
                for b in blobs {
                    let dx = px - b.center[0];
                    let dy = py - b.center[1];
                    let g = math::exp(-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius));
                    for (i, v) in c.iter_mut().enumerate() {
                        *v += g * b.color[i];
                    }
                }
                c
            }
            Texture::EdgeChart { base, edges } => {
                let mut c = *base;
                for e in edges {
                    if e.normal[0] * px + e.normal[1] * py > e.offset {
                        for (i, v) in c.iter_mut().enumerate() {
                            *v += e.delta[i];
                        }
                    }
                }
                c
            }
        }
    }
}

/// Edge and flat pixel masks of an image's luma.
///
/// A pixel is an edge pixel when some 4-neighbour differs by more than
/// `0.02`; it is flat when its whole 5x5 neighbourhood is constant.
pub fn edge_flat_masks(img: &ImagePatch) -> (Vec<bool>, Vec<bool>) {
    let y = img.to_y();
    let (h, w) = (y.height(), y.width());
    let mut edge = vec![false; h * w];
    let mut flat = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let v = y.get(0, r, c);
            let mut is_edge = false;
            for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    is_edge |= math::abs(y.get(0, rr as usize, cc as usize) - v) > 0.02;
                }
            }
            edge[r * w + c] = is_edge;
            let mut is_flat = true;
            for rr in r.saturating_sub(2)..(r + 3).min(h) {
                for cc in c.saturating_sub(2)..(c + 3).min(w) {
                    is_flat &= math::abs(y.get(0, rr, cc) - v) < 1e-9;
                }
            }
            flat[r * w + c] = is_flat;
        }
    }
    (edge, flat)
}
