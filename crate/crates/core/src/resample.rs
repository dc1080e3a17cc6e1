//! Bicubic resampling.
//!
//! The kernel is Keys' cubic with `a = -0.5`:
//!
//! ```text
//! |x| <= 1      1.5|x|^3 - 2.5|x|^2 + 1
//! 1 < |x| < 2  -0.5|x|^3 + 2.5|x|^2 - 4|x| + 2
//! otherwise     0
//! ```
//!
//! Output sample `i` maps to input coordinate `(i + 0.5) / scale - 0.5`.
//! When shrinking, the kernel is stretched by `1 / scale` (antialiasing), and
//! borders use half-sample symmetric extension. Tap weights are normalised to
//! sum to one, so constant images are preserved.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImagePatch};
use crate::math;

pub fn cubic(x: f64) -> f64 {
    let ax = math::abs(x);
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax < 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Per-output-sample input indices and weights along one axis.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let stretch = if scale < 1.0 { scale } else { 1.0 };
        let support = 2.0 / stretch;
        let taps = (0..out_len)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let left = math::floor(u - support) as isize;
                let right = math::ceil(u + support) as isize;
                let mut row: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for j in left..=right {
                    let w = stretch * cubic(stretch * (u - j as f64));
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let idx = reflect_index(j, in_len);
                    match row.iter_mut().find(|(k, _)| *k == idx) {
                        Some(entry) => entry.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                for entry in &mut row {
                    entry.1 /= total;
                }
                row
            })
            .collect();
        AxisWeights { taps }
    }
}

/// Separable bicubic resize to `out_h x out_w` (rows first, then columns).
pub fn resize(img: &ImagePatch, out_h: usize, out_w: usize) -> Result<ImagePatch> {
    if out_h == 0 || out_w == 0 || img.height() == 0 || img.width() == 0 {
        return Err(Error::InvalidArgument("resize to or from an empty image".into()));
    }
    let (c, h, w) = img.dims();
    let wx = AxisWeights::new(w, out_w);
    let wy = AxisWeights::new(h, out_h);
    let mut tmp = ImagePatch::new(c, h, out_w);
    for ch in 0..c {
        for y in 0..h {
            for (x, taps) in wx.taps.iter().enumerate() {
                let v = taps.iter().map(|&(j, wt)| wt * img.get(ch, y, j)).sum();
                tmp.set(ch, y, x, v);
            }
        }
    }
    let mut out = ImagePatch::new(c, out_h, out_w);
    for ch in 0..c {
        for (y, taps) in wy.taps.iter().enumerate() {
            for x in 0..out_w {
                let v = taps.iter().map(|&(j, wt)| wt * tmp.get(ch, j, x)).sum();
                out.set(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

pub fn downscale(img: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    if factor == 0 {
        return Err(Error::InvalidArgument("zero scale factor".into()));
    }
    if !img.height().is_multiple_of(factor) {
        return Err(Error::NotDivisible { dim: "height", value: img.height(), factor });
    }
    if !img.width().is_multiple_of(factor) {
        return Err(Error::NotDivisible { dim: "width", value: img.width(), factor });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    resize(img, img.height() / factor, img.width() / factor)
}

pub fn upscale(img: &ImagePatch, factor: usize) -> Result<ImagePatch> {
    if factor == 0 {
        return Err(Error::InvalidArgument("zero scale factor".into()));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    resize(img, img.height() * factor, img.width() * factor)
}
