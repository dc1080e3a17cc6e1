//! Planar floating-point images.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// BT.601 full-range luma weights for `[0, 1]` RGB.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// `channels x height x width` image stored channel-planar, values nominally
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePatch {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        ImagePatch { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err("ImagePatch::from_vec", &[channels * height * width], &[data.len()]));
        }
        Ok(ImagePatch { channels, height, width, data })
    }

    /// Builds an image from one `[C, H, W]` or `[1, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        match s.len() {
            3 => Self::from_vec(s[0], s[1], s[2], t.data().to_vec()),
            4 if s[0] == 1 => Self::from_vec(s[1], s[2], s[3], t.data().to_vec()),
            _ => Err(shape_err("ImagePatch::from_tensor", &[1, 0, 0, 0], s)),
        }
    }

    /// Splits an NCHW batch into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err("ImagePatch::unbatch", &[0, 0, 0, 0], s));
        }
        Ok((0..s[0])
            .map(|i| {
                let it = t.index_outer(i);
                ImagePatch::from_vec(s[1], s[2], s[3], it.into_data()).expect("sizes agree")
            })
            .collect())
    }

    /// Stacks equally sized images into an NCHW tensor.
    pub fn batch(images: &[&ImagePatch]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.dims() != first.dims() {
                return Err(shape_err("ImagePatch::batch", &first.dims_vec(), &im.dims_vec()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone()).expect("sizes agree")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn dims_vec(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn clamped(mut self) -> Self {
        self.clamp01();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Luma plane; single-channel images are returned unchanged.
    pub fn to_y(&self) -> ImagePatch {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut y = vec![0.0; n];
        for (c, w) in LUMA_WEIGHTS.iter().enumerate().take(self.channels) {
            for (o, v) in y.iter_mut().zip(self.plane(c)) {
                *o += w * v;
            }
        }
        ImagePatch::from_vec(1, self.height, self.width, y).expect("sizes agree")
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument("crop outside image".into()));
        }
        let mut out = ImagePatch::new(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }

    pub fn expect_same_dims(&self, other: &ImagePatch, context: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(context, &self.dims_vec(), &other.dims_vec()));
        }
        Ok(())
    }
}

/// Half-sample symmetric index: `-1 -> 0`, `n -> n - 1`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn luma_of_white_is_one() {
        let im = ImagePatch::filled(3, 2, 2, 1.0);
        for v in im.to_y().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
