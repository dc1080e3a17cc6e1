//! 2-D convolution kernels over NCHW batches via im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is `[batch, Cin, H, W]`, `w` is
/// `[Cout, Cin, k, k]`, result is `[batch, Cout, OH, OW]`.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
    w: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = out_channels * oh * ow;
    let mut out = vec![0.0; batch * out_size];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * oh * ow] };
    for n in 0..batch {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let on = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(oh * ow).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let rhs: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(out_channels, g.col_rows(), oh * ow, w, false, rhs, false, on, beta);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
    w: &[f64],
    out_channels: usize,
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (oh, ow) = (g.out_height(), g.out_width());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = out_channels * oh * ow;
    let rows = g.col_rows();
    let mut dx = need_dx.then(|| vec![0.0; batch * in_size]);
    let mut dw = need_dw.then(|| vec![0.0; out_channels * rows]);
    let mut db = need_db.then(|| vec![0.0; out_channels]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || !need_dw { Vec::new() } else { vec![0.0; rows * oh * ow] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![0.0; rows * oh * ow] };
    for n in 0..batch {
        let dn = &dout[n * out_size..(n + 1) * out_size];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dn.chunks(oh * ow).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_size..(n + 1) * in_size];
            let rhs: &[f64] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(out_channels, oh * ow, rows, dn, false, rhs, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if pointwise {
                gemm(rows, out_channels, oh * ow, w, true, dn, false, dxn, 1.0);
            } else {
                gemm(rows, out_channels, oh * ow, w, true, dn, false, &mut dcols, 0.0);
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(x: &[f64], g: &ConvGeometry, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += w[((co * g.in_channels + c) * g.kernel + ki) * g.kernel + kj]
                                    * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeometry { in_channels: 2, height: 7, width: 6, kernel: k, stride, pad };
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64) * 0.1 - 0.5).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.2 - 0.6).collect();
            let b = [0.1, -0.2, 0.3];
            let got = conv2d_forward(&x, 1, &g, &w, Some(&b), 3);
            let want = direct(&x, &g, &w, &b, 3);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "k={k} s={stride}");
            }
        }
    }
}
