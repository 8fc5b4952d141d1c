//! im2col convolution kernels over `[N, C, H, W]` f32 tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut3, Axis};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input + 2 * pad < k {
        return Err(Error::invalid(format!(
            "window {k} (stride {stride}, pad {pad}) does not fit input {input}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

fn im2col(x: ArrayView3<f32>, g: &ConvGeometry, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let (kh, kw) = g.kernel;
    let mut cols = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("row is contiguous");
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[ci * h * w + iy as usize * w..][..w];
                    let out = &mut dst[oy * ow..][..ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: ArrayView2<f32>, mut dx: ArrayViewMut3<f32>, g: &ConvGeometry, oh: usize, ow: usize) {
    let (c, h, w) = dx.dim();
    let (kh, kw) = g.kernel;
    for ci in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ci);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = cols.row((ci * kh + ki) * kw + kj);
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[[iy as usize, ix as usize]] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check(x: &Array4<f32>, w: &ArrayView4<f32>, g: &ConvGeometry) -> Result<(usize, usize, usize, usize)> {
    let (_, c, h, wd) = x.dim();
    let (o, cg, kh, kw) = w.dim();
    if g.groups == 0 || c % g.groups != 0 || o % g.groups != 0 || c / g.groups != cg || (kh, kw) != g.kernel {
        return Err(Error::DimensionMismatch { expected: cg * g.groups, got: c });
    }
    let oh = out_dim(h, kh, g.stride.0, g.pad.0)?;
    let ow = out_dim(wd, kw, g.stride.1, g.pad.1)?;
    Ok((o, cg, oh, ow))
}

pub fn conv2d_forward(x: &Array4<f32>, w: ArrayView4<f32>, b: Option<ArrayView1<f32>>, g: &ConvGeometry) -> Result<Array4<f32>> {
    let (o, cg, oh, ow) = check(x, &w, g)?;
    let n = x.dim().0;
    let og = o / g.groups;
    let (kh, kw) = g.kernel;
    let w2 = w.to_shape((o, cg * kh * kw)).expect("weight reshape");
    let mut out = Array4::<f32>::zeros((n, o, oh, ow));
    for ni in 0..n {
        for gi in 0..g.groups {
            let xin = x.slice(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
            let wg = w2.slice(s![gi * og..(gi + 1) * og, ..]);
            let mut dst = out.slice_mut(s![ni, gi * og..(gi + 1) * og, .., ..]);
            let mut dst = dst.view_mut().into_shape_with_order((og, oh * ow)).expect("contiguous output");
            if g.is_pointwise() {
                let xs = xin.to_shape((cg, oh * ow)).expect("pointwise reshape");
                general_mat_mul(1.0, &wg, &xs, 0.0, &mut dst);
            } else {
                let cols = im2col(xin, g, oh, ow);
                general_mat_mul(1.0, &wg, &cols, 0.0, &mut dst);
            }
        }
    }
    if let Some(b) = b {
        for (mut plane, &bv) in out.axis_iter_mut(Axis(1)).zip(b.iter()) {
            plane += bv;
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Array4<f32>,
    pub dw: Array4<f32>,
    pub db: Array1<f32>,
}

pub fn conv2d_backward(x: &Array4<f32>, w: ArrayView4<f32>, dy: &Array4<f32>, g: &ConvGeometry) -> Result<ConvGrads> {
    let (o, cg, oh, ow) = check(x, &w, g)?;
    if dy.dim() != (x.dim().0, o, oh, ow) {
        return Err(Error::DimensionMismatch { expected: o * oh * ow, got: dy.len() / x.dim().0.max(1) });
    }
    let n = x.dim().0;
    let og = o / g.groups;
    let (kh, kw) = g.kernel;
    let w2 = w.to_shape((o, cg * kh * kw)).expect("weight reshape");
    let mut dx = Array4::<f32>::zeros(x.raw_dim());
    let mut dw2 = Array2::<f32>::zeros((o, cg * kh * kw));
    for ni in 0..n {
        for gi in 0..g.groups {
            let xin = x.slice(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
            let wg = w2.slice(s![gi * og..(gi + 1) * og, ..]);
            let dys = dy.slice(s![ni, gi * og..(gi + 1) * og, .., ..]);
            let dys = dys.to_shape((og, oh * ow)).expect("dy reshape");
            let mut dwg = dw2.slice_mut(s![gi * og..(gi + 1) * og, ..]);
            if g.is_pointwise() {
                let xs = xin.to_shape((cg, oh * ow)).expect("pointwise reshape");
                general_mat_mul(1.0, &dys, &xs.t(), 1.0, &mut dwg);
                let mut dxs = dx.slice_mut(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                let mut dxs = dxs.view_mut().into_shape_with_order((cg, oh * ow)).expect("contiguous dx");
                general_mat_mul(1.0, &wg.t(), &dys, 1.0, &mut dxs);
            } else {
                let cols = im2col(xin, g, oh, ow);
                general_mat_mul(1.0, &dys, &cols.t(), 1.0, &mut dwg);
                let mut dcols = Array2::<f32>::zeros(cols.raw_dim());
                general_mat_mul(1.0, &wg.t(), &dys, 0.0, &mut dcols);
                col2im_add(dcols.view(), dx.slice_mut(s![ni, gi * cg..(gi + 1) * cg, .., ..]), g, oh, ow);
            }
        }
    }
    let dw = dw2.into_shape_with_order((o, cg, kh, kw)).expect("dw reshape");
    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive(x: &Array4<f32>, w: &Array4<f32>, g: &ConvGeometry) -> Array4<f32> {
        let (n, c, h, wd) = x.dim();
        let (o, cg, kh, kw) = w.dim();
        let oh = out_dim(h, kh, g.stride.0, g.pad.0).unwrap();
        let ow = out_dim(wd, kw, g.stride.1, g.pad.1).unwrap();
        let og = o / g.groups;
        let mut out = Array4::zeros((n, o, oh, ow));
        for ni in 0..n {
            for oc in 0..o {
                let gi = oc / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..cg {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                                    let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[ni, gi * cg + ci, iy as usize, ix as usize]] * w[[oc, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[ni, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        let _ = c;
        out
    }

    fn pattern(shape: (usize, usize, usize, usize), k: f32) -> Array4<f32> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array::from_iter((0..len).map(|i| ((i as f32) * 0.37 + k).sin())).into_shape_with_order(shape).unwrap()
    }

    #[test]
    fn matches_naive_for_assorted_geometries() {
        let cases = [
            (ConvGeometry { kernel: (3, 3), stride: (1, 1), pad: (1, 1), groups: 1 }, 4, 6),
            (ConvGeometry { kernel: (3, 3), stride: (2, 2), pad: (1, 1), groups: 2 }, 4, 6),
            (ConvGeometry { kernel: (1, 1), stride: (1, 1), pad: (0, 0), groups: 1 }, 3, 5),
            (ConvGeometry { kernel: (1, 7), stride: (1, 1), pad: (0, 3), groups: 1 }, 2, 3),
            (ConvGeometry { kernel: (5, 5), stride: (2, 2), pad: (2, 2), groups: 4 }, 4, 4),
        ];
        for (g, c, o) in cases {
            let x = pattern((2, c, 9, 8), 0.1);
            let w = pattern((o, c / g.groups, g.kernel.0, g.kernel.1), 1.7);
            let got = conv2d_forward(&x, w.view(), None, &g).unwrap();
            let want = naive(&x, &w, &g);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = ConvGeometry { kernel: (3, 3), stride: (2, 1), pad: (1, 1), groups: 2 };
        let x = pattern((1, 4, 5, 6), 0.3).mapv(|v| v as f32);
        let w = pattern((4, 2, 3, 3), 2.1);
        let b = Array1::from(vec![0.1f32, -0.2, 0.3, 0.0]);
        let y = conv2d_forward(&x, w.view(), Some(b.view()), &g).unwrap();
        // loss = sum(y * r) for a fixed r
        let r = pattern(y.dim(), 0.9);
        let grads = conv2d_backward(&x, w.view(), &r, &g).unwrap();
        let loss = |x: &Array4<f32>, w: &Array4<f32>| -> f64 {
            let y = conv2d_forward(x, w.view(), Some(b.view()), &g).unwrap();
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        for idx in [[0, 0, 0, 0], [0, 3, 2, 4], [0, 1, 4, 5]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h as f64);
            assert!((fd - grads.dx[idx] as f64).abs() < 1e-2, "dx {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [3, 1, 2, 1], [2, 0, 1, 2]] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h as f64);
            assert!((fd - grads.dw[idx] as f64).abs() < 1e-2, "dw {idx:?}");
        }
        let db0: f32 = r.index_axis(Axis(1), 0).sum();
        assert!((grads.db[0] - db0).abs() < 1e-4);
    }
}
