//! Forward and backward kernels over raw NCHW buffers.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (f, wc, kh, kw) = weight.dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv weight expects {wc} input channels, input has {c}"
            )));
        }
        if bias.shape() != [f] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?}, expected [{f}]",
                bias.shape()
            )));
        }
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::Shape(format!(
                "unsupported conv kernel {kh}x{kw} stride {stride}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride 1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let p = g.plane_out();
    let (pad, s) = (g.pad as isize, g.stride as isize);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry, x: &mut [T]) {
    let p = g.plane_out();
    let (pad, s) = (g.pad as isize, g.stride as isize);
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation through im2col + GEMM.
pub fn conv2d_im2col<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, bias, stride, pad)?;
    let p = g.plane_out();
    let mut out = Tensor::zeros(&[g.n, g.f, g.ho, g.wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * p]
    };
    for ni in 0..g.n {
        let x = input.item(ni);
        let y = &mut out.data_mut()[ni * g.f * p..(ni + 1) * g.f * p];
        for (fi, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias.data()[fi]);
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm(g.f, g.patch(), p, weight.data(), false, cols, false, y, true);
    }
    Ok(out)
}

/// Loop-based reference convolution.
pub fn conv2d_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, bias, stride, pad)?;
    let mut out = Tensor::zeros(&[g.n, g.f, g.ho, g.wo]);
    let x = input.data();
    let wt = weight.data();
    let y = out.data_mut();
    for ni in 0..g.n {
        for fi in 0..g.f {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ci in 0..g.c {
                        for ki in 0..g.kh {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((ni * g.c + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = wt[((fi * g.c + ci) * g.kh + ki) * g.kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((ni * g.f + fi) * g.ho + oy) * g.wo + ox] = acc + bias.data()[fi];
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, weight, bias, stride, pad)?;
    let p = g.plane_out();
    let k = g.patch();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(bias.shape());
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut gcol = if need_input && !g.is_pointwise() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for ni in 0..g.n {
        let x = input.item(ni);
        let dy = &grad_out[ni * g.f * p..(ni + 1) * g.f * p];
        for (fi, row) in dy.chunks(p).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            gb.data_mut()[fi] += s;
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm(g.f, p, k, dy, false, cols, true, gw.data_mut(), true);
        if let Some(gi) = gi.as_mut() {
            let per = g.c * g.h * g.w;
            let dst = &mut gi.data_mut()[ni * per..(ni + 1) * per];
            if g.is_pointwise() {
                gemm(k, g.f, p, weight.data(), true, dy, false, dst, false);
            } else {
                gemm(k, g.f, p, weight.data(), true, dy, false, &mut gcol, false);
                col2im(&gcol, &g, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// 2x2 stride-2 max pooling; also returns the flat argmax of each output.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2 needs even H and W, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = x[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Real>(input_len: usize, argmax: &[u32], grad_out: &[T]) -> Vec<T> {
    let mut gi = vec![T::zero(); input_len];
    for (&a, &g) in argmax.iter().zip(grad_out) {
        gi[a as usize] += g;
    }
    gi
}

/// Source taps `(lo, hi, frac)` for half-pixel 2x upsampling along one axis.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * 2 * w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<T: Real>(shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut gi = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = g[oy * 2 * w + ox];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    gi
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat mismatch: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        total_c += tc;
    }
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for ni in 0..n {
        for t in inputs {
            data.extend_from_slice(t.item(ni));
        }
    }
    Tensor::new(vec![n, total_c, h, w], data)
}

/// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::Shape(format!("linear input must be [N, in], got {s:?}"))),
    };
    let dout = match weight.shape() {
        [o, i] if *i == din => *o,
        s => return Err(Error::Shape(format!("linear weight {s:?} vs input width {din}"))),
    };
    if bias.shape() != [dout] {
        return Err(Error::Shape(format!("linear bias {:?}, expected [{dout}]", bias.shape())));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    for row in out.data_mut().chunks_mut(dout) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, din, dout, x.data(), false, weight.data(), true, out.data_mut(), true);
    Ok(out)
}

/// Max-shifted softmax over the last axis.
pub fn softmax_last<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = t(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let b = t(&[1], vec![0.0]);
        assert_eq!(conv2d_im2col(&x, &w, &b, 1, 0).unwrap(), x);
        assert_eq!(conv2d_direct(&x, &w, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let b = t(&[1], vec![0.0]);
        for y in [
            conv2d_im2col(&x, &w, &b, 1, 1).unwrap(),
            conv2d_direct(&x, &w, &b, 1, 1).unwrap(),
        ] {
            assert_eq!(y.shape(), &[1, 1, 5, 5]);
            let d = y.data();
            assert_eq!(d[0], 4.0);
            assert_eq!(d[4], 4.0);
            assert_eq!(d[2], 6.0);
            assert_eq!(d[2 * 5 + 2], 9.0);
            assert_eq!(d[5 + 1], 9.0);
        }
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::<f64>::zeros(&[2, 3, 5, 4]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::zeros(&[4]);
        let y = conv2d_im2col(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 2]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let b = Tensor::zeros(&[2]);
        assert!(conv2d_im2col(&x, &Tensor::zeros(&[2, 2, 3, 3]), &b, 1, 1).is_err());
        assert!(conv2d_im2col(&x, &Tensor::zeros(&[2, 3, 5, 5]), &b, 1, 2).is_err());
        assert!(conv2d_im2col(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::zeros(&[3]), 1, 1).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::full(&[1, 2, 4, 4], 7.0f64);
        let (y, arg) = maxpool2(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        // ties go to the first element of the window
        assert_eq!(arg[0], 0);
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let one = t(&[1, 1, 1, 1], vec![2.5]);
        let y = upsample2x(&one).unwrap();
        assert_eq!(y.data(), &[2.5; 4]);
        let c = Tensor::full(&[1, 2, 3, 2], -1.5f64);
        assert!(upsample2x(&c).unwrap().data().iter().all(|&v| v == -1.5));
        let ramp = t(&[1, 1, 1, 2], vec![0.0, 4.0]);
        assert_eq!(upsample2x(&ramp).unwrap().data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_last(&t(&[1, 2], vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let big = softmax_last(&t(&[1, 3], vec![1000.0, 999.0, -5.0]));
        let sum: f64 = big.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_layout() {
        let a = t(&[2, 1, 1, 1], vec![1., 2.]);
        let b = t(&[2, 2, 1, 1], vec![3., 4., 5., 6.]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 1]);
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        assert!(concat_channels(&[&a, &t(&[1, 1, 1, 1], vec![0.])]).is_err());
    }
}
