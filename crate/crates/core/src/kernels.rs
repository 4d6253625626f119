//! Reference NCHW kernels, generic over the float type.
//!
//! These are direct implementations with a fixed summation order so results
//! are bitwise reproducible. Callers are expected to have validated shapes.

use num_traits::Float;

use crate::graph::{ConvAttrs, PoolAttrs};
use crate::tensor::Tensor;

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

pub fn conv_out_len(len: usize, pad_lo: usize, pad_hi: usize, kernel: usize, stride: usize) -> usize {
    (len + pad_lo + pad_hi - kernel) / stride + 1
}

/// Direct convolution with zero padding. Accumulates over input channel,
/// then kernel row, then kernel column.
pub fn conv2d<T: Float + Default>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, a: &ConvAttrs) -> Tensor<T> {
    let (n, cin, h, wd) = dims4(x.shape());
    let (cout, _, kh, kw) = dims4(w.shape());
    let [pt, pl, pb, pr] = a.pads;
    let ho = conv_out_len(h, pt, pb, kh, a.stride[0]);
    let wo = conv_out_len(wd, pl, pr, kw, a.stride[1]);
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let wdata = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let b0 = bias.map_or(T::zero(), |t| t.data()[co]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        let xbase = (b * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * a.stride[0] + ky) as isize - pt as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * a.stride[1] + kx) as isize - pl as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc + xd[xbase + iy as usize * wd + ix as usize] * wdata[wbase + ky * kw + kx];
                            }
                        }
                    }
                    od[((b * cout + co) * ho + oy) * wo + ox] = acc + b0;
                }
            }
        }
    }
    out
}

/// Inference BatchNorm: `(x − mean)·γ/√(var+ε) + β` per channel.
pub fn batch_norm<T: Float + Default>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    bias: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let mut out = x.clone();
    let od = out.data_mut();
    for ch in 0..c {
        let k = scale.data()[ch] / (var.data()[ch] + eps).sqrt();
        let m = mean.data()[ch];
        let b = bias.data()[ch];
        for bi in 0..n {
            let base = (bi * c + ch) * h * w;
            for v in &mut od[base..base + h * w] {
                *v = (*v - m) * k + b;
            }
        }
    }
    out
}

pub fn relu<T: Float + Default>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Float + Default>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    out
}

pub fn concat_channels<T: Float + Default>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = dims4(parts[0].shape());
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            let len = p.shape()[1] * h * w;
            data.extend_from_slice(&p.data()[b * len..(b + 1) * len]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], data).expect("concat shape")
}

/// Source taps for one output coordinate of a half-pixel linear resize.
pub fn linear_taps(o: usize, scale: f64, in_len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize, half-pixel coordinates; output dims `floor(in·scale)`.
pub fn resize_bilinear<T: Float + Default>(x: &Tensor<T>, scales: [f32; 2]) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let ho = (h as f64 * scales[0] as f64).floor() as usize;
    let wo = (w as f64 * scales[1] as f64).floor() as usize;
    let ys: Vec<_> = (0..ho).map(|o| linear_taps(o, scales[0] as f64, h)).collect();
    let xs: Vec<_> = (0..wo).map(|o| linear_taps(o, scales[1] as f64, w)).collect();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * ho * wo;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from(fy).expect("finite");
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from(fx).expect("finite");
                let top = xd[ib + y0 * w + x0] * (T::one() - fx) + xd[ib + y0 * w + x1] * fx;
                let bot = xd[ib + y1 * w + x0] * (T::one() - fx) + xd[ib + y1 * w + x1] * fx;
                od[ob + oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Windowed max; padding never wins (it is treated as −∞).
pub fn max_pool<T: Float + Default>(x: &Tensor<T>, a: &PoolAttrs) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let [pt, pl, pb, pr] = a.pads;
    let (kh, kw) = (a.kernel[0], a.kernel[1]);
    let ho = conv_out_len(h, pt, pb, kh, a.stride[0]);
    let wo = conv_out_len(w, pl, pr, kw, a.stride[1]);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = T::neg_infinity();
                for ky in 0..kh {
                    let iy = (oy * a.stride[0] + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * a.stride[1] + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = xd[plane * h * w + iy as usize * w + ix as usize];
                        if v > m || v.is_nan() {
                            m = v;
                        }
                    }
                }
                od[(plane * ho + oy) * wo + ox] = m;
            }
        }
    }
    out
}

/// General axis permutation: `out.shape[i] = x.shape[perm[i]]`.
pub fn transpose<T: Copy + Default>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(x.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, data).expect("transpose shape")
}

/// ONNX ScatterND without reduction: copy `data`, then overwrite the slices
/// addressed by the last axis of `indices` with `updates`. Negative indices
/// count from the end. Indices must have been range-checked.
pub fn scatter_nd<T: Copy + Default>(data: &Tensor<T>, indices: &Tensor<i64>, updates: &Tensor<T>) -> Tensor<T> {
    let mut out = data.clone();
    let ishape = indices.shape();
    let k = ishape[ishape.len() - 1];
    let n_updates: usize = ishape[..ishape.len() - 1].iter().product();
    let dshape = data.shape();
    let slice: usize = dshape[k..].iter().product();
    for u in 0..n_updates {
        let mut off = 0usize;
        for (d, &dim) in dshape[..k].iter().enumerate() {
            let raw = indices.data()[u * k + d];
            let i = if raw < 0 { raw + dim as i64 } else { raw } as usize;
            off = off * dim + i;
        }
        out.data_mut()[off * slice..(off + 1) * slice].copy_from_slice(&updates.data()[u * slice..(u + 1) * slice]);
    }
    out
}

pub fn softmax_channels<T: Float + Default>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let mut out = x.clone();
    let od = out.data_mut();
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let m = (0..c).map(|ch| od[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (od[at(ch)] - m).exp();
                od[at(ch)] = e;
                sum = sum + e;
            }
            for ch in 0..c {
                od[at(ch)] = od[at(ch)] / sum;
            }
        }
    }
    out
}

/// Index of the first maximum along the channel axis.
pub fn argmax_channels<T: Float + Default>(x: &Tensor<T>, keepdims: bool) -> Tensor<i64> {
    let (n, c, h, w) = dims4(x.shape());
    let plane = h * w;
    let mut data = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if x.data()[(b * c + ch) * plane + p] > x.data()[(b * c + best) * plane + p] {
                    best = ch;
                }
            }
            data.push(best as i64);
        }
    }
    let shape: Vec<usize> = if keepdims { vec![n, 1, h, w] } else { vec![n, h, w] };
    Tensor::from_vec(&shape, data).expect("argmax shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_convolution_3x3() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0]).unwrap();
        let y = conv2d(&x, &w, None, &ConvAttrs::square(3, 1, 0));
        // Horizontal Sobel on a ramp increasing by 1 per column: -8 everywhere.
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[-8.0, -8.0, -8.0, -8.0]);
        let y = conv2d(&x, &w, None, &ConvAttrs::square(3, 1, 1));
        // Top-left with padding: only x[0][1]·(−2) and x[1][1]·(−1) are nonzero terms.
        assert_eq!(y.data()[0], -(2.0 * 2.0 + 6.0));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(&[1, 2, 3, 5], 1.25f32);
        let y = resize_bilinear(&x, [2.0, 2.0]);
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn resize_half_pixel_values() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0f64, 4.0]).unwrap();
        let y = resize_bilinear(&x, [1.0, 2.0]);
        // src = (o + 0.5)/2 − 0.5 = −0.25, 0.25, 0.75, 1.25 → clamped taps.
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn scatter_places_leading_slices() {
        let data = Tensor::zeros(&[4, 2]);
        let idx = Tensor::from_vec(&[2, 1], vec![0i64, 2]).unwrap();
        let upd = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = scatter_nd(&data, &idx, &upd);
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let x = Tensor::from_vec(&[2, 3, 1, 2], (0..12).collect()).unwrap();
        let t = transpose(&x, &[1, 0, 2, 3]);
        assert_eq!(t.shape(), &[3, 2, 1, 2]);
        assert_eq!(&t.data()[..4], &[0, 1, 6, 7]);
        assert_eq!(transpose(&t, &[1, 0, 2, 3]), x);
    }
}
