//! Double-precision forward and backward kernels for the trainable op set.
//!
//! All activations are NCHW. Reductions run in a fixed order so results are
//! bitwise reproducible.

use netshrink::graph::{ConvAttrs, PoolAttrs};
use netshrink::kernels::{conv_out_len, linear_taps};
use netshrink::Tensor;

/// Label value excluded from the loss and from evaluation.
pub const IGNORE_LABEL: u8 = 255;

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).expect("kernel output shape")
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], a: &ConvAttrs) -> Self {
        assert_eq!(w[1], x[1], "conv weight/input channel mismatch");
        let [pt, pl, pb, pr] = a.pads;
        let (kh, kw) = (a.kernel[0], a.kernel[1]);
        Self {
            cin: x[1],
            h: x[2],
            w: x[3],
            kh,
            kw,
            ho: conv_out_len(x[2], pt, pb, kh, a.stride[0]),
            wo: conv_out_len(x[3], pl, pr, kw, a.stride[1]),
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample into `[cin·kh·kw, ho·wo]` columns.
fn im2col(x: &[f64], g: &ConvGeom, a: &ConvAttrs, cols: &mut [f64]) {
    let [pt, pl, _, _] = a.pads;
    let p = g.p();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * a.stride[0] + ky) as isize - pt as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * a.stride[1] + kx) as isize - pl as isize;
                        cols[row + oy * g.wo + ox] = if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back, accumulating overlaps into `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, a: &ConvAttrs, dx: &mut [f64]) {
    let [pt, pl, _, _] = a.pads;
    let p = g.p();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * a.stride[0] + ky) as isize - pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * a.stride[1] + kx) as isize - pl as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += cols[row + oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// `c = alpha·a·b + beta·c` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], b_rs: usize, b_cs: usize, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution via im2col and a matrix product per sample.
pub fn conv_forward(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, a: &ConvAttrs) -> Tensor<f64> {
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let g = ConvGeom::new(x.shape(), w.shape(), a);
    let (k, p) = (g.k(), g.p());
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; n * cout * p];
    let in_len = g.cin * g.h * g.w;
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, a, &mut cols);
        let y = &mut out[b * cout * p..(b + 1) * cout * p];
        gemm(cout, k, p, w.data(), k, 1, &cols, p, 1, 0.0, y);
        if let Some(bias) = bias {
            for (co, row) in y.chunks_mut(p).enumerate() {
                let v = bias.data()[co];
                row.iter_mut().for_each(|e| *e += v);
            }
        }
    }
    tensor(&[n, cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub dx: Tensor<f64>,
    pub dw: Tensor<f64>,
    pub db: Option<Tensor<f64>>,
}

pub fn conv_backward(x: &Tensor<f64>, w: &Tensor<f64>, has_bias: bool, a: &ConvAttrs, dy: &Tensor<f64>) -> ConvGrads {
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let g = ConvGeom::new(x.shape(), w.shape(), a);
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for b in 0..n {
        let dyb = &dy.data()[b * cout * p..(b + 1) * cout * p];
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, a, &mut cols);
        // dW += dY · colsᵀ
        gemm(cout, p, k, dyb, p, 1, &cols, 1, p, 1.0, &mut dw);
        // dcols = Wᵀ · dY
        gemm(k, cout, p, w.data(), 1, k, dyb, p, 1, 0.0, &mut dcols);
        col2im(&dcols, &g, a, &mut dx[b * in_len..(b + 1) * in_len]);
        if has_bias {
            for (co, row) in dyb.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        dx: tensor(x.shape(), dx),
        dw: tensor(w.shape(), dw),
        db: has_bias.then(|| tensor(&[cout], db)),
    }
}

/// What BatchNorm in training mode keeps for its backward pass.
pub struct BnCache {
    pub xhat: Tensor<f64>,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance per channel.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

/// BatchNorm over the batch statistics of `x`.
pub fn bn_train_forward(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> (Tensor<f64>, BnCache) {
    let (n, c, h, w) = dims4(x.shape());
    let hw = h * w;
    let m = n * hw;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m as f64;
        let mut v = 0.0;
        for b in 0..n {
            v += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|e| (e - mu) * (e - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    let cache = BnCache {
        xhat: tensor(x.shape(), xhat),
        inv_std,
        mean,
        var,
        count: m,
    };
    (tensor(x.shape(), y), cache)
}

/// Returns `(dx, dγ, dβ)`.
pub fn bn_train_backward(cache: &BnCache, gamma: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (n, c, h, w) = dims4(dy.shape());
    let hw = h * w;
    let m = cache.count as f64;
    let (dyd, xh) = (dy.data(), cache.xhat.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += dyd[i] * xh[i];
                dbeta[ch] += dyd[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = k * (m * dyd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    (tensor(dy.shape(), dx), tensor(&[c], dgamma), tensor(&[c], dbeta))
}

/// Gradient through Relu, given its output.
pub fn relu_backward(y: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
    let data = y.data().iter().zip(dy.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    tensor(dy.shape(), data)
}

/// Split a channel-concatenated gradient back into its parts.
pub fn concat_backward(dy: &Tensor<f64>, channels: &[usize]) -> Vec<Tensor<f64>> {
    let (n, c, h, w) = dims4(dy.shape());
    let hw = h * w;
    let mut out: Vec<Vec<f64>> = channels.iter().map(|&k| Vec::with_capacity(n * k * hw)).collect();
    for b in 0..n {
        let mut off = 0;
        for (part, &k) in out.iter_mut().zip(channels) {
            let start = (b * c + off) * hw;
            part.extend_from_slice(&dy.data()[start..start + k * hw]);
            off += k;
        }
    }
    out.into_iter().zip(channels).map(|(d, &k)| tensor(&[n, k, h, w], d)).collect()
}

/// Adjoint of the half-pixel bilinear resize.
pub fn resize_backward(dy: &Tensor<f64>, in_shape: &[usize], scales: [f32; 2]) -> Tensor<f64> {
    let (n, c, h, w) = dims4(in_shape);
    let (_, _, ho, wo) = dims4(dy.shape());
    let ys: Vec<_> = (0..ho).map(|o| linear_taps(o, scales[0] as f64, h)).collect();
    let xs: Vec<_> = (0..wo).map(|o| linear_taps(o, scales[1] as f64, w)).collect();
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * ho * wo;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = dy.data()[ob + oy * wo + ox];
                let top = g * (1.0 - fy);
                let bot = g * fy;
                dx[ib + y0 * w + x0] += top * (1.0 - fx);
                dx[ib + y0 * w + x1] += top * fx;
                dx[ib + y1 * w + x0] += bot * (1.0 - fx);
                dx[ib + y1 * w + x1] += bot * fx;
            }
        }
    }
    tensor(in_shape, dx)
}

/// Max pooling that also records the flat input index of each winner.
/// Ties go to the first position in window order.
pub fn maxpool_forward(x: &Tensor<f64>, a: &PoolAttrs) -> (Tensor<f64>, Vec<usize>) {
    let (n, c, h, w) = dims4(x.shape());
    let [pt, pl, pb, pr] = a.pads;
    let ho = conv_out_len(h, pt, pb, a.kernel[0], a.stride[0]);
    let wo = conv_out_len(w, pl, pr, a.kernel[1], a.stride[1]);
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for ky in 0..a.kernel[0] {
                    let iy = (oy * a.stride[0] + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..a.kernel[1] {
                        let ix = (ox * a.stride[1] + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = plane * h * w + iy as usize * w + ix as usize;
                        if best.1 == usize::MAX || x.data()[i] > best.0 {
                            best = (x.data()[i], i);
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best.0;
                arg[o] = best.1;
            }
        }
    }
    (tensor(&[n, c, ho, wo], out), arg)
}

pub fn maxpool_backward(dy: &Tensor<f64>, argmax: &[usize], in_shape: &[usize]) -> Tensor<f64> {
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (g, &i) in dy.data().iter().zip(argmax) {
        dx[i] += g;
    }
    tensor(in_shape, dx)
}

/// Place the channels of `x` at `indices` of a zero tensor with `m` channels.
/// This is what a Transpose → ScatterND → Transpose chain computes.
pub fn channel_scatter(x: &Tensor<f64>, indices: &[usize], m: usize) -> Tensor<f64> {
    x.expand(1, indices, m, 0.0)
}

/// Adjoint of [`channel_scatter`]: gather the scattered channels back.
pub fn channel_scatter_backward(dy: &Tensor<f64>, indices: &[usize]) -> Tensor<f64> {
    dy.select(1, indices)
}

/// Mean pixel cross-entropy of `logits [N, K, H, W]` against `labels
/// [N·H·W]`, skipping [`IGNORE_LABEL`]. Returns the loss, its gradient with
/// respect to the logits, and the number of labelled pixels.
pub fn softmax_cross_entropy(logits: &Tensor<f64>, labels: &[u8]) -> (f64, Tensor<f64>, usize) {
    let (n, k, h, w) = dims4(logits.shape());
    let hw = h * w;
    assert_eq!(labels.len(), n * hw, "one label per pixel");
    let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = vec![0.0; logits.len()];
    if count == 0 {
        return (0.0, tensor(logits.shape(), grad), 0);
    }
    let ld = logits.data();
    let mut loss = 0.0;
    let mut probs = vec![0.0; k];
    for b in 0..n {
        for px in 0..hw {
            let label = labels[b * hw + px];
            if label == IGNORE_LABEL {
                continue;
            }
            assert!((label as usize) < k, "label {label} out of range for {k} classes");
            let at = |c: usize| (b * k + c) * hw + px;
            let mx = (0..k).map(|c| ld[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (ld[at(c)] - mx).exp();
                z += *p;
            }
            loss += z.ln() + mx - ld[at(label as usize)];
            for (c, p) in probs.iter().enumerate() {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                grad[at(c)] = (p / z - target) / count as f64;
            }
        }
    }
    (loss / count as f64, tensor(logits.shape(), grad), count)
}

pub fn add_into(acc: &mut Tensor<f64>, g: &Tensor<f64>) {
    assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}
