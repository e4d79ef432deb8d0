//! Differentiable building blocks with hand-written backward passes.
//!
//! Every forward function here has a matching `*_backward` that maps the
//! gradient of a scalar objective w.r.t. the output onto gradients w.r.t. the
//! inputs and parameters. Parameter gradients are accumulated (`+=`), input
//! gradients are returned fresh.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::{gemm, Tensor};

/// A named-by-position numeric array: one learnable weight or buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Spatial geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const POINTWISE: ConvGeometry = ConvGeometry {
        kernel: 1,
        stride: 1,
        dilation: 1,
        pad: 0,
    };

    /// 3x3 kernel with "same"-style padding for the given dilation.
    pub fn k3(stride: usize, dilation: usize) -> Self {
        Self {
            kernel: 3,
            stride,
            dilation,
            pad: dilation,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let reach = self.dilation * (self.kernel - 1) + 1;
        if h + 2 * self.pad < reach || w + 2 * self.pad < reach || self.stride == 0 {
            return Err(config_err!("{h}x{w} input too small for {self:?}"));
        }
        Ok((
            (h + 2 * self.pad - reach) / self.stride + 1,
            (w + 2 * self.pad - reach) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        *self == Self::POINTWISE
    }
}

fn im2col(img: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let k = g.kernel;
    let cols = ho * wo;
    let mut col = vec![0.0; c * k * k * cols];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(col: &[f64], img: &mut [f64], c: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize) {
    let k = g.kernel;
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_weight(x: &Tensor, weight: &Param, g: ConvGeometry) -> Result<usize> {
    let s = &weight.shape;
    if s.len() != 4 || s[1] != x.c || s[2] != g.kernel || s[3] != g.kernel {
        return Err(config_err!(
            "conv weight {:?} does not fit input with {} channels and kernel {}",
            s,
            x.c,
            g.kernel
        ));
    }
    Ok(s[0])
}

/// 2-D cross-correlation, weight laid out `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Param, bias: Option<&Param>, g: ConvGeometry) -> Result<Tensor> {
    let cout = check_conv_weight(x, weight, g)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(config_err!("conv bias has {} entries, expected {cout}", b.len()));
        }
    }
    let (ho, wo) = g.output_size(x.h, x.w)?;
    let kdim = x.c * g.kernel * g.kernel;
    let mut y = Tensor::zeros(x.n, cout, ho, wo);
    for b in 0..x.n {
        let out = y.image_mut(b);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data.iter().enumerate() {
                out[co * ho * wo..(co + 1) * ho * wo].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(false, false, cout, ho * wo, kdim, 1.0, &weight.data, x.image(b), beta, out);
        } else {
            let col = im2col(x.image(b), x.c, x.h, x.w, g, ho, wo);
            gemm(false, false, cout, ho * wo, kdim, 1.0, &weight.data, &col, beta, out);
        }
    }
    Ok(y)
}

/// Backward of [`conv2d`]. Accumulates into `d_weight`/`d_bias` and returns
/// the gradient w.r.t. `x`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Param,
    g: ConvGeometry,
    dy: &Tensor,
    d_weight: &mut Param,
    d_bias: Option<&mut Param>,
) -> Tensor {
    let cout = weight.shape[0];
    let (ho, wo) = (dy.h, dy.w);
    let kdim = x.c * g.kernel * g.kernel;
    let mut dx = Tensor::zeros_like(x);
    let mut d_bias = d_bias;
    for b in 0..x.n {
        let dyb = dy.image(b);
        if let Some(db) = d_bias.as_deref_mut() {
            for (co, acc) in db.data.iter_mut().enumerate() {
                *acc += dyb[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        }
        if g.is_pointwise() {
            gemm(false, true, cout, kdim, ho * wo, 1.0, dyb, x.image(b), 1.0, &mut d_weight.data);
            gemm(true, false, kdim, ho * wo, cout, 1.0, &weight.data, dyb, 0.0, dx.image_mut(b));
        } else {
            let col = im2col(x.image(b), x.c, x.h, x.w, g, ho, wo);
            gemm(false, true, cout, kdim, ho * wo, 1.0, dyb, &col, 1.0, &mut d_weight.data);
            let mut dcol = vec![0.0; kdim * ho * wo];
            gemm(true, false, kdim, ho * wo, cout, 1.0, &weight.data, dyb, 0.0, &mut dcol);
            col2im_add(&dcol, dx.image_mut(b), x.c, x.h, x.w, g, ho, wo);
        }
    }
    dx
}

/// 1x1 convolution with bias: a per-pixel linear map between channel spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise {
    pub weight: Param,
    pub bias: Param,
}

impl Pointwise {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Param::zeros(&[cout, cin, 1, 1]),
            bias: Param::zeros(&[cout]),
        }
    }

    /// Fan-in scaled uniform initialization, zero bias.
    pub fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / cin as f64).sqrt();
        Self {
            weight: Param::uniform(&[cout, cin, 1, 1], bound, rng),
            bias: Param::zeros(&[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), ConvGeometry::POINTWISE)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Pointwise) -> Tensor {
        conv2d_backward(
            x,
            &self.weight,
            ConvGeometry::POINTWISE,
            dy,
            &mut grad.weight,
            Some(&mut grad.bias),
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels(), self.out_channels())
    }
}

/// Values saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

/// Normalize each channel with statistics taken over batch and space.
pub fn batch_norm_train(x: &Tensor, gamma: &Param, beta: &Param, eps: f64) -> (Tensor, BatchNormCache) {
    let count = (x.n * x.plane_len()) as f64;
    let mut y = Tensor::zeros_like(x);
    let mut xhat = Tensor::zeros_like(x);
    let mut inv_std = vec![0.0; x.c];
    let mut means = vec![0.0; x.c];
    let mut var_unbiased = vec![0.0; x.c];
    for c in 0..x.c {
        let mean = (0..x.n).map(|b| x.plane(b, c).iter().sum::<f64>()).sum::<f64>() / count;
        let ss: f64 = (0..x.n)
            .map(|b| x.plane(b, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum();
        let var = ss / count;
        let istd = 1.0 / (var + eps).sqrt();
        for b in 0..x.n {
            let src = x.plane(b, c);
            let xh = xhat.plane_mut(b, c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mean) * istd;
            }
            let xh = xhat.plane(b, c).to_vec();
            for (o, v) in y.plane_mut(b, c).iter_mut().zip(xh) {
                *o = gamma.data[c] * v + beta.data[c];
            }
        }
        inv_std[c] = istd;
        means[c] = mean;
        var_unbiased[c] = if count > 1.0 { ss / (count - 1.0) } else { var };
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mean: means,
            var_unbiased,
        },
    )
}

/// Normalize with stored running statistics (inference mode).
pub fn batch_norm_eval(x: &Tensor, gamma: &Param, beta: &Param, mean: &Param, var: &Param, eps: f64) -> Tensor {
    let mut y = Tensor::zeros_like(x);
    for c in 0..x.c {
        let scale = gamma.data[c] / (var.data[c] + eps).sqrt();
        let shift = beta.data[c] - mean.data[c] * scale;
        for b in 0..x.n {
            let src = x.plane(b, c).to_vec();
            for (o, v) in y.plane_mut(b, c).iter_mut().zip(src) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

pub fn batch_norm_backward(
    dy: &Tensor,
    cache: &BatchNormCache,
    gamma: &Param,
    d_gamma: &mut Param,
    d_beta: &mut Param,
) -> Tensor {
    let count = (dy.n * dy.plane_len()) as f64;
    let mut dx = Tensor::zeros_like(dy);
    for c in 0..dy.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..dy.n {
            for (g, xh) in dy.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        d_gamma.data[c] += sum_dy_xhat;
        d_beta.data[c] += sum_dy;
        let k = gamma.data[c] * cache.inv_std[c] / count;
        for b in 0..dy.n {
            let g = dy.plane(b, c).to_vec();
            let xh = cache.xhat.plane(b, c).to_vec();
            for ((o, g), xh) in dx.plane_mut(b, c).iter_mut().zip(g).zip(xh) {
                *o = k * (count * g - sum_dy - xh * sum_dy_xhat);
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward of ReLU given its output: passes gradient where the output is positive.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Coordinate convention for bilinear resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Align {
    /// Output pixel `o` samples source position `o * in / out`. Matches the
    /// pixel registration produced by strided convolutions with "same" padding.
    Strided,
    /// First and last samples coincide on both grids (pyramid branches).
    Corners,
}

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

fn taps(input: usize, output: usize, align: Align) -> Taps {
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut t = Vec::with_capacity(output);
    for o in 0..output {
        let src = match align {
            Align::Strided => o as f64 * input as f64 / output as f64,
            Align::Corners if output > 1 => o as f64 * (input - 1) as f64 / (output - 1) as f64,
            Align::Corners => 0.0,
        };
        let src = src.min((input - 1) as f64);
        let l = src.floor() as usize;
        lo.push(l);
        hi.push((l + 1).min(input - 1));
        t.push(src - l as f64);
    }
    Taps { lo, hi, t }
}

/// Separable bilinear resampling of every channel plane to `ho x wo`.
pub fn resize_bilinear(x: &Tensor, ho: usize, wo: usize, align: Align) -> Tensor {
    if x.h == ho && x.w == wo {
        return x.clone();
    }
    let ty = taps(x.h, ho, align);
    let tx = taps(x.w, wo, align);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    for b in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(b, c);
            let dst = y.plane_mut(b, c);
            for oy in 0..ho {
                let (r0, r1, fy) = (ty.lo[oy] * x.w, ty.hi[oy] * x.w, ty.t[oy]);
                for ox in 0..wo {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.t[ox]);
                    let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                    let bot = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                    dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back onto the
/// `hi x wi` source grid.
pub fn resize_bilinear_backward(dy: &Tensor, hi: usize, wi: usize, align: Align) -> Tensor {
    if dy.h == hi && dy.w == wi {
        return dy.clone();
    }
    let ty = taps(hi, dy.h, align);
    let tx = taps(wi, dy.w, align);
    let mut dx = Tensor::zeros(dy.n, dy.c, hi, wi);
    for b in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(b, c).to_vec();
            let dst = dx.plane_mut(b, c);
            for oy in 0..dy.h {
                let (r0, r1, fy) = (ty.lo[oy] * wi, ty.hi[oy] * wi, ty.t[oy]);
                for ox in 0..dy.w {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.t[ox]);
                    let v = g[oy * dy.w + ox];
                    dst[r0 + c0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[r0 + c1] += v * (1.0 - fy) * fx;
                    dst[r1 + c0] += v * fy * (1.0 - fx);
                    dst[r1 + c1] += v * fy * fx;
                }
            }
        }
    }
    dx
}

/// Half-open source range of adaptive pooling bin `i` out of `bins` over `len`.
pub fn bin_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

/// Adaptive average pooling to a `bins x bins` grid.
pub fn adaptive_avg_pool(x: &Tensor, bins: usize) -> Tensor {
    let mut y = Tensor::zeros(x.n, x.c, bins, bins);
    for b in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(b, c);
            for by in 0..bins {
                let (y0, y1) = bin_range(by, bins, x.h);
                for bx in 0..bins {
                    let (x0, x1) = bin_range(bx, bins, x.w);
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        s += src[yy * x.w + x0..yy * x.w + x1].iter().sum::<f64>();
                    }
                    let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                    y.set(b, c, by, bx, s / cnt);
                }
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let bins = dy.h;
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for b in 0..dy.n {
        for c in 0..dy.c {
            for by in 0..bins {
                let (y0, y1) = bin_range(by, bins, h);
                for bx in 0..bins {
                    let (x0, x1) = bin_range(bx, bins, w);
                    let g = dy.at(b, c, by, bx) / ((y1 - y0) * (x1 - x0)) as f64;
                    let dst = dx.plane_mut(b, c);
                    for yy in y0..y1 {
                        for v in &mut dst[yy * w + x0..yy * w + x1] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Softmax across channels, independently at every pixel (max-subtracted).
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let mut p = Tensor::zeros_like(logits);
    let plane = logits.plane_len();
    let c = logits.c;
    for b in 0..logits.n {
        let src = logits.image(b);
        let dst = p.image_mut(b);
        for i in 0..plane {
            let m = (0..c).map(|k| src[k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (src[k * plane + i] - m).exp();
                dst[k * plane + i] = e;
                s += e;
            }
            for k in 0..c {
                dst[k * plane + i] /= s;
            }
        }
    }
    p
}

/// Backward of [`softmax_channels`] given its output probabilities.
pub fn softmax_channels_backward(probs: &Tensor, dp: &Tensor) -> Tensor {
    let mut dz = Tensor::zeros_like(probs);
    let plane = probs.plane_len();
    let c = probs.c;
    for b in 0..probs.n {
        let p = probs.image(b);
        let g = dp.image(b);
        let out = dz.image_mut(b);
        for i in 0..plane {
            let dot: f64 = (0..c).map(|k| p[k * plane + i] * g[k * plane + i]).sum();
            for k in 0..c {
                out[k * plane + i] = p[k * plane + i] * (g[k * plane + i] - dot);
            }
        }
    }
    dz
}

/// Per-pixel argmax over channels, one label map per batch element.
pub fn argmax_channels(scores: &Tensor) -> Vec<crate::tensor::LabelMap> {
    let plane = scores.plane_len();
    (0..scores.n)
        .map(|b| {
            let s = scores.image(b);
            let data = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..scores.c {
                        if s[k * plane + i] > s[best * plane + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            crate::tensor::LabelMap {
                h: scores.h,
                w: scores.w,
                data,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Textbook nested-loop convolution used as the independent reference.
    fn direct_conv(x: &Tensor, w: &Param, g: ConvGeometry) -> Tensor {
        let (ho, wo) = g.output_size(x.h, x.w).unwrap();
        let cout = w.shape[0];
        let k = g.kernel;
        let mut y = Tensor::zeros(x.n, cout, ho, wo);
        for b in 0..x.n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        s += x.at(b, ci, iy as usize, ix as usize)
                                            * w.data[((co * x.c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        y.set(b, co, oy, ox, s);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [ConvGeometry::k3(1, 1), ConvGeometry::k3(2, 1), ConvGeometry::k3(1, 2), ConvGeometry::POINTWISE] {
            let x = random_tensor(2, 3, 9, 8, &mut rng);
            let w = Param::uniform(&[4, 3, g.kernel, g.kernel], 1.0, &mut rng);
            let got = conv2d(&x, &w, None, g).unwrap();
            let want = direct_conv(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let x = Tensor::zeros(1, 2, 4, 4);
        let w = Param::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, ConvGeometry::k3(1, 1)).is_err());
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(3, 2, 4, 4, &mut rng);
        let (y, _) = batch_norm_train(&x, &Param::filled(&[2], 1.0), &Param::zeros(&[2]), 0.0);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(1, 2, 3, 3, &mut rng);
        assert_eq!(resize_bilinear(&x, 3, 3, Align::Strided), x);
        let c = Tensor::filled(1, 1, 2, 3, 0.7);
        for align in [Align::Strided, Align::Corners] {
            let up = resize_bilinear(&c, 7, 5, align);
            assert!(up.data.iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn bilinear_strided_hits_source_samples() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let up = resize_bilinear(&x, 4, 4, Align::Strided);
        assert_eq!(up.at(0, 0, 0, 0), 1.0);
        assert_eq!(up.at(0, 0, 0, 1), 2.0);
        assert_eq!(up.at(0, 0, 2, 2), 7.0);
        assert_eq!(up.at(0, 0, 3, 3), 7.0);
    }

    #[test]
    fn resize_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for align in [Align::Strided, Align::Corners] {
            let x = random_tensor(1, 2, 3, 4, &mut rng);
            let g = random_tensor(1, 2, 7, 9, &mut rng);
            let lhs: f64 = resize_bilinear(&x, 7, 9, align).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = resize_bilinear_backward(&g, 3, 4, align).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_pool_bins_cover_the_grid() {
        for len in [6, 7, 12, 13] {
            for bins in [1, 2, 3, 6] {
                let mut covered = vec![false; len];
                for i in 0..bins {
                    let (s, e) = bin_range(i, bins, len);
                    assert!(s < e);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.into_iter().all(|c| c));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_logits() {
        let x = Tensor::from_vec(1, 3, 1, 2, vec![1000.0, -5.0, 1001.0, 0.0, 999.0, 5.0]).unwrap();
        let p = softmax_channels(&x);
        for i in 0..2 {
            let s: f64 = (0..3).map(|k| p.data[k * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p.is_finite());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }
}
