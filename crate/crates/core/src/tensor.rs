//! Dense batched feature maps and the small amount of linear algebra the
//! network needs.
//!
//! Everything is stored batch-major, then channel, then row, then column
//! (`N x C x H x W`). A single image is simply a tensor with `n == 1`.

use crate::error::{config_err, Error, Result};

/// Batched dense grid of `f64` values laid out as `N x C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Feature maps (fused features, edge-masked features, reprojected features).
pub type FeatureMap = Tensor;

/// Single-channel map of edge probabilities in `[0, 1]`.
pub type EdgeMap = Tensor;

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(config_err!(
                "tensor data has {} values, shape {n}x{c}x{h}x{w} needs {}",
                data.len(),
                n * c * h * w
            ));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Number of pixels in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Number of values belonging to one batch element.
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn image(&self, n: usize) -> &[f64] {
        let len = self.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Copy batch element `n` out as a standalone single-image tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        Tensor {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.image(n).to_vec(),
        }
    }

    /// Stack single-image tensors of identical shape into a batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| config_err!("cannot stack an empty list of tensors"))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for t in items {
            if t.c != first.c || t.h != first.h || t.w != first.w {
                return Err(config_err!(
                    "cannot stack tensors of shapes {:?} and {:?}",
                    first.shape(),
                    t.shape()
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / first.image_len().max(1);
        Ok(Tensor {
            n,
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `location` if any value is not finite.
    pub fn ensure_finite(&self, location: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric {
                location: location.to_string(),
                detail: format!("value {} at flat index {i}", self.data[i]),
            }),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenate along the channel axis. All parts must share `n`, `h`, `w`.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("cannot concatenate zero tensors"))?;
        let (n, h, w) = (first.n, first.h, first.w);
        for p in parts {
            if p.n != n || p.h != h || p.w != w {
                return Err(config_err!(
                    "channel concat needs equal batch/spatial dims, got {:?} and {:?}",
                    first.shape(),
                    p.shape()
                ));
            }
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.image(b));
            }
        }
        Ok(Tensor { n, c, h, w, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: split into consecutive channel groups.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        debug_assert_eq!(sizes.iter().sum::<usize>(), self.c);
        let plane = self.plane_len();
        let mut out: Vec<Tensor> = sizes
            .iter()
            .map(|&c| Tensor::zeros(self.n, c, self.h, self.w))
            .collect();
        for b in 0..self.n {
            let src = self.image(b);
            let mut offset = 0;
            for (t, &c) in out.iter_mut().zip(sizes) {
                t.image_mut(b)
                    .copy_from_slice(&src[offset * plane..(offset + c) * plane]);
                offset += c;
            }
        }
        out
    }
}

/// Row-major `h x w` grid of small integers: class labels or binary masks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(config_err!(
                "label map has {} values, {h}x{w} needs {}",
                data.len(),
                h * w
            ));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// Nearest-neighbour resampling on the strided grid (output pixel `o`
    /// reads source pixel `o * in / out`).
    pub fn resize_nearest(&self, h: usize, w: usize) -> LabelMap {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = LabelMap::new(h, w);
        for y in 0..h {
            let sy = (y * self.h / h).min(self.h - 1);
            for x in 0..w {
                let sx = (x * self.w / w).min(self.w - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Max-pool downsampling by an integer factor. Each output pixel covers
    /// the `factor x factor` window around its strided source position, so
    /// one-pixel-wide structures survive.
    pub fn max_pool_to(&self, h: usize, w: usize) -> Result<LabelMap> {
        if h == self.h && w == self.w {
            return Ok(self.clone());
        }
        if h == 0 || w == 0 || self.h % h != 0 || self.w % w != 0 || self.h / h != self.w / w {
            return Err(config_err!(
                "cannot max-pool {}x{} to {h}x{w}: need one integer factor",
                self.h,
                self.w
            ));
        }
        let f = self.h / h;
        let half = f / 2;
        let mut out = LabelMap::new(h, w);
        for y in 0..h {
            let y0 = (y * f).saturating_sub(half);
            let y1 = (y * f + f - half).min(self.h);
            for x in 0..w {
                let x0 = (x * f).saturating_sub(half);
                let x1 = (x * f + f - half).min(self.w);
                let mut m = 0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        m = m.max(self.get(yy, xx));
                    }
                }
                out.set(y, x, m);
            }
        }
        Ok(out)
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major buffers.
///
/// `op(A)` is `m x k` and `op(B)` is `k x n`; with `trans_a` set, `a` is stored
/// as `k x m` (likewise for `b`). When `beta == 0` the previous contents of
/// `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through the
    // given strides lies inside the three slices, and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, n, k, 1.0, &a, &b, 0.0, &mut c);
                let want = naive(ta, tb, m, n, k, &a, &b);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_vec(2, 1, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(2, 2, 2, 2, (0..16).map(|v| -f64::from(v)).collect()).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 3, 2, 2]);
        assert_eq!(cat.at(1, 0, 1, 1), a.at(1, 0, 1, 1));
        assert_eq!(cat.at(1, 2, 0, 1), b.at(1, 1, 0, 1));
        let parts = cat.split_channels(&[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn max_pool_keeps_thin_lines() {
        let mut m = LabelMap::new(8, 8);
        for y in 0..8 {
            m.set(y, 5, 1);
        }
        let p = m.max_pool_to(2, 2).unwrap();
        assert_eq!(p.data, vec![0, 1, 0, 1]);
        assert!(m.max_pool_to(3, 3).is_err());
    }

    #[test]
    fn nearest_resize_reads_strided_sources() {
        let m = LabelMap::from_vec(4, 4, (0..16).collect()).unwrap();
        let r = m.resize_nearest(2, 2);
        assert_eq!(r.data, vec![0, 2, 8, 10]);
    }
}
