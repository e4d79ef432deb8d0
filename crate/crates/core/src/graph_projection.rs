//! Pixel-to-vertex projection.
//!
//! Multi-scale features are fused into `x0`, split by the predicted edge map
//! into an edge-weighted and a non-edge-weighted copy, and a preliminary
//! parsing map picks, for each class, the `K` most confident pixels whose
//! non-edge features become that class's graph vertices.

use crate::error::{config_err, Error, Result};
use crate::ops::{resize_bilinear, resize_bilinear_backward, softmax_channels, softmax_channels_backward, Align, Pointwise};
use crate::tensor::{EdgeMap, FeatureMap, Tensor};

#[derive(Clone, Debug)]
pub struct FusedFeatures {
    pub x0: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct FuseCache {
    concat: Tensor,
    low_channels: usize,
    high_size: (usize, usize),
}

/// `x0 = conv1x1([low, up(high)])` with `high` bilinearly upsampled 2x.
pub fn fuse_features(low: &FeatureMap, high_pooled: &FeatureMap, conv: &Pointwise) -> Result<(FusedFeatures, FuseCache)> {
    if high_pooled.h * 2 != low.h || high_pooled.w * 2 != low.w || high_pooled.n != low.n {
        return Err(config_err!(
            "fusion expects the high-level map at half the low-level size, got {}x{} and {}x{}",
            high_pooled.h,
            high_pooled.w,
            low.h,
            low.w
        ));
    }
    let up = resize_bilinear(high_pooled, low.h, low.w, Align::Strided);
    let concat = Tensor::concat_channels(&[low, &up])?;
    if conv.in_channels() != concat.c {
        return Err(config_err!(
            "fusion conv takes {} channels, inputs provide {}",
            conv.in_channels(),
            concat.c
        ));
    }
    let x0 = conv.forward(&concat)?;
    Ok((
        FusedFeatures { x0 },
        FuseCache {
            concat,
            low_channels: low.c,
            high_size: (high_pooled.h, high_pooled.w),
        },
    ))
}

/// Returns `(d_low, d_high_pooled)`.
pub fn fuse_features_backward(conv: &Pointwise, cache: &FuseCache, d_x0: &Tensor, grad: &mut Pointwise) -> (Tensor, Tensor) {
    let d_concat = conv.backward(&cache.concat, d_x0, grad);
    let high_c = cache.concat.c - cache.low_channels;
    let mut parts = d_concat.split_channels(&[cache.low_channels, high_c]).into_iter();
    let d_low = parts.next().expect("low part");
    let d_up = parts.next().expect("high part");
    let (h, w) = cache.high_size;
    (d_low, resize_bilinear_backward(&d_up, h, w, Align::Strided))
}

/// Edge-weighted and non-edge-weighted copies of the fused features.
#[derive(Clone, Debug)]
pub struct EdgeSplit {
    pub xe: FeatureMap,
    pub xne: FeatureMap,
}

/// `xe = x0 * e`, `xne = x0 * (1 - e)`, with `e` broadcast over channels.
pub fn split_edge_features(x0: &FeatureMap, e: &EdgeMap) -> Result<EdgeSplit> {
    if e.c != 1 || e.n != x0.n || e.h != x0.h || e.w != x0.w {
        return Err(config_err!(
            "edge map {:?} does not match features {:?}",
            e.shape(),
            x0.shape()
        ));
    }
    if let Some(v) = e.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("edge value {v} outside [0, 1]")));
    }
    let mut xe = Tensor::zeros_like(x0);
    let mut xne = Tensor::zeros_like(x0);
    for b in 0..x0.n {
        let ep = e.plane(b, 0);
        for c in 0..x0.c {
            let src = x0.plane(b, c);
            for ((o, &v), &ev) in xe.plane_mut(b, c).iter_mut().zip(src).zip(ep) {
                *o = v * ev;
            }
            for ((o, &v), &ev) in xne.plane_mut(b, c).iter_mut().zip(src).zip(ep) {
                *o = v * (1.0 - ev);
            }
        }
    }
    Ok(EdgeSplit { xe, xne })
}

/// Returns `(d_x0, d_e)`.
pub fn split_edge_features_backward(x0: &FeatureMap, e: &EdgeMap, d_xe: &Tensor, d_xne: &Tensor) -> (Tensor, Tensor) {
    let mut d_x0 = Tensor::zeros_like(x0);
    let mut d_e = Tensor::zeros_like(e);
    for b in 0..x0.n {
        let ep = e.plane(b, 0).to_vec();
        let mut de = vec![0.0; ep.len()];
        for c in 0..x0.c {
            let x = x0.plane(b, c);
            let ge = d_xe.plane(b, c);
            let gn = d_xne.plane(b, c);
            let dx = d_x0.plane_mut(b, c);
            for i in 0..ep.len() {
                dx[i] = ge[i] * ep[i] + gn[i] * (1.0 - ep[i]);
                de[i] += x[i] * (ge[i] - gn[i]);
            }
        }
        d_e.plane_mut(b, 0).copy_from_slice(&de);
    }
    (d_x0, d_e)
}

/// Preliminary per-pixel class distribution.
#[derive(Clone, Debug)]
pub struct RawParsing {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// 1x1 convolution to `N_c` channels followed by a per-pixel softmax.
pub fn predict_raw_parsing(x0: &FeatureMap, conv: &Pointwise) -> Result<RawParsing> {
    if conv.in_channels() != x0.c {
        return Err(config_err!(
            "raw parsing conv takes {} channels, features have {}",
            conv.in_channels(),
            x0.c
        ));
    }
    let logits = conv.forward(x0)?;
    let probs = softmax_channels(&logits);
    Ok(RawParsing { logits, probs })
}

/// Gradient w.r.t. `x0` from a gradient w.r.t. the probabilities.
pub fn predict_raw_parsing_backward(x0: &FeatureMap, conv: &Pointwise, raw: &RawParsing, d_probs: &Tensor, grad: &mut Pointwise) -> Tensor {
    let d_logits = softmax_channels_backward(&raw.probs, d_probs);
    conv.backward(x0, &d_logits, grad)
}

/// Graph vertices of one image: `K` rows per class, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSet {
    /// `(K * N_c) x C`, row-major.
    pub features: Vec<f64>,
    /// Flat pixel index (`y * W + x`) each vertex was gathered from.
    pub indices: Vec<usize>,
    pub k: usize,
    pub channels: usize,
}

impl VertexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.features[v * self.channels..(v + 1) * self.channels]
    }

    /// Same indices with different features.
    pub fn with_features(&self, features: Vec<f64>) -> VertexSet {
        debug_assert_eq!(features.len(), self.features.len());
        VertexSet {
            features,
            indices: self.indices.clone(),
            k: self.k,
            channels: self.channels,
        }
    }
}

/// Indices of the `k` largest entries of `scores`, largest first, ties broken
/// by the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Gather, per class, the non-edge features at the `k` pixels where that
/// class's confidence is highest. Operates on a single image (`n == 1`).
///
/// The selection is piecewise constant; gradients reach only the gathered
/// feature entries (see [`scatter_vertex_grad`]).
pub fn select_vertices(xne: &FeatureMap, z0: &Tensor, k: usize) -> Result<VertexSet> {
    if xne.n != 1 || z0.n != 1 || xne.h != z0.h || xne.w != z0.w {
        return Err(config_err!(
            "vertex selection needs one image with matching grids, got {:?} and {:?}",
            xne.shape(),
            z0.shape()
        ));
    }
    let pixels = xne.plane_len();
    if k == 0 || k > pixels {
        return Err(config_err!("top-k needs 1 <= k <= {pixels}, got k = {k}"));
    }
    let mut indices = Vec::with_capacity(k * z0.c);
    for class in 0..z0.c {
        indices.extend(top_k_indices(z0.plane(0, class), k));
    }
    Ok(gather_vertices(xne, indices, k))
}

pub(crate) fn gather_vertices(xne: &FeatureMap, indices: Vec<usize>, k: usize) -> VertexSet {
    let c = xne.c;
    let mut features = vec![0.0; indices.len() * c];
    for (v, &p) in indices.iter().enumerate() {
        for ch in 0..c {
            features[v * c + ch] = xne.plane(0, ch)[p];
        }
    }
    VertexSet {
        features,
        indices,
        k,
        channels: c,
    }
}

/// Scatter-add vertex gradients back onto a single-image feature grid.
pub fn scatter_vertex_grad(vertices: &VertexSet, d_features: &[f64], h: usize, w: usize) -> Tensor {
    let c = vertices.channels;
    let mut d = Tensor::zeros(1, c, h, w);
    for (v, &p) in vertices.indices.iter().enumerate() {
        for ch in 0..c {
            d.plane_mut(0, ch)[p] += d_features[v * c + ch];
        }
    }
    d
}

/// Regular-grid alternative to top-k selection: average `xne` over a grid of
/// `count` cells (rows x cols chosen as square as possible). Each vertex
/// records the centre pixel of its cell.
pub fn spatial_pool_vertices(xne: &FeatureMap, count: usize, k: usize) -> Result<(VertexSet, Vec<(usize, usize, usize, usize)>)> {
    if xne.n != 1 || count == 0 {
        return Err(config_err!("spatial pooling needs one image and at least one vertex"));
    }
    let rows = (1..=count)
        .filter(|r| count % r == 0 && *r <= xne.h && count / r <= xne.w)
        .min_by_key(|r| (*r as i64 - (count / r) as i64).abs())
        .ok_or_else(|| config_err!("cannot tile {}x{} into {count} cells", xne.h, xne.w))?;
    let cols = count / rows;
    let c = xne.c;
    let mut features = vec![0.0; count * c];
    let mut indices = Vec::with_capacity(count);
    let mut cells = Vec::with_capacity(count);
    for r in 0..rows {
        let (y0, y1) = crate::ops::bin_range(r, rows, xne.h);
        for q in 0..cols {
            let (x0, x1) = crate::ops::bin_range(q, cols, xne.w);
            let v = r * cols + q;
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let plane = xne.plane(0, ch);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += plane[y * xne.w + x0..y * xne.w + x1].iter().sum::<f64>();
                }
                features[v * c + ch] = s / n;
            }
            indices.push(((y0 + y1) / 2) * xne.w + (x0 + x1) / 2);
            cells.push((y0, y1, x0, x1));
        }
    }
    Ok((
        VertexSet {
            features,
            indices,
            k,
            channels: c,
        },
        cells,
    ))
}

pub fn spatial_pool_vertices_backward(
    cells: &[(usize, usize, usize, usize)],
    d_features: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let mut d = Tensor::zeros(1, c, h, w);
    for (v, &(y0, y1, x0, x1)) in cells.iter().enumerate() {
        let n = ((y1 - y0) * (x1 - x0)) as f64;
        for ch in 0..c {
            let g = d_features[v * c + ch] / n;
            let plane = d.plane_mut(0, ch);
            for y in y0..y1 {
                for x in x0..x1 {
                    plane[y * w + x] += g;
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn fusion_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let low = random(1, 16, 24, 24, &mut rng);
        let high = random(1, 64, 12, 12, &mut rng);
        let conv = Pointwise::init(80, 64, &mut rng);
        let (f, _) = fuse_features(&low, &high, &conv).unwrap();
        assert_eq!(f.x0.shape(), [1, 64, 24, 24]);
        assert!(fuse_features(&low, &random(1, 64, 10, 12, &mut rng), &conv).is_err());
    }

    #[test]
    fn fusion_of_zeros_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Pointwise::init(6, 5, &mut rng);
        let (f, _) = fuse_features(&Tensor::zeros(1, 2, 4, 4), &Tensor::zeros(1, 4, 2, 2), &conv).unwrap();
        assert!(f.x0.data.iter().all(|&v| v == 0.0));
    }

    /// 2x2 low map (1 channel), 1x1 high map (1 channel): the upsampled high
    /// map is constant, so x0 = w_low * low + w_high * h + b.
    #[test]
    fn fusion_matches_hand_computation() {
        let low = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let high = Tensor::from_vec(1, 1, 1, 1, vec![10.0]).unwrap();
        let mut conv = Pointwise::zeros(2, 2);
        conv.weight.data = vec![1.0, 0.0, 0.5, 0.25];
        conv.bias.data = vec![0.0, 1.0];
        let (f, _) = fuse_features(&low, &high, &conv).unwrap();
        assert_eq!(f.x0.plane(0, 0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.x0.plane(0, 1), &[4.0, 4.5, 5.0, 5.5]);
    }

    #[test]
    fn split_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(1, 3, 4, 4, &mut rng);
        let s = split_edge_features(&x0, &Tensor::zeros(1, 1, 4, 4)).unwrap();
        assert!(s.xe.data.iter().all(|&v| v == 0.0));
        assert_eq!(s.xne, x0);
        let s = split_edge_features(&x0, &Tensor::filled(1, 1, 4, 4, 1.0)).unwrap();
        assert_eq!(s.xe, x0);
        assert!(s.xne.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_rejects_out_of_range_edges() {
        let x0 = Tensor::zeros(1, 2, 2, 2);
        let e = Tensor::from_vec(1, 1, 2, 2, vec![0.0, 0.5, 1.2, 0.1]).unwrap();
        assert!(matches!(split_edge_features(&x0, &e), Err(Error::Validation(_))));
    }

    #[test]
    fn raw_parsing_zero_logits_are_uniform() {
        let x0 = Tensor::zeros(1, 4, 3, 3);
        let raw = predict_raw_parsing(&x0, &Pointwise::zeros(4, 5)).unwrap();
        assert!(raw.probs.data.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn raw_parsing_three_class_softmax() {
        let x0 = Tensor::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        let mut conv = Pointwise::zeros(1, 3);
        conv.weight.data = vec![1.0, 2.0, 3.0];
        let raw = predict_raw_parsing(&x0, &conv).unwrap();
        let want = [0.0900, 0.2447, 0.6652];
        for (p, w) in raw.probs.data.iter().zip(want) {
            assert!((p - w).abs() < 5e-5, "{p} vs {w}");
        }
    }

    #[test]
    fn one_hot_confidences_pick_those_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xne = random(1, 3, 3, 3, &mut rng);
        let mut z0 = Tensor::zeros(1, 2, 3, 3);
        z0.plane_mut(0, 0)[4] = 1.0;
        z0.plane_mut(0, 1)[7] = 1.0;
        let v = select_vertices(&xne, &z0, 1).unwrap();
        assert_eq!(v.indices, vec![4, 7]);
        for ch in 0..3 {
            assert_eq!(v.row(0)[ch], xne.plane(0, ch)[4]);
            assert_eq!(v.row(1)[ch], xne.plane(0, ch)[7]);
        }
    }

    #[test]
    fn default_vertex_count() {
        let xne = Tensor::zeros(1, 8, 24, 24);
        let z0 = Tensor::zeros(1, 11, 24, 24);
        let v = select_vertices(&xne, &z0, 4).unwrap();
        assert_eq!(v.len(), 44);
        // All-equal confidences: lowest indices win.
        assert_eq!(&v.indices[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xne = random(1, 2, 5, 5, &mut rng);
        let z0 = random(1, 3, 5, 5, &mut rng);
        let v = select_vertices(&xne, &z0, 2).unwrap();
        for class in 0..3 {
            let scores = z0.plane(0, class);
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let want: Vec<usize> = pairs[..2].iter().map(|p| p.1).collect();
            assert_eq!(&v.indices[class * 2..class * 2 + 2], want.as_slice());
        }
    }

    #[test]
    fn k_larger_than_grid_is_rejected() {
        let xne = Tensor::zeros(1, 2, 2, 2);
        let z0 = Tensor::zeros(1, 2, 2, 2);
        assert!(matches!(select_vertices(&xne, &z0, 5), Err(Error::Config(_))));
        assert!(select_vertices(&xne, &z0, 0).is_err());
    }

    #[test]
    fn spatial_pool_tiles_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xne = random(1, 2, 24, 24, &mut rng);
        let (v, cells) = spatial_pool_vertices(&xne, 44, 4).unwrap();
        assert_eq!(v.len(), 44);
        let area: usize = cells.iter().map(|(a, b, c, d)| (b - a) * (d - c)).sum();
        assert!(area >= 24 * 24);
        let mean0: f64 = xne.plane(0, 0).iter().sum::<f64>() / 576.0;
        let (uni, _) = spatial_pool_vertices(&xne, 1, 1).unwrap();
        assert!((uni.features[0] - mean0).abs() < 1e-12);
    }
}
