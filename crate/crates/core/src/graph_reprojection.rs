//! Vertex-to-pixel reprojection and the final prediction.
//!
//! The projection matrix `P` (`V x N`, `N = H1 * W1`) is a softmax over
//! vertices of the inner products between pre-reasoning vertex features and
//! edge-weighted pixel features, so each pixel column is a convex weighting
//! of vertices. Reasoned vertex features are pulled back with `P^T`, added to
//! `x0` and classified by a 1x1 convolution.

use crate::error::{config_err, Result};
use crate::graph_projection::VertexSet;
use crate::ops::{resize_bilinear, resize_bilinear_backward, softmax_channels, softmax_channels_backward, Align, Pointwise};
use crate::tensor::{gemm, FeatureMap, Tensor};

/// Column-stochastic `V x N` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub p: Vec<f64>,
    pub vertices: usize,
    pub pixels: usize,
}

impl ProjectionMatrix {
    /// Weights of all vertices at pixel `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.vertices).map(|v| self.p[v * self.pixels + i]).collect()
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.p[v * self.pixels..(v + 1) * self.pixels]
    }
}

/// `P = softmax_v(scale * X_G X_e^T)` for a single image (`xe.n == 1`).
pub fn build_projection(xg: &VertexSet, xe: &FeatureMap, scale: f64) -> Result<ProjectionMatrix> {
    if xe.n != 1 || xe.c != xg.channels {
        return Err(config_err!(
            "projection needs one image with {} channels, got {:?}",
            xg.channels,
            xe.shape()
        ));
    }
    let v = xg.len();
    let n = xe.plane_len();
    let c = xe.c;
    // xe.image(0) is C x N row-major.
    let mut logits = vec![0.0; v * n];
    gemm(false, false, v, n, c, scale, &xg.features, xe.image(0), 0.0, &mut logits);
    for i in 0..n {
        let m = (0..v).map(|r| logits[r * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for r in 0..v {
            let e = (logits[r * n + i] - m).exp();
            logits[r * n + i] = e;
            s += e;
        }
        for r in 0..v {
            logits[r * n + i] /= s;
        }
    }
    Ok(ProjectionMatrix {
        p: logits,
        vertices: v,
        pixels: n,
    })
}

/// Returns `(d_vertex_features, d_xe)` from the gradient w.r.t. `P`.
pub fn build_projection_backward(xg: &VertexSet, xe: &FeatureMap, proj: &ProjectionMatrix, d_p: &[f64], scale: f64) -> (Vec<f64>, Tensor) {
    let (v, n, c) = (proj.vertices, proj.pixels, xg.channels);
    let mut d_logits = vec![0.0; v * n];
    for i in 0..n {
        let dot: f64 = (0..v).map(|r| proj.p[r * n + i] * d_p[r * n + i]).sum();
        for r in 0..v {
            d_logits[r * n + i] = scale * proj.p[r * n + i] * (d_p[r * n + i] - dot);
        }
    }
    let mut d_g = vec![0.0; v * c];
    gemm(false, true, v, c, n, 1.0, &d_logits, xe.image(0), 0.0, &mut d_g);
    let mut d_xe = Tensor::zeros_like(xe);
    gemm(true, false, c, n, v, 1.0, &xg.features, &d_logits, 0.0, d_xe.image_mut(0));
    (d_g, d_xe)
}

/// `X_P = P^T X_hat_G`, returned as a `1 x C x h x w` map.
pub fn reproject(p: &ProjectionMatrix, xg_hat: &VertexSet, h: usize, w: usize) -> Result<FeatureMap> {
    if p.vertices != xg_hat.len() || p.pixels != h * w {
        return Err(config_err!(
            "projection {}x{} does not fit {} vertices on a {h}x{w} grid",
            p.vertices,
            p.pixels,
            xg_hat.len()
        ));
    }
    let c = xg_hat.channels;
    let mut out = Tensor::zeros(1, c, h, w);
    // (C x V) * (V x N)
    gemm(true, false, c, p.pixels, p.vertices, 1.0, &xg_hat.features, &p.p, 0.0, &mut out.data);
    Ok(out)
}

/// Returns `(d_p, d_vertex_features)`.
pub fn reproject_backward(p: &ProjectionMatrix, xg_hat: &VertexSet, d_xp: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (v, n, c) = (p.vertices, p.pixels, xg_hat.channels);
    let mut d_p = vec![0.0; v * n];
    gemm(false, false, v, n, c, 1.0, &xg_hat.features, d_xp.image(0), 0.0, &mut d_p);
    let mut d_g = vec![0.0; v * c];
    gemm(false, true, v, c, n, 1.0, &p.p, d_xp.image(0), 0.0, &mut d_g);
    (d_p, d_g)
}

/// Final parsing logits at feature resolution plus the full-resolution view.
#[derive(Clone, Debug)]
pub struct FinalParsing {
    pub logits: Tensor,
    pub full_logits: Tensor,
    pub full_probs: Tensor,
}

/// `Y = conv1x1(x0 + xp)`, upsampled (bilinear, on logits) to `out_h x out_w`.
/// `xp == None` stands for the graph branch being absent.
pub fn predict_final(x0: &FeatureMap, xp: Option<&FeatureMap>, conv: &Pointwise, out_h: usize, out_w: usize) -> Result<(FinalParsing, Tensor)> {
    let mut sum = x0.clone();
    if let Some(xp) = xp {
        if xp.shape() != x0.shape() {
            return Err(config_err!(
                "reprojected features {:?} do not match x0 {:?}",
                xp.shape(),
                x0.shape()
            ));
        }
        sum.add_assign(xp);
    }
    if conv.in_channels() != sum.c {
        return Err(config_err!(
            "final conv takes {} channels, features have {}",
            conv.in_channels(),
            sum.c
        ));
    }
    let logits = conv.forward(&sum)?;
    let full_logits = resize_bilinear(&logits, out_h, out_w, Align::Strided);
    let full_probs = softmax_channels(&full_logits);
    Ok((
        FinalParsing {
            logits,
            full_logits,
            full_probs,
        },
        sum,
    ))
}

/// Gradient w.r.t. `x0 + xp` (identical for both summands) given a gradient
/// w.r.t. the full-resolution probabilities.
pub fn predict_final_backward(conv: &Pointwise, sum: &Tensor, fin: &FinalParsing, d_full_probs: &Tensor, grad: &mut Pointwise) -> Tensor {
    let d_full_logits = softmax_channels_backward(&fin.full_probs, d_full_probs);
    let d_logits = resize_bilinear_backward(&d_full_logits, fin.logits.h, fin.logits.w, Align::Strided);
    conv.backward(sum, &d_logits, grad)
}

/// Per-class response maps: for each class, the sum of its `k` rows of `P`,
/// giving an `h x w` map with values in `[0, k]`.
pub fn class_responses(p: &ProjectionMatrix, k: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|cls| {
            let mut acc = vec![0.0; p.pixels];
            for v in cls * k..(cls + 1) * k {
                for (a, x) in acc.iter_mut().zip(p.row(v)) {
                    *a += x;
                }
            }
            acc
        })
        .collect()
}
