//! Single graph-convolution layer over the component vertices with a learned,
//! unconstrained adjacency and a residual connection:
//! `out = x + relu((I - A) x W)`.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::graph_projection::VertexSet;
use crate::ops::Param;
use crate::tensor::gemm;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    /// `V x V`, no symmetry or normalization imposed.
    pub adjacency: Param,
    /// `C x C` channel mixing.
    pub weight: Param,
}

impl GraphParams {
    /// Adjacency near zero so the initial layer is close to `x + relu(x W)`.
    pub fn init(vertices: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            adjacency: Param::uniform(&[vertices, vertices], 0.01, rng),
            weight: Param::uniform(&[channels, channels], (1.0 / channels as f64).sqrt(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adjacency: self.adjacency.zeros_like(),
            weight: self.weight.zeros_like(),
        }
    }

    pub fn vertices(&self) -> usize {
        self.adjacency.shape[0]
    }
}

/// Saved pre-activation and the channel-mixed features.
#[derive(Clone, Debug)]
pub struct ReasonCache {
    mixed: Vec<f64>,
    pre: Vec<f64>,
}

pub fn reason(xg: &VertexSet, params: &GraphParams) -> Result<(VertexSet, ReasonCache)> {
    let v = xg.len();
    let c = xg.channels;
    if params.adjacency.shape != [v, v] || params.weight.shape != [c, c] {
        return Err(config_err!(
            "graph params {:?}/{:?} do not fit {v} vertices x {c} channels",
            params.adjacency.shape,
            params.weight.shape
        ));
    }
    // mixed = X W ; pre = mixed - A mixed
    let mut mixed = vec![0.0; v * c];
    gemm(false, false, v, c, c, 1.0, &xg.features, &params.weight.data, 0.0, &mut mixed);
    let mut pre = mixed.clone();
    gemm(false, false, v, c, v, -1.0, &params.adjacency.data, &mixed, 1.0, &mut pre);
    let out: Vec<f64> = xg.features.iter().zip(&pre).map(|(x, p)| x + p.max(0.0)).collect();
    Ok((xg.with_features(out), ReasonCache { mixed, pre }))
}

/// Accumulates into `grads` and returns the gradient w.r.t. the input features.
pub fn reason_backward(xg: &VertexSet, params: &GraphParams, cache: &ReasonCache, d_out: &[f64], grads: &mut GraphParams) -> Vec<f64> {
    let v = xg.len();
    let c = xg.channels;
    let d_pre: Vec<f64> = d_out
        .iter()
        .zip(&cache.pre)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    // d_mixed = d_pre - A^T d_pre ; dA = -d_pre mixed^T
    let mut d_mixed = d_pre.clone();
    gemm(true, false, v, c, v, -1.0, &params.adjacency.data, &d_pre, 1.0, &mut d_mixed);
    gemm(false, true, v, v, c, -1.0, &d_pre, &cache.mixed, 1.0, &mut grads.adjacency.data);
    // dW = X^T d_mixed ; dX = d_out + d_mixed W^T
    gemm(true, false, c, c, v, 1.0, &xg.features, &d_mixed, 1.0, &mut grads.weight.data);
    let mut d_x = d_out.to_vec();
    gemm(false, true, v, c, c, 1.0, &d_mixed, &params.weight.data, 1.0, &mut d_x);
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vertices(features: Vec<f64>, v: usize, c: usize) -> VertexSet {
        VertexSet {
            features,
            indices: (0..v).collect(),
            k: 1,
            channels: c,
        }
    }

    #[test]
    fn zero_adjacency_identity_weight_doubles_nonnegative_input() {
        let x = vertices(vec![0.5, 1.0, 0.0, 2.0, 3.0, 0.25], 3, 2);
        let params = GraphParams {
            adjacency: Param::zeros(&[3, 3]),
            weight: Param {
                shape: vec![2, 2],
                data: vec![1.0, 0.0, 0.0, 1.0],
            },
        };
        let (out, _) = reason(&x, &params).unwrap();
        for (o, i) in out.features.iter().zip(&x.features) {
            assert_eq!(*o, 2.0 * i);
        }
        assert_eq!(out.indices, x.indices);
    }

    #[test]
    fn zero_features_are_a_fixed_point() {
        let params = GraphParams::init(4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let (out, _) = reason(&vertices(vec![0.0; 12], 4, 3), &params).unwrap();
        assert!(out.features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = GraphParams {
            adjacency: Param { shape: vec![3, 3], data: a.clone() },
            weight: Param { shape: vec![2, 2], data: w.clone() },
        };
        let (out, _) = reason(&vertices(x.clone(), 3, 2), &params).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut pre = 0.0;
                for k in 0..3 {
                    let ik = if i == k { 1.0 } else { 0.0 } - a[i * 3 + k];
                    for m in 0..2 {
                        pre += ik * x[k * 2 + m] * w[m * 2 + j];
                    }
                }
                let want = x[i * 2 + j] + pre.max(0.0);
                assert!((out.features[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = GraphParams::init(3, 2, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(reason(&vertices(vec![0.0; 8], 4, 2), &params).is_err());
    }

    #[test]
    fn inactive_units_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = GraphParams::init(5, 3, &mut rng);
        let x = vertices((0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(), 5, 3);
        let (out, cache) = reason(&x, &params).unwrap();
        for i in 0..15 {
            if cache.pre[i] <= 0.0 {
                assert_eq!(out.features[i], x.features[i]);
            }
        }
    }
}
