//! The five training objectives and their weighted sum.
//!
//! Each loss returns its value together with the gradient w.r.t. the
//! prediction it consumes. Batched losses are the mean of per-image losses.

use crate::error::{config_err, Error, Result};
use crate::synthetic::derive_edge_gt;
use crate::tensor::{LabelMap, Tensor};

/// Default lower clamp for probabilities entering a logarithm.
pub const DEFAULT_EPS: f64 = 1e-7;

/// Normalization guard for vertex features in the discriminative loss.
const NORM_GUARD: f64 = 1e-12;

/// Per-pixel class labels and the binary edge mask derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub labels: LabelMap,
    pub edge: LabelMap,
}

impl GroundTruth {
    pub fn from_labels(labels: LabelMap) -> Self {
        let edge = derive_edge_gt(&labels);
        Self { labels, edge }
    }

    /// Labels resampled nearest-neighbour, edges max-pooled, onto `h x w`.
    pub fn resample(&self, h: usize, w: usize) -> Result<GroundTruth> {
        Ok(GroundTruth {
            labels: self.labels.resize_nearest(h, w),
            edge: self.edge.max_pool_to(h, w)?,
        })
    }
}

fn check_batch(pred: &Tensor, gts: &[GroundTruth]) -> Result<()> {
    if pred.n != gts.len() {
        return Err(config_err!(
            "prediction batch of {} against {} ground truths",
            pred.n,
            gts.len()
        ));
    }
    Ok(())
}

/// Masked mean negative log-likelihood of the true class.
///
/// With `edge_only`, only ground-truth edge pixels count and an image without
/// edge pixels contributes zero. Otherwise the mean runs over all pixels.
fn masked_nll(probs: &Tensor, gts: &[GroundTruth], eps: f64, edge_only: bool) -> Result<(f64, Tensor)> {
    check_batch(probs, gts)?;
    let plane = probs.plane_len();
    let batch = probs.n as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros_like(probs);
    for (b, gt) in gts.iter().enumerate() {
        let gt = gt.resample(probs.h, probs.w)?;
        let selected: Vec<usize> = if edge_only {
            (0..plane).filter(|&i| gt.edge.data[i] != 0).collect()
        } else {
            (0..plane).collect()
        };
        if selected.is_empty() {
            continue;
        }
        let count = selected.len() as f64;
        let p = probs.image(b);
        let g = grad.image_mut(b);
        let mut sum = 0.0;
        for i in selected {
            let y = gt.labels.data[i] as usize;
            if y >= probs.c {
                return Err(Error::Validation(format!(
                    "label {y} out of range for {} classes",
                    probs.c
                )));
            }
            let q = p[y * plane + i];
            sum -= q.max(eps).ln();
            if q > eps {
                g[y * plane + i] = -1.0 / (q * count * batch);
            }
        }
        total += sum / count;
    }
    Ok((total / batch, grad))
}

/// Cross-entropy of the preliminary parsing map (probabilities) against labels
/// resampled to its grid.
pub fn loss_raw(z0: &Tensor, gts: &[GroundTruth], eps: f64) -> Result<(f64, Tensor)> {
    masked_nll(z0, gts, eps, false)
}

/// Cross-entropy of the final parsing probabilities.
pub fn loss_final(probs: &Tensor, gts: &[GroundTruth], eps: f64) -> Result<(f64, Tensor)> {
    masked_nll(probs, gts, eps, false)
}

/// Boundary-attention loss: cross-entropy restricted to ground-truth edge
/// pixels, averaged over their count; zero when there are none.
pub fn loss_ba(probs: &Tensor, gts: &[GroundTruth], eps: f64) -> Result<(f64, Tensor)> {
    masked_nll(probs, gts, eps, true)
}

/// Mean binary cross-entropy of predicted edge probabilities.
pub fn loss_edge(edge: &Tensor, gts: &[GroundTruth], eps: f64) -> Result<(f64, Tensor)> {
    check_batch(edge, gts)?;
    if edge.c != 1 {
        return Err(config_err!("edge prediction must have one channel, got {}", edge.c));
    }
    let plane = edge.plane_len();
    let batch = edge.n as f64;
    let scale = 1.0 / (plane as f64 * batch);
    let mut total = 0.0;
    let mut grad = Tensor::zeros_like(edge);
    for (b, gt) in gts.iter().enumerate() {
        let mask = gt.edge.max_pool_to(edge.h, edge.w)?;
        let p = edge.image(b);
        let g = grad.image_mut(b);
        let mut sum = 0.0;
        for i in 0..plane {
            let q = p[i];
            let qc = q.clamp(eps, 1.0 - eps);
            if mask.data[i] != 0 {
                sum -= qc.ln();
                if q > eps {
                    g[i] = -scale / q;
                }
            } else {
                sum -= (1.0 - qc).ln();
                if q < 1.0 - eps {
                    g[i] = scale / (1.0 - q);
                }
            }
        }
        total += sum / plane as f64;
    }
    Ok((total / batch, grad))
}

/// Discriminative loss over one image's vertices (`v x c` row-major).
///
/// Rows are L2-normalized first; every ordered pair closer than `delta`
/// contributes `(delta - d)^2`; the sum is divided by `v (v - 1)`. Returns the
/// value and the gradient w.r.t. the unnormalized rows.
pub fn loss_dis(features: &[f64], v: usize, c: usize, delta: f64) -> Result<(f64, Vec<f64>)> {
    if v == 0 || features.len() != v * c {
        return Err(config_err!("discriminative loss needs a non-empty {v}x{c} vertex matrix"));
    }
    if delta <= 0.0 {
        return Err(config_err!("delta must be positive, got {delta}"));
    }
    if v == 1 {
        return Ok((0.0, vec![0.0; c]));
    }
    let norms: Vec<f64> = (0..v)
        .map(|i| features[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let u: Vec<f64> = (0..v * c).map(|idx| features[idx] / (norms[idx / c] + NORM_GUARD)).collect();

    let pairs = (v * (v - 1)) as f64;
    let mut loss = 0.0;
    let mut du = vec![0.0; v * c];
    let mut diff = vec![0.0; c];
    for i in 0..v {
        for j in 0..v {
            if i == j {
                continue;
            }
            for k in 0..c {
                diff[k] = u[i * c + k] - u[j * c + k];
            }
            let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            if d >= delta {
                continue;
            }
            loss += (delta - d) * (delta - d);
            // d/du_i of (delta - d)^2 = -2 (delta - d) (u_i - u_j) / d; zero at d == 0.
            if d > 0.0 {
                let s = -2.0 * (delta - d) / (d * pairs);
                for k in 0..c {
                    du[i * c + k] += s * diff[k];
                    du[j * c + k] -= s * diff[k];
                }
            }
        }
    }

    // Back through u = x / (|x| + guard).
    let mut dx = vec![0.0; v * c];
    for i in 0..v {
        let n = norms[i];
        let denom = n + NORM_GUARD;
        let row = &features[i * c..(i + 1) * c];
        let g = &du[i * c..(i + 1) * c];
        let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..c {
            let mut val = g[k] / denom;
            if n > 0.0 {
                val -= row[k] * dot / (n * denom * denom);
            }
            dx[i * c + k] = val;
        }
    }
    Ok((loss / pairs, dx))
}

/// Weights of the five loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub raw: f64,
    pub edge: f64,
    pub ba: f64,
    pub final_: f64,
    pub dis: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            raw: 1.0,
            edge: 1.0,
            ba: 1.0,
            final_: 0.5,
            dis: 0.1,
        }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.raw),
            ("lambda2", self.edge),
            ("lambda3", self.ba),
            ("lambda4", self.final_),
            ("lambda5", self.dis),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub raw: f64,
    pub edge: f64,
    pub ba: f64,
    pub final_: f64,
    pub dis: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub components: LossComponents,
    pub lambdas: Lambdas,
    pub total: f64,
}

impl LossBundle {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        let c = &self.components;
        [
            ("raw", c.raw),
            ("edge", c.edge),
            ("ba", c.ba),
            ("final", c.final_),
            ("dis", c.dis),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub fn total_loss(components: LossComponents, lambdas: Lambdas) -> Result<LossBundle> {
    lambdas.validate()?;
    let c = &components;
    let total = lambdas.raw * c.raw
        + lambdas.edge * c.edge
        + lambdas.ba * c.ba
        + lambdas.final_ * c.final_
        + lambdas.dis * c.dis;
    Ok(LossBundle {
        components,
        lambdas,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(labels: Vec<u8>, h: usize, w: usize) -> GroundTruth {
        GroundTruth::from_labels(LabelMap::from_vec(h, w, labels).unwrap())
    }

    fn probs_for(true_probs: &[f64], labels: &[u8], classes: usize) -> Tensor {
        // Put the true-class probability at the label, spread the rest evenly.
        let n = true_probs.len();
        let mut t = Tensor::zeros(1, classes, 1, n);
        for (i, (&p, &y)) in true_probs.iter().zip(labels).enumerate() {
            for c in 0..classes {
                let v = if c == y as usize { p } else { (1.0 - p) / (classes - 1) as f64 };
                t.set(0, c, 0, i, v);
            }
        }
        t
    }

    #[test]
    fn cross_entropy_fixed_points() {
        let g = gt(vec![0, 2, 1, 1], 2, 2);
        let mut perfect = Tensor::zeros(1, 3, 2, 2);
        for (i, &y) in g.labels.data.iter().enumerate() {
            perfect.plane_mut(0, y as usize)[i] = 1.0;
        }
        assert_eq!(loss_raw(&perfect, &[g.clone()], DEFAULT_EPS).unwrap().0, 0.0);
        let uniform = Tensor::filled(1, 3, 2, 2, 1.0 / 3.0);
        let (l, _) = loss_final(&uniform, &[g], DEFAULT_EPS).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_pixel_value() {
        let labels = vec![0u8, 1];
        let p = probs_for(&[0.5, 0.25], &labels, 2);
        let g = gt(labels, 1, 2);
        let (l, _) = loss_raw(&p, &[g.clone()], DEFAULT_EPS).unwrap();
        assert!((l - 1.0397).abs() < 5e-5);
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        // Both pixels are edges (labels differ), so the BA loss agrees.
        let (ba, _) = loss_ba(&p, &[g], DEFAULT_EPS).unwrap();
        assert!((ba - l).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let g = gt(vec![0, 5], 1, 2);
        let p = Tensor::filled(1, 3, 1, 2, 1.0 / 3.0);
        assert!(matches!(loss_raw(&p, &[g], DEFAULT_EPS), Err(Error::Validation(_))));
    }

    #[test]
    fn ba_is_zero_without_edges() {
        let g = gt(vec![1; 16], 4, 4);
        let p = Tensor::filled(1, 3, 4, 4, 1.0 / 3.0);
        assert_eq!(loss_ba(&p, &[g], DEFAULT_EPS).unwrap().0, 0.0);
    }

    #[test]
    fn ba_never_exceeds_sum_over_same_pixels() {
        let g = gt(vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2], 4, 4);
        let mut p = Tensor::zeros(1, 3, 4, 4);
        for i in 0..16 {
            let a = (i as f64 * 0.7).sin().abs() + 0.1;
            let b = (i as f64 * 1.3).cos().abs() + 0.1;
            let s = a + b + 0.3;
            p.plane_mut(0, 0)[i] = a / s;
            p.plane_mut(0, 1)[i] = b / s;
            p.plane_mut(0, 2)[i] = 0.3 / s;
        }
        let (ba, _) = loss_ba(&p, &[g.clone()], DEFAULT_EPS).unwrap();
        let edges = g.edge.count(1) as f64;
        let unmasked_sum: f64 = (0..16)
            .filter(|&i| g.edge.data[i] == 1)
            .map(|i| -p.plane(0, g.labels.data[i] as usize)[i].ln())
            .sum();
        assert!(ba * edges <= unmasked_sum + 1e-12);
    }

    #[test]
    fn edge_bce_values() {
        // Two columns of different labels: both pixels are edges? Use a 1x2 map
        // of equal labels and override the mask instead.
        let mut g = gt(vec![0, 0], 1, 2);
        g.edge = LabelMap::from_vec(1, 2, vec![1, 0]).unwrap();
        let e = Tensor::from_vec(1, 1, 1, 2, vec![0.8, 0.4]).unwrap();
        let (l, _) = loss_edge(&e, &[g.clone()], DEFAULT_EPS).unwrap();
        assert!((l - (-(0.8f64.ln()) - 0.6f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 0.3670).abs() < 5e-5);

        let half = Tensor::filled(1, 1, 1, 2, 0.5);
        assert!((loss_edge(&half, &[g.clone()], DEFAULT_EPS).unwrap().0 - 2f64.ln()).abs() < 1e-12);

        let perfect = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let (l, grad) = loss_edge(&perfect, &[g], DEFAULT_EPS).unwrap();
        assert!(l < 1e-6);
        assert!(grad.is_finite());
    }

    #[test]
    fn dis_fixed_points() {
        // Orthogonal unit vectors are sqrt(2) > 1 apart: no penalty.
        let (l, _) = loss_dis(&[1.0, 0.0, 0.0, 1.0], 2, 2, 1.0).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = loss_dis(&[0.3, -0.2, 0.3, -0.2, 0.3, -0.2], 3, 2, 1.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dis_two_vertices_at_half_distance() {
        // Unit vectors at angle t with 2 sin(t/2) = 0.5.
        let t = 2.0 * (0.25f64).asin();
        let (l, _) = loss_dis(&[1.0, 0.0, t.cos(), t.sin()], 2, 2, 1.0).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dis_zero_vertex_is_guarded() {
        let (l, g) = loss_dis(&[0.0; 6], 3, 2, 1.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_loss_weights() {
        let c = LossComponents {
            raw: 1.0,
            edge: 2.0,
            ba: 3.0,
            final_: 4.0,
            dis: 5.0,
        };
        let b = total_loss(c, Lambdas::default()).unwrap();
        assert!((b.total - 8.5).abs() < 1e-12);
        assert_eq!(total_loss(LossComponents::default(), Lambdas::default()).unwrap().total, 0.0);
        let bad = Lambdas {
            dis: -0.1,
            ..Lambdas::default()
        };
        assert!(matches!(total_loss(c, bad), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_is_linear_per_component() {
        let base = LossComponents {
            raw: 0.7,
            edge: 0.2,
            ba: 1.1,
            final_: 0.9,
            dis: 0.4,
        };
        let l = Lambdas::default();
        let t0 = total_loss(base, l).unwrap().total;
        let doubled = LossComponents { ba: 2.2, ..base };
        let t1 = total_loss(doubled, l).unwrap().total;
        assert!((t1 - t0 - l.ba * 1.1).abs() < 1e-12);
    }
}
