//! Finite-difference verification of every analytic gradient.
//!
//! Each group compares the backward pass of one operation (or loss, or the
//! whole network) against central differences of a scalar functional. For
//! operations the functional is `sum(out * R)` with a random `R`. The error
//! of a group on one instance is `max |a - n| / max(|a|_inf, |n|_inf, floor)`
//! over the checked coordinates; the reported value is the maximum over all
//! instances.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::feature_extraction::{
    backbone_backward, backbone_forward, predict_edge, predict_edge_backward, pyramid_pool, pyramid_pool_backward,
    BackboneConfig, BackboneParams, Mode, PyramidParams,
};
use crate::graph_projection::{
    fuse_features, fuse_features_backward, predict_raw_parsing, predict_raw_parsing_backward, scatter_vertex_grad,
    select_vertices, spatial_pool_vertices, spatial_pool_vertices_backward, split_edge_features,
    split_edge_features_backward, VertexSet,
};
use crate::graph_reasoning::{reason, reason_backward, GraphParams};
use crate::graph_reprojection::{
    build_projection, build_projection_backward, predict_final, predict_final_backward, reproject, reproject_backward,
};
use crate::losses::{loss_ba, loss_dis, loss_edge, loss_final, loss_raw, GroundTruth};
use crate::model::{Ablation, LossConfig, Model, ModelConfig, ModelParams};
use crate::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_backward, batch_norm_train, conv2d, conv2d_backward,
    relu_backward, relu_inplace, resize_bilinear, resize_bilinear_backward, softmax_channels,
    softmax_channels_backward, Align, ConvGeometry, Param, Pointwise,
};
use crate::tensor::{LabelMap, Tensor};

/// Denominator floor of the relative error.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per array in the full-network groups.
    pub chain_coords: usize,
    /// Perturb the analytic gradient of this group (harness self-test).
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-4,
            chain_coords: 2,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared, summed over instances.
    pub checked: usize,
    /// Coordinates skipped because a top-k selection flipped under perturbation.
    pub skipped: usize,
    pub finite: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
    pub instances: usize,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups
            .iter()
            .filter(|g| !g.finite || !(g.max_rel_err <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("group\tmax_rel_err\tchecked\tskipped\tstatus\n");
        for g in &self.groups {
            let ok = g.finite && g.max_rel_err <= self.tolerance;
            let _ = writeln!(
                s,
                "{}\t{:.3e}\t{}\t{}\t{}",
                g.name,
                g.max_rel_err,
                g.checked,
                g.skipped,
                if ok { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "# {} groups, {} instances, tolerance {:e}, {:.1}s",
            self.groups.len(),
            self.instances,
            self.tolerance,
            self.elapsed.as_secs_f64()
        );
        s
    }
}

struct Suite {
    opts: GradcheckOptions,
    groups: Vec<GroupResult>,
}

impl Suite {
    fn group(&mut self, name: &str) -> &mut GroupResult {
        let pos = match self.groups.iter().position(|g| g.name == name) {
            Some(p) => p,
            None => {
                self.groups.push(GroupResult {
                    name: name.to_string(),
                    max_rel_err: 0.0,
                    checked: 0,
                    skipped: 0,
                    finite: true,
                });
                self.groups.len() - 1
            }
        };
        &mut self.groups[pos]
    }

    /// Compare analytic values at `coords` with their numeric estimates.
    fn record(&mut self, name: &str, analytic: &[f64], coords: &[usize], numeric: &[f64]) {
        let mut a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        if self.opts.corrupt.as_deref() == Some(name) && !a.is_empty() {
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            a[0] += 1e-2 * scale.max(1.0);
        }
        let finite = analytic.iter().chain(numeric).all(|v| v.is_finite());
        let scale = a
            .iter()
            .chain(numeric)
            .fold(SCALE_FLOOR, |m, v| m.max(v.abs()));
        let err = a
            .iter()
            .zip(numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / scale;
        let g = self.group(name);
        g.checked += coords.len();
        g.finite &= finite;
        if err.is_nan() {
            g.max_rel_err = f64::INFINITY;
        } else {
            g.max_rel_err = g.max_rel_err.max(err);
        }
    }

    /// Numeric gradient of `f` at `x` for the given coordinates.
    fn check_vec(&mut self, name: &str, x: &[f64], analytic: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) {
        let h = self.opts.step;
        let mut probe = x.to_vec();
        let numeric: Vec<f64> = coords
            .iter()
            .map(|&i| {
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        self.record(name, analytic, coords, &numeric);
    }

    fn check_tensor(&mut self, name: &str, x: &Tensor, analytic: &Tensor, coords: &[usize], f: impl Fn(&Tensor) -> f64) {
        let shape = x.shape();
        self.check_vec(name, &x.data, &analytic.data, coords, |v| {
            f(&Tensor::from_vec(shape[0], shape[1], shape[2], shape[3], v.to_vec()).expect("same shape"))
        });
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, c, h, w, data).expect("shape")
}

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Param {
    let mut p = Param::zeros(shape);
    p.data.iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    p
}

fn coords(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut c = sample(rng, len, max).into_vec();
        c.sort_unstable();
        c
    }
}

fn all(len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// Blocky random labels so that edges and interiors both exist.
fn rand_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize, block: usize) -> LabelMap {
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let blocks: Vec<u8> = (0..bh * bw).map(|_| rng.gen_range(0..classes) as u8).collect();
    let mut m = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, blocks[(y / block) * bw + x / block]);
        }
    }
    m
}

const N: usize = 2;
const C: usize = 4;
const S: usize = 6;
const CLASSES: usize = 3;
const K: usize = 2;
const MAX_COORDS: usize = 48;

fn check_ops(suite: &mut Suite, rng: &mut ChaCha8Rng, instance: usize) {
    // 3x3 convolutions with the strides and dilations used by the backbone.
    let geometries = [ConvGeometry::k3(1, 1), ConvGeometry::k3(2, 1), ConvGeometry::k3(1, 2)];
    let g = geometries[instance % geometries.len()];
    let x = rand_tensor(rng, N, 3, 7, 7);
    let w = rand_param(rng, &[C, 3, 3, 3], -0.5, 0.5);
    let b = rand_param(rng, &[C], -0.5, 0.5);
    let y = conv2d(&x, &w, Some(&b), g).expect("conv");
    let r = rand_tensor(rng, y.n, y.c, y.h, y.w);
    let (mut dw, mut db) = (w.zeros_like(), b.zeros_like());
    let dx = conv2d_backward(&x, &w, g, &r, &mut dw, Some(&mut db));
    let cx = coords(rng, x.data.len(), MAX_COORDS);
    suite.check_tensor("conv3x3.input", &x, &dx, &cx, |x| dot(&conv2d(x, &w, Some(&b), g).unwrap().data, &r.data));
    let cw = coords(rng, w.len(), MAX_COORDS);
    suite.check_vec("conv3x3.weight", &w.data, &dw.data, &cw, |v| {
        let w = Param { shape: w.shape.clone(), data: v.to_vec() };
        dot(&conv2d(&x, &w, Some(&b), g).unwrap().data, &r.data)
    });
    suite.check_vec("conv3x3.bias", &b.data, &db.data, &all(C), |v| {
        let b = Param { shape: b.shape.clone(), data: v.to_vec() };
        dot(&conv2d(&x, &w, Some(&b), g).unwrap().data, &r.data)
    });

    // 1x1 convolution.
    let conv = Pointwise::init(C, 3, rng);
    let x = rand_tensor(rng, N, C, S, S);
    let r = rand_tensor(rng, N, 3, S, S);
    let mut grad = conv.zeros_like();
    let dx = conv.backward(&x, &r, &mut grad);
    let cx = coords(rng, x.data.len(), MAX_COORDS);
    suite.check_tensor("pointwise.input", &x, &dx, &cx, |x| dot(&conv.forward(x).unwrap().data, &r.data));
    check_pointwise(suite, "pointwise", &conv, &grad, |c| dot(&c.forward(&x).unwrap().data, &r.data));

    // Batch normalization in training mode.
    let x = rand_tensor(rng, N, C, S, S);
    let gamma = rand_param(rng, &[C], 0.5, 1.5);
    let beta = rand_param(rng, &[C], -0.5, 0.5);
    let r = rand_tensor(rng, N, C, S, S);
    let (_, cache) = batch_norm_train(&x, &gamma, &beta, 1e-5);
    let (mut dg, mut dbeta) = (gamma.zeros_like(), beta.zeros_like());
    let dx = batch_norm_backward(&r, &cache, &gamma, &mut dg, &mut dbeta);
    let bn = |x: &Tensor, gamma: &Param, beta: &Param| dot(&batch_norm_train(x, gamma, beta, 1e-5).0.data, &r.data);
    let cx = coords(rng, x.data.len(), MAX_COORDS);
    suite.check_tensor("batch_norm.input", &x, &dx, &cx, |x| bn(x, &gamma, &beta));
    suite.check_vec("batch_norm.gamma", &gamma.data, &dg.data, &all(C), |v| {
        bn(&x, &Param { shape: vec![C], data: v.to_vec() }, &beta)
    });
    suite.check_vec("batch_norm.beta", &beta.data, &dbeta.data, &all(C), |v| {
        bn(&x, &gamma, &Param { shape: vec![C], data: v.to_vec() })
    });

    // ReLU.
    let x = rand_tensor(rng, N, C, S, S);
    let r = rand_tensor(rng, N, C, S, S);
    let mut y = x.clone();
    relu_inplace(&mut y);
    let dx = relu_backward(&y, &r);
    let relu = |x: &Tensor| {
        let mut y = x.clone();
        relu_inplace(&mut y);
        dot(&y.data, &r.data)
    };
    suite.check_tensor("relu", &x, &dx, &all(x.data.len()), relu);

    // Bilinear resizing in both alignments.
    for (name, align, (hi, ho)) in [
        ("bilinear.strided", Align::Strided, (S, 2 * S)),
        ("bilinear.corners", Align::Corners, (3, S)),
    ] {
        let x = rand_tensor(rng, N, 2, hi, hi + 1);
        let r = rand_tensor(rng, N, 2, ho, ho + 2);
        let dx = resize_bilinear_backward(&r, hi, hi + 1, align);
        suite.check_tensor(name, &x, &dx, &all(x.data.len()), |x| {
            dot(&resize_bilinear(x, ho, ho + 2, align).data, &r.data)
        });
    }

    // Adaptive average pooling.
    let bins = [1, 2, 3, 6][instance % 4];
    let x = rand_tensor(rng, N, 2, S, S);
    let r = rand_tensor(rng, N, 2, bins, bins);
    let dx = adaptive_avg_pool_backward(&r, S, S);
    suite.check_tensor("adaptive_avg_pool", &x, &dx, &all(x.data.len()), |x| {
        dot(&adaptive_avg_pool(x, bins).data, &r.data)
    });

    // Channel softmax.
    let x = rand_tensor(rng, N, CLASSES, S, S);
    let r = rand_tensor(rng, N, CLASSES, S, S);
    let dx = softmax_channels_backward(&softmax_channels(&x), &r);
    suite.check_tensor("softmax", &x, &dx, &all(x.data.len()), |x| dot(&softmax_channels(x).data, &r.data));
}

fn check_pointwise(suite: &mut Suite, prefix: &str, conv: &Pointwise, grad: &Pointwise, f: impl Fn(&Pointwise) -> f64) {
    let mut probe = conv.clone();
    suite.check_vec(&format!("{prefix}.weight"), &conv.weight.data, &grad.weight.data, &all(conv.weight.len()), |v| {
        probe.weight.data.copy_from_slice(v);
        f(&probe)
    });
    let mut probe = conv.clone();
    suite.check_vec(&format!("{prefix}.bias"), &conv.bias.data, &grad.bias.data, &all(conv.bias.len()), |v| {
        probe.bias.data.copy_from_slice(v);
        f(&probe)
    });
}

/// Check every trainable array of a parameter collection exposed through
/// `named`, sampling `per_array` coordinates each.
fn check_named<P: Clone>(
    suite: &mut Suite,
    rng: &mut ChaCha8Rng,
    group: &str,
    params: &P,
    grads: &P,
    per_array: usize,
    named: impl Fn(&P) -> Vec<(String, &Param)>,
    named_mut: impl Fn(&mut P) -> Vec<(String, &mut Param)>,
    f: impl Fn(&P) -> f64,
) {
    let h = suite.opts.step;
    let base = named(params);
    let gnamed = named(grads);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (ai, ((name, p), (_, g))) in base.iter().zip(&gnamed).enumerate() {
        if ModelParams::is_buffer(name) {
            continue;
        }
        for j in coords(rng, p.len(), per_array) {
            let eval = |delta: f64| {
                let mut probe = params.clone();
                named_mut(&mut probe)[ai].1.data[j] += delta;
                f(&probe)
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(g.data[j]);
        }
    }
    let idx = all(analytic.len());
    suite.record(group, &analytic, &idx, &numeric);
}

fn check_heads(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    // Edge head over three stride-4 maps.
    let maps: Vec<Tensor> = [2, 3, 2].iter().map(|&c| rand_tensor(rng, N, c, S, S)).collect();
    let refs: Vec<&Tensor> = maps.iter().collect();
    let conv = Pointwise::init(7, 1, rng);
    let r = rand_tensor(rng, N, 1, S, S);
    let (e, cache) = predict_edge(&refs, &conv).expect("edge");
    let mut grad = conv.zeros_like();
    let dmaps = predict_edge_backward(&conv, &cache, &e, &r, &mut grad);
    for (i, m) in maps.iter().enumerate() {
        let cx = all(m.data.len());
        suite.check_tensor("edge_head.inputs", m, &dmaps[i], &cx, |m| {
            let mut refs: Vec<&Tensor> = refs.clone();
            refs[i] = m;
            dot(&predict_edge(&refs, &conv).unwrap().0.data, &r.data)
        });
    }
    check_pointwise(suite, "edge_head", &conv, &grad, |c| dot(&predict_edge(&refs, c).unwrap().0.data, &r.data));

    // Pyramid pooling on a stride-8 map.
    let high = rand_tensor(rng, N, C, S, S);
    let params = PyramidParams::init(C, rng);
    let (out, cache) = pyramid_pool(&high, &params).expect("pyramid");
    let r = rand_tensor(rng, out.n, out.c, out.h, out.w);
    let mut grads = params.zeros_like();
    let dh = pyramid_pool_backward(&params, &cache, &r, &mut grads);
    let cx = coords(rng, high.data.len(), MAX_COORDS);
    suite.check_tensor("pyramid.input", &high, &dh, &cx, |x| dot(&pyramid_pool(x, &params).unwrap().0.data, &r.data));
    check_named(
        suite,
        rng,
        "pyramid.params",
        &params,
        &grads,
        4,
        |p| p.named(),
        |p| p.named_mut(),
        |p| dot(&pyramid_pool(&high, p).unwrap().0.data, &r.data),
    );

    // Fusion of stride-4 and upsampled stride-8 features.
    let low = rand_tensor(rng, N, 2, S, S);
    let pooled = rand_tensor(rng, N, 3, S / 2, S / 2);
    let conv = Pointwise::init(5, C, rng);
    let (fused, cache) = fuse_features(&low, &pooled, &conv).expect("fuse");
    let r = rand_tensor(rng, N, C, fused.x0.h, fused.x0.w);
    let mut grad = conv.zeros_like();
    let (dl, dp) = fuse_features_backward(&conv, &cache, &r, &mut grad);
    let fuse = |l: &Tensor, p: &Tensor, c: &Pointwise| dot(&fuse_features(l, p, c).unwrap().0.x0.data, &r.data);
    suite.check_tensor("fuse.low", &low, &dl, &all(low.data.len()), |l| fuse(l, &pooled, &conv));
    suite.check_tensor("fuse.high", &pooled, &dp, &all(pooled.data.len()), |p| fuse(&low, p, &conv));
    check_pointwise(suite, "fuse", &conv, &grad, |c| fuse(&low, &pooled, c));

    // Raw parsing head (1x1 conv + softmax).
    let x0 = rand_tensor(rng, N, C, S, S);
    let conv = Pointwise::init(C, CLASSES, rng);
    let raw = predict_raw_parsing(&x0, &conv).expect("raw");
    let r = rand_tensor(rng, N, CLASSES, S, S);
    let mut grad = conv.zeros_like();
    let dx = predict_raw_parsing_backward(&x0, &conv, &raw, &r, &mut grad);
    let rawf = |x: &Tensor, c: &Pointwise| dot(&predict_raw_parsing(x, c).unwrap().probs.data, &r.data);
    suite.check_tensor("raw_head.input", &x0, &dx, &all(x0.data.len()), |x| rawf(x, &conv));
    check_pointwise(suite, "raw_head", &conv, &grad, |c| rawf(&x0, c));

    // Final head: sum, 1x1 conv, upsampling, softmax.
    let x0 = rand_tensor(rng, N, C, S, S);
    let xp = rand_tensor(rng, N, C, S, S);
    let conv = Pointwise::init(C, CLASSES, rng);
    let (fin, sum) = predict_final(&x0, Some(&xp), &conv, 4 * S, 4 * S).expect("final");
    let r = rand_tensor(rng, N, CLASSES, 4 * S, 4 * S);
    let mut grad = conv.zeros_like();
    let dsum = predict_final_backward(&conv, &sum, &fin, &r, &mut grad);
    let finalf = |x: &Tensor, p: &Tensor, c: &Pointwise| {
        dot(&predict_final(x, Some(p), c, 4 * S, 4 * S).unwrap().0.full_probs.data, &r.data)
    };
    let cx = coords(rng, x0.data.len(), MAX_COORDS);
    suite.check_tensor("final_head.x0", &x0, &dsum, &cx, |x| finalf(x, &xp, &conv));
    suite.check_tensor("final_head.xp", &xp, &dsum, &cx, |p| finalf(&x0, p, &conv));
    check_pointwise(suite, "final_head", &conv, &grad, |c| finalf(&x0, &xp, c));
}

fn check_backbone(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let config = BackboneConfig {
        channels: [2, 2, 3, 3],
        ..BackboneConfig::default()
    };
    let params = BackboneParams::init(&config, rng);
    let image = rand_tensor(rng, N, 3, 16, 16);
    let (out, cache) = backbone_forward(&image, &params, &config, Mode::Train).expect("backbone");
    let rs: Vec<Tensor> = [&out.low, &out.mid_a, &out.mid_b, &out.high]
        .iter()
        .map(|t| rand_tensor(rng, t.n, t.c, t.h, t.w))
        .collect();
    let f = |image: &Tensor, params: &BackboneParams| {
        let (o, _) = backbone_forward(image, params, &config, Mode::Train).unwrap();
        dot(&o.low.data, &rs[0].data) + dot(&o.mid_a.data, &rs[1].data) + dot(&o.mid_b.data, &rs[2].data) + dot(&o.high.data, &rs[3].data)
    };
    let mut grads = params.zeros_like();
    // The image gradient is not exposed, so only parameters are checked here.
    backbone_backward(&params, &cache, &rs[0], &rs[1], &rs[2], &rs[3], &mut grads).expect("backbone backward");
    check_named(suite, rng, "backbone.params", &params, &grads, 6, |p| p.named(), |p| p.named_mut(), |p| f(&image, p));
}

fn rand_vertices(rng: &mut ChaCha8Rng, v: usize, c: usize) -> VertexSet {
    VertexSet {
        features: (0..v * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        indices: (0..v).collect(),
        k: K,
        channels: c,
    }
}

fn check_graph(suite: &mut Suite, rng: &mut ChaCha8Rng, instance: usize) {
    let v = K * CLASSES;

    // Edge attention split.
    let x0 = rand_tensor(rng, 1, C, S, S);
    let mut e = rand_tensor(rng, 1, 1, S, S);
    e.data.iter_mut().for_each(|p| *p = 0.5 + 0.45 * *p);
    let (r1, r2) = (rand_tensor(rng, 1, C, S, S), rand_tensor(rng, 1, C, S, S));
    let (dx, de) = split_edge_features_backward(&x0, &e, &r1, &r2);
    let split = |x: &Tensor, e: &Tensor| {
        let s = split_edge_features(x, e).unwrap();
        dot(&s.xe.data, &r1.data) + dot(&s.xne.data, &r2.data)
    };
    suite.check_tensor("edge_split.x0", &x0, &dx, &all(x0.data.len()), |x| split(x, &e));
    suite.check_tensor("edge_split.edge", &e, &de, &all(e.data.len()), |e| split(&x0, e));

    // Top-k gathering (selection held fixed by the confidence map).
    let xne = rand_tensor(rng, 1, C, S, S);
    let z0 = softmax_channels(&rand_tensor(rng, 1, CLASSES, S, S));
    let verts = select_vertices(&xne, &z0, K).expect("select");
    let r: Vec<f64> = (0..verts.features.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dx = scatter_vertex_grad(&verts, &r, S, S);
    suite.check_tensor("vertex_gather", &xne, &dx, &all(xne.data.len()), |x| {
        dot(&select_vertices(x, &z0, K).unwrap().features, &r)
    });

    // Grid pooling used by the spatial-pool ablation.
    let (pooled, cells) = spatial_pool_vertices(&xne, v, K).expect("pool");
    let r: Vec<f64> = (0..pooled.features.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dx = spatial_pool_vertices_backward(&cells, &r, C, S, S);
    suite.check_tensor("spatial_pool", &xne, &dx, &all(xne.data.len()), |x| {
        dot(&spatial_pool_vertices(x, v, K).unwrap().0.features, &r)
    });

    // Graph reasoning.
    let xg = rand_vertices(rng, v, C);
    let params = GraphParams {
        adjacency: rand_param(rng, &[v, v], -0.3, 0.3),
        weight: rand_param(rng, &[C, C], -0.8, 0.8),
    };
    let (out, cache) = reason(&xg, &params).expect("reason");
    let r: Vec<f64> = (0..out.features.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut grads = params.zeros_like();
    let dx = reason_backward(&xg, &params, &cache, &r, &mut grads);
    let reasonf = |xg: &VertexSet, p: &GraphParams| dot(&reason(xg, p).unwrap().0.features, &r);
    suite.check_vec("reasoning.vertices", &xg.features, &dx, &all(dx.len()), |f| {
        reasonf(&xg.with_features(f.to_vec()), &params)
    });
    suite.check_vec("reasoning.adjacency", &params.adjacency.data, &grads.adjacency.data, &all(v * v), |a| {
        let mut p = params.clone();
        p.adjacency.data.copy_from_slice(a);
        reasonf(&xg, &p)
    });
    suite.check_vec("reasoning.weight", &params.weight.data, &grads.weight.data, &all(C * C), |w| {
        let mut p = params.clone();
        p.weight.data.copy_from_slice(w);
        reasonf(&xg, &p)
    });

    // Projection softmax over vertices.
    let scale = if instance % 2 == 0 { 1.0 } else { 1.0 / (C as f64).sqrt() };
    let xe = rand_tensor(rng, 1, C, S, S);
    let p = build_projection(&xg, &xe, scale).expect("projection");
    let r: Vec<f64> = (0..p.p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (dg, dxe) = build_projection_backward(&xg, &xe, &p, &r, scale);
    suite.check_vec("projection.vertices", &xg.features, &dg, &all(dg.len()), |f| {
        dot(&build_projection(&xg.with_features(f.to_vec()), &xe, scale).unwrap().p, &r)
    });
    suite.check_tensor("projection.features", &xe, &dxe, &all(xe.data.len()), |x| {
        dot(&build_projection(&xg, x, scale).unwrap().p, &r)
    });

    // Reprojection back to pixels.
    let hat = rand_vertices(rng, v, C);
    let r = rand_tensor(rng, 1, C, S, S);
    let (dp, dhat) = reproject_backward(&p, &hat, &r);
    suite.check_vec("reprojection.projection", &p.p, &dp, &all(dp.len()), |m| {
        let mut q = p.clone();
        q.p.copy_from_slice(m);
        dot(&reproject(&q, &hat, S, S).unwrap().data, &r.data)
    });
    suite.check_vec("reprojection.vertices", &hat.features, &dhat, &all(dhat.len()), |f| {
        dot(&reproject(&p, &hat.with_features(f.to_vec()), S, S).unwrap().data, &r.data)
    });
}

fn check_losses(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let eps = crate::losses::DEFAULT_EPS;
    let gts: Vec<GroundTruth> = (0..N)
        .map(|_| GroundTruth::from_labels(rand_labels(rng, 2 * S, 2 * S, CLASSES, 3)))
        .collect();
    let probs = softmax_channels(&rand_tensor(rng, N, CLASSES, S, S));
    let cx = all(probs.data.len());
    type LossFn = fn(&Tensor, &[GroundTruth], f64) -> crate::error::Result<(f64, Tensor)>;
    let losses: [(&str, LossFn); 3] = [("loss_raw", loss_raw), ("loss_final", loss_final), ("loss_ba", loss_ba)];
    for (name, loss) in losses {
        let (_, g) = loss(&probs, &gts, eps).expect("loss");
        suite.check_tensor(name, &probs, &g, &cx, |p| loss(p, &gts, eps).unwrap().0);
    }
    let mut edge = rand_tensor(rng, N, 1, S, S);
    edge.data.iter_mut().for_each(|p| *p = 0.5 + 0.45 * *p);
    let (_, g) = loss_edge(&edge, &gts, eps).expect("edge loss");
    suite.check_tensor("loss_edge", &edge, &g, &all(edge.data.len()), |e| loss_edge(e, &gts, eps).unwrap().0);

    let v = K * CLASSES;
    let feats: Vec<f64> = (0..v * C).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let delta = rng.gen_range(0.8..1.6);
    let (_, g) = loss_dis(&feats, v, C, delta).expect("dis loss");
    suite.check_vec("loss_dis", &feats, &g, &all(feats.len()), |f| loss_dis(f, v, C, delta).unwrap().0);
}

fn chain_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        image_size: 48,
        backbone: BackboneConfig {
            channels: [2, 2, 3, 3],
            ..BackboneConfig::default()
        },
        channels: C,
        classes: CLASSES,
        k: K,
        scale_dot: false,
        ablation,
    }
}

fn vertex_indices(model: &Model, images: &Tensor) -> Option<Vec<Vec<usize>>> {
    let fwd = model.forward(images, Mode::Train).ok()?;
    fwd.graph.map(|g| g.into_iter().map(|s| s.vertices.indices).collect())
}

/// Whole-network check of the weighted total loss w.r.t. sampled parameters.
fn check_chain(suite: &mut Suite, rng: &mut ChaCha8Rng, instance: usize) {
    let variants = [
        ("chain", Ablation::default()),
        (
            "chain[no_edge]",
            Ablation {
                no_edge: true,
                ..Ablation::default()
            },
        ),
        (
            "chain[no_graph]",
            Ablation {
                no_graph: true,
                ..Ablation::default()
            },
        ),
        (
            "chain[spatial_pool]",
            Ablation {
                spatial_pool: true,
                ..Ablation::default()
            },
        ),
    ];
    let (prefix, ablation) = variants[instance % variants.len()];
    let mut model = Model::new(chain_config(ablation), rng.gen()).expect("chain config");
    // Larger adjacency than the default init so the graph path matters, and
    // nonzero biases so no ReLU input sits exactly on its kink.
    model.params.graph.adjacency.data.iter_mut().for_each(|a| *a = rng.gen_range(-0.3..0.3));
    for (name, p) in model.params.named_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            p.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    let images = rand_tensor(rng, N, 3, 48, 48);
    let gts: Vec<GroundTruth> = (0..N)
        .map(|_| GroundTruth::from_labels(rand_labels(rng, 48, 48, CLASSES, 8)))
        .collect();
    let loss_cfg = LossConfig::default();
    let (_, grads, _) = model.loss_and_grad(&images, &gts, &loss_cfg).expect("chain forward");
    let base_sel = vertex_indices(&model, &images);
    let h = suite.opts.step;

    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let gnamed = grads.named();
    let mut per_group: Vec<(String, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for (ai, name) in names.iter().enumerate() {
        if ModelParams::is_buffer(name) {
            continue;
        }
        let section = name.split('.').next().unwrap_or(name);
        let group = format!("{prefix}.{section}");
        if !per_group.iter().any(|g| g.0 == group) {
            per_group.push((group.clone(), Vec::new(), Vec::new(), 0));
        }
        let entry = per_group.iter_mut().find(|g| g.0 == group).expect("group");
        let len = gnamed[ai].1.len();
        for j in coords(rng, len, suite.opts.chain_coords) {
            let mut probes = Vec::with_capacity(2);
            let mut flipped = false;
            for delta in [h, -h] {
                let mut probe = model.clone();
                probe.params.named_mut()[ai].1.data[j] += delta;
                if vertex_indices(&probe, &images) != base_sel {
                    flipped = true;
                    break;
                }
                let fwd = probe.forward(&images, Mode::Train).expect("probe forward");
                probes.push(probe.losses(&fwd, &gts, &loss_cfg).expect("probe loss").0.total);
            }
            if flipped {
                entry.3 += 1;
                continue;
            }
            entry.1.push(gnamed[ai].1.data[j]);
            entry.2.push((probes[0] - probes[1]) / (2.0 * h));
        }
    }
    for (group, analytic, numeric, skipped) in per_group {
        suite.record(&group, &analytic, &all(analytic.len()), &numeric);
        suite.group(&group).skipped += skipped;
    }
}

/// All-zero inputs must not produce NaNs anywhere.
fn check_zero_inputs(suite: &mut Suite) {
    let v = K * CLASSES;
    let zeros = VertexSet {
        features: vec![0.0; v * C],
        indices: (0..v).collect(),
        k: K,
        channels: C,
    };
    let mut finite = true;
    let (_, g) = loss_dis(&zeros.features, v, C, 1.0).expect("dis");
    finite &= g.iter().all(|x| x.is_finite());
    let xe = Tensor::zeros(1, C, S, S);
    let p = build_projection(&zeros, &xe, 1.0).expect("projection");
    let (dg, dxe) = build_projection_backward(&zeros, &xe, &p, &vec![1.0; p.p.len()], 1.0);
    finite &= dg.iter().chain(&dxe.data).all(|x| x.is_finite());

    let model = Model::new(chain_config(Ablation::default()), 0).expect("config");
    let images = Tensor::zeros(N, 3, 48, 48);
    let gts: Vec<GroundTruth> = (0..N).map(|_| GroundTruth::from_labels(LabelMap::new(48, 48))).collect();
    match model.loss_and_grad(&images, &gts, &LossConfig::default()) {
        Ok((bundle, grads, _)) => finite &= bundle.total.is_finite() && grads.all_finite(),
        Err(_) => finite = false,
    }
    let g = suite.group("zero_input");
    g.finite &= finite;
    g.checked += 1;
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let start = Instant::now();
    let mut suite = Suite {
        opts: opts.clone(),
        groups: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for i in 0..opts.instances {
        check_ops(&mut suite, &mut rng, i);
        check_heads(&mut suite, &mut rng);
        check_backbone(&mut suite, &mut rng);
        check_graph(&mut suite, &mut rng, i);
        check_losses(&mut suite, &mut rng);
        check_chain(&mut suite, &mut rng, i);
    }
    check_zero_inputs(&mut suite);
    GradcheckReport {
        groups: suite.groups,
        tolerance: opts.tolerance,
        instances: opts.instances,
        elapsed: start.elapsed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckOptions {
        GradcheckOptions {
            instances: 4,
            ..GradcheckOptions::default()
        }
    }

    #[test]
    fn small_run_passes() {
        let report = run_gradcheck(&quick());
        assert!(report.passed(), "{}", report.to_text());
        for name in ["loss_raw", "loss_edge", "loss_ba", "loss_final", "loss_dis", "chain.graph", "zero_input"] {
            assert!(report.groups.iter().any(|g| g.name == name), "missing {name}");
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let opts = GradcheckOptions {
            corrupt: Some("reasoning.adjacency".into()),
            instances: 1,
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts);
        let failures: Vec<_> = report.failures().iter().map(|g| g.name.clone()).collect();
        assert_eq!(failures, vec!["reasoning.adjacency".to_string()]);
    }
}
