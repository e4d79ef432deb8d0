//! Image to features: a small four-stage convolutional backbone, a pyramid
//! pooling context head on the stride-8 output, and the edge branch.
//!
//! Stage 1 output is the low-level map at stride 4, stages 2 and 3 feed the
//! edge branch, stage 4 (dilated, still stride 8) is the high-level map.

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_backward, batch_norm_eval,
    batch_norm_train, conv2d, conv2d_backward, relu_backward, relu_inplace, resize_bilinear,
    resize_bilinear_backward, sigmoid, Align, BatchNormCache, ConvGeometry, Param, Pointwise,
};
use crate::tensor::{EdgeMap, FeatureMap, Tensor};

/// Bin grid sizes of the pyramid pooling head.
pub const PYRAMID_BINS: [usize; 4] = [1, 2, 3, 6];

/// Edge probabilities are kept this far away from 0 and 1.
const EDGE_PROB_FLOOR: f64 = 1e-12;

/// Whether batch norm uses batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stride/dilation of the two convolutions in each backbone stage.
///
/// The stride-4 first stage is split into two stride-2 convolutions so every
/// input pixel is seen by some 3x3 window.
pub const STAGE_GEOMETRY: [[ConvGeometry; 2]; 4] = [
    [
        ConvGeometry { kernel: 3, stride: 2, dilation: 1, pad: 1 },
        ConvGeometry { kernel: 3, stride: 2, dilation: 1, pad: 1 },
    ],
    [
        ConvGeometry { kernel: 3, stride: 1, dilation: 1, pad: 1 },
        ConvGeometry { kernel: 3, stride: 1, dilation: 1, pad: 1 },
    ],
    [
        ConvGeometry { kernel: 3, stride: 2, dilation: 1, pad: 1 },
        ConvGeometry { kernel: 3, stride: 1, dilation: 1, pad: 1 },
    ],
    [
        ConvGeometry { kernel: 3, stride: 1, dilation: 2, pad: 2 },
        ConvGeometry { kernel: 3, stride: 1, dilation: 2, pad: 2 },
    ],
];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of stages 1..4.
    pub channels: [usize; 4],
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// One `conv3x3 -> batch norm -> ReLU` unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub weight: Param,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl ConvBnRelu {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        Self {
            weight: Param::uniform(&[cout, cin, 3, 3], bound, rng),
            gamma: Param::filled(&[cout], 1.0),
            beta: Param::zeros(&[cout]),
            running_mean: Param::zeros(&[cout]),
            running_var: Param::filled(&[cout], 1.0),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
            running_mean: self.running_mean.zeros_like(),
            running_var: self.running_var.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// `stages[s][j]` is convolution `j` of stage `s`.
    pub stages: Vec<[ConvBnRelu; 2]>,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let stages = config
            .channels
            .iter()
            .map(|&cout| {
                let pair = [ConvBnRelu::new(cin, cout, rng), ConvBnRelu::new(cout, cout, rng)];
                cin = cout;
                pair
            })
            .collect();
        Self { stages }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self
                .stages
                .iter()
                .map(|[a, b]| [a.zeros_like(), b.zeros_like()])
                .collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (s, pair) in self.stages.iter().enumerate() {
            for (j, u) in pair.iter().enumerate() {
                let p = format!("backbone.s{}.c{}", s + 1, j + 1);
                out.push((format!("{p}.weight"), &u.weight));
                out.push((format!("{p}.gamma"), &u.gamma));
                out.push((format!("{p}.beta"), &u.beta));
                out.push((format!("{p}.running_mean"), &u.running_mean));
                out.push((format!("{p}.running_var"), &u.running_var));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (s, pair) in self.stages.iter_mut().enumerate() {
            for (j, u) in pair.iter_mut().enumerate() {
                let p = format!("backbone.s{}.c{}", s + 1, j + 1);
                out.push((format!("{p}.weight"), &mut u.weight));
                out.push((format!("{p}.gamma"), &mut u.gamma));
                out.push((format!("{p}.beta"), &mut u.beta));
                out.push((format!("{p}.running_mean"), &mut u.running_mean));
                out.push((format!("{p}.running_var"), &mut u.running_var));
            }
        }
        out
    }

    fn validate(&self, image_channels: usize) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(config_err!("backbone needs 4 stages, got {}", self.stages.len()));
        }
        let mut cin = image_channels;
        for (s, pair) in self.stages.iter().enumerate() {
            for u in pair {
                let sh = &u.weight.shape;
                if sh.len() != 4 || sh[1] != cin || sh[2] != 3 || sh[3] != 3 {
                    return Err(config_err!(
                        "stage {} kernel shape {:?} does not accept {cin} input channels",
                        s + 1,
                        sh
                    ));
                }
                cin = sh[0];
            }
        }
        Ok(())
    }
}

/// Feature maps handed to the rest of the network.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Stage 1, stride 4.
    pub low: FeatureMap,
    /// Stage 2, stride 4.
    pub mid_a: FeatureMap,
    /// Stage 3 bilinearly resampled from stride 8 to stride 4.
    pub mid_b: FeatureMap,
    /// Stage 4, stride 8.
    pub high: FeatureMap,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    /// `inputs[i]` is the input of unit `i` (8 units, flattened).
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    bn: Vec<Option<BatchNormCache>>,
    stage3_size: (usize, usize),
}

impl BackboneCache {
    /// Batch statistics (mean, unbiased variance) per unit, for running averages.
    pub fn batch_stats(&self) -> impl Iterator<Item = Option<(&[f64], &[f64])>> {
        self.bn
            .iter()
            .map(|c| c.as_ref().map(|c| (c.mean.as_slice(), c.var_unbiased.as_slice())))
    }
}

/// Run the backbone on a batch of RGB images (`N x 3 x H x W`).
pub fn backbone_forward(
    image: &Tensor,
    params: &BackboneParams,
    config: &BackboneConfig,
    mode: Mode,
) -> Result<(BackboneOutput, BackboneCache)> {
    if image.c != 3 {
        return Err(config_err!("image must have 3 channels, got {}", image.c));
    }
    if image.h % 8 != 0 || image.w % 8 != 0 || image.h == 0 || image.w == 0 {
        return Err(config_err!(
            "image size {}x{} is not a positive multiple of 8",
            image.h,
            image.w
        ));
    }
    params.validate(image.c)?;
    for (s, pair) in params.stages.iter().enumerate() {
        if pair[1].weight.shape[0] != config.channels[s] {
            return Err(config_err!(
                "stage {} has {} channels, config says {}",
                s + 1,
                pair[1].weight.shape[0],
                config.channels[s]
            ));
        }
    }

    let mut inputs = Vec::with_capacity(8);
    let mut outputs = Vec::with_capacity(8);
    let mut bn = Vec::with_capacity(8);
    let mut x = image.clone();
    for (s, pair) in params.stages.iter().enumerate() {
        for (j, unit) in pair.iter().enumerate() {
            let z = conv2d(&x, &unit.weight, None, STAGE_GEOMETRY[s][j])?;
            let (mut y, cache) = match mode {
                Mode::Train => {
                    let (y, c) = batch_norm_train(&z, &unit.gamma, &unit.beta, config.bn_eps);
                    (y, Some(c))
                }
                Mode::Eval => (
                    batch_norm_eval(
                        &z,
                        &unit.gamma,
                        &unit.beta,
                        &unit.running_mean,
                        &unit.running_var,
                        config.bn_eps,
                    ),
                    None,
                ),
            };
            relu_inplace(&mut y);
            if !y.is_finite() {
                return Err(Error::Numeric {
                    location: format!("backbone stage {}", s + 1),
                    detail: "non-finite activation".into(),
                });
            }
            inputs.push(std::mem::replace(&mut x, y.clone()));
            outputs.push(y);
            bn.push(cache);
        }
    }

    let low = outputs[1].clone();
    let mid_a = outputs[3].clone();
    let s3 = &outputs[5];
    let mid_b = resize_bilinear(s3, low.h, low.w, Align::Strided);
    let high = outputs[7].clone();
    let stage3_size = (s3.h, s3.w);
    Ok((
        BackboneOutput {
            low,
            mid_a,
            mid_b,
            high,
        },
        BackboneCache {
            inputs,
            outputs,
            bn,
            stage3_size,
        },
    ))
}

/// Backpropagate gradients arriving at the four backbone outputs. Requires a
/// training-mode cache.
pub fn backbone_backward(
    params: &BackboneParams,
    cache: &BackboneCache,
    d_low: &Tensor,
    d_mid_a: &Tensor,
    d_mid_b: &Tensor,
    d_high: &Tensor,
    grads: &mut BackboneParams,
) -> Result<()> {
    let (h3, w3) = cache.stage3_size;
    let mut injected: Vec<Option<Tensor>> = vec![None; 8];
    injected[1] = Some(d_low.clone());
    injected[3] = Some(d_mid_a.clone());
    injected[5] = Some(resize_bilinear_backward(d_mid_b, h3, w3, Align::Strided));
    injected[7] = Some(d_high.clone());

    let mut carry: Option<Tensor> = None;
    for unit_idx in (0..8).rev() {
        let (s, j) = (unit_idx / 2, unit_idx % 2);
        let mut dy = match (carry.take(), injected[unit_idx].take()) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                a
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => Tensor::zeros_like(&cache.outputs[unit_idx]),
        };
        dy = relu_backward(&cache.outputs[unit_idx], &dy);
        let unit = &params.stages[s][j];
        let g = &mut grads.stages[s][j];
        let bn = cache.bn[unit_idx]
            .as_ref()
            .ok_or_else(|| config_err!("backbone backward needs a training-mode forward pass"))?;
        let dz = batch_norm_backward(&dy, bn, &unit.gamma, &mut g.gamma, &mut g.beta);
        let dx = conv2d_backward(
            &cache.inputs[unit_idx],
            &unit.weight,
            STAGE_GEOMETRY[s][j],
            &dz,
            &mut g.weight,
            None,
        );
        carry = Some(dx);
    }
    Ok(())
}

/// Pyramid pooling head: one 1x1 reduction per bin size.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub branches: Vec<Pointwise>,
}

impl PyramidParams {
    pub fn init(high_channels: usize, rng: &mut impl Rng) -> Self {
        let reduced = (high_channels / 4).max(1);
        Self {
            branches: PYRAMID_BINS
                .iter()
                .map(|_| Pointwise::init(high_channels, reduced, rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            branches: self.branches.iter().map(Pointwise::zeros_like).collect(),
        }
    }

    pub fn out_channels(&self, high_channels: usize) -> usize {
        high_channels + self.branches.iter().map(Pointwise::out_channels).sum::<usize>()
    }

    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (b, br) in PYRAMID_BINS.iter().zip(&self.branches) {
            out.push((format!("pyramid.b{b}.weight"), &br.weight));
            out.push((format!("pyramid.b{b}.bias"), &br.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (b, br) in PYRAMID_BINS.iter().zip(self.branches.iter_mut()) {
            out.push((format!("pyramid.b{b}.weight"), &mut br.weight));
            out.push((format!("pyramid.b{b}.bias"), &mut br.bias));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PyramidCache {
    pooled: Vec<Tensor>,
    reduced: Vec<Tensor>,
    high_size: (usize, usize),
    high_channels: usize,
}

/// Append pooled-reduced-upsampled context to the high-level map:
/// `[high, up(relu(conv(pool_b(high)))) for b in 1,2,3,6]`.
pub fn pyramid_pool(high: &FeatureMap, params: &PyramidParams) -> Result<(FeatureMap, PyramidCache)> {
    let largest = *PYRAMID_BINS.iter().max().unwrap_or(&1);
    if high.h < largest || high.w < largest {
        return Err(config_err!(
            "pyramid pooling needs at least {largest}x{largest}, got {}x{}",
            high.h,
            high.w
        ));
    }
    if params.branches.len() != PYRAMID_BINS.len() {
        return Err(config_err!("pyramid needs {} branches", PYRAMID_BINS.len()));
    }
    let mut pooled = Vec::new();
    let mut reduced = Vec::new();
    let mut ups = Vec::new();
    for (&bins, branch) in PYRAMID_BINS.iter().zip(&params.branches) {
        let p = adaptive_avg_pool(high, bins);
        let mut r = branch.forward(&p)?;
        relu_inplace(&mut r);
        ups.push(resize_bilinear(&r, high.h, high.w, Align::Corners));
        pooled.push(p);
        reduced.push(r);
    }
    let mut parts: Vec<&Tensor> = vec![high];
    parts.extend(ups.iter());
    let out = Tensor::concat_channels(&parts)?;
    Ok((
        out,
        PyramidCache {
            pooled,
            reduced,
            high_size: (high.h, high.w),
            high_channels: high.c,
        },
    ))
}

pub fn pyramid_pool_backward(
    params: &PyramidParams,
    cache: &PyramidCache,
    d_out: &Tensor,
    grads: &mut PyramidParams,
) -> Tensor {
    let mut sizes = vec![cache.high_channels];
    sizes.extend(params.branches.iter().map(Pointwise::out_channels));
    let mut parts = d_out.split_channels(&sizes).into_iter();
    let mut d_high = parts.next().expect("high part");
    let (h, w) = cache.high_size;
    for (i, d_up) in parts.enumerate() {
        let r = &cache.reduced[i];
        let d_r = resize_bilinear_backward(&d_up, r.h, r.w, Align::Corners);
        let d_r = relu_backward(r, &d_r);
        let d_p = params.branches[i].backward(&cache.pooled[i], &d_r, &mut grads.branches[i]);
        d_high.add_assign(&adaptive_avg_pool_backward(&d_p, h, w));
    }
    d_high
}

#[derive(Clone, Debug)]
pub struct EdgeCache {
    concat: Tensor,
    sizes: Vec<usize>,
}

/// Concatenate stride-4 maps and apply a 1x1 convolution with logistic
/// squashing, yielding per-pixel edge probabilities strictly inside (0, 1).
pub fn predict_edge(mids: &[&FeatureMap], conv: &Pointwise) -> Result<(EdgeMap, EdgeCache)> {
    let first = mids.first().ok_or_else(|| config_err!("edge branch needs inputs"))?;
    for m in mids {
        if m.h != first.h || m.w != first.w {
            return Err(config_err!(
                "edge branch inputs disagree spatially: {}x{} vs {}x{}",
                first.h,
                first.w,
                m.h,
                m.w
            ));
        }
    }
    let concat = Tensor::concat_channels(mids)?;
    if conv.in_channels() != concat.c || conv.out_channels() != 1 {
        return Err(config_err!(
            "edge conv expects {} -> 1 channels, got {} -> {}",
            concat.c,
            conv.in_channels(),
            conv.out_channels()
        ));
    }
    let mut e = conv.forward(&concat)?;
    for v in &mut e.data {
        *v = sigmoid(*v).clamp(EDGE_PROB_FLOOR, 1.0 - EDGE_PROB_FLOOR);
    }
    let sizes = mids.iter().map(|m| m.c).collect();
    Ok((e, EdgeCache { concat, sizes }))
}

/// Returns gradients for each input map, in order.
pub fn predict_edge_backward(
    conv: &Pointwise,
    cache: &EdgeCache,
    edge: &EdgeMap,
    d_edge: &EdgeMap,
    grad: &mut Pointwise,
) -> Vec<Tensor> {
    let mut d_logit = d_edge.clone();
    for (g, &p) in d_logit.data.iter_mut().zip(&edge.data) {
        *g *= p * (1.0 - p);
    }
    let d_concat = conv.backward(&cache.concat, &d_logit, grad);
    d_concat.split_channels(&cache.sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn backbone_strides_for_default_config() {
        let cfg = BackboneConfig::default();
        let params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let img = random(1, 3, 96, 96, 2);
        let (out, _) = backbone_forward(&img, &params, &cfg, Mode::Train).unwrap();
        assert_eq!(out.low.shape(), [1, 16, 24, 24]);
        assert_eq!(out.mid_a.shape(), [1, 32, 24, 24]);
        assert_eq!(out.mid_b.shape(), [1, 64, 24, 24]);
        assert_eq!(out.high.shape(), [1, 64, 12, 12]);
    }

    #[test]
    fn backbone_rejects_bad_sizes() {
        let cfg = BackboneConfig::default();
        let params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            backbone_forward(&Tensor::zeros(1, 3, 20, 24), &params, &cfg, Mode::Eval),
            Err(Error::Config(_))
        ));
        assert!(backbone_forward(&Tensor::zeros(1, 1, 24, 24), &params, &cfg, Mode::Eval).is_err());
        let other = BackboneConfig {
            channels: [8, 8, 8, 8],
            ..cfg.clone()
        };
        assert!(backbone_forward(&Tensor::zeros(1, 3, 24, 24), &params, &other, Mode::Eval).is_err());
    }

    #[test]
    fn backbone_flags_non_finite_stage() {
        let cfg = BackboneConfig::default();
        let mut params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        params.stages[2][0].beta.data[0] = f64::INFINITY;
        let err = backbone_forward(&random(1, 3, 48, 48, 3), &params, &cfg, Mode::Train).unwrap_err();
        match err {
            Error::Numeric { location, .. } => assert_eq!(location, "backbone stage 3"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = BackboneConfig::default();
        let params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        for mode in [Mode::Train, Mode::Eval] {
            let (out, _) = backbone_forward(&Tensor::zeros(2, 3, 48, 48), &params, &cfg, mode).unwrap();
            for t in [&out.low, &out.mid_a, &out.mid_b, &out.high] {
                assert!(t.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn backbone_is_deterministic() {
        let cfg = BackboneConfig::default();
        let params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let img = random(2, 3, 48, 48, 8);
        let (a, _) = backbone_forward(&img, &params, &cfg, Mode::Train).unwrap();
        let (b, _) = backbone_forward(&img, &params, &cfg, Mode::Train).unwrap();
        assert_eq!(a.high.data, b.high.data);
        assert_eq!(a.low.data, b.low.data);
    }

    /// 1-channel stages with hand-set kernels in inference mode with identity
    /// statistics reduce to `relu(conv(x) / sqrt(1 + eps))` per unit.
    #[test]
    fn single_channel_backbone_matches_direct_convolution() {
        let cfg = BackboneConfig {
            channels: [1, 1, 1, 1],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        let mut params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let kernels: Vec<Vec<f64>> = (0..8)
            .map(|u| (0..9).map(|i| ((u * 9 + i) as f64 * 0.61).sin() * 0.5 + 0.2).collect())
            .collect();
        for (u, k) in kernels.iter().enumerate() {
            let unit = &mut params.stages[u / 2][u % 2];
            let cin = unit.weight.shape[1];
            unit.weight.data = (0..cin).flat_map(|_| k.clone()).collect();
        }
        let img = random(1, 3, 8, 8, 21);

        let scale = 1.0 / (1.0 + cfg.bn_eps).sqrt();
        let mut x: Vec<Vec<f64>> = (0..3).map(|c| img.plane(0, c).to_vec()).collect();
        let (mut h, mut w) = (8usize, 8usize);
        let mut outs = Vec::new();
        for (u, k) in kernels.iter().enumerate() {
            let g = STAGE_GEOMETRY[u / 2][u % 2];
            let ho = (h + 2 * g.pad - 2 * g.dilation - 1) / g.stride + 1;
            let wo = (w + 2 * g.pad - 2 * g.dilation - 1) / g.stride + 1;
            let mut y = vec![0.0; ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for plane in &x {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * g.stride + ky * g.dilation) as i64 - g.pad as i64;
                                let ix = (ox * g.stride + kx * g.dilation) as i64 - g.pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += plane[iy as usize * w + ix as usize] * k[ky * 3 + kx];
                                }
                            }
                        }
                    }
                    y[oy * wo + ox] = (s * scale).max(0.0);
                }
            }
            x = vec![y.clone()];
            h = ho;
            w = wo;
            outs.push(y);
        }

        let (out, _) = backbone_forward(&img, &params, &cfg, Mode::Eval).unwrap();
        for (got, want) in [(&out.low, &outs[1]), (&out.mid_a, &outs[3]), (&out.high, &outs[7])] {
            for (a, b) in got.data.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_of_constant_map_is_constant() {
        let c = 0.8;
        let high = Tensor::filled(1, 8, 12, 12, c);
        let mut params = PyramidParams::init(8, &mut ChaCha8Rng::seed_from_u64(2));
        for br in &mut params.branches {
            br.weight.data.fill(1.0 / 8.0);
        }
        let (out, _) = pyramid_pool(&high, &params).unwrap();
        assert_eq!(out.shape(), [1, 16, 12, 12]);
        for v in &out.data {
            assert!((v - c).abs() < 1e-12);
        }
        // Spatial constancy holds for arbitrary weights as well.
        let params = PyramidParams::init(8, &mut ChaCha8Rng::seed_from_u64(3));
        let (out, _) = pyramid_pool(&high, &params).unwrap();
        for ch in 0..out.c {
            let p = out.plane(0, ch);
            assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-12));
        }
    }

    /// Reference: average each bin by explicit loops, then upsample with
    /// align-corners bilinear weights computed from scratch.
    #[test]
    fn pyramid_matches_pool_then_upsample_oracle() {
        let high = random(1, 4, 12, 12, 17);
        let mut params = PyramidParams::init(4, &mut ChaCha8Rng::seed_from_u64(5));
        for br in &mut params.branches {
            br.weight.data = vec![1.0, 0.0, 0.0, 0.0];
            br.bias.data = vec![0.0];
        }
        let (out, _) = pyramid_pool(&high, &params).unwrap();
        let plane = high.plane(0, 0);
        for (bi, &bins) in PYRAMID_BINS.iter().enumerate() {
            let cell = 12 / bins;
            let mut pooled = vec![0.0; bins * bins];
            for by in 0..bins {
                for bx in 0..bins {
                    let mut s = 0.0;
                    for y in by * cell..(by + 1) * cell {
                        for x in bx * cell..(bx + 1) * cell {
                            s += plane[y * 12 + x];
                        }
                    }
                    pooled[by * bins + bx] = s / (cell * cell) as f64;
                }
            }
            for y in 0..12 {
                for x in 0..12 {
                    let (sy, sx) = if bins == 1 {
                        (0.0, 0.0)
                    } else {
                        (y as f64 * (bins - 1) as f64 / 11.0, x as f64 * (bins - 1) as f64 / 11.0)
                    };
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(bins - 1), (x0 + 1).min(bins - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let want = pooled[y0 * bins + x0] * (1.0 - fy) * (1.0 - fx)
                        + pooled[y0 * bins + x1] * (1.0 - fy) * fx
                        + pooled[y1 * bins + x0] * fy * (1.0 - fx)
                        + pooled[y1 * bins + x1] * fy * fx;
                    assert!((out.at(0, 4 + bi, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pyramid_rejects_small_maps() {
        let params = PyramidParams::init(4, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(pyramid_pool(&Tensor::zeros(1, 4, 5, 12), &params).is_err());
    }

    #[test]
    fn edge_of_zero_weights_is_one_half() {
        let conv = Pointwise::zeros(3, 1);
        let f = Tensor::zeros(1, 3, 4, 4);
        let (e, _) = predict_edge(&[&f], &conv).unwrap();
        assert!(e.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn edge_single_channel_is_logistic_of_input() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![-1.5, 0.0, 0.3, 4.0]).unwrap();
        let mut conv = Pointwise::zeros(1, 1);
        conv.weight.data[0] = 1.0;
        let (e, _) = predict_edge(&[&x], &conv).unwrap();
        for (p, v) in e.data.iter().zip(&x.data) {
            assert!((p - 1.0 / (1.0 + (-v).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_stays_strictly_inside_unit_interval() {
        let x = Tensor::from_vec(1, 1, 1, 4, vec![-1e4, -50.0, 50.0, 1e4]).unwrap();
        let mut conv = Pointwise::zeros(1, 1);
        conv.weight.data[0] = 1.0;
        let (e, _) = predict_edge(&[&x], &conv).unwrap();
        assert!(e.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn edge_rejects_mismatched_inputs() {
        let a = Tensor::zeros(1, 1, 4, 4);
        let b = Tensor::zeros(1, 1, 2, 2);
        assert!(predict_edge(&[&a, &b], &Pointwise::zeros(2, 1)).is_err());
    }
}
