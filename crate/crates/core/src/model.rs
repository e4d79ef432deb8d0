//! The full network: backbone, context head, edge branch, projection,
//! reasoning, reprojection and both parsing heads, with one forward path
//! shared by training, evaluation and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::feature_extraction::{
    backbone_backward, backbone_forward, predict_edge, predict_edge_backward, pyramid_pool,
    pyramid_pool_backward, BackboneCache, BackboneConfig, BackboneOutput, BackboneParams, EdgeCache,
    Mode, PyramidCache, PyramidParams,
};
use crate::graph_projection::{
    fuse_features, fuse_features_backward, predict_raw_parsing, predict_raw_parsing_backward,
    scatter_vertex_grad, select_vertices, spatial_pool_vertices, spatial_pool_vertices_backward,
    split_edge_features, split_edge_features_backward, FuseCache, FusedFeatures, RawParsing, VertexSet,
};
use crate::graph_reasoning::{reason, reason_backward, GraphParams, ReasonCache};
use crate::graph_reprojection::{
    build_projection, build_projection_backward, predict_final, predict_final_backward, reproject,
    reproject_backward, FinalParsing, ProjectionMatrix,
};
use crate::losses::{loss_ba, loss_dis, loss_edge, loss_final, loss_raw, total_loss, GroundTruth, Lambdas, LossBundle, LossComponents};
use crate::ops::{Param, Pointwise};
use crate::tensor::{EdgeMap, Tensor};

/// Switches that each remove one mechanism.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Drop projection, reasoning and reprojection: `Y = conv(x0)`.
    pub no_graph: bool,
    /// Drop the edge branch: features are not split, `xe = xne = x0`.
    pub no_edge: bool,
    /// Replace top-k vertex selection by regular-grid average pooling.
    pub spatial_pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    /// Fused channel count `C`.
    pub channels: usize,
    pub classes: usize,
    /// Vertices per class.
    pub k: usize,
    /// Scale projection logits by `1 / sqrt(C)`.
    pub scale_dot: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            backbone: BackboneConfig::default(),
            channels: 64,
            classes: crate::synthetic::NUM_CLASSES,
            k: 4,
            scale_dot: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn vertices(&self) -> usize {
        self.k * self.classes
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(config_err!("image size {} is not a positive multiple of 8", self.image_size));
        }
        if self.image_size / 8 < 6 {
            return Err(config_err!("image size {} leaves less than 6x6 for pyramid pooling", self.image_size));
        }
        if self.channels == 0 || self.classes < 2 || self.k == 0 {
            return Err(config_err!("channels, classes (>= 2) and k must be positive"));
        }
        if self.backbone.channels.iter().any(|&c| c == 0) {
            return Err(config_err!("backbone channels must be positive"));
        }
        let fs = self.feature_size();
        if self.k > fs * fs {
            return Err(config_err!("k = {} exceeds the {fs}x{fs} feature grid", self.k));
        }
        Ok(())
    }

    fn projection_scale(&self) -> f64 {
        if self.scale_dot {
            1.0 / (self.channels as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// All learnable weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub pyramid: PyramidParams,
    pub edge: Pointwise,
    pub fuse: Pointwise,
    pub raw: Pointwise,
    pub graph: GraphParams,
    pub final_conv: Pointwise,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.backbone.channels;
        let backbone = BackboneParams::init(&config.backbone, &mut rng);
        let pyramid = PyramidParams::init(ch[3], &mut rng);
        let edge = Pointwise::init(ch[0] + ch[1] + ch[2], 1, &mut rng);
        let fuse = Pointwise::init(ch[0] + pyramid.out_channels(ch[3]), config.channels, &mut rng);
        let raw = Pointwise::init(config.channels, config.classes, &mut rng);
        let graph = GraphParams::init(config.vertices(), config.channels, &mut rng);
        let final_conv = Pointwise::init(config.channels, config.classes, &mut rng);
        Self {
            backbone,
            pyramid,
            edge,
            fuse,
            raw,
            graph,
            final_conv,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            pyramid: self.pyramid.zeros_like(),
            edge: self.edge.zeros_like(),
            fuse: self.fuse.zeros_like(),
            raw: self.raw.zeros_like(),
            graph: self.graph.zeros_like(),
            final_conv: self.final_conv.zeros_like(),
        }
    }

    /// Every array with its stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = self.backbone.named();
        out.extend(self.pyramid.named());
        for (prefix, conv) in [("edge", &self.edge), ("fuse", &self.fuse), ("raw", &self.raw)] {
            out.push((format!("{prefix}.weight"), &conv.weight));
            out.push((format!("{prefix}.bias"), &conv.bias));
        }
        out.push(("graph.adjacency".into(), &self.graph.adjacency));
        out.push(("graph.weight".into(), &self.graph.weight));
        out.push(("final.weight".into(), &self.final_conv.weight));
        out.push(("final.bias".into(), &self.final_conv.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.backbone.named_mut();
        out.extend(self.pyramid.named_mut());
        for (prefix, conv) in [("edge", &mut self.edge), ("fuse", &mut self.fuse), ("raw", &mut self.raw)] {
            out.push((format!("{prefix}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.bias"), &mut conv.bias));
        }
        out.push(("graph.adjacency".into(), &mut self.graph.adjacency));
        out.push(("graph.weight".into(), &mut self.graph.weight));
        out.push(("final.weight".into(), &mut self.final_conv.weight));
        out.push(("final.bias".into(), &mut self.final_conv.bias));
        out
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Graph-branch state of one image.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub vertices: VertexSet,
    pooled_cells: Option<Vec<(usize, usize, usize, usize)>>,
    pub reasoned: VertexSet,
    reason_cache: ReasonCache,
    pub projection: ProjectionMatrix,
    xe: Tensor,
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub mode: Mode,
    pub backbone: BackboneOutput,
    backbone_cache: BackboneCache,
    pub pooled: Tensor,
    pyramid_cache: PyramidCache,
    pub edge: Option<EdgeMap>,
    edge_cache: Option<EdgeCache>,
    pub fused: FusedFeatures,
    fuse_cache: FuseCache,
    pub raw: RawParsing,
    pub graph: Option<Vec<GraphState>>,
    pub final_: FinalParsing,
    final_sum: Tensor,
}

/// Loss settings shared by training and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambdas: Lambdas,
    pub delta: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            delta: 1.0,
            eps: crate::losses::DEFAULT_EPS,
        }
    }
}

/// Gradients of the weighted total loss w.r.t. the network outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub raw_probs: Tensor,
    pub edge: Option<Tensor>,
    pub final_probs: Tensor,
    /// Per-image gradient w.r.t. the pre-reasoning vertex features.
    pub vertices: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Run the whole network on a batch `N x 3 x H x W`.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let cfg = &self.config;
        let p = &self.params;
        let (backbone, backbone_cache) = backbone_forward(images, &p.backbone, &cfg.backbone, mode)?;
        let (pooled, pyramid_cache) = pyramid_pool(&backbone.high, &p.pyramid)?;
        let (fused, fuse_cache) = fuse_features(&backbone.low, &pooled, &p.fuse)?;
        fused.x0.ensure_finite("fused features")?;

        let (edge, edge_cache) = if cfg.ablation.no_edge {
            (None, None)
        } else {
            let (e, c) = predict_edge(&[&backbone.low, &backbone.mid_a, &backbone.mid_b], &p.edge)?;
            (Some(e), Some(c))
        };
        let raw = predict_raw_parsing(&fused.x0, &p.raw)?;

        let (graph, xp) = if cfg.ablation.no_graph {
            (None, None)
        } else {
            let split = match &edge {
                Some(e) => Some(split_edge_features(&fused.x0, e)?),
                None => None,
            };
            let (h, w) = (fused.x0.h, fused.x0.w);
            let scale = cfg.projection_scale();
            let mut states = Vec::with_capacity(images.n);
            let mut xps = Vec::with_capacity(images.n);
            for i in 0..images.n {
                let (xe, xne) = match &split {
                    Some(s) => (s.xe.batch_item(i), s.xne.batch_item(i)),
                    None => {
                        let x = fused.x0.batch_item(i);
                        (x.clone(), x)
                    }
                };
                let (vertices, pooled_cells) = if cfg.ablation.spatial_pool {
                    let (v, cells) = spatial_pool_vertices(&xne, cfg.vertices(), cfg.k)?;
                    (v, Some(cells))
                } else {
                    (select_vertices(&xne, &raw.probs.batch_item(i), cfg.k)?, None)
                };
                let (reasoned, reason_cache) = reason(&vertices, &p.graph)?;
                let projection = build_projection(&vertices, &xe, scale)?;
                xps.push(reproject(&projection, &reasoned, h, w)?);
                states.push(GraphState {
                    vertices,
                    pooled_cells,
                    reasoned,
                    reason_cache,
                    projection,
                    xe,
                });
            }
            (Some(states), Some(Tensor::stack(&xps)?))
        };

        let (final_, final_sum) = predict_final(&fused.x0, xp.as_ref(), &p.final_conv, images.h, images.w)?;
        final_.logits.ensure_finite("final logits")?;
        Ok(ForwardPass {
            mode,
            backbone,
            backbone_cache,
            pooled,
            pyramid_cache,
            edge,
            edge_cache,
            fused,
            fuse_cache,
            raw,
            graph,
            final_,
            final_sum,
        })
    }

    /// Evaluate the five losses and their gradients w.r.t. network outputs.
    pub fn losses(&self, fwd: &ForwardPass, gts: &[GroundTruth], cfg: &LossConfig) -> Result<(LossBundle, OutputGrads)> {
        let lam = cfg.lambdas;
        lam.validate()?;
        let (raw, mut d_raw) = loss_raw(&fwd.raw.probs, gts, cfg.eps)?;
        let (final_, mut d_final) = loss_final(&fwd.final_.full_probs, gts, cfg.eps)?;
        let (ba, d_ba) = loss_ba(&fwd.final_.full_probs, gts, cfg.eps)?;
        scale(&mut d_raw, lam.raw);
        scale(&mut d_final, lam.final_);
        for (a, b) in d_final.data.iter_mut().zip(&d_ba.data) {
            *a += lam.ba * b;
        }
        let (edge, d_edge) = match &fwd.edge {
            Some(e) => {
                let (l, mut g) = loss_edge(e, gts, cfg.eps)?;
                scale(&mut g, lam.edge);
                (l, Some(g))
            }
            None => (0.0, None),
        };
        let (dis, d_vertices) = match &fwd.graph {
            Some(states) => {
                let n = states.len() as f64;
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(states.len());
                for s in states {
                    let (l, mut g) = loss_dis(&s.vertices.features, s.vertices.len(), s.vertices.channels, cfg.delta)?;
                    total += l / n;
                    g.iter_mut().for_each(|v| *v *= lam.dis / n);
                    grads.push(g);
                }
                (total, grads)
            }
            None => (0.0, Vec::new()),
        };
        let bundle = total_loss(
            LossComponents {
                raw,
                edge,
                ba,
                final_,
                dis,
            },
            lam,
        )?;
        Ok((
            bundle,
            OutputGrads {
                raw_probs: d_raw,
                edge: d_edge,
                final_probs: d_final,
                vertices: d_vertices,
            },
        ))
    }

    /// Gradients of the total loss w.r.t. every parameter. Needs a
    /// training-mode forward pass.
    pub fn backward(&self, fwd: &ForwardPass, out: &OutputGrads) -> Result<ModelParams> {
        let p = &self.params;
        let cfg = &self.config;
        let mut g = p.zeros_like();

        let d_sum = predict_final_backward(&p.final_conv, &fwd.final_sum, &fwd.final_, &out.final_probs, &mut g.final_conv);
        let mut d_x0 = d_sum.clone();
        let mut d_edge = out.edge.clone();

        if let Some(states) = &fwd.graph {
            let x0 = &fwd.fused.x0;
            let scale = cfg.projection_scale();
            let mut d_xe = Tensor::zeros_like(x0);
            let mut d_xne = Tensor::zeros_like(x0);
            for (i, s) in states.iter().enumerate() {
                let d_xp = d_sum.batch_item(i);
                let (d_p, d_hat) = reproject_backward(&s.projection, &s.reasoned, &d_xp);
                let mut d_v = reason_backward(&s.vertices, &p.graph, &s.reason_cache, &d_hat, &mut g.graph);
                let (d_v_proj, d_xe_i) = build_projection_backward(&s.vertices, &s.xe, &s.projection, &d_p, scale);
                for ((a, b), c) in d_v.iter_mut().zip(&d_v_proj).zip(&out.vertices[i]) {
                    *a += b + c;
                }
                let d_xne_i = match &s.pooled_cells {
                    Some(cells) => spatial_pool_vertices_backward(cells, &d_v, x0.c, x0.h, x0.w),
                    None => scatter_vertex_grad(&s.vertices, &d_v, x0.h, x0.w),
                };
                d_xe.image_mut(i).copy_from_slice(&d_xe_i.data);
                d_xne.image_mut(i).copy_from_slice(&d_xne_i.data);
            }
            match &fwd.edge {
                Some(e) => {
                    let (dx, de) = split_edge_features_backward(x0, e, &d_xe, &d_xne);
                    d_x0.add_assign(&dx);
                    match &mut d_edge {
                        Some(acc) => acc.add_assign(&de),
                        None => d_edge = Some(de),
                    }
                }
                None => {
                    d_x0.add_assign(&d_xe);
                    d_x0.add_assign(&d_xne);
                }
            }
        }

        d_x0.add_assign(&predict_raw_parsing_backward(&fwd.fused.x0, &p.raw, &fwd.raw, &out.raw_probs, &mut g.raw));
        let (mut d_low, d_pooled) = fuse_features_backward(&p.fuse, &fwd.fuse_cache, &d_x0, &mut g.fuse);
        let d_high = pyramid_pool_backward(&p.pyramid, &fwd.pyramid_cache, &d_pooled, &mut g.pyramid);

        let bo = &fwd.backbone;
        let (d_mid_a, d_mid_b) = match (&fwd.edge, &fwd.edge_cache, &d_edge) {
            (Some(e), Some(cache), Some(de)) => {
                let mut parts = predict_edge_backward(&p.edge, cache, e, de, &mut g.edge).into_iter();
                d_low.add_assign(&parts.next().expect("low"));
                (parts.next().expect("mid_a"), parts.next().expect("mid_b"))
            }
            _ => (Tensor::zeros_like(&bo.mid_a), Tensor::zeros_like(&bo.mid_b)),
        };
        backbone_backward(&p.backbone, &fwd.backbone_cache, &d_low, &d_mid_a, &d_mid_b, &d_high, &mut g.backbone)?;
        Ok(g)
    }

    /// Forward, losses and backward in one go.
    pub fn loss_and_grad(&self, images: &Tensor, gts: &[GroundTruth], cfg: &LossConfig) -> Result<(LossBundle, ModelParams, ForwardPass)> {
        let fwd = self.forward(images, Mode::Train)?;
        let (bundle, out) = self.losses(&fwd, gts, cfg)?;
        let grads = self.backward(&fwd, &out)?;
        Ok((bundle, grads, fwd))
    }

    /// Fold the batch statistics of a training pass into the running estimates.
    pub fn update_running_stats(&mut self, fwd: &ForwardPass) {
        let m = self.config.backbone.bn_momentum;
        let stats: Vec<_> = fwd.backbone_cache.batch_stats().collect();
        for (unit, stat) in self.params.backbone.stages.iter_mut().flat_map(|s| s.iter_mut()).zip(stats) {
            if let Some((mean, var)) = stat {
                for (r, b) in unit.running_mean.data.iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in unit.running_var.data.iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }

    /// Inference-mode forward pass.
    pub fn infer(&self, images: &Tensor) -> Result<ForwardPass> {
        self.forward(images, Mode::Eval)
    }
}

fn scale(t: &mut Tensor, s: f64) {
    t.data.iter_mut().for_each(|v| *v *= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_sample, FaceSketchParams};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 48,
            backbone: BackboneConfig {
                channels: [4, 4, 8, 8],
                ..BackboneConfig::default()
            },
            channels: 8,
            classes: 11,
            k: 2,
            ..ModelConfig::default()
        }
    }

    fn batch(size: usize, seeds: &[u64]) -> (Tensor, Vec<GroundTruth>) {
        let samples: Vec<_> = seeds
            .iter()
            .map(|&s| {
                generate_sample(&FaceSketchParams {
                    size,
                    ..FaceSketchParams::new(s, 0.5)
                })
                .unwrap()
            })
            .collect();
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap();
        let gts = samples.into_iter().map(|s| GroundTruth::from_labels(s.labels)).collect();
        (images, gts)
    }

    #[test]
    fn forward_shapes_and_vertex_count() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let (images, _) = batch(48, &[1, 2]);
        let fwd = model.forward(&images, Mode::Train).unwrap();
        assert_eq!(fwd.fused.x0.shape(), [2, 8, 12, 12]);
        assert_eq!(fwd.final_.full_probs.shape(), [2, 11, 48, 48]);
        let g = fwd.graph.as_ref().unwrap();
        assert_eq!(g[0].vertices.len(), 22);
        assert_eq!(g[0].projection.p.len(), 22 * 144);
    }

    #[test]
    fn named_params_are_unique_and_complete() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let named = model.params.named();
        let mut names: Vec<_> = named.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
        assert!(names.contains(&"graph.adjacency".to_string()));
        let mut clone = model.params.clone();
        assert_eq!(clone.named_mut().len(), named.len());
    }

    #[test]
    fn ablations_change_structure() {
        let (images, gts) = batch(48, &[3]);
        let mut cfg = tiny_config();
        cfg.ablation.no_graph = true;
        let m = Model::new(cfg.clone(), 1).unwrap();
        let (b, grads, fwd) = m.loss_and_grad(&images, &gts, &LossConfig::default()).unwrap();
        assert!(fwd.graph.is_none());
        assert_eq!(b.components.dis, 0.0);
        assert!(grads.graph.adjacency.data.iter().all(|&v| v == 0.0));

        cfg.ablation = Ablation {
            no_edge: true,
            ..Ablation::default()
        };
        let m = Model::new(cfg.clone(), 1).unwrap();
        let (b, grads, fwd) = m.loss_and_grad(&images, &gts, &LossConfig::default()).unwrap();
        assert!(fwd.edge.is_none());
        assert_eq!(b.components.edge, 0.0);
        assert!(grads.edge.weight.data.iter().all(|&v| v == 0.0));

        cfg.ablation = Ablation {
            spatial_pool: true,
            ..Ablation::default()
        };
        let m = Model::new(cfg, 1).unwrap();
        let (_, _, fwd) = m.loss_and_grad(&images, &gts, &LossConfig::default()).unwrap();
        assert_eq!(fwd.graph.unwrap()[0].vertices.len(), 22);
    }

    #[test]
    fn eval_forward_matches_train_forward_structure() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let (images, _) = batch(48, &[4]);
        let a = model.infer(&images).unwrap();
        let b = model.infer(&images).unwrap();
        assert_eq!(a.final_.full_logits, b.final_.full_logits);
        assert_eq!(a.mode, Mode::Eval);
    }

    #[test]
    fn running_stats_move_towards_batch_stats() {
        let mut model = Model::new(tiny_config(), 3).unwrap();
        let (images, _) = batch(48, &[5, 6]);
        let before = model.params.backbone.stages[0][0].running_mean.clone();
        let fwd = model.forward(&images, Mode::Train).unwrap();
        model.update_running_stats(&fwd);
        assert_ne!(model.params.backbone.stages[0][0].running_mean, before);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.image_size = 44;
        assert!(Model::new(cfg.clone(), 0).is_err());
        cfg.image_size = 40;
        assert!(Model::new(cfg.clone(), 0).is_err());
        cfg.image_size = 48;
        cfg.k = 1000;
        assert!(Model::new(cfg, 0).is_err());
    }
}
