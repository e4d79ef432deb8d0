//! SGD training loop and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, OptimConfig};
use crate::error::{config_err, Error, Result};
use crate::losses::{GroundTruth, LossBundle};
use crate::metrics::{accumulate_confusion, compute_metrics, ConfusionMatrix, MetricsReport};
use crate::model::{Model, ModelParams};
use crate::ops::argmax_channels;
use crate::synthetic::{augment, Sample};
use crate::tensor::{LabelMap, Tensor};

/// Loss values recorded after one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBundle,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<StepRecord>,
    /// Final checkpoint, when an output directory was configured.
    pub checkpoint: Option<PathBuf>,
}

/// Plain SGD with optional momentum and weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: OptimConfig,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, velocity: None }
    }

    /// Learning rate at `step` of `total` (polynomial decay when enabled).
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let c = &self.config;
        if c.poly_power > 0.0 && total > 0 {
            c.lr * (1.0 - step as f64 / total as f64).max(0.0).powf(c.poly_power)
        } else {
            c.lr
        }
    }

    /// `theta <- theta - lr * v`, `v = momentum * v + g + wd * theta`.
    /// Running statistics are left alone.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        let (wd, mu) = (self.config.weight_decay, self.config.momentum);
        if mu > 0.0 && self.velocity.is_none() {
            self.velocity = Some(params.zeros_like());
        }
        let grads = grads.named();
        let mut velocity = self.velocity.as_mut().map(|v| v.named_mut());
        for (i, ((name, p), (_, g))) in params.named_mut().into_iter().zip(&grads).enumerate() {
            if ModelParams::is_buffer(&name) {
                continue;
            }
            match velocity.as_mut() {
                Some(vel) => {
                    let v = &mut vel[i].1.data;
                    for ((t, gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi + wd * *t;
                        *t -= lr * *vi;
                    }
                }
                None => {
                    for (t, gi) in p.data.iter_mut().zip(&g.data) {
                        *t -= lr * (gi + wd * *t);
                    }
                }
            }
        }
    }
}

fn stack_batch(samples: &[Sample]) -> Result<(Tensor, Vec<GroundTruth>)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let gts = samples
        .iter()
        .map(|s| GroundTruth {
            labels: s.labels.clone(),
            edge: s.edge.clone(),
        })
        .collect();
    Ok((Tensor::stack(&images)?, gts))
}

fn save_checkpoint(model: &Model, config: &Config, step: usize, dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    Checkpoint::new(model, config, step, vec![]).save(&path)?;
    Ok(path)
}

/// Save the last good parameters (when an output directory is set) and
/// hand back the error that stopped training.
fn abort(model: &Model, config: &Config, step: usize, out_dir: Option<&Path>, err: Error) -> Error {
    if let Some(dir) = out_dir {
        match save_checkpoint(model, config, step, dir, "last_good.ckpt") {
            Ok(path) => log::error!("aborting at step {step}; last good parameters in {}", path.display()),
            Err(e) => log::error!("aborting at step {step}; could not save parameters: {e}"),
        }
    }
    err
}

/// Render the loss trace as TSV.
pub fn trace_tsv(trace: &[StepRecord]) -> String {
    let mut s = String::from("step\tlr\ttotal\traw\tedge\tba\tfinal\tdis\n");
    for r in trace {
        let c = &r.loss.components;
        let _ = writeln!(
            s,
            "{}\t{:e}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            r.step, r.lr, r.loss.total, c.raw, c.edge, c.ba, c.final_, c.dis
        );
    }
    s
}

/// Train on the configured data source.
pub fn train(config: &Config) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, _) = crate::dataset::load_splits(&config.data, config.model.image_size)?;
    train_on(config, &train_set, |_| {})
}

/// Train on explicit samples. `on_step` sees every record as it is produced.
pub fn train_on(config: &Config, samples: &[Sample], mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    let tc = &config.train;
    let mut model = Model::new(config.model.clone(), tc.seed)?;
    let mut sgd = Sgd::new(config.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_ba7c);
    let batch = tc.batch.min(samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(tc.steps);
    let out_dir = tc.out_dir.as_deref();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for step in 0..tc.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..samples.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<Sample> = order
            .drain(..batch)
            .map(|i| {
                if tc.augment {
                    augment(&samples[i], rng.gen())
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let (images, gts) = stack_batch(&picked)?;

        let result = model
            .loss_and_grad(&images, &gts, &config.loss)
            .and_then(|(bundle, grads, fwd)| match bundle.non_finite_component() {
                Some(component) => Err(Error::Numeric {
                    location: format!("loss component `{component}` at step {step}"),
                    detail: format!("total = {}", bundle.total),
                }),
                None if !grads.all_finite() => Err(Error::Numeric {
                    location: format!("gradients at step {step}"),
                    detail: "non-finite gradient".into(),
                }),
                None => Ok((bundle, grads, fwd)),
            });
        let (bundle, grads, fwd) = match result {
            Ok(v) => v,
            Err(e) => return Err(abort(&model, config, step, out_dir, e)),
        };

        let lr = sgd.lr_at(step, tc.steps);
        let previous = model.clone();
        model.update_running_stats(&fwd);
        sgd.step(&mut model.params, &grads, lr);
        if !model.params.all_finite() {
            let e = Error::Numeric {
                location: format!("parameter update at step {step}"),
                detail: "update produced non-finite parameters".into(),
            };
            return Err(abort(&previous, config, step, out_dir, e));
        }
        let record = StepRecord { step, lr, loss: bundle };
        on_step(&record);
        trace.push(record);

        if let Some(dir) = out_dir {
            if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.steps {
                save_checkpoint(&model, config, step + 1, dir, "latest.ckpt")?;
            }
        }
    }

    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("loss_trace.tsv");
            std::fs::write(&path, trace_tsv(&trace)).map_err(|e| Error::io(&path, e))?;
            Some(save_checkpoint(&model, config, tc.steps, dir, "final.ckpt")?)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        trace,
        checkpoint,
    })
}

/// Full-resolution label predictions for a batch.
pub fn predict_labels(model: &Model, images: &Tensor) -> Result<Vec<LabelMap>> {
    let fwd = model.infer(images)?;
    Ok(argmax_channels(&fwd.final_.full_logits))
}

const EVAL_BATCH: usize = 8;

/// Confusion matrix of the model's predictions over `samples`.
pub fn confusion(model: &Model, samples: &[Sample]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation dataset is empty".into()));
    }
    let classes = model.config.classes;
    if let Some(max) = samples.iter().flat_map(|s| s.labels.data.iter()).max() {
        if *max as usize >= classes {
            return Err(config_err!("dataset uses class {max} but the model has {classes} classes"));
        }
    }
    let mut cm = ConfusionMatrix::new(classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let preds = predict_labels(model, &Tensor::stack(&images)?)?;
        for (p, s) in preds.iter().zip(chunk) {
            accumulate_confusion(p, &s.labels, &mut cm)?;
        }
    }
    Ok(cm)
}

/// Inference without augmentation followed by the metrics report.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricsReport> {
    compute_metrics(&confusion(model, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{dataset_manifest, render_manifest};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.image_size = 48;
        cfg.model.backbone.channels = [4, 4, 8, 8];
        cfg.model.channels = 8;
        cfg.model.k = 2;
        cfg.train.batch = 2;
        cfg.train.steps = 3;
        cfg
    }

    fn samples(n: usize) -> Vec<Sample> {
        render_manifest(&dataset_manifest(n, 0, 1), 48).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.model.clone(), 0).unwrap();
        let before = model.params.clone();
        let data = samples(2);
        let (images, gts) = stack_batch(&data).unwrap();
        let (_, grads, _) = model.loss_and_grad(&images, &gts, &cfg.loss).unwrap();
        let mut sgd = Sgd::new(OptimConfig {
            lr: 0.0,
            momentum: 0.9,
            ..OptimConfig::default()
        });
        sgd.step(&mut model.params, &grads, 0.0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn sgd_matches_the_update_rule() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.model.clone(), 0).unwrap();
        let before = model.params.clone();
        let mut grads = model.params.zeros_like();
        grads.graph.weight.data[0] = 2.0;
        Sgd::new(OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        })
        .step(&mut model.params, &grads, 0.1);
        let t = before.graph.weight.data[0];
        assert_eq!(model.params.graph.weight.data[0], t - 0.1 * (2.0 + 0.5 * t));
        let t1 = before.graph.weight.data[1];
        assert_eq!(model.params.graph.weight.data[1], t1 - 0.1 * (0.5 * t1));
        assert_eq!(model.params.backbone.stages[0][0].running_var, before.backbone.stages[0][0].running_var);
    }

    #[test]
    fn poly_decay() {
        let sgd = Sgd::new(OptimConfig {
            lr: 1.0,
            poly_power: 1.0,
            ..OptimConfig::default()
        });
        assert_eq!(sgd.lr_at(0, 10), 1.0);
        assert!((sgd.lr_at(5, 10) - 0.5).abs() < 1e-15);
        assert_eq!(Sgd::new(OptimConfig::default()).lr_at(7, 10), 0.001);
    }

    #[test]
    fn training_is_deterministic_and_writes_outputs() {
        let mut cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        cfg.train.out_dir = Some(dir.path().to_path_buf());
        cfg.train.checkpoint_every = 1;
        let data = samples(3);
        let a = train_on(&cfg, &data, |_| {}).unwrap();
        let b = train_on(&cfg, &data, |_| {}).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 3);
        assert!(dir.path().join("latest.ckpt").exists());
        assert!(dir.path().join("loss_trace.tsv").exists());
        let ck = Checkpoint::load(a.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.step, 3);
        assert_eq!(ck.params, a.model.params);
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_checkpoint() {
        let mut cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        cfg.train.out_dir = Some(dir.path().to_path_buf());
        cfg.train.augment = false;
        cfg.optim.lr = 1e300;
        cfg.train.steps = 10;
        let err = train_on(&cfg, &samples(2), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }), "{err}");
        let ck = Checkpoint::load(&dir.path().join("last_good.ckpt")).unwrap();
        assert!(ck.params.all_finite());
    }

    #[test]
    fn evaluation_errors() {
        let cfg = tiny_config();
        let model = Model::new(cfg.model.clone(), 0).unwrap();
        assert!(matches!(evaluate(&model, &[]), Err(Error::Validation(_))));
        let mut s = samples(1);
        s[0].labels.data[0] = 20;
        assert!(matches!(evaluate(&model, &s), Err(Error::Config(_))));
        let report = evaluate(&model, &samples(2)).unwrap();
        assert!(report.mean_f1 >= 0.0 && report.mean_f1 <= 1.0);
    }
}
