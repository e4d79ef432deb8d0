//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so a file only needs the keys it changes. The same keys are
//! accepted as `--set key=value` overrides on the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::model::{LossConfig, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Polynomial decay exponent; 0 keeps the learning rate constant.
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.0005,
            momentum: 0.0,
            poly_power: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub augment: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            steps: 2000,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset directory. When absent the splits are generated in memory.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train: 256,
            val: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("invalid boolean `{value}` for `{key}`")),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        let m = &mut self.model;
        match key {
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.backbone_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                m.backbone.channels = parts
                    .try_into()
                    .map_err(|_| config_err!("`{key}` needs exactly four comma-separated values"))?;
            }
            "model.bn_momentum" => m.backbone.bn_momentum = parse(key, value)?,
            "model.bn_eps" => m.backbone.bn_eps = parse(key, value)?,
            "model.classes" => m.classes = parse(key, value)?,
            "graph.channels" => m.channels = parse(key, value)?,
            "graph.k" => m.k = parse(key, value)?,
            "graph.scale_dot" => m.scale_dot = parse_bool(key, value)?,
            "ablation.no_graph" => m.ablation.no_graph = parse_bool(key, value)?,
            "ablation.no_edge" => m.ablation.no_edge = parse_bool(key, value)?,
            "ablation.spatial_pool" => m.ablation.spatial_pool = parse_bool(key, value)?,
            "loss.lambda1" => self.loss.lambdas.raw = parse(key, value)?,
            "loss.lambda2" => self.loss.lambdas.edge = parse(key, value)?,
            "loss.lambda3" => self.loss.lambdas.ba = parse(key, value)?,
            "loss.lambda4" => self.loss.lambdas.final_ = parse(key, value)?,
            "loss.lambda5" => self.loss.lambdas.dis = parse(key, value)?,
            "loss.delta" => self.loss.delta = parse(key, value)?,
            "loss.eps" => self.loss.eps = parse(key, value)?,
            "optim.lr" => self.optim.lr = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.momentum" => self.optim.momentum = parse(key, value)?,
            "optim.poly_power" => self.optim.poly_power = parse(key, value)?,
            "train.batch" => self.train.batch = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "train.out_dir" => self.train.out_dir = parse_path(value),
            "data.dir" => self.data.dir = parse_path(value),
            "data.train" => self.data.train = parse(key, value)?,
            "data.val" => self.data.val = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            _ => return Err(config_err!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Apply a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| config_err!("override `{assignment}` is not of the form key=value"))?;
        self.set(k, v)
    }

    pub fn from_text(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", no + 1))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_text(&text)
    }

    /// Render every key; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let c = m.backbone.channels;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.image_size", m.image_size.to_string());
        kv("model.backbone_channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3]));
        kv("model.bn_momentum", format!("{:?}", m.backbone.bn_momentum));
        kv("model.bn_eps", format!("{:?}", m.backbone.bn_eps));
        kv("model.classes", m.classes.to_string());
        kv("graph.channels", m.channels.to_string());
        kv("graph.k", m.k.to_string());
        kv("graph.scale_dot", m.scale_dot.to_string());
        kv("ablation.no_graph", m.ablation.no_graph.to_string());
        kv("ablation.no_edge", m.ablation.no_edge.to_string());
        kv("ablation.spatial_pool", m.ablation.spatial_pool.to_string());
        kv("loss.lambda1", format!("{:?}", l.lambdas.raw));
        kv("loss.lambda2", format!("{:?}", l.lambdas.edge));
        kv("loss.lambda3", format!("{:?}", l.lambdas.ba));
        kv("loss.lambda4", format!("{:?}", l.lambdas.final_));
        kv("loss.lambda5", format!("{:?}", l.lambdas.dis));
        kv("loss.delta", format!("{:?}", l.delta));
        kv("loss.eps", format!("{:?}", l.eps));
        kv("optim.lr", format!("{:?}", self.optim.lr));
        kv("optim.weight_decay", format!("{:?}", self.optim.weight_decay));
        kv("optim.momentum", format!("{:?}", self.optim.momentum));
        kv("optim.poly_power", format!("{:?}", self.optim.poly_power));
        kv("train.batch", self.train.batch.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.augment", self.train.augment.to_string());
        kv("train.checkpoint_every", self.train.checkpoint_every.to_string());
        kv("train.out_dir", show_path(&self.train.out_dir));
        kv("data.dir", show_path(&self.data.dir));
        kv("data.train", self.data.train.to_string());
        kv("data.val", self.data.val.to_string());
        kv("data.seed", self.data.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.lambdas.validate()?;
        let o = &self.optim;
        let nonneg = [
            ("optim.lr", o.lr),
            ("optim.weight_decay", o.weight_decay),
            ("optim.poly_power", o.poly_power),
            ("loss.delta", self.loss.delta),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("`{k}` must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(config_err!("`optim.momentum` must lie in [0, 1), got {}", o.momentum));
        }
        if !(self.loss.eps > 0.0 && self.loss.eps < 0.5) {
            return Err(config_err!("`loss.eps` must lie in (0, 0.5), got {}", self.loss.eps));
        }
        let bn = &self.model.backbone;
        if !(bn.bn_eps > 0.0) || !(0.0..=1.0).contains(&bn.bn_momentum) {
            return Err(config_err!("batch-norm eps must be positive and momentum in [0, 1]"));
        }
        if self.train.batch == 0 {
            return Err(config_err!("`train.batch` must be positive"));
        }
        if self.data.train == 0 && self.data.dir.is_none() {
            return Err(config_err!("`data.train` must be positive"));
        }
        Ok(())
    }
}
