use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agrnet::checkpoint::Checkpoint;
use agrnet::config::Config;
use agrnet::dataset::{generate_dataset, load_dataset, load_image, load_splits};
use agrnet::error::{Error, Result};
use agrnet::gradcheck::{run_gradcheck, GradcheckOptions};
use agrnet::metrics::{report_tsv, MetricsReport};
use agrnet::synthetic::{Split, NUM_CLASSES};
use agrnet::train::{evaluate, train_on};
use agrnet::visuals::{dump_visuals, write_parsing};
use agrnet::Model;

#[derive(Parser)]
#[command(name = "agrnet", version, about = "Adaptive graph representation face parsing on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: train, val or all.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Parse one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write vertex, response, parsing and adjacency diagnostics.
    DumpVisuals {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Remove projection, reasoning and reprojection.
    #[arg(long)]
    no_graph: bool,
    /// Remove the edge branch and the edge/non-edge split.
    #[arg(long)]
    no_edge: bool,
    /// Pick vertices by grid pooling instead of top-k confidence.
    #[arg(long)]
    spatial_pool: bool,
    /// Override a config key, e.g. `--set optim.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `train.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: exit code plus the machine-readable failure line.
struct Failure {
    code: u8,
    kind: String,
    detail: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: 1,
            kind: e.kind().to_string(),
            detail: e.to_string(),
        }
    }
}

fn metrics_snapshot(report: &MetricsReport) -> Vec<(String, f64)> {
    let mut m = vec![
        ("mean_f1".to_string(), report.mean_f1),
        ("mean_iou".to_string(), report.mean_iou),
        ("pixel_accuracy".to_string(), report.pixel_accuracy),
    ];
    if let Some(h) = report.helen_overall_f1 {
        m.push(("helen_overall_f1".to_string(), h));
    }
    m
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    let ab = &mut cfg.model.ablation;
    ab.no_graph |= args.no_graph;
    ab.no_edge |= args.no_edge;
    ab.spatial_pool |= args.spatial_pool;
    if let Some(out) = args.out {
        cfg.train.out_dir = Some(out);
    }
    cfg.validate()?;
    let (train_set, val_set) = load_splits(&cfg.data, cfg.model.image_size)?;
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let log_every = (cfg.train.steps / 20).max(1);
    let outcome = train_on(&cfg, &train_set, |r| {
        if r.step % log_every == 0 {
            log::info!("step {} lr {:.2e} loss {:.5}", r.step, r.lr, r.loss.total);
        }
    })?;
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    let report = evaluate(&outcome.model, eval_set)?;
    print!("{}", report_tsv(&report));
    if let Some(path) = &outcome.checkpoint {
        Checkpoint::new(&outcome.model, &cfg, cfg.train.steps, metrics_snapshot(&report)).save(path)?;
        println!("checkpoint\t{}", path.display());
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model> {
    Ok(Checkpoint::load(ckpt)?.model())
}

fn eval_cmd(ckpt: &Path, data: &Path, split: &str) -> Result<()> {
    let model = load_model(ckpt)?;
    if model.config.classes != NUM_CLASSES {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but datasets use {NUM_CLASSES}",
            model.config.classes
        )));
    }
    let split = match split {
        "all" => None,
        s => Some(Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split `{s}`")))?),
    };
    let samples = load_dataset(data, split)?;
    print!("{}", report_tsv(&evaluate(&model, &samples)?));
    Ok(())
}

fn load_input(model: &Model, image: &Path) -> Result<agrnet::Tensor> {
    let t = load_image(image)?;
    let size = model.config.image_size;
    if t.h != size || t.w != size {
        return Err(Error::Validation(format!(
            "{} is {}x{}, the model expects {size}x{size}",
            image.display(),
            t.w,
            t.h
        )));
    }
    Ok(t)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Dataset {
            action: DatasetAction::Generate {
                out,
                train,
                val,
                seed,
                size,
            },
        } => {
            let entries = generate_dataset(&out, train, val, seed, size)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
        }
        Command::Train(args) => train_cmd(args)?,
        Command::Eval { ckpt, data, split } => eval_cmd(&ckpt, &data, &split)?,
        Command::Infer { ckpt, image, out } => {
            let model = load_model(&ckpt)?;
            let input = load_input(&model, &image)?;
            write_parsing(&model, &input, &out)?;
            println!("wrote {}", out.join("parsing.png").display());
        }
        Command::Gradcheck { instances, seed } => {
            let report = run_gradcheck(&GradcheckOptions {
                instances,
                seed,
                ..GradcheckOptions::default()
            });
            print!("{}", report.to_text());
            let failures: Vec<String> = report.failures().iter().map(|g| g.name.clone()).collect();
            if !failures.is_empty() {
                return Err(Failure {
                    code: 2,
                    kind: "gradcheck".into(),
                    detail: format!("groups over tolerance: {}", failures.join(",")),
                });
            }
        }
        Command::DumpVisuals { ckpt, image, out } => {
            let model = load_model(&ckpt)?;
            let input = load_input(&model, &image)?;
            for f in dump_visuals(&model, &input, &out)?.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("agrnet-failure\tkind={}\t{}", f.kind, f.detail.replace(['\n', '\t'], " "));
            ExitCode::from(f.code)
        }
    }
}
