use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asl::data::{self, Annotation, SyntheticConfig, VideoPredictions};
use asl::eval::{mean_ap, parse_thresholds, EvalConfig};
use asl::inference::InferenceConfig;
use asl::sensitivity::{export_sensitivity_curves, SensitivityParams};
use asl::trainer::{self, TrainConfig, Validation, GRADCHECK_TOLERANCE};
use asl::Error;
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "asl", version, about = "Temporal action localization with learned action sensitivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (`train/` and `test/`) to `--out`.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, writing `params.json` and `train_log.jsonl` to `--out`.
    Train {
        /// Dataset root (uses its `train/` split) or a directory of videos.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Labeled videos scored after every epoch.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Decode and suppress detections for every feature file in `--data`.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the mAP table of a predictions file.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        annos: PathBuf,
        #[arg(long, default_value = "0.1:0.1:0.9")]
        thresholds: String,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        seed: u64,
    },
    /// Write the class-level sensitivity curves of one class as CSV.
    SensitivityDump {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Diverged { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.display().to_string(), source })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn generate(config: &Path, out: &Path) -> Outcome {
    let cfg: SyntheticConfig = read_config(config)?;
    let ds = data::generate(&cfg)?;
    data::write_dataset(out, &ds)?;
    println!("wrote {} train and {} test videos to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(())
}

fn train(data_dir: &Path, config: &Path, out: &Path, validation: Option<&Path>) -> Outcome {
    let cfg: TrainConfig = read_config(config)?;
    cfg.validate()?;
    let videos = data::load_split(&split_dir(data_dir, "train"))?;
    for v in &videos {
        v.annotation.validate(cfg.num_classes)?;
    }
    let samples = trainer::to_samples(&videos);
    info!("training on {} videos", samples.len());
    let held_out = match validation {
        Some(dir) => Some(trainer::to_samples(&data::load_split(dir)?)),
        None => None,
    };
    let val = held_out.as_deref().map(|s| Validation { samples: s, config: EvalConfig::default() });
    let (model, log) = trainer::train(&samples, &cfg, val.as_ref())?;
    create_dir(out)?;
    trainer::save_checkpoint(&out.join("params.json"), &model)?;
    trainer::write_train_log(&out.join("train_log.jsonl"), &log)?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        println!("epoch 1 loss {:.5}, epoch {} loss {:.5}", first.loss.total, last.epoch, last.loss.total);
    }
    Ok(())
}

fn infer(data_dir: &Path, params: &Path, out: &Path) -> Outcome {
    let model = trainer::load_checkpoint(params)?;
    let cfg = InferenceConfig::default();
    let mut preds = Vec::new();
    for (video_id, features) in data::read_feature_dir(data_dir)? {
        let instances = trainer::detect(&model, &features.to_matrix(), &cfg)?;
        preds.push(VideoPredictions { video_id, len: features.len(), instances });
    }
    data::write_predictions(out, &preds)?;
    println!("wrote predictions for {} videos to {}", preds.len(), out.display());
    Ok(())
}

fn eval(preds: &Path, annos: &Path, thresholds: &str, json: bool) -> Outcome {
    let config = parse_thresholds(thresholds)
        .and_then(EvalConfig::with_thresholds)
        .map_err(|e| Failure::Usage(format!("--thresholds: {e}")))?;
    let annotations: Vec<Annotation> = data::read_annotations(annos)?;
    let mut by_id: HashMap<String, VideoPredictions> =
        data::read_predictions(preds)?.into_iter().map(|p| (p.video_id.clone(), p)).collect();
    let mut dets = Vec::with_capacity(annotations.len());
    for a in &annotations {
        dets.push(by_id.remove(&a.video_id).map(|p| p.instances).unwrap_or_default());
    }
    if let Some(id) = by_id.keys().min() {
        return Err(Error::InvalidArgument(format!("predictions for unknown video {id:?}")).into());
    }
    let gts: Vec<_> = annotations.into_iter().map(|a| a.instances).collect();
    let result = mean_ap(&dets, &gts, &config)?;
    if json {
        println!("{}", result.to_json());
    } else {
        print!("{}", result.to_table());
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Outcome {
    let reports = trainer::gradient_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.max_rel_error < GRADCHECK_TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{} {:<28} max rel err {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
            if ok { "ok  " } else { "FAIL" },
            r.parameter,
            r.max_rel_error,
            r.worst_index,
            r.analytic,
            r.numeric
        );
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("seed {seed}: {} parameters, worst relative error {worst:.3e}", reports.len());
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} parameters above tolerance {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}

fn sensitivity_dump(params: &Path, class: usize, out: &Path) -> Outcome {
    let model = trainer::load_checkpoint(params)?;
    let curves = export_sensitivity_curves(&SensitivityParams::of(&model), class)?;
    std::fs::write(out, curves.to_csv()).map_err(|source| Error::Io { path: out.display().to_string(), source })?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Generate { config, out } => generate(config, out),
        Command::Train { data, config, out, validation } => train(data, config, out, validation.as_deref()),
        Command::Infer { data, params, out } => infer(data, params, out),
        Command::Eval { preds, annos, thresholds, json } => eval(preds, annos, thresholds, *json),
        Command::Gradcheck { seed } => gradcheck(*seed),
        Command::SensitivityDump { params, class, out } => sensitivity_dump(params, *class, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
