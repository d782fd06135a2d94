use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use forgery_core::synth::io::{load_dataset, load_png, load_split, write_dataset};
use forgery_core::training::{
    config_hash, evaluate, family_subset, run_ablation_matrix, train, Checkpoint,
};
use forgery_core::{
    Arm, DetectorState, Error, Family, ForgeryNet, RunConfig, Split, SyntheticSample,
};

#[derive(Parser)]
#[command(name = "forgery", version, about = "Train and run the reconstruction-bias forgery detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one arm and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Print metrics for a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        /// Keep reals plus the fakes of this family.
        #[arg(long)]
        family: Option<String>,
    },
    /// Classify one PNG image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train every (arm, seed) pair and report intra/cross-family AUC.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Comma-separated arms; all eight when omitted.
        #[arg(long)]
        arms: Option<String>,
        /// Families used for training and validation; the test split keeps every family.
        #[arg(long = "train-family")]
        train_families: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::State(_) | Error::UndefinedMetric(_) => 2,
        Error::Io { .. } => 3,
        Error::Divergence { .. } | Error::Numerical(_) => 4,
        Error::Corrupt { .. } => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, out, force } => cmd_generate(&spec, &out, force),
        Command::Train {
            config,
            data,
            out,
            arm,
            seed,
            overrides,
            force,
        } => cmd_train(config.as_deref(), &data, &out, arm.as_deref(), seed, &overrides, force),
        Command::Eval {
            checkpoint,
            data,
            split,
            family,
        } => cmd_eval(&checkpoint, &data, &split, family.as_deref()),
        Command::Predict { checkpoint, image } => cmd_predict(&checkpoint, &image),
        Command::Ablate {
            config,
            data,
            out,
            seeds,
            arms,
            train_families,
            overrides,
            force,
        } => cmd_ablate(
            config.as_deref(),
            &data,
            &out,
            seeds,
            arms.as_deref(),
            &train_families,
            &overrides,
            force,
        ),
    };
    match result {
        Ok(payload) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{payload}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

/// Refuses to reuse a non-empty output directory unless `force` is set.
fn prepare_out(out: &Path, force: bool) -> Result<(), Error> {
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::Config(format!(
            "{} already exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_generate(spec: &Path, out: &Path, force: bool) -> Result<String, Error> {
    let cfg = load_config(Some(spec), &[])?;
    cfg.data.validate()?;
    prepare_out(out, force)?;
    write_dataset(&cfg.data, out)?;
    let n_images: usize = Split::ALL
        .iter()
        .map(|&s| cfg.data.count(s) * (1 + cfg.data.families.len()))
        .sum();
    Ok(json!({ "out": out.display().to_string(), "images": n_images }).to_string())
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    arm: Option<&str>,
    seed: Option<u64>,
    overrides: &[String],
    force: bool,
) -> Result<String, Error> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(a) = arm {
        cfg.set("train.arm", a)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolved_model().validate()?;
    cfg.train.validate()?;
    if !data.is_dir() {
        return Err(Error::Io {
            path: data.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let train_set = load_split(data, Split::Train)?;
    let val_set = load_split(data, Split::Val)?;
    check_image_size(&cfg, &train_set)?;
    prepare_out(out, force)?;
    write_file(&out.join("run.conf"), &cfg.to_text())?;

    let model_cfg = cfg.resolved_model();
    let train_cfg = cfg.resolved_train();
    let net = ForgeryNet::new(model_cfg.clone())?;
    let log_path = out.join("train_log.jsonl");
    let mut log_lines = String::new();
    let outcome = train(&net, &train_cfg, &train_set, &val_set, |entry| {
        log_lines.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log_lines.push('\n');
    });
    write_file(&log_path, &log_lines)?;
    let outcome = outcome?;
    let ckpt = Checkpoint::from_outcome(model_cfg, train_cfg, outcome);
    ckpt.save(out)?;
    let m = ckpt.manifest();
    Ok(json!({
        "config_hash": m.config_hash,
        "arm": m.arm,
        "seed": m.seed,
        "epoch": m.epoch,
        "tau": m.tau,
    })
    .to_string())
}

fn check_image_size(cfg: &RunConfig, samples: &[SyntheticSample]) -> Result<(), Error> {
    if let Some(s) = samples.first() {
        if s.image.height != cfg.model.image_size {
            return Err(Error::Config(format!(
                "model.image_size = {} but the dataset holds {}x{} images",
                cfg.model.image_size, s.image.height, s.image.width
            )));
        }
    }
    Ok(())
}

fn prediction_rule(ckpt: &Checkpoint) -> DetectorState {
    if ckpt.train.arm.uses_detector() {
        ckpt.detector.clone()
    } else {
        DetectorState::disabled()
    }
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str, family: Option<&str>) -> Result<String, Error> {
    let split: Split = split.parse()?;
    let family: Option<Family> = family.map(str::parse).transpose()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ForgeryNet::new(ckpt.model.clone())?;
    let mut samples = load_split(data, split)?;
    if let Some(f) = family {
        samples = family_subset(&samples, f);
    }
    let eval = evaluate(&net, &ckpt.params, ckpt.train.arm, &prediction_rule(&ckpt), &samples)?;
    let r = eval.report;
    Ok(json!({
        "acc": r.acc,
        "auc": r.auc,
        "apcer": r.apcer,
        "bpcer": r.bpcer,
        "n_real": r.n_real,
        "n_fake": r.n_fake,
        "route_counts": r.route_counts,
        "threshold_used": r.threshold_used,
        "config_hash": config_hash(&ckpt.model, &ckpt.train),
        "seed": ckpt.train.seed,
        "arm": ckpt.train.arm,
        "split": split.as_str(),
        "family": family.map_or("all", Family::as_str),
    })
    .to_string())
}

fn cmd_predict(checkpoint: &Path, image: &Path) -> Result<String, Error> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ForgeryNet::new(ckpt.model.clone())?;
    let img = load_png(image).map_err(|e| match e {
        Error::Corrupt { path, detail } => Error::InvalidInput(format!("{}: {detail}", path.display())),
        other => other,
    })?;
    let size = ckpt.model.image_size;
    if img.height != size || img.width != size {
        return Err(Error::InvalidInput(format!(
            "image is {}x{}, model expects {size}x{size}",
            img.width, img.height
        )));
    }
    let p = prediction_rule(&ckpt).predict(&net, &ckpt.params, ckpt.train.arm.mode(), &[img])?[0];
    Ok(json!({
        "label": if p.label == 1 { "fake" } else { "real" },
        "score": p.score,
        "route": p.route.as_str(),
        "bias_statistic": p.bias_statistic,
    })
    .to_string())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seeds: u64,
    arms: Option<&str>,
    train_families: &[String],
    overrides: &[String],
    force: bool,
) -> Result<String, Error> {
    let cfg = load_config(config, overrides)?;
    cfg.resolved_model().validate()?;
    cfg.train.validate()?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let arms: Vec<Arm> = match arms {
        Some(list) => list
            .split(',')
            .map(|a| a.trim().parse())
            .collect::<Result<_, _>>()?,
        None => Arm::ALL.to_vec(),
    };
    let train_families: Vec<Family> = train_families
        .iter()
        .flat_map(|s| s.split(','))
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()?;
    let dataset = load_dataset(data)?;
    let keep = |samples: &[SyntheticSample]| -> Vec<SyntheticSample> {
        samples
            .iter()
            .filter(|s| train_families.is_empty() || s.family.is_none_or(|f| train_families.contains(&f)))
            .cloned()
            .collect()
    };
    let train_set = keep(dataset.split(Split::Train));
    let val_set = keep(dataset.split(Split::Val));
    check_image_size(&cfg, &train_set)?;
    prepare_out(out, force)?;
    write_file(&out.join("run.conf"), &cfg.to_text())?;

    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    let table = run_ablation_matrix(
        &cfg.resolved_model(),
        &cfg.resolved_train(),
        &train_set,
        &val_set,
        dataset.split(Split::Test),
        &arms,
        &seed_list,
    )?;
    write_file(&out.join("ablation.csv"), &table.to_csv())?;
    let summary = table.summary();
    write_file(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(summary.to_string())
}
