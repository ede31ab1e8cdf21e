use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use malrad::beamformer::BeamformerMode;
use malrad::data::{load_manifest, make_splits, replicate_first_channel, ClipRecord, MicId, SimConfig, SplitMode};
use malrad::eval::{self, compute_eer, confidence_interval, roc_curve, score_clips, score_set};
use malrad::model::ModelConfig;
use malrad::objective::RegularizerConfig;
use malrad::trainer::{load_checkpoint, load_clips, save_checkpoint, train_on_clips, Checkpoint, TrainConfig};
use malrad::Error;

#[derive(Parser)]
#[command(name = "malrad", version, about = "Multi-channel replay attack detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-channel dataset and its manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model for one microphone array.
    Train(TrainArgs),
    /// Score the test partition and write an EER report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "standard")]
        split: SplitMode,
    },
    /// Export the ROC curve of the test partition as CSV and SVG.
    Roc {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long, default_value = "standard")]
        split: SplitMode,
    },
    /// Train every beamformer variant and ALRAD over several seeds.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonTrain,
    },
    /// Print a checkpoint's hyperparameters, size and history.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// n_f 64, filters 32/64/128, GRU 128.
    Full,
    /// Narrow layers for CPU-scale experiments.
    Compact,
}

#[derive(Args)]
struct CommonTrain {
    #[arg(long)]
    mic: Option<MicId>,
    #[arg(long, default_value = "standard")]
    split: SplitMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    gamma: f64,
    /// Disable class reweighting of the cross-entropy.
    #[arg(long)]
    no_reweight: bool,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "adaptive")]
    mode: BeamformerMode,
    /// Replicate the first channel across the array (single-channel baseline).
    #[arg(long)]
    alrad: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonTrain,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Diverged { .. } | Error::NonFinite(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Train(args) => train(args),
        Command::Evaluate {
            ckpt,
            manifest,
            report,
            split,
        } => evaluate(&ckpt, &manifest, &report, split),
        Command::Roc {
            ckpt,
            manifest,
            csv,
            svg,
            split,
        } => roc(&ckpt, &manifest, &csv, &svg, split),
        Command::Ablate {
            manifest,
            runs,
            out,
            common,
        } => ablate(&manifest, runs, &out, &common),
        Command::Inspect { ckpt } => inspect(&ckpt),
    }
}

fn simulate(config: &Path, out: &Path) -> CmdResult {
    let cfg = SimConfig::load(config)?;
    let manifest = malrad::data::simulate_dataset(&cfg, out)?;
    Ok(json!({
        "command": "simulate",
        "manifest": manifest,
        "n_clips": cfg.n_genuine + cfg.n_replay,
        "n_channels": cfg.n_channels,
        "sample_rate": cfg.sample_rate,
    }))
}

/// Records of one array, split into `(train, test)`.
fn partition(manifest: &Path, mic: Option<MicId>, split: SplitMode) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>), Failure> {
    let mut records = load_manifest(manifest)?;
    let mic = match mic {
        Some(m) => m,
        None => {
            let first = records
                .first()
                .ok_or_else(|| Failure::Core(Error::Data(format!("{}: no records", manifest.display()))))?;
            if records.iter().any(|r| r.mic_id != first.mic_id) {
                return Err(Failure::Usage("manifest holds several arrays; pass --mic".into()));
            }
            first.mic_id
        }
    };
    records.retain(|r| r.mic_id == mic);
    if records.is_empty() {
        return Err(Failure::Core(Error::Data(format!("{}: no records for mic {mic}", manifest.display()))));
    }
    Ok(make_splits(&records, split)?)
}

fn model_config(preset: Preset, sample: &ClipRecord, mode: BeamformerMode) -> Result<ModelConfig, Failure> {
    let build = match preset {
        Preset::Full => ModelConfig::full,
        Preset::Compact => ModelConfig::compact,
    };
    Ok(build(sample.n_channels, sample.sample_rate, mode)?)
}

fn train_config(c: &CommonTrain, seed: u64, alrad: bool) -> TrainConfig {
    TrainConfig {
        batch_size: c.batch_size,
        base_lr: c.lr,
        epochs: c.epochs,
        seed,
        reg: RegularizerConfig {
            lambda: c.lambda,
            gamma: c.gamma,
        },
        reweight_classes: !c.no_reweight,
        alrad,
        ..TrainConfig::default()
    }
}

fn train(args: TrainArgs) -> CmdResult {
    let c = &args.common;
    let (train_set, _) = partition(&args.manifest, c.mic, c.split)?;
    let mc = model_config(c.preset, &train_set[0], args.mode)?;
    let tc = train_config(c, c.seed, args.alrad);
    let clips = load_clips(&train_set, args.alrad)?;
    let ckpt = train_on_clips(&clips, &tc, &mc)?;
    save_checkpoint(&ckpt, &args.out)?;
    let last = ckpt.history.last().expect("at least one epoch");
    Ok(json!({
        "command": "train",
        "checkpoint": args.out,
        "mic_id": ckpt.mic_id,
        "mode": args.mode,
        "alrad": args.alrad,
        "split": c.split.to_string(),
        "seed": c.seed,
        "param_count": ckpt.param_count()?,
        "epochs": ckpt.history.len(),
        "n_train_clips": clips.len(),
        "final_train_loss": last.train_loss,
        "final_val_loss": last.val_loss,
        "best_val_epoch": ckpt.best_val_epoch,
    }))
}

fn test_trials(ckpt: &Checkpoint, manifest: &Path, split: SplitMode) -> Result<Vec<eval::ScoredTrial>, Failure> {
    let (_, test) = partition(manifest, Some(ckpt.mic_id), split)?;
    Ok(score_set(ckpt, &test)?)
}

fn evaluate(ckpt_path: &Path, manifest: &Path, report_path: &Path, split: SplitMode) -> CmdResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let trials = test_trials(&ckpt, manifest, split)?;
    let report = eval::report(&trials)?;
    let summary = json!({
        "command": "evaluate",
        "checkpoint": ckpt_path,
        "manifest": manifest,
        "mic_id": ckpt.mic_id,
        "split": split.to_string(),
        "eer": report.eer,
        "threshold": report.threshold,
        "auc": report.auc,
        "n_trials": report.n_trials,
        "n_genuine": report.n_genuine,
        "n_replay": report.n_replay,
        "per_env": report.per_env,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n";
    std::fs::write(report_path, text).map_err(|e| Error::Io {
        path: report_path.to_path_buf(),
        source: e,
    })?;
    Ok(summary)
}

fn roc(ckpt_path: &Path, manifest: &Path, csv: &Path, svg: &Path, split: SplitMode) -> CmdResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let trials = test_trials(&ckpt, manifest, split)?;
    let curve = roc_curve(&trials)?;
    let eer = compute_eer(&trials)?;
    eval::write_roc_csv(csv, &curve)?;
    eval::write_roc_svg(svg, &curve, &format!("{} ROC, EER {:.2}%", ckpt.mic_id, 100.0 * eer.eer))?;
    Ok(json!({
        "command": "roc",
        "checkpoint": ckpt_path,
        "csv": csv,
        "svg": svg,
        "n_points": curve.points.len(),
        "auc": curve.auc(),
        "eer": eer.eer,
    }))
}

fn ablate(manifest: &Path, runs: usize, out: &Path, c: &CommonTrain) -> CmdResult {
    if runs < 2 {
        return Err(Failure::Usage("--runs must be at least 2 for a confidence interval".into()));
    }
    let (train_set, test_set) = partition(manifest, c.mic, c.split)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let train_clips = load_clips(&train_set, false)?;
    let test_clips = load_clips(&test_set, false)?;
    let variants = [
        ("adaptive", BeamformerMode::Adaptive, false),
        ("fixed_multi", BeamformerMode::FixedMulti, false),
        ("fixed_single", BeamformerMode::FixedSingle, false),
        ("alrad", BeamformerMode::Adaptive, true),
    ];
    let mut rows = Vec::new();
    for (name, mode, alrad) in variants {
        let (tr, te) = if alrad {
            (
                train_clips.iter().map(replicate_first_channel).collect(),
                test_clips.iter().map(replicate_first_channel).collect(),
            )
        } else {
            (train_clips.clone(), test_clips.clone())
        };
        let mc = model_config(c.preset, &train_set[0], mode)?;
        let mut eers = Vec::with_capacity(runs);
        for run in 0..runs {
            let seed = c.seed + run as u64;
            log::info!("ablation {name}, run {run} (seed {seed})");
            let ckpt = train_on_clips(&tr, &train_config(c, seed, alrad), &mc)?;
            save_checkpoint(&ckpt, &out.join(format!("{name}_seed{seed}.ckpt")))?;
            eers.push(compute_eer(&score_clips(&ckpt.model()?, &te)?)?.eer);
        }
        let (mean, half_width) = confidence_interval(&eers)?;
        rows.push(json!({
            "variant": name,
            "mode": mode,
            "alrad": alrad,
            "eers": eers,
            "mean_eer": mean,
            "ci95_half_width": half_width,
        }));
    }
    let summary = json!({
        "command": "ablate",
        "manifest": manifest,
        "split": c.split.to_string(),
        "runs": runs,
        "epochs": c.epochs,
        "variants": rows,
    });
    let path = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(summary)
}

fn inspect(ckpt_path: &Path) -> CmdResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    Ok(json!({
        "command": "inspect",
        "checkpoint": ckpt_path,
        "format_version": ckpt.format_version,
        "mic_id": ckpt.mic_id,
        "seed": ckpt.seed(),
        "param_count": ckpt.param_count()?,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "class_weights": ckpt.class_weights,
        "best_val_epoch": ckpt.best_val_epoch,
        "history": ckpt.history,
    }))
}
