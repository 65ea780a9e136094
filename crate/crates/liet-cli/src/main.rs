//! Command-line entry points: dataset generation, training, image-only
//! inference, and metric evaluation.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime aborts.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use liet::evalkit::{evaluate_model, EvalMode};
use liet::feature::{FeatureMap, PairedSample};
use liet::pipeline::infer;
use liet::synthgen::{generate_dataset, load_rgb8, read_dataset, save_rgb8, SceneSpec};
use liet::trainer::{fit, load_checkpoint, TrainState};

use config::{parse_config, write_resolved};

#[derive(Parser)]
#[command(
    name = "liet",
    version,
    about = "Unsupervised intrinsic image decomposition trained on paired image/LiDAR data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset with judgments and domain pools.
    GenerateData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        /// Base seed; scene i uses seed + i.
        #[arg(long)]
        seed: u64,
        /// Square image size (multiple of 4).
        #[arg(long)]
        size: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from generate-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the resolved config, log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Structural ablations; repeatable.
        #[arg(long = "ablation", value_enum)]
        ablations: Vec<AblationFlag>,
    },
    /// Decompose one image into albedo and shading.
    Infer {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input RGB PNG.
        #[arg(long)]
        image: PathBuf,
        /// Output albedo PNG path.
        #[arg(long)]
        albedo: PathBuf,
        /// Output shading PNG path.
        #[arg(long)]
        shade: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset's judgments.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Judgment selection mode.
        #[arg(long, value_enum)]
        mode: ModeFlag,
        /// Output report JSON path.
        #[arg(long)]
        report: PathBuf,
        /// Judgments per image in random mode.
        #[arg(long, default_value_t = liet::evalkit::DEFAULT_K_PER_IMAGE)]
        k: usize,
        /// Sampling seed in random mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum AblationFlag {
    #[value(name = "no_aa")]
    NoAa,
    #[value(name = "no_inst")]
    NoInst,
    #[value(name = "no_gray")]
    NoGray,
    #[value(name = "no_ilc")]
    NoIlc,
    #[value(name = "with_smooth")]
    WithSmooth,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeFlag {
    Random,
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error and exits 1 (not clap's default 2).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenerateData { out, n, seed, size } => generate_data(&out, n, seed, size),
        Command::Train {
            config,
            data,
            out,
            ablations,
        } => train(&config, &data, &out, &ablations),
        Command::Infer {
            ckpt,
            image,
            albedo,
            shade,
        } => run_infer(&ckpt, &image, &albedo, &shade),
        Command::Eval {
            ckpt,
            data,
            mode,
            report,
            k,
            seed,
        } => eval(&ckpt, &data, mode, &report, k, seed),
    }
}

fn generate_data(out: &Path, n: usize, seed: u64, size: usize) -> anyhow::Result<()> {
    let spec = SceneSpec {
        size,
        seed,
        ..SceneSpec::default()
    };
    let dataset = generate_dataset::<f32>(&spec, n).context("dataset generation failed")?;
    liet::synthgen::write_dataset(out, &dataset)
        .with_context(|| format!("cannot write dataset to {}", out.display()))?;
    println!(
        "wrote {n} scenes ({size}x{size}) with judgments and pools to {}",
        out.display()
    );
    Ok(())
}

fn train(
    config_path: &Path,
    data_dir: &Path,
    out: &Path,
    ablations: &[AblationFlag],
) -> anyhow::Result<()> {
    let mut config = parse_config(config_path)?;
    for flag in ablations {
        match flag {
            AblationFlag::NoAa => config.train.no_aa = true,
            AblationFlag::NoInst => config.train.no_instance_norm = true,
            AblationFlag::NoGray => config.train.no_gray = true,
            AblationFlag::NoIlc => config.train.no_ilc = true,
            AblationFlag::WithSmooth => config.train.with_smooth = true,
        }
    }
    config.data.dir = Some(data_dir.display().to_string());
    config.validate()?;

    let dataset = read_dataset::<f32>(data_dir)
        .with_context(|| format!("cannot read dataset from {}", data_dir.display()))?;
    let samples: Vec<PairedSample<f32>> =
        dataset.scenes.iter().map(|s| s.sample.clone()).collect();

    write_resolved(out, &config)?;
    let mut state = TrainState::<f32>::new(config.net.clone(), config.train.clone())?;
    let output = fit(
        &mut state,
        &samples,
        &dataset.albedo_pool,
        &dataset.shade_pool,
        Some(out),
    )?;
    let last = output.reports.last();
    let final_ckpt = output.checkpoints.last();
    println!(
        "trained {} iterations; final total loss {}; run artifacts in {}",
        output.reports.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.total)),
        out.display()
    );
    if let Some(path) = final_ckpt {
        println!("final checkpoint: {}", path.display());
    }
    Ok(())
}

fn run_infer(ckpt: &Path, image: &Path, albedo: &Path, shade: &Path) -> anyhow::Result<()> {
    let state = load_checkpoint::<f32>(ckpt)
        .with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let x: FeatureMap<f32> =
        load_rgb8(image).with_context(|| format!("cannot read image {}", image.display()))?;
    let result = infer(&state.model, &x)?;
    save_rgb8(albedo, &result.albedo)
        .with_context(|| format!("cannot write albedo {}", albedo.display()))?;
    save_rgb8(shade, &result.shade)
        .with_context(|| format!("cannot write shading {}", shade.display()))?;
    println!(
        "decomposed {} into {} and {}",
        image.display(),
        albedo.display(),
        shade.display()
    );
    Ok(())
}

fn eval(
    ckpt: &Path,
    data_dir: &Path,
    mode: ModeFlag,
    report_path: &Path,
    k: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let state = load_checkpoint::<f32>(ckpt)
        .with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let dataset = read_dataset::<f32>(data_dir)
        .with_context(|| format!("cannot read dataset from {}", data_dir.display()))?;
    let mode = match mode {
        ModeFlag::Random => EvalMode::RandomSampled,
        ModeFlag::All => EvalMode::All,
    };
    let report = evaluate_model(
        &state.model,
        &dataset,
        mode,
        seed,
        k,
        liet::evalkit::DEFAULT_EVAL_DELTA,
    )?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(report_path, text)
        .with_context(|| format!("cannot write report {}", report_path.display()))?;
    println!(
        "whdr {:.4}  precision {:.4}  recall {:.4}  f_score {:.4}  ({} judgments)",
        report.whdr, report.precision, report.recall, report.f_score, report.n_judgments
    );
    Ok(())
}
