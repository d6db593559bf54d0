//! Command-line surface.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `style-demo`, `patch-demo`,
//! `report`. Exit codes: 0 success, 2 usage or config error, 3 data error,
//! 4 training divergence.

use crate::aalp::{fuse_attention, select_patch};
use crate::checkpoint;
use crate::data::{gen_synthetic_domains, load_dataset, save_dataset, DomainTag, LabeledImage, SyntheticConfig};
use crate::net::{class_probs, forward};
use crate::report::{aggregate_runs, EnvironmentInfo, RunManifest};
use crate::style::{fft_style_transfer, histogram_match};
use crate::train::{
    evaluate, reproduce_selection_score, train, EvalReport, StyleMethod, TrainConfig, TrainError,
    TrainOutcome,
};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Parser)]
#[command(
    name = "driftseg",
    about = "Cross-domain semantic segmentation via mean-teacher self-training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    GenData(GenDataArgs),
    /// Train (full adaptation, or supervised / source-only baselines).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Restyle one image toward another and write the results.
    StyleDemo(StyleDemoArgs),
    /// Render the attention saliency and chosen patch for one image.
    PatchDemo(PatchDemoArgs),
    /// Aggregate several run directories into mean ± std tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator config (TOML); defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML); defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Plain supervised training on the (labeled) --source dataset.
    #[arg(long, conflicts_with = "source_only")]
    supervised: bool,
    /// Warm-up-only training: source supervision, no adaptation losses.
    #[arg(long)]
    source_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset to score against.
    #[arg(long)]
    data: PathBuf,
    /// Restrict evaluation to one domain of the dataset root.
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    /// Source dataset; with --target, recomputes the selection score.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Write the EvalReport JSON here (the table always prints to stdout).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct StyleDemoArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value_t = 0.04)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Fft)]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum MethodArg {
    Fft,
    Histogram,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Args)]
struct PatchDemoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (each holding a manifest.json).
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Write the aggregate JSON here as well.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Parses `argv` and runs the requested subcommand, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success, anything else is usage.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::StyleDemo(args) => cmd_style_demo(args),
        Command::PatchDemo(args) => cmd_patch_demo(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    }
}

struct CliError {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn data_err(message: impl ToString) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: message.to_string(),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32, CliError> {
    let config: SyntheticConfig = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path).map_err(|e| data_err(e))?;
            toml::from_str(&raw).map_err(|e| usage(format!("bad generator config: {e}")))?
        }
        None => SyntheticConfig::default(),
    };
    let (source, target) = gen_synthetic_domains(&config, args.seed).map_err(|e| data_err(e))?;
    let all: Vec<_> = source.into_iter().chain(target).collect();
    save_dataset(&all, &args.out).map_err(|e| data_err(e))?;
    println!(
        "wrote {} images to {}",
        all.len(),
        args.out.display()
    );
    Ok(EXIT_OK)
}

/// Loads a dataset root and keeps only the requested domain.
fn load_domain(root: &Path, domain: DomainTag) -> Result<Vec<LabeledImage>, CliError> {
    let images = load_dataset(root).map_err(|e| data_err(e))?;
    Ok(images.into_iter().filter(|i| i.domain == domain).collect())
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig, CliError> {
    let config = match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| data_err(e))?;
            TrainConfig::from_toml(&raw).map_err(|e| usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn write_run_artifacts(
    run_dir: &Path,
    config: &TrainConfig,
    seed: u64,
    outcome: &TrainOutcome,
    started_at: String,
) -> Result<(), CliError> {
    std::fs::create_dir_all(run_dir).map_err(|e| data_err(e))?;
    let config_toml = config.to_toml();
    std::fs::write(run_dir.join("config.toml"), &config_toml).map_err(|e| data_err(e))?;
    std::fs::write(run_dir.join("epochs.csv"), outcome.epoch_csv()).map_err(|e| data_err(e))?;
    checkpoint::save(&outcome.best, &run_dir.join("best.ckpt")).map_err(|e| data_err(e))?;
    let manifest = RunManifest {
        content_hash: RunManifest::content_hash_for(&config_toml, seed),
        config_toml,
        seed,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        best_epoch: outcome.best_epoch,
        best_selection_score: outcome.history[outcome.best_epoch].selection_score,
        history: outcome.history.clone(),
        target_eval: None,
        environment: EnvironmentInfo::current(),
    };
    manifest
        .save(&run_dir.join("manifest.json"))
        .map_err(|e| data_err(e))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32, CliError> {
    let mut config = load_train_config(&args.config)?;
    if args.supervised || args.source_only {
        config.warmup_epochs = config.epochs;
    }
    if args.source_only && args.target.is_none() {
        return Err(usage("--source-only needs --target for model selection"));
    }

    let source = load_domain(&args.source, DomainTag::Source)?;
    let target = match &args.target {
        Some(dir) => load_domain(dir, DomainTag::Target)?,
        None if args.supervised => source.clone(),
        None => return Err(usage("--target is required unless --supervised")),
    };
    if source.is_empty() {
        return Err(data_err("source dataset is empty"));
    }
    if target.is_empty() {
        return Err(data_err("target dataset is empty"));
    }

    let seeds: Vec<u64> = match args.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    let multi = seeds.len() > 1;
    let mut run_dirs = Vec::new();
    for &seed in &seeds {
        let run_dir = if multi {
            args.out.join(format!("seed_{seed}"))
        } else {
            args.out.clone()
        };
        let started_at = chrono::Utc::now().to_rfc3339();
        match train(&config, seed, &source, &target) {
            Ok(outcome) => {
                write_run_artifacts(&run_dir, &config, seed, &outcome, started_at)?;
                println!(
                    "seed {seed}: best epoch {} selection score {:.4} -> {}",
                    outcome.best_epoch,
                    outcome.history[outcome.best_epoch].selection_score,
                    run_dir.display()
                );
                run_dirs.push(run_dir);
            }
            Err(TrainError::Diverged {
                component,
                step,
                last_good,
            }) => {
                eprintln!("training diverged at step {step}: {component}");
                if let Some(outcome) = *last_good {
                    write_run_artifacts(&run_dir, &config, seed, &outcome, started_at)?;
                    eprintln!("last good checkpoint written to {}", run_dir.display());
                }
                return Ok(EXIT_DIVERGED);
            }
            Err(TrainError::Config(msg)) => return Err(usage(msg)),
            Err(e) => return Err(data_err(e)),
        }
    }
    if multi {
        let agg = aggregate_runs(&run_dirs).map_err(|e| data_err(e))?;
        print!("{}", agg.render_text());
    }
    Ok(EXIT_OK)
}

fn render_eval_table(report: &EvalReport) -> String {
    let mut out = String::from("class        iou       dice\n");
    for (cls, (i, d)) in report
        .per_class_iou
        .iter()
        .zip(&report.per_class_dice)
        .enumerate()
    {
        out.push_str(&format!("{cls:<8} {i:>9.4} {d:>10.4}\n"));
    }
    out.push_str(&format!("foreground_iou  {:>10.4}\n", report.foreground_iou));
    out.push_str(&format!("mean_dice       {:>10.4}\n", report.mean_dice));
    out.push_str(&format!(
        "selection_score {:>10.4}\n",
        report.selection_score
    ));
    out
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CliError> {
    let ck = checkpoint::load(&args.checkpoint).map_err(|e| data_err(e))?;
    let data = match args.domain {
        Some(DomainArg::Source) => load_domain(&args.data, DomainTag::Source)?,
        Some(DomainArg::Target) => load_domain(&args.data, DomainTag::Target)?,
        None => load_dataset(&args.data).map_err(|e| data_err(e))?,
    };
    if data.iter().all(|i| i.mask.is_none()) {
        return Err(data_err("evaluation dataset has no masks"));
    }
    let mut report = evaluate(&ck, &data, 0, 0);
    if let (Some(source_dir), Some(target_dir)) = (&args.source, &args.target) {
        let source = load_domain(source_dir, DomainTag::Source)?;
        let target = load_domain(target_dir, DomainTag::Target)?;
        let config = TrainConfig::from_toml(&ck.train_config_toml)
            .map_err(|e| data_err(format!("checkpoint config snapshot: {e}")))?;
        report.selection_score = reproduce_selection_score(&ck, &config, &source, &target);
    }
    print!("{}", render_eval_table(&report));
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).map_err(|e| data_err(e))?;
        std::fs::write(path, json).map_err(|e| data_err(e))?;
    }
    Ok(EXIT_OK)
}

/// Reads any grayscale PNG as intensities in `[0, 1]`.
fn read_gray(path: &Path) -> Result<Array2<f64>, CliError> {
    let img = image::open(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    }))
}

fn write_gray(path: &Path, pixels: &Array2<f64>) -> Result<(), CliError> {
    let (h, w) = pixels.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for ((i, j), &v) in pixels.indexed_iter() {
        buf.put_pixel(
            j as u32,
            i as u32,
            image::Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16]),
        );
    }
    buf.save(path)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn cmd_style_demo(args: StyleDemoArgs) -> Result<i32, CliError> {
    let src = read_gray(&args.src)?;
    let tgt = read_gray(&args.tgt)?;
    let method = match args.method {
        MethodArg::Fft => StyleMethod::Fft,
        MethodArg::Histogram => StyleMethod::Histogram,
    };
    let transfer = |a: &Array2<f64>, b: &Array2<f64>| -> Result<Array2<f64>, CliError> {
        match method {
            StyleMethod::Fft => fft_style_transfer(a, b, args.beta).map_err(|e| data_err(e)),
            StyleMethod::Histogram => histogram_match(a, b, 256).map_err(|e| data_err(e)),
        }
    };
    std::fs::create_dir_all(&args.out).map_err(|e| data_err(e))?;
    write_gray(&args.out.join("stylized.png"), &transfer(&src, &tgt)?)?;
    write_gray(&args.out.join("reverse.png"), &transfer(&tgt, &src)?)?;
    println!("wrote stylized.png and reverse.png to {}", args.out.display());
    Ok(EXIT_OK)
}

#[derive(serde::Serialize)]
struct PatchDemoSidecar {
    patch_bounds: (usize, usize, usize, usize),
    component_size: usize,
    saliency_mean: f64,
    saliency: Vec<Vec<f64>>,
}

fn cmd_patch_demo(args: PatchDemoArgs) -> Result<i32, CliError> {
    let ck = checkpoint::load(&args.checkpoint).map_err(|e| data_err(e))?;
    let config = TrainConfig::from_toml(&ck.train_config_toml)
        .map_err(|e| data_err(format!("checkpoint config snapshot: {e}")))?;
    let pixels = read_gray(&args.image)?;
    let (h, w) = pixels.dim();

    let out = forward(&ck.teacher, &ck.network, &pixels, true);
    let _probs = class_probs(&out.logits);
    let attention = out
        .attention
        .ok_or_else(|| data_err("forward returned no attention"))?;
    let saliency = fuse_attention(&attention).map_err(|e| data_err(e))?;

    let patch_h = ((h as f64 * config.patch_fraction).round() as usize).max(4);
    let patch_w = ((w as f64 * config.patch_fraction).round() as usize).max(4);
    let down_res = ck
        .network
        .stage_resolutions(h / config.global_downsample, w / config.global_downsample)[0];
    let selection = select_patch(&saliency, (h, w), (patch_h, patch_w), down_res)
        .map_err(|e| data_err(e))?;

    std::fs::create_dir_all(&args.out).map_err(|e| data_err(e))?;
    // Overlay: grayscale base, saliency tint, red patch border.
    let (gh, gw) = saliency.values.dim();
    let max_sal = saliency
        .values
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let mut rgb = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for ((i, j), &v) in pixels.indexed_iter() {
        let base = (v.clamp(0.0, 1.0) * 255.0) as u8;
        let s = saliency.values[[i * gh / h, j * gw / w]] / max_sal;
        let r = (base as f64 * (1.0 - 0.4 * s) + 255.0 * 0.4 * s) as u8;
        rgb.put_pixel(j as u32, i as u32, image::Rgb([r, base, base]));
    }
    let (top, left, ph, pw) = selection.patch_bounds;
    for j in left..left + pw {
        rgb.put_pixel(j as u32, top as u32, image::Rgb([255, 0, 0]));
        rgb.put_pixel(j as u32, (top + ph - 1) as u32, image::Rgb([255, 0, 0]));
    }
    for i in top..top + ph {
        rgb.put_pixel(left as u32, i as u32, image::Rgb([255, 0, 0]));
        rgb.put_pixel((left + pw - 1) as u32, i as u32, image::Rgb([255, 0, 0]));
    }
    let overlay_path = args.out.join("overlay.png");
    rgb.save(&overlay_path)
        .map_err(|e| data_err(format!("{}: {e}", overlay_path.display())))?;

    let sidecar = PatchDemoSidecar {
        patch_bounds: selection.patch_bounds,
        component_size: selection.component_size,
        saliency_mean: saliency.mean_value,
        saliency: saliency
            .values
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| data_err(e))?;
    std::fs::write(args.out.join("patch.json"), json).map_err(|e| data_err(e))?;
    println!("wrote overlay.png and patch.json to {}", args.out.display());
    Ok(EXIT_OK)
}

fn cmd_report(args: ReportArgs) -> Result<i32, CliError> {
    let agg = aggregate_runs(&args.runs).map_err(|e| data_err(e))?;
    print!("{}", agg.render_text());
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&agg).map_err(|e| data_err(e))?;
        std::fs::write(path, json).map_err(|e| data_err(e))?;
    }
    Ok(EXIT_OK)
}
