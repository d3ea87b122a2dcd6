//! `lri2i`: train, run and evaluate LR-guided translation models.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lri2i::checkpoint;
use lri2i::config::TrainConfig;
use lri2i::data::load_dataset;
use lri2i::eval::{
    eval_protocol, extractor_from, perturb_lr, protocol_mosaic, run_lr_ablation, translation_grid, FeatureExtractor,
    Perturbation, ProtocolOptions,
};
use lri2i::imaging::{downscale_consistency, downscale_tensor, encode_png, image_to_tensor, load_rgb, tensor_to_image};
use lri2i::training::{load_splits, train};
use lri2i::Tensor;
use lri2i_service::{downscale_image, values_to_tensor, AppState, LoadedModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "lri2i", version, about = "Image translation guided by very low-resolution targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, a loss log and sample grids under --out.
    Train(TrainArgs),
    /// Translate source images towards LR targets.
    Generate(GenerateArgs),
    /// Run the evaluation protocol and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Apply an LR perturbation to an image.
    Perturb(PerturbArgs),
    /// Average-pool an image by an integer factor.
    Downscale(DownscaleArgs),
    /// Train and evaluate one model per LR size.
    Ablate(AblateArgs),
    /// Start the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field, `key=value` (repeatable; wins over --config).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: TrainConfig) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => fallback,
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let config = base.with_overrides(&overrides)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Floating point precision for a fresh run.
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// HR source image (repeatable).
    #[arg(long, required = true)]
    source: Vec<PathBuf>,
    /// LR target image at the model's LR size (repeatable).
    #[arg(long, conflicts_with = "hr_target")]
    lr_target: Vec<PathBuf>,
    /// HR image whose downscale serves as the target (repeatable).
    #[arg(long)]
    hr_target: Vec<PathBuf>,
    /// Always write a sources-by-targets grid.
    #[arg(long)]
    grid: bool,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    /// Generated samples per LR target.
    #[arg(long, default_value_t = 10)]
    samples_per_lr: usize,
    /// LR perturbation: grayscale | gaussian:SIGMA | manual_edit:ROW,COL,R,G,B;...
    #[arg(long, value_name = "MODE[:PARAM]")]
    perturb: Option<String>,
    /// Feature extractor plugin (JSON). Missing files fall back to the built-in features.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Limit on the number of LR targets.
    #[arg(long)]
    max_targets: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image directory; defaults to the validation split of the checkpoint's config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write a mosaic of the first targets and their outputs.
    #[arg(long)]
    mosaic: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_name = "MODE[:PARAM]")]
    perturb: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DownscaleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    factor: usize,
    /// PNG, or JSON values when the name ends in `.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 8, 16, 32])]
    lr_sizes: Vec<usize>,
    /// Training steps per LR size.
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Model to load at startup. Without it, generation answers 503.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Generate(a) => run_generate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Perturb(a) => run_perturb(a),
        Command::Downscale(a) => run_downscale(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Serve(a) => run_serve(a),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (fallback, dtype) = match &a.resume {
        Some(p) => {
            let info = checkpoint::info(p).with_context(|| format!("reading {}", p.display()))?;
            let dtype = if info.dtype == "f64" { Dtype::F64 } else { Dtype::F32 };
            (info.config, dtype)
        }
        None => (TrainConfig::default(), a.dtype),
    };
    let config = a.config.resolve(fallback)?;
    let resume = a.resume.as_deref();
    let step = match dtype {
        Dtype::F32 => train::<f32>(&config, &a.out, resume)?.step,
        Dtype::F64 => train::<f64>(&config, &a.out, resume)?.step,
    };
    println!("trained to step {step}; run directory {}", a.out.display());
    Ok(())
}

/// Loads `path` as a `[1, 3, size, size]` tensor, refusing other resolutions.
fn load_sized(path: &Path, size: usize, what: &str) -> Result<Tensor<f64>> {
    let img = load_rgb(path).with_context(|| format!("reading {}", path.display()))?;
    if (img.width() as usize, img.height() as usize) != (size, size) {
        bail!(
            "{what} {} is {}x{} but the checkpoint expects {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        );
    }
    Ok(image_to_tensor(&img))
}

fn stack(items: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    Ok(Tensor::concat(&items.iter().collect::<Vec<_>>(), 0)?)
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let model = LoadedModel::from_checkpoint(&a.checkpoint)?;
    let (hr, lr) = (model.hr_size(), model.lr_size());
    let sources = a
        .source
        .iter()
        .map(|p| load_sized(p, hr, "source"))
        .collect::<Result<Vec<_>>>()?;
    let targets = if !a.lr_target.is_empty() {
        a.lr_target
            .iter()
            .map(|p| load_sized(p, lr, "LR target"))
            .collect::<Result<Vec<_>>>()?
    } else if !a.hr_target.is_empty() {
        a.hr_target
            .iter()
            .map(|p| Ok(downscale_tensor(&load_sized(p, hr, "HR target")?, model.factor())?))
            .collect::<Result<Vec<_>>>()?
    } else {
        bail!("give at least one --lr-target or --hr-target");
    };
    let (x, y) = (stack(&sources)?, stack(&targets)?);
    let image = if a.grid || sources.len() > 1 || targets.len() > 1 {
        let generate = |x: &Tensor<f64>, y: &Tensor<f64>| model.generate(x, y);
        translation_grid(&generate, &x, &y)?
    } else {
        let out = model.generate(&x, &y)?;
        println!("consistency {:.6}", downscale_consistency(&out, &y)?);
        tensor_to_image(&out, 0)?
    };
    write_png(&image, &a.out)
}

fn write_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_png(img)?).with_context(|| format!("writing {}", path.display()))
}

fn open_extractor(path: Option<&Path>) -> Result<Box<dyn FeatureExtractor>> {
    match path {
        Some(p) if !p.exists() => {
            log::warn!("extractor {} not found; using the built-in features", p.display());
            Ok(extractor_from(None)?)
        }
        other => Ok(extractor_from(other)?),
    }
}

fn protocol_options(p: &ProtocolArgs, config: &TrainConfig, seed: u64) -> Result<ProtocolOptions> {
    Ok(ProtocolOptions {
        samples_per_lr: p.samples_per_lr,
        seed,
        color_step: config.color_step,
        epsilon: config.epsilon,
        perturbation: p.perturb.as_deref().map(Perturbation::parse).transpose()?,
        max_targets: p.max_targets,
    })
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = LoadedModel::from_checkpoint(&a.checkpoint)?;
    let config = model.info().config.clone();
    let data = match &a.data {
        Some(dir) => load_dataset(dir, config.hr_size)?,
        None => load_splits(&config)?.1,
    };
    let extractor = open_extractor(a.protocol.extractor.as_deref())?;
    let opts = protocol_options(&a.protocol, &config, a.seed)?;
    let generate = |x: &Tensor<f64>, y: &Tensor<f64>| model.generate(x, y);
    let out = eval_protocol(&generate, &data, config.downscale_factor(), extractor.as_ref(), &opts)?;
    let mut report = out.report.clone();
    report.config = Some(config);
    fs::write(&a.out, report.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.mosaic {
        write_png(&protocol_mosaic(&out, 4)?, path)?;
    }
    println!(
        "FID {:.4}  LPIPS {:.4}  consistency {:.4}  in-subspace {:.3}  ({} outputs, {} features{})",
        report.fid,
        report.lpips_mean,
        report.consistency_mean,
        report.subspace_rate,
        report.generated,
        report.extractor,
        if report.fallback_metrics { ", fallback" } else { "" }
    );
    Ok(())
}

fn run_perturb(a: PerturbArgs) -> Result<()> {
    let mode = Perturbation::parse(&a.perturb)?;
    let img = image_to_tensor::<f64>(&load_rgb(&a.input)?);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    write_png(&tensor_to_image(&perturb_lr(&img, &mode, &mut rng)?, 0)?, &a.out)
}

fn run_downscale(a: DownscaleArgs) -> Result<()> {
    let img = load_rgb(&a.input)?;
    let lr = downscale_image(&img, a.factor).map_err(|e| anyhow!("{e}"))?;
    if a.out.extension().is_some_and(|e| e == "json") {
        fs::write(&a.out, serde_json::to_string(&lr)?)?;
        Ok(())
    } else {
        let t = values_to_tensor(&lr.values, lr.height, lr.width)?;
        write_png(&tensor_to_image(&t, 0)?, &a.out)
    }
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let config = a.config.resolve(TrainConfig::toy())?;
    let extractor = open_extractor(a.protocol.extractor.as_deref())?;
    let opts = protocol_options(&a.protocol, &config, config.seed)?;
    let report = run_lr_ablation::<f32>(&config, &a.lr_sizes, a.steps, extractor.as_ref(), &opts)?;
    fs::write(&a.out, report.to_json()?)?;
    print!("{}", report.table());
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let model = a
        .checkpoint
        .as_deref()
        .map(LoadedModel::from_checkpoint)
        .transpose()?;
    let state = AppState {
        model: model.map(std::sync::Arc::new),
        static_dir: a.static_dir,
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(lri2i_service::serve(addr, state))?;
    Ok(())
}
