use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lan_core::config::KvConfig;
use lan_core::data::{
    load_pair_dir, save_image, write_synth_dataset, BitDepth, SynthParams, SYNTH_GT_DIR, SYNTH_INPUT_DIR,
};
use lan_core::infer::{enhance, load_input};
use lan_core::metrics::{psnr, ssim, MetricReport};
use lan_core::network::{checksum, load, to_bytes, LanModel};
use lan_core::train::{DataSource, Precision, TrainConfig, Trainer};
use lan_core::verify::{run_criterion, VerifyLevel, VerifyOptions, CRITERIA};
use lan_core::{Element, OpKind};

/// Low-light enhancement with the Linear Array Network.
#[derive(Debug, Parser)]
#[command(name = "lan", version)]
struct Cli {
    /// Key-value config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds the model, the data and the sample order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Named starting configuration (paper-rgb, paper-bayer, desk, desk-bayer, tiny).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// `verify` runs in double precision.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    Train,
    Verify,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Train => Precision::Train,
            PrecisionArg::Verify => Precision::Verify,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write checkpoints.
    Train(TrainArgs),
    /// Enhance one PNG or RAW container.
    Infer(InferArgs),
    /// Per-image PSNR/SSIM over a paired dataset.
    Eval(EvalArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
    /// Generate a procedural paired dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Output directory for config.txt, checkpoints and model.lan.
    #[arg(long)]
    out: PathBuf,
    /// Passes over the data, one step per pair.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Input-side crop size.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Degraded-image directory (with --gt-dir).
    #[arg(long, requires = "gt_dir")]
    input_dir: Option<PathBuf>,
    #[arg(long, requires = "input_dir")]
    gt_dir: Option<PathBuf>,
    /// Train on this many procedural pairs instead of directories.
    #[arg(long, conflicts_with = "input_dir")]
    synth_count: Option<usize>,
    #[arg(long)]
    synth_size: Option<usize>,
    /// Epochs between checkpoints; 0 keeps only the final model.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// PNG for RGB models, `.raw` container for Bayer models.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = parse_depth)]
    bit_depth: u8,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Network to apply to every input; without it inputs are scored as they are.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "fast")]
    level: LevelArg,
    /// Run only these criteria (comma-separated numbers).
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
    #[arg(long, hide = true, value_parser = parse_op)]
    inject_fault: Option<OpKind>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Replace existing files.
    #[arg(long)]
    overwrite: bool,
}

fn parse_depth(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bit depth must be 8 or 16, got `{s}`")),
    }
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown operation `{s}`; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

/// File values first, then `--preset`, `--set` and the dedicated flags.
fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KvConfig::new(),
    };
    if let Some(p) = &cli.preset {
        kv.set("preset", p);
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not of the form key=value"))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = cli.seed {
        for key in ["train.seed", "model.seed", "data.seed"] {
            kv.set(key, s);
        }
    }
    if let Some(p) = cli.precision {
        kv.set("train.precision", Precision::from(p));
    }
    if let Some(v) = a.epochs {
        kv.set("train.epochs", v);
    }
    if let Some(v) = a.lr {
        kv.set("train.lr", v);
    }
    if let Some(v) = a.patch_size {
        kv.set("train.patch_size", v);
    }
    if let Some(v) = a.checkpoint_every {
        kv.set("train.checkpoint_every", v);
    }
    if let (Some(i), Some(g)) = (&a.input_dir, &a.gt_dir) {
        kv.set("data.source", "dirs");
        kv.set("data.input_dir", i.display());
        kv.set("data.gt_dir", g.display());
    }
    if let Some(n) = a.synth_count {
        kv.set("data.source", "synth");
        kv.set("data.count", n);
    }
    if let Some(n) = a.synth_size {
        kv.set("data.size", n);
    }
    Ok(TrainConfig::from_kv(&kv)?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(cli, a)?;
    cfg.validate()?;
    let data = cfg.data.load().context("loading training data")?;
    if let DataSource::Dirs { input, .. } = &cfg.data {
        log::info!("{} training pairs from {}", data.len(), input.display());
    }
    match cfg.precision {
        Precision::Train => run_training::<f32>(cfg, &data, &a.out),
        Precision::Verify => run_training::<f64>(cfg, &data, &a.out),
    }
}

fn run_training<T: Element>(cfg: TrainConfig, data: &[lan_core::data::ImagePair], out: &Path) -> Result<ExitCode> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let summary = trainer.run(data, Some(out), &mut |rec| {
        let _ = writeln!(lock, "{rec}");
    })?;
    drop(lock);
    let final_path = summary.checkpoints.last().context("no checkpoint written")?;
    println!(
        "wrote {} ({} steps, checksum {:016x})",
        final_path.display(),
        summary.steps,
        checksum(&to_bytes(&trainer.model))
    );
    Ok(ExitCode::SUCCESS)
}

fn depth(bits: u8) -> BitDepth {
    if bits == 16 {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    }
}

fn enhance_with(
    model: &LanModel<f32>,
    precision: Precision,
    image: &lan_core::Tensor<f32>,
) -> Result<lan_core::Tensor<f32>> {
    Ok(match precision {
        Precision::Train => enhance(model, image)?,
        Precision::Verify => enhance(&model.cast::<f64>(), image)?,
    })
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<ExitCode> {
    let model = load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let image = load_input(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let precision = cli.precision.map_or(Precision::Train, Precision::from);
    let out = enhance_with(&model, precision, &image)?;
    save_image(&out, &a.output, depth(a.bit_depth))?;
    println!("wrote {} ({}x{})", a.output.display(), out.shape()[2], out.shape()[1]);
    Ok(ExitCode::SUCCESS)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<ExitCode> {
    let model = a
        .model
        .as_ref()
        .map(|p| load(p).with_context(|| format!("loading model {}", p.display())))
        .transpose()?;
    let set = load_pair_dir(&a.input_dir, &a.gt_dir)?;
    let precision = cli.precision.map_or(Precision::Train, Precision::from);
    let mut report = MetricReport::default();
    for pair in &set.pairs {
        let pred = match &model {
            Some(m) => enhance_with(m, precision, &pair.input)?,
            None => pair.input.clone(),
        };
        let p = psnr(&pred, &pair.gt, 1.0).with_context(|| format!("scoring {}", pair.id))?;
        let s = ssim(&pred, &pair.gt).with_context(|| format!("scoring {}", pair.id))?;
        report.push(pair.id.clone(), p, s);
    }
    match &a.output {
        Some(path) => {
            report.write_csv(path)?;
            let (p, s) = report.mean();
            println!(
                "wrote {} ({} images, mean psnr {p:.3} dB, mean ssim {s:.4})",
                path.display(),
                report.rows.len()
            );
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<ExitCode> {
    let opts = VerifyOptions {
        level: match a.level {
            LevelArg::Fast => VerifyLevel::Fast,
            LevelArg::Full => VerifyLevel::Full,
        },
        fault: a.inject_fault,
        seed: cli.seed.unwrap_or(0),
    };
    if let Some(bad) = a.only.iter().find(|id| !CRITERIA.iter().any(|(i, _)| i == *id)) {
        bail!("no criterion {bad}; valid numbers are 1 to {}", CRITERIA.len());
    }
    println!("verify level={} seed={}", opts.level, opts.seed);
    let mut failed = 0;
    for (id, _) in CRITERIA {
        if !a.only.is_empty() && !a.only.contains(&id) {
            continue;
        }
        let r = run_criterion(id, &opts);
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("all criteria passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} criteria failed");
        Ok(ExitCode::FAILURE)
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<ExitCode> {
    let d = SynthParams::default();
    let params = SynthParams {
        gamma: a.gamma.unwrap_or(d.gamma),
        gain: a.gain.unwrap_or(d.gain),
        noise_sigma: a.noise_sigma.unwrap_or(d.noise_sigma),
    };
    let seed = cli.seed.unwrap_or(0);
    let pairs = write_synth_dataset(&a.out, a.count, a.size, &params, seed, a.overwrite)?;
    println!(
        "wrote {} pairs to {} and {}",
        pairs.len(),
        a.out.join(SYNTH_INPUT_DIR).display(),
        a.out.join(SYNTH_GT_DIR).display()
    );
    Ok(ExitCode::SUCCESS)
}
