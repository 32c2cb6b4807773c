use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use psstrnet::backbone::WeightSource;
use psstrnet::data::{load_pairs, read_image, synth_toy_dataset, write_image, write_mask, SynthConfig};
use psstrnet::infer::{infer_image, panel_strip};
use psstrnet::metrics::evaluate_dir;
use psstrnet::params::parameter_count;
use psstrnet::train::{
    ablation_matrix, evaluate, format_ablation, load_model, run_ablation, AblationEntry, TrainConfig, Trainer,
};

/// Setting this to a non-empty value pins all numeric work to one thread.
const DETERMINISTIC_ENV: &str = "PSSTRNET_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "psstrnet", version, about = "Progressive scene text removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic text dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Remove text from images with a trained model.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Train and score the iteration/fusion configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Train-split pairs.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Test-split pairs.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image side.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Fuse all passes instead of returning the last one.
    #[arg(long, overrides_with = "no_adaptive_fusion")]
    adaptive_fusion: bool,
    #[arg(long)]
    no_adaptive_fusion: bool,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Square training size; must be a multiple of 4.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Loss-network weights with torchvision VGG-16 names.
    #[arg(long, conflicts_with = "random_backbone")]
    backbone_weights: Option<PathBuf>,
    /// Use a seeded random loss network instead of pretrained weights.
    #[arg(long)]
    random_backbone: Option<u64>,
    /// Divide every loss-network width by this.
    #[arg(long)]
    backbone_width_divisor: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.iterations {
            cfg.model.iterations = v;
            if cfg.loss.as_ref().is_some_and(|l| l.gamma_seg.len() != v) {
                bail!("--iterations {v} conflicts with the dice weights in the config file");
            }
        }
        if self.adaptive_fusion {
            cfg.model.adaptive_fusion = true;
        }
        if self.no_adaptive_fusion {
            cfg.model.adaptive_fusion = false;
        }
        if let Some(v) = self.base_channels {
            cfg.model.base_channels = v;
        }
        if let Some(v) = self.size {
            cfg.model.input_size = (v, v);
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.checkpoint_interval {
            cfg.checkpoint_interval = v;
        }
        if self.no_augment {
            cfg.augment = false;
        }
        if let Some(path) = &self.backbone_weights {
            cfg.backbone.weights = Some(WeightSource::File { path: path.clone() });
        }
        if let Some(seed) = self.random_backbone {
            cfg.backbone.weights = Some(WeightSource::Random { seed });
        }
        if let Some(v) = self.backbone_width_divisor {
            cfg.backbone.width_divisor = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing `train/{input,gt}`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config, log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; only --epochs is honoured from the flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a strip with every pass.
    #[arg(long)]
    panels: bool,
    #[arg(long)]
    iterations: Option<usize>,
    /// Return the last pass instead of the fused result.
    #[arg(long)]
    no_fusion: bool,
    /// Image files or directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted images.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pred: Option<PathBuf>,
    /// Ground-truth directory for --pred.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Evaluate a model on a dataset split instead.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    no_fusion: bool,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset root with `train` and `test` splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated labels such as `3It.,3It.+AF`; all seven by default.
    #[arg(long, value_delimiter = ',')]
    configs: Vec<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn write_invocation(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let args: Vec<String> = std::env::args().collect();
    std::fs::write(dir.join("invocation.json"), serde_json::to_string_pretty(&args)?)?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<u8> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    let cfg = SynthConfig {
        count: args.count,
        test_count: args.test_count,
        image_size: (args.size, args.size),
        seed: args.seed,
        ..SynthConfig::default()
    };
    let summary = synth_toy_dataset(&cfg, &args.out)?;
    std::fs::write(args.out.join("synth.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("wrote {} train and {} test pairs to {}", summary.train, summary.test, args.out.display());
    Ok(0)
}

fn train(args: TrainArgs) -> Result<u8> {
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let mut t = Trainer::resume(ckpt)?;
            if let Some(e) = args.flags.epochs {
                t.set_epochs(e);
            }
            t
        }
        None => Trainer::new(args.flags.resolve()?)?,
    };
    println!("parameters: {}", parameter_count(trainer.params()));
    let data = load_pairs(&args.data, "train", &trainer.config().loader())?;
    if data.is_empty() {
        bail!("no training pairs under {}", args.data.join("train").display());
    }
    write_invocation(&args.out)?;
    let start = trainer.epoch();
    let summaries = trainer.fit(&data, &args.out)?;
    for s in &summaries {
        println!("epoch {:>4}  steps {:>4}  loss {:.5}", s.epoch + 1, s.steps, s.mean_total);
    }
    println!("trained epochs {}..{} into {}", start + 1, trainer.epoch(), args.out.display());
    Ok(0)
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn infer(args: InferArgs) -> Result<u8> {
    let (net, _, cfg) = load_model(&args.checkpoint)?;
    let iterations = args.iterations.unwrap_or(cfg.model.iterations);
    let fusion = cfg.model.adaptive_fusion && !args.no_fusion;
    let (image_dir, mask_dir, panel_dir) = (args.out.join("image"), args.out.join("mask"), args.out.join("panels"));
    std::fs::create_dir_all(&image_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    if args.panels {
        std::fs::create_dir_all(&panel_dir)?;
    }
    write_invocation(&args.out)?;
    let mut failures = 0;
    for path in collect_inputs(&args.inputs)? {
        if !is_image(&path) {
            log::warn!("skipping non-image file {}", path.display());
            continue;
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let run = || -> Result<()> {
            let img = read_image(&path, None)?;
            let res = infer_image(&net, &img, iterations, fusion)?;
            write_image(&image_dir.join(format!("{name}.png")), &res.image)?;
            write_mask(&mask_dir.join(format!("{name}.png")), &res.mask)?;
            if args.panels {
                let strip = panel_strip(&img, &res);
                let p = panel_dir.join(format!("{name}.png"));
                strip.save(&p).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        };
        if let Err(e) = run() {
            eprintln!("error: {}: {e:#}", path.display());
            failures += 1;
        }
    }
    Ok(if failures == 0 { 0 } else { 1 })
}

fn eval(args: EvalArgs) -> Result<u8> {
    write_invocation(&args.out)?;
    if let Some(pred) = &args.pred {
        let gt = args.gt.as_ref().context("--gt is required with --pred")?;
        let report = evaluate_dir(pred, gt)?;
        report.write(&args.out)?;
        print!("{}", report.to_table());
        for (name, msg) in &report.errors {
            eprintln!("error: {name}: {msg}");
        }
        return Ok(if report.errors.is_empty() { 0 } else { 1 });
    }
    let (Some(ckpt), Some(data)) = (&args.checkpoint, &args.data) else {
        bail!("give either --pred and --gt, or --checkpoint and --data");
    };
    let (net, _, cfg) = load_model(ckpt)?;
    let iterations = args.iterations.unwrap_or(cfg.model.iterations);
    let fusion = cfg.model.adaptive_fusion && !args.no_fusion;
    let set = load_pairs(data, &args.split, &cfg.loader())?;
    let ev = evaluate(&net, &set, iterations, fusion, cfg.batch_size, Some(&args.out.join("predictions")))?;
    std::fs::write(args.out.join("evaluation.json"), serde_json::to_string_pretty(&ev)?)?;
    let r = &ev.report;
    println!("psnr {:.3}  mssim {:.3}  mse {:.6}  age {:.4}  peps {:.6}  pceps {:.6}  mask_iou {:.4}", r.psnr, r.mssim, r.mse, r.age, r.peps, r.pceps, ev.mask_iou);
    let b = &ev.baseline;
    println!("input baseline: psnr {:.3}  mssim {:.3}", b.psnr, b.mssim);
    for (name, msg) in &ev.errors {
        eprintln!("error: {name}: {msg}");
    }
    Ok(if ev.errors.is_empty() { 0 } else { 1 })
}

fn ablate(args: AblateArgs) -> Result<u8> {
    let cfg = args.flags.resolve()?;
    let entries = if args.configs.is_empty() {
        ablation_matrix()
    } else {
        args.configs.iter().map(|c| AblationEntry::parse(c.trim())).collect::<Result<Vec<_>, _>>()?
    };
    println!("parameters ({} passes): {}", cfg.model.iterations, {
        let (_, params) = psstrnet::model::Psstrnet::init(&cfg.model, cfg.seed)?;
        parameter_count(&params)
    });
    let train_set = load_pairs(&args.data, "train", &cfg.loader())?;
    let test_set = load_pairs(&args.data, "test", &cfg.loader())?;
    if train_set.is_empty() || test_set.is_empty() {
        bail!("ablation needs non-empty train and test splits under {}", args.data.display());
    }
    write_invocation(&args.out)?;
    let rows = run_ablation(&cfg, &train_set, &test_set, &entries, &args.out)?;
    let table = format_ablation(&rows);
    std::fs::write(args.out.join("ablation.tsv"), &table)?;
    std::fs::write(args.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(0)
}

fn main() -> ExitCode {
    if std::env::var_os(DETERMINISTIC_ENV).is_some_and(|v| !v.is_empty()) {
        // Must happen before the first parallel kernel starts its pool.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
