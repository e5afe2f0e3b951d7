mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::{ImageBuffer, Luma, Rgb};
use mdepth::data::{load_manifest, load_rgb, write_synthetic_dataset, Manifest};
use mdepth::gradcheck::{self, GradcheckConfig};
use mdepth::inference::{evaluate_identity, evaluate_network, predict_depth};
use mdepth::network::CheckpointFile;
use mdepth::train::{size_report, Precision, Trainer, FINAL_CHECKPOINT, LOG_FILE};
use mdepth::{colormap, DType, Error, Network, Scalar};

use config::{Overrides, Resolved};

#[derive(Parser, Debug)]
#[command(name = "mdepth", version, about = "Monocular depth estimation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat dotted-key JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for weights, shuffling and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Network preset.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(mdepth::network::PRESETS))]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score ground truth against itself.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
    },
    /// Predict depth for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Also check every toy-network parameter once.
        #[arg(long)]
        full: bool,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write synthetic scenes and a manifest.
    SynthData {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Parameter count, checkpoint size and layer table.
    Info {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_) | Error::Usage(_) | Error::State(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

const DEFAULT_OUT: &str = "out";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let Common {
        config,
        out,
        seed,
        preset,
    } = cli.common;
    let manifest = match &cli.command {
        Command::Train { manifest, .. } | Command::Eval { manifest, .. } => manifest.clone(),
        _ => None,
    };
    let overrides = Overrides {
        preset,
        seed,
        manifest,
    };
    let cfg = Resolved::resolve(config.as_deref(), &overrides)?;
    let out_or_default = || out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match cli.command {
        Command::Train { resume, .. } => cmd_train(&cfg, &out_or_default(), resume.as_deref()),
        Command::Eval {
            checkpoint, identity, ..
        } => cmd_eval(&cfg, &out_or_default(), checkpoint.as_deref(), identity),
        Command::Predict { checkpoint, image } => cmd_predict(&cfg, &out_or_default(), &checkpoint, &image),
        Command::Gradcheck {
            instances,
            full,
            corrupt,
        } => cmd_gradcheck(&cfg, out.as_deref(), instances, full, corrupt),
        Command::SynthData { count, height, width } => cmd_synth(&cfg, &out_or_default(), count, height, width),
        Command::Info { checkpoint } => cmd_info(&cfg, out.as_deref(), checkpoint.as_deref()),
    }
}

fn manifest_for(cfg: &Resolved) -> CliResult<Manifest> {
    let path = cfg
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Usage("no manifest given (use --manifest or data.manifest)".into()))?;
    Ok(load_manifest(path, cfg.data.depth_scale, cfg.loss.max_depth, &cfg.data.split)?)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(())
}

fn cmd_train(cfg: &Resolved, out: &Path, resume: Option<&Path>) -> CliResult {
    let data = manifest_for(cfg)?;
    if data.is_empty() {
        return Err(Error::Data("manifest has no records".into()).into());
    }
    cfg.write(out)?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, &data, out, resume),
        Precision::F64 => train_as::<f64>(cfg, &data, out, resume),
    }
}

fn train_as<T: Scalar>(cfg: &Resolved, data: &Manifest, out: &Path, resume: Option<&Path>) -> CliResult {
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::load(p, cfg.train.clone(), cfg.loss.clone())?,
        None => Trainer::new(Network::<T>::build(cfg.network.clone())?, cfg.train.clone(), cfg.loss.clone())?,
    };
    let log = trainer.run(data, Some(out))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} steps: loss {:.6} -> {:.6}",
            log.len(),
            first.total,
            last.total
        );
    } else {
        println!("nothing to do: schedule already complete at step {}", trainer.step());
    }
    println!("log: {}", out.join(LOG_FILE).display());
    println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn checkpoint_dtype(file: &CheckpointFile) -> CliResult<DType> {
    Ok(file
        .tensors
        .first()
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no tensors".into()))?
        .dtype)
}

fn cmd_eval(cfg: &Resolved, out: &Path, checkpoint: Option<&Path>, identity: bool) -> CliResult {
    let data = manifest_for(cfg)?;
    if data.is_empty() {
        return Err(Error::Data("manifest has no records".into()).into());
    }
    let (model, report) = match checkpoint {
        Some(p) if !identity => {
            let file = CheckpointFile::read(p)?;
            let report = match checkpoint_dtype(&file)? {
                DType::F32 => evaluate_network(&Network::<f32>::from_checkpoint(&file, &["adam."])?, &data, &cfg.loss)?,
                DType::F64 => evaluate_network(&Network::<f64>::from_checkpoint(&file, &["adam."])?, &data, &cfg.loss)?,
            };
            let name = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (name, report)
        }
        _ => ("identity".to_owned(), evaluate_identity(&data)?),
    };
    cfg.write(out)?;
    let table = report.to_table(&model);
    write_file(&out.join("metrics.json"), report.to_json() + "\n")?;
    write_file(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_predict(cfg: &Resolved, out: &Path, checkpoint: &Path, image: &Path) -> CliResult {
    let file = CheckpointFile::read(checkpoint)?;
    let rgb = load_rgb(image)?;
    let depth = match checkpoint_dtype(&file)? {
        DType::F32 => predict_depth(&Network::<f32>::from_checkpoint(&file, &["adam."])?, &rgb, &cfg.loss)?,
        DType::F64 => predict_depth(&Network::<f64>::from_checkpoint(&file, &["adam."])?, &rgb, &cfg.loss)?,
    };
    cfg.write(out)?;
    let (h, w) = (depth.height() as u32, depth.width() as u32);
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let raw: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
        let d = depth.get(y as usize, x as usize).unwrap_or(0.0);
        Luma([(d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16])
    });
    let colors = colormap::colorize_depth(&depth);
    let preview: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w, h, |x, y| Rgb(colors[(y * w + x) as usize]));
    let raw_path = out.join(format!("{stem}_depth.png"));
    let preview_path = out.join(format!("{stem}_color.png"));
    for (path, result) in [(&raw_path, raw.save(&raw_path)), (&preview_path, preview.save(&preview_path))] {
        result.map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    let valid = depth.values().iter().zip(depth.valid()).filter(|(_, &ok)| ok).map(|(&d, _)| d);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    println!("predicted depth: min {lo:.4} m, max {hi:.4} m ({w}x{h})");
    println!("raw: {}", raw_path.display());
    println!("preview: {}", preview_path.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &Resolved, out: Option<&Path>, instances: usize, full: bool, corrupt: Option<String>) -> CliResult {
    if cfg.preset != "toy" {
        return Err(Error::Usage(format!("gradcheck runs on the toy preset, not '{}'", cfg.preset)).into());
    }
    if let Some(op) = &corrupt {
        if !gradcheck::OPS.contains(&op.as_str()) {
            return Err(Error::Usage(format!("unknown op '{op}'")).into());
        }
    }
    let gc = GradcheckConfig {
        seed: cfg.train.seed,
        instances,
        corrupt,
        ..Default::default()
    };
    let mut report = gradcheck::run(&gc)?;
    if full {
        let mut r = gradcheck::check_toy_network_full(gc.seed, gc.tolerance)?;
        r.op = "toy_network_all_parameters".into();
        report.ops.push(r);
    }
    print!("{}", report.to_text());
    if let Some(dir) = out {
        cfg.write(dir)?;
        write_file(
            &dir.join("gradcheck.json"),
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
    }
    if report.passed() {
        println!("all ops within {:e}", report.tolerance);
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for: {}",
            report.failing().join(", ")
        )))
    }
}

fn cmd_synth(cfg: &Resolved, out: &Path, count: usize, height: usize, width: usize) -> CliResult {
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()).into());
    }
    let manifest = write_synthetic_dataset(out, count, cfg.train.seed, height, width)?;
    cfg.write(out)?;
    println!("wrote {count} scenes ({height}x{width}); manifest: {}", manifest.display());
    Ok(())
}

fn cmd_info(cfg: &Resolved, out: Option<&Path>, checkpoint: Option<&Path>) -> CliResult {
    let text = match checkpoint {
        Some(p) => {
            let file = CheckpointFile::read(p)?;
            match checkpoint_dtype(&file)? {
                DType::F32 => info_text(&Network::<f32>::from_checkpoint(&file, &["adam."])?),
                DType::F64 => info_text(&Network::<f64>::from_checkpoint(&file, &["adam."])?),
            }
        }
        None => info_text(&Network::<f32>::build(cfg.network.clone())?),
    };
    print!("{text}");
    if let Some(dir) = out {
        cfg.write(dir)?;
        write_file(&dir.join("info.txt"), &text)?;
    }
    Ok(())
}

fn info_text<T: Scalar>(net: &Network<T>) -> String {
    use std::fmt::Write as _;
    let rows = net.layer_table();
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<name_w$}  {:<20}  {:>10}\n", "name", "shape", "params");
    for r in &rows {
        let _ = writeln!(s, "{:<name_w$}  {:<20}  {:>10}", r.name, format!("{:?}", r.shape), r.params);
    }
    let report = size_report(net);
    let _ = writeln!(s, "parameter tensors: {}", rows.len());
    let _ = writeln!(s, "total parameters: {}", report.param_count);
    let _ = writeln!(s, "encoder parameters: {}", net.encoder_param_count());
    let _ = writeln!(s, "checkpoint bytes: {}", report.checkpoint_bytes);
    let _ = writeln!(s, "{}", report.comparison_line());
    s
}
