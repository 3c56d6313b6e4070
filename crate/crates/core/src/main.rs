use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand};

use cmae::experiment::{
    crop_preview, evaluate, run_sweep, Checkpoint, EvalMode, MetricsLog, Record, TrainConfig, Trainer,
};
use cmae::experiment::train::open_split;
use cmae::datapipe::Split;
use cmae::{CmaeError, Result};

#[derive(Parser)]
#[command(name = "cmae", version, about = "Contrastive masked autoencoder pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the encoder; checkpoints and metrics.jsonl go to `out_dir`.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even when the config fingerprint differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint by linear probing or fine-tuning.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: EvalMode,
    },
    /// Pretrain briefly with every decoder in the grid and write a CSV.
    SweepDecoders {
        #[arg(long)]
        config: PathBuf,
        /// CSV path; defaults to `<out_dir>/decoder_sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render heatmap and crop-rectangle overlays.
    CropPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encoder weights; a fresh initialization when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    EvalMode::parse(s).map_err(|e| e.to_string())
}

fn pretrain(config: &Path, resume: Option<&Path>, force: bool) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    cfg.validate()?;
    let data = open_split(&cfg, Split::Train, cfg.train_subset)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let mut trainer = Trainer::new(cfg, data)?;
    if let Some(p) = resume {
        let ckpt = Checkpoint::load(p, &Device::Cpu)?;
        ckpt.check_fingerprint(&trainer.cfg, force, p)?;
        trainer.restore(&ckpt)?;
        log::info!("resumed from {} at step {}", p.display(), trainer.step);
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| CmaeError::io(&out_dir, e))?;
    let mut log = MetricsLog::append_to(&out_dir.join("metrics.jsonl"))?;
    match trainer.run(&mut log, Some(&out_dir))? {
        Some(p) => println!("{}", p.display()),
        None => log::info!("nothing to do: step {} already reached", trainer.step),
    }
    Ok(())
}

fn eval(ckpt_path: &Path, mode: EvalMode) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path, &Device::Cpu)?;
    let report = evaluate(&ckpt, mode)?;
    let dir = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut log = MetricsLog::append_to(&dir.join("metrics.jsonl"))?;
    log.push(Record::Eval {
        step: ckpt.step,
        epoch: ckpt.epoch,
        mode: mode.as_str().to_string(),
        top1: report.val_top1,
    })?;
    println!(
        "{}",
        serde_json::json!({
            "mode": mode.as_str(),
            "step": ckpt.step,
            "train_top1": report.train_top1,
            "val_top1": report.val_top1,
        })
    );
    Ok(())
}

fn sweep(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let csv = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join("decoder_sweep.csv"));
    let rows = run_sweep(&cfg, &csv)?;
    log::info!("{} decoder variants written to {}", rows.len(), csv.display());
    println!("{}", csv.display());
    Ok(())
}

fn preview(config: &Path, out: &Path, ckpt: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let ckpt = ckpt.map(|p| Checkpoint::load(p, &Device::Cpu)).transpose()?;
    let files = crop_preview(&cfg, ckpt.as_ref(), out)?;
    log::info!("wrote {} overlays to {}", files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Pretrain { config, resume, force } => pretrain(&config, resume.as_deref(), force),
        Command::Eval { ckpt, mode } => eval(&ckpt, mode),
        Command::SweepDecoders { config, out } => sweep(&config, out),
        Command::CropPreview { config, out, ckpt } => preview(&config, &out, ckpt.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
