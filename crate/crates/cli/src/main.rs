use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use tvc_core::bitstream::TvcBitstream;
use tvc_core::clip::{self, Clip};
use tvc_core::config::{KeyValues, ModelConfig};
use tvc_core::eval;
use tvc_core::masking::MaskSpec;
use tvc_core::model::Model;
use tvc_core::pipeline;
use tvc_core::synth;
use tvc_core::tokenizer::GopTensor;
use tvc_core::training::{self, Stage, TrainConfig};
use tvc_core::CodecError;

#[derive(Parser)]
#[command(name = "tvc", version, about = "Dual-stream tokenized video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a TVCR clip into a .tvc stream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        n_visible: u32,
        #[arg(long, default_value_t = 7)]
        mask_interval: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a .tvc stream back to a TVCR clip.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u32,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from; a fresh model is built when omitted (stage 1 only).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory of TVCR clips; synthetic clips are generated when omitted.
        #[arg(long)]
        clips: Option<PathBuf>,
        /// Per-step loss history.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Rate-distortion sweep over a directory of clips.
    Eval {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Inclusive n_visible range, e.g. `0..7`.
        #[arg(long, default_value = "0..7")]
        sweep: String,
        #[arg(long, default_value_t = 7)]
        mask_interval: u32,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Per-module MAC counts for one GoP.
    Macs {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the header and per-GoP sub-stream sizes of a stream.
    Inspect { stream: PathBuf },
}

fn parse_sweep(s: &str) -> anyhow::Result<RangeInclusive<u32>> {
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("sweep `{s}` is not of the form a..b"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b): (u32, u32) = (a.trim().parse()?, b.trim().parse()?);
    if a > b {
        bail!("empty sweep range {a}..{b}");
    }
    Ok(a..=b)
}

fn training_clips(cfg: &TrainConfig, stage: Stage, dir: Option<&Path>) -> anyhow::Result<Vec<GopTensor>> {
    let want = cfg.stages[stage.id() as usize - 1].clips;
    let clips: Vec<Clip> = match dir {
        Some(d) => clip::load_dir(d)?.into_iter().map(|(_, c)| c).collect(),
        None => synth::dataset(want, cfg.seed, cfg.frames, cfg.height, cfg.width)?,
    };
    let mut gops = Vec::new();
    for c in &clips {
        gops.extend(pipeline::split_gops(c)?);
    }
    gops.truncate(want);
    Ok(gops)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Encode {
            input,
            weights,
            n_visible,
            mask_interval,
            out,
        } => {
            let spec = MaskSpec::fixed(mask_interval, n_visible)?;
            let report = pipeline::encode_video(&input, &weights, &spec, &out)?;
            print!("{}", report.table());
        }
        Cmd::Decode { input, weights, out } => {
            let c = pipeline::decode_video(&input, &weights, &out)?;
            println!("{} frames of {}x{} written to {}", c.frames(), c.width(), c.height(), out.display());
        }
        Cmd::Train {
            stage,
            config,
            weights,
            out,
            clips,
            history,
        } => {
            let stage = Stage::from_id(stage)?;
            let kv = KeyValues::load(&config)?;
            let cfg = TrainConfig::from_key_values(&kv)?;
            let mut model = match weights {
                Some(w) => Model::load(&w)?,
                None if stage == Stage::Tokenizer => {
                    let mut mc = ModelConfig::default();
                    kv.apply_model(&mut mc)?;
                    Model::new(mc, cfg.seed)?
                }
                None => bail!("stage {} needs --weights from the previous stage", stage.id()),
            };
            let data = training_clips(&cfg, stage, clips.as_deref())?;
            let report = training::run_stage(&mut model, &cfg.plan(stage), &cfg.optimizer(stage), &data)?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                println!("stage {} epoch {} loss {l:.6}", stage.id(), e + 1);
            }
            model.save(&out)?;
            if let Some(h) = history {
                std::fs::write(h, report.history_csv())?;
            }
        }
        Cmd::Eval {
            clips,
            weights,
            sweep,
            mask_interval,
            csv,
        } => {
            let range = parse_sweep(&sweep)?;
            let model = Model::load(&weights)?;
            let set = clip::load_dir(&clips)?;
            let result = pipeline::rd_sweep(&model, &set, range, mask_interval)?;
            std::fs::write(&csv, result.csv())?;
            println!("{:>9} {:>10} {:>9} {:>7} {:>10}", "n_visible", "bpp", "psnr_db", "ssim", "perc_proxy");
            for r in &result.aggregates {
                println!(
                    "{:>9} {:>10.5} {:>9.3} {:>7.4} {:>10.5}",
                    r.n_visible, r.bpp, r.psnr_db, r.ssim, r.perc_proxy
                );
            }
        }
        Cmd::Macs {
            weights,
            frames,
            height,
            width,
            csv,
        } => {
            let model = match weights {
                Some(w) => Model::load(&w)?,
                None => Model::new(ModelConfig::default(), 0)?,
            };
            let report = eval::count_macs(&model, frames, height, width)?;
            print!("{}", report.table());
            if let Some(c) = csv {
                std::fs::write(c, report.csv())?;
            }
        }
        Cmd::Inspect { stream } => {
            let bytes = std::fs::read(&stream).map_err(CodecError::from)?;
            print!("{}", TvcBitstream::parse(&bytes)?.describe());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CodecError>().map_or(1, CodecError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
