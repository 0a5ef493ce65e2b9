//! `nowcast` command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeDelta, Utc};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    build_sequences, encode_gray_png, fetch_frames, load_dataset, load_frame, load_manifest, resize_area, save_dataset,
    save_frame, synth_advection, FrameFormat, FrameSource, RadarFrame, SequenceSample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Forecaster, Persistence};
use crate::model::{build_model, fit, load_checkpoint, save_checkpoint, ModelParams, TrainOptions, TrainingMeta};
use crate::optim::OptimState;
use crate::render::{render_comparison, render_strip, RenderOptions, STRIP_PANELS};

#[derive(Debug, Parser)]
#[command(
    name = "nowcast",
    version,
    about = "ConvLSTM precipitation nowcasting from radar frames"
)]
struct Cli {
    /// Run configuration (flat TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic advection dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Download raw frames from the radar API into the cache directory.
    Fetch {
        /// Window start, RFC 3339.
        #[arg(long)]
        from: DateTime<Utc>,
        /// Window end, RFC 3339.
        #[arg(long)]
        to: DateTime<Utc>,
    },
    /// Build a sequence dataset from a directory of PNG or RFRM frames.
    BuildSeq {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Forecast every sample of a dataset and write the frames.
    Predict {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long)]
        out: PathBuf,
        /// Also write viridis PNGs.
        #[arg(long)]
        png: bool,
    },
    /// Report RMSE per lead time as a table and as JSON.
    Eval {
        #[command(flatten)]
        io: ModelIo,
        /// JSON output path (default: <output_dir>/eval.json).
        #[arg(long)]
        json: Option<PathBuf>,
        /// Evaluate the persistence baseline instead of the checkpoint.
        #[arg(long)]
        persistence: bool,
    },
    /// Render truth/prediction panels, a GIF and a four-lead strip.
    Render {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long)]
        sample: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ModelIo {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl ModelIo {
    fn data<'a>(&'a self, cfg: &'a RunConfig) -> &'a Path {
        self.data.as_deref().unwrap_or(&cfg.data_dir)
    }
    fn checkpoint<'a>(&'a self, cfg: &'a RunConfig) -> &'a Path {
        self.checkpoint.as_deref().unwrap_or(&cfg.checkpoint)
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// runtime error (one-line diagnostic on stderr), 2 on a usage error.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth { out, sequences, seed } => synth(&cfg, &out, sequences, seed),
        Command::Fetch { from, to } => fetch(&cfg, from, to),
        Command::BuildSeq { frames, out } => build_seq(&cfg, &frames, &out),
        Command::Train {
            io,
            epochs,
            seed,
            resume,
        } => train(&cfg, &io, epochs, seed, resume),
        Command::Predict { io, out, png } => predict_cmd(&cfg, &io, &out, png),
        Command::Eval { io, json, persistence } => eval_cmd(&cfg, &io, json, persistence),
        Command::Render { io, sample, out } => render_cmd(&cfg, &io, sample.as_deref(), &out),
    }
}

fn synth(cfg: &RunConfig, out: &Path, sequences: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut sc = cfg.synth();
    if let Some(s) = seed {
        sc.seed = s;
    }
    let n = sequences.unwrap_or(cfg.synth_sequences);
    let samples = synth_advection(&sc, n)?;
    let warned = samples.iter().filter(|s| s.warning.is_some()).count();
    save_dataset(&samples, out)?;
    println!("wrote {n} sequences to {}", out.display());
    if warned > 0 {
        println!("warning: {warned} sequences have a blob leaving the frame");
    }
    Ok(())
}

fn fetch(cfg: &RunConfig, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<()> {
    let out = fetch_frames(&cfg.fetch(), from, to)?;
    println!(
        "{} files ({} cached, {} requests, {} missing)",
        out.files.len(),
        out.cache_hits,
        out.requests,
        out.missing.len()
    );
    if out.partial {
        println!("partial: hourly request budget exhausted, rerun later to continue");
    }
    Ok(())
}

fn build_seq(cfg: &RunConfig, frames_dir: &Path, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(frames_dir)
        .map_err(|e| Error::io(frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| FrameFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    let mut frames = paths
        .iter()
        .map(|p| {
            let f = load_frame(p)?;
            if (f.height(), f.width()) == (cfg.frame_h, cfg.frame_w) {
                Ok(f)
            } else {
                resize_area(&f, cfg.frame_h, cfg.frame_w)
            }
        })
        .collect::<Result<Vec<RadarFrame>>>()?;
    frames.sort_by_key(|f| f.timestamp);
    let samples = build_sequences(&frames, &cfg.layout());
    if samples.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} frames contain no gapless window of {}",
            frames.len(),
            cfg.layout().window()
        )));
    }
    save_dataset(&samples, out)?;
    println!(
        "{} frames -> {} sequences in {}",
        frames.len(),
        samples.len(),
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    Ok(load_checkpoint(path)?.params)
}

fn check_dims(params: &ModelParams<f32>, data: &Path) -> Result<()> {
    let m = load_manifest(data)?;
    let a = &params.arch;
    if (m.frame_h, m.frame_w) != (a.frame_h, a.frame_w)
        || (m.input_frames, m.output_frames) != (a.input_frames, a.output_frames)
    {
        return Err(Error::InvalidConfig(format!(
            "dataset {} has {}+{} frames of {}x{}, model expects {}+{} of {}x{}",
            data.display(),
            m.input_frames,
            m.output_frames,
            m.frame_h,
            m.frame_w,
            a.input_frames,
            a.output_frames,
            a.frame_h,
            a.frame_w
        )));
    }
    Ok(())
}

fn train(cfg: &RunConfig, io: &ModelIo, epochs: Option<usize>, seed: Option<u64>, resume: bool) -> Result<()> {
    let ckpt = io.checkpoint(cfg).to_path_buf();
    let mut opts: TrainOptions = cfg.train_options();
    if let Some(e) = epochs {
        opts.epochs = e;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    let (mut params, mut opt, mut meta) = if resume {
        let ck = load_checkpoint(&ckpt)?;
        let opt = ck
            .optimizer
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no optimizer state", ckpt.display())))?;
        (ck.params, opt, ck.meta)
    } else {
        let params = build_model::<f32>(&cfg.arch()?, opts.seed)?;
        let opt = OptimState::new(cfg.adadelta(), params.trainable());
        (params, opt, TrainingMeta::default())
    };
    opts.start_epoch = meta.epoch;
    let data = io.data(cfg);
    check_dims(&params, data)?;
    let samples = load_dataset(data)?;
    println!(
        "training {} parameters on {} sequences for {} epochs",
        params.parameter_count(),
        samples.len(),
        opts.epochs
    );
    fit(&mut params, &mut opt, &samples, &opts, |e, p, o| {
        meta.epoch = e.epoch;
        meta.loss_history.push(e.mean_loss);
        save_checkpoint(&ckpt, p, Some(o), &meta)?;
        println!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_loss);
        Ok(())
    })?;
    Ok(())
}

/// Forecast frames for one sample, timestamped at the cadence after the
/// last input.
fn forecast_frames<F: Forecaster + ?Sized>(f: &F, s: &SequenceSample, cadence: TimeDelta) -> Result<Vec<RadarFrame>> {
    let wrap = |e| Error::Sample {
        id: s.id.clone(),
        source: Box::new(e),
    };
    let y = f.forecast(&s.input_tensor(), s.targets.len()).map_err(wrap)?;
    let (h, w) = s.frame_dims();
    let last = s.inputs.last().expect("samples have inputs").timestamp;
    y.data()
        .chunks(h * w)
        .enumerate()
        .map(|(k, px)| {
            let ts = last + cadence * (k as i32 + 1);
            RadarFrame::from_pixels(ts, h, w, px.to_vec(), FrameSource::Synthetic).map_err(wrap)
        })
        .collect()
}

fn predict_cmd(cfg: &RunConfig, io: &ModelIo, out: &Path, png: bool) -> Result<()> {
    let params = load_model(io.checkpoint(cfg))?;
    let data = io.data(cfg);
    check_dims(&params, data)?;
    let cadence = TimeDelta::minutes(cfg.cadence_minutes);
    let samples = load_dataset(data)?;
    for s in &samples {
        let dir = out.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, f) in forecast_frames(&params, s, cadence)?.iter().enumerate() {
            save_frame(f, &dir.join(format!("p{:03}.rfrm", k + 1)))?;
            if png {
                let p = dir.join(format!("p{:03}.png", k + 1));
                crate::render::render_frame(f, &p)?;
                let g = dir.join(format!("p{:03}_gray.png", k + 1));
                fs::write(&g, encode_gray_png(f)?).map_err(|e| Error::io(&g, e))?;
            }
        }
    }
    println!("wrote forecasts for {} sequences to {}", samples.len(), out.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, io: &ModelIo, json: Option<PathBuf>, persistence: bool) -> Result<()> {
    let data = io.data(cfg);
    let samples = load_dataset(data)?;
    let report: EvalReport = if persistence {
        evaluate(&Persistence, &samples)?
    } else {
        let params = load_model(io.checkpoint(cfg))?;
        check_dims(&params, data)?;
        evaluate(&params, &samples)?
    };
    print!("{}", report.to_table(cfg.cadence_minutes));
    let path = json.unwrap_or_else(|| cfg.output_dir.join("eval.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    println!("\nreport written to {}", path.display());
    Ok(())
}

fn render_cmd(cfg: &RunConfig, io: &ModelIo, sample: Option<&str>, out: &Path) -> Result<()> {
    let params = load_model(io.checkpoint(cfg))?;
    let data = io.data(cfg);
    check_dims(&params, data)?;
    let samples = load_dataset(data)?;
    let s = match sample {
        Some(id) => samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no sample {id} in {}", data.display())))?,
        None => &samples[0],
    };
    let pred = forecast_frames(&params, s, TimeDelta::minutes(cfg.cadence_minutes))?;
    let opts = RenderOptions {
        gif_delay_ms: cfg.gif_delay_ms,
        cadence_minutes: cfg.cadence_minutes as u32,
        ..Default::default()
    };
    let outs = render_comparison(&pred, &s.targets, out, &opts)?;
    if pred.len() >= STRIP_PANELS {
        render_strip(&pred, &s.targets, &out.join("strip.png"), &opts)?;
    }
    println!("wrote {} panels and {}", outs.panels.len(), outs.gif.display());
    Ok(())
}
