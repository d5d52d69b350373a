//! Command-line front end. Exit codes: 0 success, 1 validation or runtime
//! failure, 2 usage error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::dataset::{self, Dataset, Split};
use crate::dataset::synthetic::{generate_synthetic, SceneSpec};
use crate::eval::{render_frame, sequence_codes, RenderOptions};
use crate::model::PortraitModel;
use crate::train::Trainer;
use crate::{bench, eval, gradcheck, Error};

#[derive(Debug, Parser)]
#[command(name = "portrait-field", version, about = "Audio-driven talking-portrait radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with exact ground truth.
    SynthData,
    /// Stage 1: train the head field and build the occupancy grid.
    TrainHead,
    /// Stage 2: fine-tune the head around the lips.
    FinetuneLips,
    /// Stage 3: train the torso field.
    TrainTorso,
    /// Render every frame of the dataset's audio track.
    Render,
    /// Score the test split.
    Eval,
    /// Time inference.
    Bench,
    /// Finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct Opts {
    /// JSON run config (for synth-data, a scene description).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Laptop-scale profile: 64×64 images, fewer steps and rays.
    #[arg(long, global = true)]
    pub desk: bool,
    #[arg(long, global = true, value_name = "D", value_parser = clap::value_parser!(u8).range(1..=3))]
    pub audio_dim: Option<u8>,
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub max_samples: Option<u64>,
    #[arg(long, global = true, value_name = "FLOAT")]
    pub beta: Option<f64>,
    /// PNG composited behind the rendered torso.
    #[arg(long, global = true, value_name = "PATH")]
    pub background: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FLOAT")]
    pub eye_ratio: Option<f64>,
    /// Keep every candidate sample instead of pruning by occupancy.
    #[arg(long, global = true)]
    pub no_prune: bool,
}

impl Opts {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        if let Some(s) = self.seed {
            m.insert("seed".into(), s.into());
        }
        if self.desk {
            m.insert("desk".into(), true.into());
        }
        if let Some(d) = self.audio_dim {
            m.insert("audio_dim".into(), d.into());
        }
        if let Some(n) = self.max_samples {
            m.insert("max_samples".into(), n.into());
        }
        if let Some(b) = self.beta {
            m.insert("beta".into(), b.into());
        }
        if let Some(e) = self.eye_ratio {
            m.insert("eye_ratio".into(), e.into());
        }
        if self.no_prune {
            m.insert("prune".into(), false.into());
        }
        m
    }

    fn need<'a>(&self, flag: &str, v: &'a Option<PathBuf>) -> Result<&'a Path, Error> {
        v.as_deref().ok_or_else(|| Error::Validation(format!("--{flag} is required for this command")))
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn echo(cfg: &RunConfig) -> Result<(), Error> {
    eprintln!("config {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn write_json<S: Serialize>(out: Option<&Path>, value: &S) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Exclusive marker next to a checkpoint while a stage trains it.
struct Lock(PathBuf);

impl Lock {
    fn acquire(checkpoint: &Path) -> Result<Self, Error> {
        let mut name = checkpoint.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "{} exists: another run is training this checkpoint (delete the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn load_inputs(o: &Opts) -> Result<(Dataset, PortraitModel, RunConfig), Error> {
    let data = dataset::load(o.need("dataset", &o.dataset)?)?;
    let mut model = PortraitModel::load(o.need("checkpoint", &o.checkpoint)?)?;
    let cfg = model.config.resume(o.config.as_deref(), o.overrides())?;
    model.config = cfg.clone();
    Ok((data, model, cfg))
}

fn train_stage(o: &Opts, fresh: bool, stage: impl FnOnce(&mut Trainer) -> Result<(), Error>) -> Result<i32, Error> {
    let ckpt = o.need("checkpoint", &o.checkpoint)?.to_path_buf();
    let data = dataset::load(o.need("dataset", &o.dataset)?)?;
    let mut model = if fresh {
        let cfg = RunConfig::resolve(o.config.as_deref(), o.overrides())?;
        PortraitModel::new(cfg, data.logits.logit_dim, data.train_frames().len())
    } else {
        let mut m = PortraitModel::load(&ckpt)?;
        m.config = m.config.resume(o.config.as_deref(), o.overrides())?;
        m
    };
    echo(&model.config)?;
    let _lock = Lock::acquire(&ckpt)?;
    let mut sink: Box<dyn Write> = match &o.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut t = Trainer::new(&mut model, &data)?;
    t.checkpoint = Some(ckpt);
    t.log = Some(&mut *sink);
    t.progress = Some(100);
    stage(&mut t)?;
    sink.flush().map_err(|e| Error::io("<log>", e))?;
    Ok(0)
}

fn background(o: &Opts, data: &Dataset) -> Result<Option<Vec<f32>>, Error> {
    o.background.as_deref().map(|p| dataset::read_rgb(p, data.camera.width, data.camera.height)).transpose()
}

#[derive(Serialize)]
struct RenderedRecord {
    index: usize,
    file: String,
    audio_index: usize,
    split: Split,
    eye_ratio: f32,
    pose: [f64; 16],
    samples: usize,
}

#[derive(Serialize)]
struct RenderMetadata {
    width: usize,
    height: usize,
    config: RunConfig,
    frames: Vec<RenderedRecord>,
}

fn execute(cli: &Cli) -> Result<i32, Error> {
    let o = &cli.opts;
    match cli.command {
        Command::SynthData => {
            let out = o.need("out", &o.out)?;
            let spec: SceneSpec = match &o.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
                }
                None => SceneSpec::default(),
            };
            let scene = generate_synthetic(&spec, o.seed.unwrap_or(0), out)?;
            eprintln!("wrote {} frames to {}", scene.states.len(), out.display());
            Ok(0)
        }
        Command::TrainHead => train_stage(o, true, |t| t.train_head()),
        Command::FinetuneLips => train_stage(o, false, |t| t.finetune_lips()),
        Command::TrainTorso => train_stage(o, false, |t| t.train_torso()),
        Command::Render => {
            let (data, model, cfg) = load_inputs(o)?;
            echo(&cfg)?;
            let out = o.need("out", &o.out)?;
            let dir = out.join("frames");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let opts = RenderOptions::for_model(&model, &data, background(o, &data)?);
            let params = model.eval_params();
            let codes = sequence_codes(&model, &params, &data, cfg.beta)?;
            let cam = &data.camera;
            let mut frames = Vec::new();
            for (i, f) in data.frames.iter().enumerate() {
                let r = render_frame(&model, &params, &data, i, &codes[f.audio_index], &opts)?;
                let file = format!("frames/{i:05}.png");
                dataset::write_rgb(&out.join(&file), &r.image, cam.width, cam.height)?;
                frames.push(RenderedRecord {
                    index: i,
                    file,
                    audio_index: f.audio_index,
                    split: f.split,
                    eye_ratio: opts.eye_ratio.unwrap_or(f.eye_ratio),
                    pose: f.pose.matrix,
                    samples: r.head.samples,
                });
            }
            let meta = RenderMetadata { width: cam.width, height: cam.height, config: cfg, frames };
            write_json(Some(&out.join("metadata.json")), &meta)?;
            eprintln!("rendered {} frames to {}", meta.frames.len(), out.display());
            Ok(0)
        }
        Command::Eval => {
            let (data, model, cfg) = load_inputs(o)?;
            echo(&cfg)?;
            let opts = RenderOptions::for_model(&model, &data, background(o, &data)?);
            let report = eval::evaluate(&model, &data, Split::Test, &opts)?;
            eprintln!(
                "mean PSNR {:.3} dB, SSIM {:.4}, mouth r {:.3}, eye rho {:?}, dynamic ratio {:.3}",
                report.mean_psnr, report.mean_ssim, report.mouth_correlation, report.eye_spearman, report.dynamic.ratio
            );
            write_json(o.out.as_deref(), &report)?;
            Ok(0)
        }
        Command::Bench => {
            let (data, model, cfg) = load_inputs(o)?;
            echo(&cfg)?;
            let opts = RenderOptions::for_model(&model, &data, background(o, &data)?);
            let report = bench::bench(&model, &data, &opts, bench::WARMUP_FRAMES, bench::TIMED_FRAMES)?;
            write_json(o.out.as_deref(), &report)?;
            Ok(0)
        }
        Command::Gradcheck => {
            let report = gradcheck::run(o.seed.unwrap_or(0), gradcheck::DEFAULT_CASES)?;
            eprint!("{}", report.table());
            if let Some(p) = &o.out {
                write_json(Some(p), &report)?;
            }
            Ok(if report.passed { 0 } else { 1 })
        }
    }
}
