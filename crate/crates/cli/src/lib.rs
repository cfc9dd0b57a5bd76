//! Subcommands of the `headsplat` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use headsplat::anchoring::GaussianSet;
use headsplat::assets_io::codec::{Encoder, Width};
use headsplat::assets_io::{
    load_dataset, load_gaussians, load_head, load_image, load_params, make_synthetic_dataset, save_checkpoint,
    save_dataset, save_gaussians, save_image, write, ParamSequence, RunConfig,
};
use headsplat::fitter::{fit, FitReport, FitState};
use headsplat::head_model::{HeadModel, MotionParams};
use headsplat::objectives::{psnr, ssim};
use headsplat::renderer::{composite_inpaint, identity_refiner, render, GaussianInstance, RenderMode};
use headsplat::scene::pose_scene;
use headsplat::{Error, Result};
use headsplat_motion::io::{load_corpus, save_corpus, save_translator};
use headsplat_motion::pipeline::{build_translator, speaker_apertures};
use headsplat_motion::{contrastive_accuracy, generate_corpus, ToyAudio};

pub const THREADS_ENV: &str = "HEADSPLAT_THREADS";
pub const POSE_MAGIC: &[u8; 8] = b"GTPOSE01";
pub const CORPUS_FILE: &str = "corpus.bin";

/// Offset applied to the run seed for the held-out translator clips.
const HELDOUT_SEED: u64 = 0x4e1d_0u64;

#[derive(Debug, Parser)]
#[command(name = "headsplat", version, about = "Mesh-anchored Gaussian head synthesis, fitting and rendering")]
pub struct Cli {
    /// Worker threads; results do not depend on it [default: all cores]
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark dataset and toy speech corpus
    Synth(SynthArgs),
    /// Write the posed world-space Gaussians of every frame
    Animate(AnimateArgs),
    /// Render every frame of a parameter sequence to PPM images
    Render(RenderArgs),
    /// Fit a Gaussian set to a dataset directory
    Fit(FitArgs),
    /// Pretrain and train the toy audio-to-motion translator
    TrainMotion(TrainMotionArgs),
    /// Compare two image directories with PSNR and SSIM
    Eval(EvalArgs),
    /// Measure rendering throughput
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run configuration (TOML); the [synth], [style] and [motion] tables are used [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    /// Head asset
    #[arg(long)]
    pub head: PathBuf,
    /// Gaussian set
    #[arg(long)]
    pub gaussians: PathBuf,
    /// Parameter sequence
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory, one NNNN.bin dump per frame
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian set whose latent network and blendshape banks replace those of --gaussians [default: none]
    #[arg(long)]
    pub banks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub gaussians: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Run configuration (TOML); [camera] and [style] are used
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, one NNNN.ppm per frame
    #[arg(long)]
    pub out: PathBuf,
    /// Colour from the learned coefficients or fixed per-category colours
    #[arg(long, value_enum, default_value_t = ModeArg::Color)]
    pub mode: ModeArg,
    /// Directory of original NNNN.ppm frames to composite into [default: none]
    #[arg(long, requires = "masks")]
    pub composite: Option<PathBuf>,
    /// Directory of NNNN.pgm face masks, 1 where the render replaces the original [default: none]
    #[arg(long, requires = "composite")]
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Color,
    Semantic,
}

impl From<ModeArg> for RenderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Color => RenderMode::Color,
            ModeArg::Semantic => RenderMode::Semantic,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory written by `synth`
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; the report goes to <out>.report.json and timing to <out>.timing.json
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the fitted Gaussian set here [default: none]
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainMotionArgs {
    /// Directory holding corpus.bin
    #[arg(long)]
    pub corpus: PathBuf,
    /// Head asset
    #[arg(long)]
    pub head: PathBuf,
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Translator checkpoint path; the report goes to <out>.report.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted images
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference images; every PPM/PGM here needs a counterpart in --pred
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the table here [default: stdout only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub gaussians: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// Run configuration (TOML); [camera] and [style] are used
    #[arg(long)]
    pub config: PathBuf,
    /// Frames to render
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Parameter sequence to cycle through [default: a generated jaw motion]
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Also write the report here [default: stdout only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error: 2 bad arguments, 3 malformed input,
/// 4 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Animate(a) => cmd_animate(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Fit(a) => cmd_fit(&a).map(drop),
        Command::TrainMotion(a) => cmd_train_motion(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Bench(a) => cmd_bench(&a).map(drop),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write(path, text.as_bytes())
}

fn frame_file(i: usize, ext: &str) -> String {
    format!("{i:04}.{ext}")
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
}

fn load_posable(head: &Path, gaussians: &Path, params: &Path) -> Result<(HeadModel, GaussianSet, ParamSequence)> {
    let head = load_head(head)?;
    let set = load_gaussians(gaussians)?;
    set.validate(head.triangles.len()).map_err(|e| Error::malformed("gaussians", e.to_string()))?;
    let params = load_params(params)?;
    if params.dims != head.param_dims() {
        return Err(Error::malformed("params", "parameter dimensions do not match the head"));
    }
    Ok((head, set, params))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let ds = make_synthetic_dataset(&cfg.synth, &cfg.style, a.seed)?;
    save_dataset(&a.out, &ds)?;
    let corpus = generate_corpus(&cfg.motion, ds.head.param_dims(), cfg.synth.frame_rate, a.seed)?;
    save_corpus(&a.out.join(CORPUS_FILE), &corpus)
}

/// Binary dump of posed Gaussians: count, SH rest count, then per Gaussian
/// centre, row-major rotation, scale, opacity, base colour, higher-order
/// colour coefficients and category.
pub fn encode_posed(instances: &[GaussianInstance]) -> Vec<u8> {
    let rest = instances.first().map_or(0, |g| g.kappa_rest.len());
    let mut e = Encoder::new(POSE_MAGIC, Width::F32);
    e.u32(instances.len());
    e.u32(rest);
    for g in instances {
        e.v3(&g.u);
        e.m3(&g.r);
        e.v3(&g.s);
        e.f(g.alpha);
        e.v3(&g.kappa0);
        g.kappa_rest.iter().for_each(|k| e.v3(k));
        e.u32(g.category as usize);
    }
    e.buf
}

pub fn cmd_animate(a: &AnimateArgs) -> Result<()> {
    let (head, mut set, params) = load_posable(&a.head, &a.gaussians, &a.params)?;
    if let Some(b) = &a.banks {
        let donor = load_gaussians(b)?;
        if donor.gaussians.len() != set.gaussians.len() {
            return Err(Error::malformed(
                "banks",
                format!("{} bank rows for {} Gaussians", donor.gaussians.len(), set.gaussians.len()),
            ));
        }
        set.banks = donor.banks;
        set.validate(head.triangles.len()).map_err(|e| Error::malformed("banks", e.to_string()))?;
    }
    fs::create_dir_all(&a.out)?;
    for (i, p) in params.frames.iter().enumerate() {
        let scene = pose_scene(&head, &set, p)?;
        write(&a.out.join(frame_file(i, "bin")), &encode_posed(&scene.instances))?;
    }
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let camera = cfg.camera.camera()?;
    let (head, set, params) = load_posable(&a.head, &a.gaussians, &a.params)?;
    fs::create_dir_all(&a.out)?;
    for (i, p) in params.frames.iter().enumerate() {
        let scene = pose_scene(&head, &set, p)?;
        let mut img = render(&scene.instances, &camera, a.mode.into(), &cfg.style)?;
        if let (Some(orig), Some(masks)) = (&a.composite, &a.masks) {
            let o = load_image(&orig.join(frame_file(i, "ppm")))?;
            let m = load_image(&masks.join(frame_file(i, "pgm")))?;
            img = composite_inpaint(&o, &img, &m, identity_refiner).map_err(|e| Error::malformed("composite", e.to_string()))?;
        }
        save_image(&a.out.join(frame_file(i, "ppm")), &img)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_clock_seconds: f64,
    threads: usize,
}

pub fn cmd_fit(a: &FitArgs) -> Result<FitReport> {
    let cfg = load_config(&a.config)?;
    let ds = load_dataset(&a.dataset)?;
    let state = FitState::new(ds.init.clone(), ds.train_params.frames.clone());
    let started = Instant::now();
    let (state, report) = fit(&ds.head, state, &ds.fit_data(), &cfg.fit_config(), |_| {})?;
    save_checkpoint(&a.out, &state)?;
    if let Some(p) = &a.export {
        save_gaussians(p, &state.set)?;
    }
    write_json(&with_suffix(&a.out, ".report.json"), &report)?;
    write_json(
        &with_suffix(&a.out, ".timing.json"),
        &Timing {
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        },
    )?;
    if report.diverged {
        return Err(Error::NonFinite("fit diverged; checkpoint holds the last finite state".into()));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct MotionReport {
    pub clips: usize,
    pub pretrain_first_loss: f64,
    pub pretrain_final_loss: f64,
    pub train_first_rec: f64,
    pub train_final_rec: f64,
    pub train_final_total: f64,
    pub heldout_contrastive_accuracy: f64,
    /// Mean lip aperture of each speaker over the same held-out audio.
    pub heldout_speaker_apertures: Vec<f64>,
}

pub fn cmd_train_motion(a: &TrainMotionArgs) -> Result<MotionReport> {
    let cfg = load_config(&a.config)?;
    let head = load_head(&a.head)?;
    let clips = load_corpus(&a.corpus.join(CORPUS_FILE))?;
    if clips[0].motion.dims != head.param_dims() {
        return Err(Error::malformed("corpus", "parameter dimensions do not match the head"));
    }
    let t = build_translator(&cfg.motion, &cfg.weights, &head, &clips, cfg.seed)?;
    save_translator(&a.out, &t.model)?;
    let held: Vec<ToyAudio> = generate_corpus(
        &cfg.motion,
        head.param_dims(),
        clips[0].motion.frame_rate,
        cfg.seed.wrapping_add(HELDOUT_SEED),
    )?
    .into_iter()
    .map(|c| c.audio)
    .collect();
    let h = &t.train.history;
    let last = h.last().copied().unwrap_or_default();
    let report = MotionReport {
        clips: clips.len(),
        pretrain_first_loss: t.pretrain.first_loss,
        pretrain_final_loss: t.pretrain.final_loss,
        train_first_rec: h.first().map_or(f64::NAN, |l| l.rec),
        train_final_rec: last.rec,
        train_final_total: last.rec + last.smooth + last.latent,
        heldout_contrastive_accuracy: contrastive_accuracy(
            &t.model.featurizer,
            &held,
            cfg.motion.segments,
            100,
            cfg.seed.wrapping_add(HELDOUT_SEED),
        )?,
        heldout_speaker_apertures: speaker_apertures(&t.model, &head, &held)?,
    };
    write_json(&with_suffix(&a.out, ".report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub frame: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub frames: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn image_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") || name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<EvalReport> {
    let names = image_names(gt)?;
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no PPM/PGM images in {}", gt.display())));
    }
    let mut frames = Vec::with_capacity(names.len());
    for n in names {
        let p = pred.join(&n);
        if !p.exists() {
            return Err(Error::InvalidArgument(format!("{} has no counterpart {}", n, p.display())));
        }
        let (a, b) = (load_image(&p)?, load_image(&gt.join(&n))?);
        if !a.same_shape(&b) {
            return Err(Error::malformed(n, "predicted and reference images differ in shape"));
        }
        frames.push(EvalRow {
            psnr: psnr(&a, &b)?,
            ssim: ssim(&a, &b)?,
            frame: n,
        });
    }
    let k = frames.len() as f64;
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|r| r.psnr).sum::<f64>() / k,
        mean_ssim: frames.iter().map(|r| r.ssim).sum::<f64>() / k,
        frames,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let report = evaluate_dirs(&a.pred, &a.gt)?;
    let text = serde_json::to_string_pretty(&report).expect("reports serialize");
    println!("{text}");
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub fps: f64,
}

/// Jaw opening and a slow head turn, for benchmarking without a sequence.
pub fn bench_motion(head: &HeadModel, frames: usize) -> Vec<MotionParams> {
    let dims = head.param_dims();
    (0..frames)
        .map(|t| {
            let mut p = MotionParams::zeros(dims);
            let ph = t as f64 / 25.0;
            if dims.pose > 3 {
                p.psi[3] = 0.15 + 0.1 * (ph * 6.0).sin();
            }
            if dims.pose > 1 {
                p.psi[1] = 0.2 * (ph * 1.3).sin();
            }
            if dims.expr > 0 {
                p.epsilon[0] = 0.5 * (ph * 4.0).sin();
            }
            p
        })
        .collect()
}

pub fn cmd_bench(a: &BenchArgs) -> Result<BenchReport> {
    let cfg = load_config(&a.config)?;
    let camera = cfg.camera.camera()?;
    let head = load_head(&a.head)?;
    let set = load_gaussians(&a.gaussians)?;
    set.validate(head.triangles.len()).map_err(|e| Error::malformed("gaussians", e.to_string()))?;
    let motion = match &a.params {
        Some(p) => {
            let seq = load_params(p)?;
            if seq.dims != head.param_dims() || seq.frames.is_empty() {
                return Err(Error::malformed("params", "empty or mismatched parameter sequence"));
            }
            seq.frames
        }
        None => bench_motion(&head, a.frames.max(1)),
    };
    if a.frames == 0 {
        return Err(Error::InvalidArgument("--frames must be positive".into()));
    }
    let started = Instant::now();
    for i in 0..a.frames {
        let scene = pose_scene(&head, &set, &motion[i % motion.len()])?;
        render(&scene.instances, &camera, RenderMode::Color, &cfg.style)?;
    }
    let secs = started.elapsed().as_secs_f64();
    let report = BenchReport {
        frames: a.frames,
        gaussians: set.gaussians.len(),
        width: camera.width,
        height: camera.height,
        threads: rayon::current_num_threads(),
        wall_clock_seconds: secs,
        fps: a.frames as f64 / secs.max(1e-12),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(report)
}
