//! Command-line surface: argument parsing, command execution, manifests and
//! exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SceneRef};
use crate::denoiser::{build_toy_unet, ToyUNet};
use crate::error::{Error, Result};
use crate::frames::{list_frames, read_frames, write_frames, write_gray};
use crate::inversion::{invert, InversionRecord};
use crate::metrics::{edit_success, frame_consistency, reconstruction_metrics, MetricReport, UNetFrameEncoder};
use crate::pipeline::{edit_video, reconstruct};
use crate::schedule::Schedule;
use crate::tensor::VideoTensor;
use crate::toyworld::{render_scene_with_mask, sample_dataset, train_toy, Color, SceneSpec, ToyTextEncoder};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_MISSING: u8 = 4;
pub const EXIT_INPUT: u8 = 5;
pub const EXIT_NUMERIC: u8 = 6;
pub const EXIT_IO: u8 = 7;

const EXIT_TABLE: &str = "\
Exit codes:
  0  success
  1  internal error
  2  invalid command-line usage
  3  invalid configuration
  4  missing artifact (checkpoint, record, frame directory, config file)
  5  invalid input data (shapes, empty videos, mismatched records)
  6  numerical failure (non-finite values, missing gradients)
  7  I/O or file-format error";

/// Exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Shape { .. } | Error::Domain(_) | Error::DuplicateMap { .. } | Error::MissingStep { .. } => EXIT_INPUT,
        Error::NonFinite(_) | Error::GradientUnavailable => EXIT_NUMERIC,
        Error::Io(_) | Error::Format(_) | Error::Image(_) => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "videdit", version, about = "Zero-shot text-driven editing of toy videos", after_help = EXIT_TABLE)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Values that override the config file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run name; outputs go to <output>/<run-id>/<command>.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Scene seed for render and edit scoring.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Denoiser checkpoint [default: <output>/model.bin].
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Input frame directory.
    #[arg(long, global = true)]
    pub video: Option<PathBuf>,
    /// Inversion record directory.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
    /// Original frame directory for eval [default: the input video].
    #[arg(long, global = true)]
    pub original: Option<PathBuf>,
    /// Edited frame directory for eval [default: the edit output].
    #[arg(long, global = true)]
    pub edited: Option<PathBuf>,
    /// Prompt describing the input video.
    #[arg(long, global = true)]
    pub source_prompt: Option<String>,
    /// Prompt describing the desired edit.
    #[arg(long, global = true)]
    pub target_prompt: Option<String>,
    /// Classifier-free guidance scale for inversion and editing.
    #[arg(long, global = true)]
    pub guidance: Option<f64>,
    /// Fraction of sampling steps that inject source attention maps.
    #[arg(long, global = true)]
    pub tau_m: Option<f64>,
    /// Fraction of sampling steps that use the optimized null text.
    #[arg(long, global = true)]
    pub tau_null: Option<f64>,
    /// Number of sampling steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Optimizer steps for train-toy.
    #[arg(long, global = true)]
    pub train_steps: Option<usize>,
    /// Run every attention layer in one mode: self, sc, temporal or st.
    #[arg(long, global = true)]
    pub attention: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the configured toy scene to a frame directory.
    Render,
    /// Train the toy denoiser and write its checkpoint.
    TrainToy,
    /// Invert a frame directory and optimize its null-text embeddings.
    Invert,
    /// Reconstruct the inverted video and report fidelity.
    Reconstruct,
    /// Edit the inverted video toward the target prompt.
    Edit,
    /// Compare an original and an edited frame directory.
    Eval,
    /// Write cross-attention maps of the reconstruction pass as images.
    AttnExport,
    /// Print the effective configuration.
    ShowConfig,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Render => "render",
            Command::TrainToy => "train-toy",
            Command::Invert => "invert",
            Command::Reconstruct => "reconstruct",
            Command::Edit => "edit",
            Command::Eval => "eval",
            Command::AttnExport => "attn-export",
            Command::ShowConfig => "show-config",
        }
    }
}

impl Overrides {
    /// Loads the config file (or defaults) and applies the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = &$flag {
                    $field = v.clone();
                }
            };
        }
        set!(c.run_id, self.run_id);
        set!(c.seed, self.seed);
        set!(c.paths.output, self.output);
        set!(c.source_prompt, self.source_prompt);
        set!(c.edit.target_prompt, self.target_prompt);
        set!(c.edit.guidance_scale, self.guidance);
        set!(c.null_text.guidance_scale, self.guidance);
        set!(c.edit.tau_m, self.tau_m);
        set!(c.edit.tau_null, self.tau_null);
        set!(c.train.steps, self.train_steps);
        if let Some(s) = self.steps {
            c.schedule.num_inference_steps = s;
            c.edit.num_steps = s;
        }
        for (slot, flag) in [
            (&mut c.paths.checkpoint, &self.checkpoint),
            (&mut c.paths.video, &self.video),
            (&mut c.paths.record, &self.record),
            (&mut c.paths.original, &self.original),
            (&mut c.paths.edited, &self.edited),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(a) = &self.attention {
            c.attention.uniform = Some(a.clone());
            c.attention.modes.clear();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct OutputFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    code_version: String,
    run_id: String,
    seed: u64,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_hash: Option<String>,
    outputs: Vec<OutputFile>,
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Shared state of one command invocation.
struct Run {
    cfg: RunConfig,
    command: &'static str,
    out: PathBuf,
    outputs: Vec<PathBuf>,
    schedule_hash: Option<String>,
    checkpoint_hash: Option<String>,
}

impl Run {
    fn new(cfg: RunConfig, command: &'static str) -> Result<Self> {
        let out = cfg.output_dir(command);
        Ok(Self { cfg, command, out, outputs: Vec::new(), schedule_hash: None, checkpoint_hash: None })
    }

    fn schedule(&mut self) -> Result<Schedule> {
        let s = self.cfg.schedule()?;
        self.schedule_hash = Some(s.fingerprint());
        Ok(s)
    }

    fn model(&mut self) -> Result<ToyUNet> {
        let path = self.cfg.checkpoint_path();
        let m = ToyUNet::load(&path)?;
        if m.config() != &self.cfg.model {
            log::warn!("checkpoint architecture differs from [model]; using the checkpoint's");
        }
        self.checkpoint_hash = Some(m.fingerprint());
        Ok(m)
    }

    fn encoder(&self, model: &ToyUNet) -> Result<ToyTextEncoder> {
        let e = self.cfg.encoder()?;
        if e.dim() != model.config().text_dim {
            return Err(Error::Config(format!(
                "encoder.dim ({}) does not match the checkpoint's text_dim ({})",
                e.dim(),
                model.config().text_dim
            )));
        }
        Ok(e)
    }

    fn record(&self, schedule: &Schedule, model: &ToyUNet) -> Result<InversionRecord> {
        let rec = InversionRecord::load(&self.cfg.record_path())?;
        rec.check_schedule(schedule)?;
        if !rec.model_hash.is_empty() && rec.model_hash != model.fingerprint() {
            return Err(Error::domain("inversion record was computed with a different checkpoint"));
        }
        Ok(rec)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let p = self.out.join(name);
        std::fs::write(&p, contents)?;
        self.outputs.push(p);
        Ok(())
    }

    fn frames(&mut self, video: &VideoTensor) -> Result<PathBuf> {
        let dir = self.out.join("frames");
        if dir.exists() {
            // Stale frames from a longer previous run would otherwise survive.
            for p in list_frames(&dir)? {
                std::fs::remove_file(p)?;
            }
        }
        self.outputs.extend(write_frames(video, &dir)?);
        Ok(dir)
    }

    fn report(&mut self, report: &MetricReport) -> Result<()> {
        let text = report.to_toml()?;
        self.write("metrics.toml", text.as_bytes())
    }

    /// Writes the effective config and `run.manifest`.
    fn finish(mut self) -> Result<PathBuf> {
        let cfg_text = self.cfg.to_toml()?;
        self.write("config.toml", cfg_text.as_bytes())?;
        let mut outputs = Vec::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            outputs.push(OutputFile { path: rel.display().to_string(), sha256: file_hash(p)? });
        }
        let m = Manifest {
            command: self.command.into(),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            run_id: self.cfg.run_id.clone(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash()?,
            schedule_hash: self.schedule_hash.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            outputs,
        };
        let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.out.join("run.manifest"), text)?;
        Ok(self.out)
    }
}

/// Scene of the input video: `[eval.scene]`, else a `scene.toml` written by
/// `render` next to the frame directory.
fn find_scene(cfg: &RunConfig, frames: &Path) -> Result<Option<SceneRef>> {
    if let Some(s) = &cfg.eval.scene {
        return Ok(Some(s.clone()));
    }
    let p = frames.parent().map(|d| d.join("scene.toml"));
    match p {
        Some(p) if p.is_file() => {
            let text = std::fs::read_to_string(&p)?;
            toml::from_str(&text).map(Some).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        }
        _ => Ok(None),
    }
}

/// First color word of a prompt.
pub fn prompt_color(prompt: &str) -> Option<Color> {
    prompt.split_whitespace().find_map(|w| Color::parse(w).ok())
}

fn score_edit(cfg: &RunConfig, scene: &SceneRef, original: &VideoTensor, edited: &VideoTensor, report: &mut MetricReport) -> Result<()> {
    let rendered = render_scene_with_mask(&scene.spec, scene.seed)?;
    let Some(target) = prompt_color(&cfg.edit.target_prompt) else {
        return Ok(());
    };
    let e = edit_success(original, edited, &rendered.mask, scene.spec.color, target)?;
    report.edit_passed = Some(cfg.eval.thresholds.passes(&e));
    report.edit_success = Some(e);
    Ok(())
}

fn cmd_render(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "render")?;
    let scene = SceneRef {
        spec: SceneSpec { size: run.cfg.model.image_size, ..run.cfg.dataset.template.clone() },
        seed: run.cfg.seed,
    };
    let r = render_scene_with_mask(&scene.spec, scene.seed)?;
    run.frames(&r.video)?;
    run.write("prompt.txt", format!("{}\n", r.prompt).as_bytes())?;
    let text = toml::to_string(&scene).map_err(|e| Error::Format(e.to_string()))?;
    run.write("scene.toml", text.as_bytes())?;
    run.finish()
}

fn cmd_train(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "train-toy")?;
    let schedule = run.schedule()?;
    let enc = run.cfg.encoder()?;
    let data = sample_dataset(run.cfg.dataset.size, &run.cfg.dataset.template, run.cfg.dataset.seed)?;
    let mut model = build_toy_unet(run.cfg.model.clone())?;
    let log_every = (run.cfg.train.steps / 20).max(1);
    let report = train_toy(&mut model, &data, &enc, &schedule, &run.cfg.train, |step, loss| {
        if (step + 1) % log_every == 0 {
            log::info!("step {} loss {loss:.5}", step + 1);
        }
    })?;
    let ckpt = run.cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&ckpt)?;
    run.checkpoint_hash = Some(model.fingerprint());
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    run.write("loss.csv", curve.as_bytes())?;
    // CSV rather than TOML: item seeds use the full u64 range.
    let mut items = String::from("index,seed,prompt\n");
    for (i, d) in data.iter().enumerate() {
        items.push_str(&format!("{i},{},{}\n", d.seed, d.prompt));
    }
    run.write("dataset.csv", items.as_bytes())?;
    log::info!("initial loss {:.4}, final loss {:.4}", report.initial_loss(50), report.final_loss(50));
    run.finish()
}

fn cmd_invert(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "invert")?;
    let schedule = run.schedule()?;
    let video = read_frames(&run.cfg.video_path())?;
    let model = run.model()?;
    let enc = run.encoder(&model)?;
    let ctx = run.cfg.attention.context(&model)?;
    let rec = invert(
        &video.to_model_range(),
        &run.cfg.source_prompt,
        &enc.encode(&run.cfg.source_prompt),
        &enc.empty(),
        &model,
        &model.fingerprint(),
        &schedule,
        &ctx,
        &run.cfg.null_text,
    )?;
    let dir = run.cfg.record_path();
    rec.save(&dir, Some(&run.cfg.null_text))?;
    run.outputs.push(dir.join("record.bin"));
    run.outputs.push(dir.join("manifest.toml"));
    run.finish()
}

fn cmd_reconstruct(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "reconstruct")?;
    let schedule = run.schedule()?;
    let model = run.model()?;
    let enc = run.encoder(&model)?;
    let rec = run.record(&schedule, &model)?;
    let ctx = run.cfg.attention.context(&model)?;
    let src = enc.encode(&rec.source_prompt);
    let out = reconstruct(&rec, &src, &model, &schedule, run.cfg.edit.guidance_scale, &ctx)?;
    let video = out.video.to_pixel_range();
    run.frames(&video)?;
    let original = rec.source().to_pixel_range();
    let report = MetricReport {
        reconstruction: Some(reconstruction_metrics(&original, &video)?),
        frame_consistency: consistency(&model, &enc, &video)?,
        ..Default::default()
    };
    run.report(&report)?;
    run.finish()
}

fn consistency(model: &ToyUNet, enc: &ToyTextEncoder, video: &VideoTensor) -> Result<Option<f64>> {
    if video.frames() < 2 {
        return Ok(None);
    }
    frame_consistency(video, &UNetFrameEncoder::new(model, enc.empty())).map(Some)
}

fn cmd_edit(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "edit")?;
    let schedule = run.schedule()?;
    let model = run.model()?;
    let enc = run.encoder(&model)?;
    let rec = run.record(&schedule, &model)?;
    let ctx = run.cfg.attention.context(&model)?;
    let res = edit_video(
        &rec,
        &enc.encode(&rec.source_prompt),
        &enc.encode(&run.cfg.edit.target_prompt),
        &enc.empty(),
        &run.cfg.edit,
        &model,
        &schedule,
        &ctx,
    )?;
    run.frames(&res.edited_video)?;
    let original = rec.source().to_pixel_range();
    let mut report = MetricReport {
        reconstruction: Some(reconstruction_metrics(&original, &res.reconstruction)?),
        frame_consistency: consistency(&model, &enc, &res.edited_video)?,
        ..Default::default()
    };
    if let Some(scene) = find_scene(&run.cfg, &run.cfg.video_path())? {
        score_edit(&run.cfg, &scene, &original, &res.edited_video, &mut report)?;
    }
    run.report(&report)?;
    let stats = toml::to_string(&res.stats).map_err(|e| Error::Format(e.to_string()))?;
    run.write("stats.toml", stats.as_bytes())?;
    run.finish()
}

fn cmd_eval(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "eval")?;
    let original = read_frames(&run.cfg.original_path())?;
    let edited = read_frames(&run.cfg.edited_path())?;
    original.ensure_same_shape(&edited)?;
    let model = run.model()?;
    let enc = run.encoder(&model)?;
    let mut report = MetricReport {
        reconstruction: Some(reconstruction_metrics(&original, &edited)?),
        frame_consistency: consistency(&model, &enc, &edited)?,
        ..Default::default()
    };
    if let Some(scene) = find_scene(&run.cfg, &run.cfg.original_path())? {
        score_edit(&run.cfg, &scene, &original, &edited, &mut report)?;
    }
    run.report(&report)?;
    run.finish()
}

/// One grid per (timestep, layer, head): rows are frames, columns tokens;
/// each cell is the query grid normalized to its maximum.
fn cmd_attn_export(cfg: RunConfig) -> Result<PathBuf> {
    let mut run = Run::new(cfg, "attn-export")?;
    let schedule = run.schedule()?;
    let model = run.model()?;
    let enc = run.encoder(&model)?;
    let rec = run.record(&schedule, &model)?;
    let ctx = run.cfg.attention.context(&model)?;
    let out = reconstruct(&rec, &enc.encode(&rec.source_prompt), &model, &schedule, run.cfg.edit.guidance_scale, &ctx)?;
    let keep: Vec<usize> = schedule.inference_steps().iter().step_by(run.cfg.attn_export.stride).copied().collect();
    let dir = run.out.join("maps");
    std::fs::create_dir_all(&dir)?;
    for ((t, layer), map) in out.maps.iter() {
        if !keep.contains(t) {
            continue;
        }
        for head in 0..map.heads {
            let path = dir.join(format!("t{t:04}_l{layer:02}_h{head}.png"));
            let (w, h, px) = map_grid(map, head);
            write_gray(&path, w, h, &px)?;
            run.outputs.push(path);
        }
    }
    run.finish()
}

fn map_grid(map: &crate::attention::AttnMap, head: usize) -> (usize, usize, Vec<f64>) {
    let side = (map.queries as f64).sqrt().round() as usize;
    let cell = side + 1;
    let (w, h) = (map.tokens * cell - 1, map.frames * cell - 1);
    let mut px = vec![0.0; w * h];
    for f in 0..map.frames {
        let block = &map.frame(f)[head * map.queries * map.tokens..(head + 1) * map.queries * map.tokens];
        for tok in 0..map.tokens {
            let peak = (0..map.queries).map(|q| block[q * map.tokens + tok]).fold(0.0f32, f32::max);
            let scale = if peak > 0.0 { 1.0 / peak as f64 } else { 0.0 };
            for q in 0..map.queries {
                let (y, x) = (f * cell + q / side, tok * cell + q % side);
                px[y * w + x] = block[q * map.tokens + tok] as f64 * scale;
            }
        }
    }
    (w, h, px)
}

/// Runs one parsed invocation; returns the output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = cli.overrides.resolve()?;
    match cli.command {
        Command::Render => cmd_render(cfg),
        Command::TrainToy => cmd_train(cfg),
        Command::Invert => cmd_invert(cfg),
        Command::Reconstruct => cmd_reconstruct(cfg),
        Command::Edit => cmd_edit(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::AttnExport => cmd_attn_export(cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(PathBuf::new())
        }
    }
}

/// Entry point of the binary: parses `args`, runs, and maps the outcome to an
/// exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            if !dir.as_os_str().is_empty() {
                println!("{}", dir.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
