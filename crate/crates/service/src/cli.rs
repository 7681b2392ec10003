//! `sketchmod` command line. Exit codes: 0 success, 2 usage or
//! configuration error, 3 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use sketchmod::config::RunConfig;
use sketchmod::data::{
    evaluate, generate_toy_dataset, load_manifest, EncoderEmbedder, Extractors, Split, ToyDatasetSpec,
    ToyFeatureExtractor,
};
use sketchmod::pipeline::{load_checkpoint, sample_with, train, Components, SampleOptions, TrainingOutputs};
use sketchmod::raster::Raster;
use sketchmod::sketch::{export_mask_set, load_vocabulary};
use sketchmod::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "sketchmod",
    version,
    about = "Sketch-conditioned latent diffusion: train, generate, evaluate, serve"
)]
pub struct Cli {
    /// Run config (TOML). Defaults to $SKETCHMOD_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the modulation network on a dataset manifest.
    Train(TrainArgs),
    /// Generate one image from a sketch and a caption.
    Generate(GenerateArgs),
    /// Generate for a manifest split and report FID, CLIP similarity and LPIPS.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Derive ground-truth masks for a sketch and export them.
    ExportMasks(ExportMasksArgs),
    /// Write the procedural toy dataset.
    ToyDataset(ToyDatasetArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub high_noise_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SamplingFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub modulated_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long)]
    pub caption: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Also write masks, attention, scale and shift maps.
    #[arg(long)]
    pub overlays: bool,
    /// Step trace path (default: `<out>` with extension `trace.jsonl`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for generated images and the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Similarity scaling constant K.
    #[arg(long, default_value_t = 1.0)]
    pub clip_scale: f64,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Trained checkpoint; without it a freshly initialized network is served.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct ExportMasksArgs {
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long)]
    pub caption: String,
    /// Newline-delimited labels; defaults to the caption's words.
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyDatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub pairs: usize,
    #[arg(long, default_value_t = 4)]
    pub test_pairs: usize,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Error with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError {
                code: EXIT_USAGE,
                message: format!("config error: {m}"),
            },
            Error::Manifest(m) => CliError {
                code: EXIT_USAGE,
                message: m,
            },
            other => CliError {
                code: EXIT_RUNTIME,
                message: other.to_string(),
            },
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(cli.config.as_deref(), a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Serve(a) => cmd_serve(cli.config.as_deref(), a, out),
        Command::ExportMasks(a) => cmd_export_masks(cli.config.as_deref(), a, out),
        Command::ToyDataset(a) => cmd_toy_dataset(a, out),
    }
}

fn say(out: &mut dyn Write, msg: impl std::fmt::Display) {
    let _ = writeln!(out, "{msg}");
}

fn cmd_train(config: Option<&Path>, a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (mut cfg, _) = RunConfig::resolve(config)?;
    if let Some(v) = a.steps {
        cfg.training.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.training.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.training.learning_rate = v;
    }
    if let Some(v) = a.high_noise_fraction {
        cfg.training.high_noise_fraction = v;
    }
    if let Some(v) = a.seed {
        cfg.training.seed = v;
    }
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let components = Components::build(&cfg)?;
    let samples = sketchmod::data::load_samples(&manifest, Split::Train, &components)?;
    let outputs = TrainingOutputs {
        dir: a.out.clone(),
        dataset_paths: vec![a.manifest.display().to_string()],
    };
    let report = train(components, samples, &outputs)?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        say(
            out,
            format!(
                "trained {} steps: total loss {:.6} -> {:.6}; checkpoint {}",
                report.records.len(),
                first.total,
                last.total,
                report.checkpoint.display()
            ),
        );
    }
    Ok(())
}

fn sampler_from(components: &Components, f: &SamplingFlags) -> sketchmod::pipeline::SamplerConfig {
    let mut s = components.config.sampler.clone();
    if let Some(v) = f.steps {
        s.inference_steps = v;
    }
    if let Some(v) = f.modulated_fraction {
        s.modulated_fraction = v;
    }
    if let Some(v) = f.seed {
        s.seed = v;
    }
    s
}

fn load_trained(path: &Path) -> CliResult<Components> {
    if !path.exists() {
        return Err(CliError {
            code: EXIT_RUNTIME,
            message: format!("checkpoint not found: {}", path.display()),
        });
    }
    Ok(load_checkpoint(path)?.0)
}

fn read_raster(path: &Path, what: &str) -> CliResult<Raster> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(Raster::load(path)?)
}

fn write_trace(path: &Path, trace: &[sketchmod::pipeline::StepRecord]) -> CliResult<()> {
    let mut body = String::new();
    for r in trace {
        body.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let components = load_trained(&a.checkpoint)?;
    let sketch = read_raster(&a.sketch, "sketch")?;
    let sampler = sampler_from(&components, &a.sampling);
    sampler.validate()?;
    let options = SampleOptions {
        overlays: a.overlays,
        ..Default::default()
    };
    let result = sample_with(&sketch, &a.caption, &sampler, &components, options)?;
    ensure_parent(&a.out)?;
    result.image.save_png(&a.out)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.out.with_extension("trace.jsonl"));
    write_trace(&trace_path, &result.trace)?;
    if let Some(o) = &result.overlays {
        let stem = a
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let dir = a.out.with_file_name(format!("{stem}_overlays"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut index = serde_json::Map::new();
        let clean = |k: &str| k.replace([':', '/', ' '], "_");
        for (kind, group) in [("mask", &o.masks), ("attention", &o.attention)] {
            let mut files = serde_json::Map::new();
            for (k, r) in group {
                let name = format!("{kind}_{}.png", clean(k));
                r.save_png(&dir.join(&name))?;
                files.insert(k.clone(), name.into());
            }
            index.insert(kind.to_string(), files.into());
        }
        o.scale_map.save_png(&dir.join("scale_map.png"))?;
        o.shift_map.save_png(&dir.join("shift_map.png"))?;
        index.insert("scale_map".into(), "scale_map.png".into());
        index.insert("shift_map".into(), "shift_map.png".into());
        let idx = dir.join("index.json");
        std::fs::write(&idx, serde_json::to_vec_pretty(&index).map_err(Error::from)?)
            .map_err(|e| Error::io(&idx, e))?;
    }
    let modulated = result.trace.iter().filter(|s| s.modulated).count();
    say(
        out,
        format!(
            "wrote {} ({}x{}); {} of {} steps modulated",
            a.out.display(),
            result.image.width,
            result.image.height,
            modulated,
            result.trace.len()
        ),
    );
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("unknown split {other:?} (expected train or test)"))),
    }
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    let split = parse_split(&a.split)?;
    let components = load_trained(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let base = sampler_from(&components, &a.sampling);
    base.validate()?;
    let (iw, ih) = components.backbone.image_size();
    let mut generated = Vec::new();
    let mut references = Vec::new();
    let mut sketches = Vec::new();
    for (k, (i, e)) in manifest.split(split).enumerate() {
        let image_path = e
            .image_path
            .as_ref()
            .ok_or_else(|| usage(format!("entry {i}: evaluation needs an image_path")))?;
        let sketch = Raster::load(&manifest.resolve(&e.sketch_path))?;
        let reference = Raster::load(&manifest.resolve(image_path))?
            .to_rgb()
            .resize_nearest(iw, ih);
        let sampler = sketchmod::pipeline::SamplerConfig {
            seed: base.seed + k as u64,
            ..base.clone()
        };
        let g = sample_with(&sketch, &e.caption, &sampler, &components, SampleOptions::default())?.image;
        if let Some(dir) = &a.out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            g.save_png(&dir.join(format!("generated_{k:04}.png")))?;
        }
        generated.push(g);
        references.push(reference);
        sketches.push(sketch);
    }
    let toy = ToyFeatureExtractor::new(0);
    let clip = EncoderEmbedder(&components.encoder);
    let extractors = Extractors {
        fid: &toy,
        perceptual: &toy,
        sketch: &clip,
        image: &clip,
        clip_scale: a.clip_scale,
    };
    let report = evaluate(
        &generated,
        &references,
        &sketches,
        &extractors,
        components.config.execution,
    )?;
    if let Some(dir) = &a.out {
        let p = dir.join("metrics.json");
        std::fs::write(&p, report.to_json()?).map_err(|e| Error::io(&p, e))?;
        let t = dir.join("metrics.txt");
        std::fs::write(&t, report.to_table("sketchmod")).map_err(|e| Error::io(&t, e))?;
    }
    let _ = write!(out, "{}", report.to_table("sketchmod"));
    Ok(())
}

fn cmd_serve(config: Option<&Path>, a: ServeArgs, out: &mut dyn Write) -> CliResult<()> {
    let components = match &a.checkpoint {
        Some(p) => load_trained(p)?,
        None => Components::build(&RunConfig::resolve(config)?.0)?,
    };
    let app = crate::api::router(Arc::new(components));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("cannot start runtime: {e}"),
    })?;
    let addr = a.addr.clone();
    say(out, format!("listening on http://{addr}"));
    let _ = out.flush();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError {
            code: EXIT_RUNTIME,
            message: format!("cannot bind {addr}: {e}"),
        })?;
        axum::serve(listener, app).await.map_err(|e| CliError {
            code: EXIT_RUNTIME,
            message: format!("server error: {e}"),
        })
    })
}

fn cmd_export_masks(config: Option<&Path>, a: ExportMasksArgs, out: &mut dyn Write) -> CliResult<()> {
    let components = match &a.checkpoint {
        Some(p) => load_trained(p)?,
        None => Components::build(&RunConfig::resolve(config)?.0)?,
    };
    let sketch = read_raster(&a.sketch, "sketch")?;
    let vocabulary = match &a.vocabulary {
        Some(p) => Some(load_vocabulary(p)?),
        None => None,
    };
    let threshold = a.threshold.unwrap_or(components.config.masks.threshold);
    let set = components.sketch_masks(&sketch, &a.caption, vocabulary.as_deref(), threshold)?;
    let (png, json) = export_mask_set(&set, &a.out, "masks")?;
    say(
        out,
        format!(
            "wrote {} masks to {} and {}",
            set.masks.len(),
            png.display(),
            json.display()
        ),
    );
    Ok(())
}

fn cmd_toy_dataset(a: ToyDatasetArgs, out: &mut dyn Write) -> CliResult<()> {
    let spec = ToyDatasetSpec {
        train_pairs: a.pairs,
        test_pairs: a.test_pairs,
        image_size: a.image_size,
        seed: a.seed,
    };
    let path = generate_toy_dataset(&a.out, &spec)?;
    say(out, format!("wrote {}", path.display()));
    Ok(())
}
