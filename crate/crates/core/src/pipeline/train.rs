use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    attention_loss, l1_regularizers, noise_loss, total_loss, total_loss_tensor, variance_loss, LossBreakdown, LossTerms,
};
use crate::modnet::modulate;
use crate::pipeline::{
    build_batch, sample_training_timestep, save_checkpoint, BatchStreams, Components, StepRecord, TrainingSample,
};
use crate::probe::{probe_attention, resample_masks};
use crate::tensor::{stream_rng, LatentTensor};

/// One line of the JSON-lines loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub noise: f64,
    pub attn: f64,
    pub l1_scale: f64,
    pub l1_shift: f64,
    pub variance: f64,
    pub total: f64,
    pub is_freehand_fraction: f64,
}

impl LossRecord {
    pub fn new(step: usize, b: &LossBreakdown, is_freehand_fraction: f64) -> Self {
        LossRecord {
            step,
            noise: b.noise,
            attn: b.attn,
            l1_scale: b.l1_scale,
            l1_shift: b.l1_shift,
            variance: b.variance,
            total: b.total,
            is_freehand_fraction,
        }
    }
}

const EVAL_STREAM: u64 = 1 << 63;

struct SampleResult {
    loss: Tensor,
    breakdown: LossBreakdown,
    t: usize,
}

/// Holds the components and the optimizer over the modulation network and the
/// encoder's trainable suffix. The backbone is never handed to the optimizer.
pub struct Trainer {
    pub components: Components,
    optimizer: AdamW,
    optimized: Vec<String>,
    step: usize,
    diagnostics_dir: PathBuf,
    last_timesteps: Vec<usize>,
}

impl Trainer {
    pub fn new(components: Components) -> Result<Self> {
        let cfg = &components.config;
        cfg.validate()?;
        let mut vars = components.modnet.vars();
        vars.extend(components.encoder.trainable_vars()?);
        let mut optimized = components.modnet.params().names();
        optimized.extend(
            components
                .encoder
                .trainable_parameters(&components.encoder_config())?
                .names,
        );
        let optimizer = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.training.learning_rate,
                weight_decay: cfg.training.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Trainer {
            components,
            optimizer,
            optimized,
            step: 0,
            diagnostics_dir: std::env::temp_dir().join("sketchmod-diagnostics"),
            last_timesteps: Vec::new(),
        })
    }

    /// Where a non-finite loss writes its snapshot.
    pub fn set_diagnostics_dir(&mut self, dir: impl Into<PathBuf>) {
        self.diagnostics_dir = dir.into();
    }

    /// Names of every parameter the optimizer updates.
    pub fn optimized_parameter_names(&self) -> &[String] {
        &self.optimized
    }

    /// Optimizer steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Training timesteps drawn for the samples of the last evaluated batch.
    pub fn last_timesteps(&self) -> &[usize] {
        &self.last_timesteps
    }

    pub fn into_components(self) -> Components {
        self.components
    }

    fn sample_result(&self, sample: &TrainingSample, stream: u64) -> Result<SampleResult> {
        let c = &self.components;
        let cfg = &c.config;
        let backbone = c.backbone.as_ref();
        let mut r = stream_rng(cfg.training.seed, stream);
        let z0 = backbone.vae_encode(&sample.image)?;
        let t = sample_training_timestep(&cfg.training, &mut r);
        let eps = LatentTensor::randn(z0.shape(), &mut r)?;
        let z_t = backbone.forward_noise(&z0, t, &eps)?;
        let cond = backbone.encode_text(&sample.caption)?;
        let eps_theta = backbone.denoise(&z_t, t, &cond, false)?.eps_pred.detach();

        let grid = c.encoder.encode_sketch(&sample.sketch, &c.encoder_config())?;
        let maps = c.modnet.forward(&grid, &eps_theta, &z_t, t)?;
        let eps_prime = modulate(&eps_theta, &maps)?;

        let noise = noise_loss(&eps, &eps_prime)?;
        let (l1_scale, l1_shift) = l1_regularizers(&maps)?;
        let variance = variance_loss(&maps)?;
        let attn = if sample.masks.is_empty() {
            noise.zeros_like()?
        } else {
            let probed = probe_attention(backbone, &z_t, t, &eps_prime, &cond, &cfg.probe)?;
            attention_loss(&probed, &resample_masks(&sample.masks, &cfg.probe), cfg.loss.lambda_reg)?
        };
        let terms = LossTerms {
            noise,
            attn,
            l1_scale,
            l1_shift,
            variance,
        };
        let loss = total_loss_tensor(&terms, &cfg.loss, sample.is_freehand)?;
        let breakdown = total_loss(&terms.values()?, &cfg.loss, sample.is_freehand);
        Ok(SampleResult { loss, breakdown, t })
    }

    /// Mean batch loss (still on the tape) and its breakdown, without updating
    /// any parameter.
    pub fn batch_loss(&mut self, batch: &[Arc<TrainingSample>]) -> Result<(Tensor, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let exec = self.components.config.execution;
        let idx: Vec<usize> = (0..batch.len()).collect();
        let this = &*self;
        let step = self.step as u64;
        let results = exec.try_map(&idx, |&i| this.sample_result(&batch[i], (step << 20) | i as u64))?;
        let mut sum = results[0].loss.clone();
        for r in &results[1..] {
            sum = (sum + &r.loss)?;
        }
        let mean = (sum / batch.len() as f64)?;
        let pairs: Vec<(LossBreakdown, bool)> = results
            .iter()
            .zip(batch)
            .map(|(r, s)| (r.breakdown, s.is_freehand))
            .collect();
        let breakdown = LossBreakdown::batch_mean(&pairs, &self.components.config.loss);
        self.last_timesteps = results.iter().map(|r| r.t).collect();
        if !breakdown.is_finite() || !mean.to_scalar::<f64>()?.is_finite() {
            return Err(self.non_finite(batch, &results));
        }
        Ok((mean, breakdown))
    }

    /// Mean loss breakdown over `samples` with noise and timesteps drawn from
    /// a stream reserved for evaluation, so repeated calls see identical draws
    /// regardless of how many steps were taken.
    pub fn evaluate_loss(&self, samples: &[Arc<TrainingSample>]) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::Input("no samples to evaluate".into()));
        }
        let idx: Vec<usize> = (0..samples.len()).collect();
        let results = self
            .components
            .config
            .execution
            .try_map(&idx, |&i| self.sample_result(&samples[i], EVAL_STREAM | i as u64))?;
        let pairs: Vec<(LossBreakdown, bool)> = results
            .iter()
            .zip(samples)
            .map(|(r, s)| (r.breakdown, s.is_freehand))
            .collect();
        Ok(LossBreakdown::batch_mean(&pairs, &self.components.config.loss))
    }

    fn non_finite(&self, batch: &[Arc<TrainingSample>], results: &[SampleResult]) -> Error {
        let seed = self.components.config.training.seed;
        let snapshot = self
            .diagnostics_dir
            .join(format!("nonfinite_step{}.json", self.step + 1));
        let body = serde_json::json!({
            "step": self.step + 1,
            "seed": seed,
            "samples": batch.iter().zip(results).map(|(s, r)| serde_json::json!({
                "id": s.id,
                "caption": s.caption,
                "is_freehand": s.is_freehand,
                "t": r.t,
                "breakdown": r.breakdown,
            })).collect::<Vec<_>>(),
        });
        let written = std::fs::create_dir_all(&self.diagnostics_dir)
            .and_then(|_| std::fs::write(&snapshot, serde_json::to_vec_pretty(&body).unwrap_or_default()));
        if let Err(e) = written {
            return Error::io(&snapshot, e);
        }
        Error::NonFiniteLoss {
            step: self.step + 1,
            seed,
            snapshot,
        }
    }

    /// One optimizer step on the mean batch loss.
    pub fn train_step(&mut self, batch: &[Arc<TrainingSample>]) -> Result<LossBreakdown> {
        let (loss, breakdown) = self.batch_loss(batch)?;
        self.optimizer.backward_step(&loss)?;
        self.step += 1;
        Ok(breakdown)
    }
}

/// Destination of a training run's artifacts.
#[derive(Debug, Clone)]
pub struct TrainingOutputs {
    pub dir: PathBuf,
    /// Recorded in the run manifest.
    pub dataset_paths: Vec<String>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub trace: PathBuf,
    pub components: Components,
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, v: &T) -> Result<()> {
    let line = serde_json::to_string(v)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Full training run. Writes into `outputs.dir`:
/// `run.json` (manifest), `loss.jsonl`, `trace.jsonl` (drawn timesteps),
/// `checkpoints/step_NNNNNN.safetensors` every `checkpoint_every` steps and the
/// final `checkpoint.safetensors`.
pub fn train(components: Components, samples: Vec<TrainingSample>, outputs: &TrainingOutputs) -> Result<TrainReport> {
    let dir = &outputs.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = components.config.clone();
    let manifest = serde_json::json!({
        "dataset_paths": outputs.dataset_paths,
        "training": cfg.training,
        "loss_weights": cfg.loss,
        "modnet": cfg.modnet,
        "probe": cfg.probe,
        "seed": cfg.training.seed,
    });
    let run_path = dir.join("run.json");
    std::fs::write(&run_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&run_path, e))?;

    let mut streams = BatchStreams::new(samples, cfg.training.seed)?;
    let mut trainer = Trainer::new(components)?;
    trainer.set_diagnostics_dir(dir.join("diagnostics"));
    let loss_path = dir.join("loss.jsonl");
    let trace_path = dir.join("trace.jsonl");
    let mut loss_log = create(&loss_path)?;
    let mut trace_log = create(&trace_path)?;
    let mut records = Vec::with_capacity(cfg.training.steps);
    for step in 1..=cfg.training.steps {
        let batch = build_batch(&mut streams, &cfg.training)?;
        let freehand = batch.iter().filter(|s| s.is_freehand).count() as f64 / batch.len() as f64;
        let b = trainer.train_step(&batch)?;
        let rec = LossRecord::new(step, &b, freehand);
        write_line(&mut loss_log, &loss_path, &rec)?;
        for &t in trainer.last_timesteps() {
            let r = StepRecord {
                step_index: step,
                t,
                modulated: true,
            };
            write_line(&mut trace_log, &trace_path, &r)?;
        }
        records.push(rec);
        if step % cfg.training.checkpoint_every == 0 {
            let p = dir.join("checkpoints").join(format!("step_{step:06}.safetensors"));
            save_checkpoint(&trainer.components, &p, step)?;
        }
    }
    loss_log.flush().map_err(|e| Error::io(&loss_path, e))?;
    trace_log.flush().map_err(|e| Error::io(&trace_path, e))?;
    let checkpoint = dir.join("checkpoint.safetensors");
    save_checkpoint(&trainer.components, &checkpoint, cfg.training.steps)?;
    Ok(TrainReport {
        records,
        checkpoint,
        loss_log: loss_path,
        trace: trace_path,
        components: trainer.into_components(),
    })
}
