//! Training, sampling and evaluation checked against independent loops.

mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use sketchmod::data::{evaluate, perceptual_distance, Extractors, ToyFeatureExtractor};
use sketchmod::exec::Execution;
use sketchmod::pipeline::{sample_training_timestep, sample_with, Components, SampleOptions, Trainer, TrainingConfig};
use sketchmod::raster::Raster;
use sketchmod::tensor::{stream_rng, LatentTensor};

fn random_rgb(w: usize, h: usize, r: &mut impl Rng) -> Raster {
    Raster::new(w, h, 3, uniform_vec(w * h * 3, 0.0, 1.0, r)).unwrap()
}

// ---- perceptual features by direct loops ------------------------------------

struct Plane {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

fn conv3_tanh(x: &Plane, wt: &[f64], c_out: usize) -> Plane {
    let mut v = vec![0.0; c_out * x.h * x.w];
    for o in 0..c_out {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = 0.0;
                for i in 0..x.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            let k = wt[((o * x.c + i) * 3 + ky) * 3 + kx];
                            acc += k * x.v[(i * x.h + sy as usize) * x.w + sx as usize];
                        }
                    }
                }
                v[(o * x.h + y) * x.w + xx] = acc.tanh();
            }
        }
    }
    Plane {
        c: c_out,
        h: x.h,
        w: x.w,
        v,
    }
}

fn pool2(x: &Plane) -> Plane {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut v = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let at = |dy: usize, dx: usize| x.v[(c * x.h + 2 * y + dy) * x.w + 2 * xx + dx];
                v[(c * h + y) * w + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    Plane { c: x.c, h, w, v }
}

fn loop_features(img: &Raster, ex: &ToyFeatureExtractor) -> Vec<Plane> {
    let (w, h) = (img.width, img.height);
    let mut x = Plane {
        c: 3,
        h,
        w,
        v: (0..3)
            .flat_map(|c| (0..h * w).map(move |p| (c, p)))
            .map(|(c, p)| img.data[p * 3 + c] * 2.0 - 1.0)
            .collect(),
    };
    let mut out = Vec::new();
    for (i, (wt, _, c_out)) in ex.stage_weights().iter().enumerate() {
        if i > 0 {
            x = pool2(&x);
        }
        x = conv3_tanh(&x, wt, *c_out);
        out.push(Plane {
            c: x.c,
            h: x.h,
            w: x.w,
            v: x.v.clone(),
        });
    }
    out
}

fn loop_distance(a: &Raster, b: &Raster, ex: &ToyFeatureExtractor) -> f64 {
    let (fa, fb) = (loop_features(a, ex), loop_features(b, ex));
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let hw = x.h * x.w;
        let mut sq = 0.0;
        for p in 0..hw {
            let nx = (0..x.c).map(|c| x.v[c * hw + p].powi(2)).sum::<f64>().sqrt();
            let ny = (0..y.c).map(|c| y.v[c * hw + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..x.c {
                let u = if nx > 0.0 { x.v[c * hw + p] / nx } else { 0.0 };
                let v = if ny > 0.0 { y.v[c * hw + p] / ny } else { 0.0 };
                sq += (u - v) * (u - v);
            }
        }
        total += sq / (x.c * hw) as f64;
    }
    total / fa.len() as f64
}

#[test]
fn perceptual_distance_matches_loop_features() {
    let ex = ToyFeatureExtractor::new(0);
    let mut r = seeded(11);
    for (w, h) in [(12, 12), (16, 8), (9, 14)] {
        let (a, b) = (random_rgb(w, h, &mut r), random_rgb(w, h, &mut r));
        let got = perceptual_distance(&a, &b, &ex).unwrap();
        let want = loop_distance(&a, &b, &ex);
        assert!(rel_err(got, want) < 1e-9, "{w}x{h}: {got} vs {want}");
        assert!(got > 0.0);
    }
}

#[test]
fn evaluation_is_deterministic_under_both_policies() {
    let ex = ToyFeatureExtractor::new(3);
    let mut r = seeded(5);
    let mut set = || (0..4).map(|_| random_rgb(16, 16, &mut r)).collect::<Vec<_>>();
    let (gen, refs, sketches) = (set(), set(), set());
    let x = Extractors {
        fid: &ex,
        perceptual: &ex,
        sketch: &ex,
        image: &ex,
        clip_scale: 2.5,
    };
    let a = evaluate(&gen, &refs, &sketches, &x, Execution::Sequential).unwrap();
    let b = evaluate(&gen, &refs, &sketches, &x, Execution::Parallel).unwrap();
    let c = evaluate(&gen, &refs, &sketches, &x, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(b, c);
    assert_eq!(a.n_samples, 4);
    assert!(a.clip_sim.abs() <= 2.5);
    let same = evaluate(&gen, &gen, &sketches, &x, Execution::Parallel).unwrap();
    assert!(same.fid < 1e-8 && same.lpips == 0.0);
}

// ---- timestep restriction ----------------------------------------------------

#[test]
fn training_timesteps_are_uniform_on_the_high_noise_range() {
    let cfg = TrainingConfig::default();
    let (lo, hi) = cfg.timestep_range();
    assert_eq!((lo, hi), (900, 999));
    let bins = hi - lo + 1;
    let n = 200_000;
    let mut counts = vec![0usize; bins];
    let mut r = seeded(42);
    for _ in 0..n {
        let t = sample_training_timestep(&cfg, &mut r);
        assert!((lo..=hi).contains(&t));
        counts[t - lo] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99 degrees of freedom, upper 0.1% point.
    assert!(chi2 < 148.23, "chi-square {chi2}");

    let narrow = TrainingConfig {
        high_noise_fraction: 0.001,
        ..TrainingConfig::default()
    };
    assert_eq!(narrow.timestep_range(), (999, 999));
    assert_eq!(sample_training_timestep(&narrow, &mut r), 999);
}

// ---- sampler -----------------------------------------------------------------

#[test]
fn plain_sampling_matches_an_independent_ddim_loop() {
    let mut cfg = small_config();
    cfg.sampler.inference_steps = 8;
    cfg.sampler.seed = 9;
    let comps = Components::build(&cfg).unwrap();
    let sketch = Raster::filled(64, 64, 1, 1.0);
    let caption = "a blue circle";
    let out = sample_with(
        &sketch,
        caption,
        &cfg.sampler,
        &comps,
        SampleOptions {
            modulate: false,
            overlays: false,
            keep_latents: true,
        },
    )
    .unwrap();

    let bb = comps.backbone.as_ref();
    let total = bb.schedule().total_steps();
    let n = cfg.sampler.inference_steps;
    let ts: Vec<usize> = (0..n).map(|k| total - 1 - k * (total / n)).collect();
    let cond = bb.encode_text(caption).unwrap();
    let shape = bb.latent_shape();
    let mut z = LatentTensor::randn(shape, &mut stream_rng(cfg.sampler.seed, 0))
        .unwrap()
        .to_vec()
        .unwrap();
    for (k, &t) in ts.iter().enumerate() {
        let zt = LatentTensor::from_vec(z.clone(), shape).unwrap();
        let eps = bb.denoise(&zt, t, &cond, false).unwrap().eps_pred.to_vec().unwrap();
        let a = bb.schedule().alpha_bars()[t];
        let a_prev = ts.get(k + 1).map_or(1.0, |&tn| bb.schedule().alpha_bars()[tn]);
        for i in 0..z.len() {
            let x0 = (z[i] - (1.0 - a).sqrt() * eps[i]) / a.sqrt();
            z[i] = a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * eps[i];
        }
        let got = out.latents[k].to_vec().unwrap();
        let diff = got.iter().zip(&z).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "step {}: {diff}", k + 1);
    }
    assert!(out.trace.iter().all(|s| !s.modulated));
    assert_eq!(out.trace.iter().map(|s| s.t).collect::<Vec<_>>(), ts);
}

// ---- training ----------------------------------------------------------------

fn trainer_with(
    tweak: impl FnOnce(&mut sketchmod::config::RunConfig),
) -> (Trainer, Vec<Arc<sketchmod::pipeline::TrainingSample>>, Dataset) {
    let mut cfg = small_config();
    cfg.training.batch_size = 2;
    tweak(&mut cfg);
    let comps = Components::build(&cfg).unwrap();
    let ds = toy_dataset(2, 0, 64, 1);
    let samples = arcs(training_samples(&ds, &comps));
    (Trainer::new(comps).unwrap(), samples, ds)
}

fn one_of_each(samples: &[Arc<sketchmod::pipeline::TrainingSample>]) -> Vec<Arc<sketchmod::pipeline::TrainingSample>> {
    let synthetic = samples.iter().find(|s| !s.is_freehand).unwrap().clone();
    let freehand = samples.iter().find(|s| s.is_freehand).unwrap().clone();
    vec![synthetic, freehand]
}

#[test]
fn freehand_samples_drop_the_denoising_term() {
    let (trainer, samples, _ds) = trainer_with(|_| {});
    let synthetic = samples.iter().find(|s| !s.is_freehand).unwrap();
    let mut as_freehand = (**synthetic).clone();
    as_freehand.is_freehand = true;
    let a = trainer.evaluate_loss(std::slice::from_ref(synthetic)).unwrap();
    let b = trainer.evaluate_loss(&[Arc::new(as_freehand)]).unwrap();
    assert!(a.noise > 0.0);
    assert_eq!(b.noise, 0.0);
    assert_eq!(
        (a.attn, a.l1_scale, a.l1_shift, a.variance),
        (b.attn, b.l1_scale, b.l1_shift, b.variance)
    );
    assert!((a.total - b.total - a.noise).abs() < 1e-12);
}

#[test]
fn optimizer_covers_modnet_and_encoder_suffix_only() {
    let (trainer, _, _ds) = trainer_with(|c| c.modnet.zero_init_final = false);
    let c = &trainer.components;
    let names = trainer.optimized_parameter_names();
    let modnet = c.modnet.params().names();
    let depth = c.encoder.depth();
    let k = c.config.encoder.trainable_suffix_layers;
    for n in &modnet {
        assert!(names.contains(n), "{n} not optimized");
    }
    for l in 1..=depth {
        for part in ["weight", "bias"] {
            let n = format!("encoder.layer{l}.{part}");
            assert_eq!(names.contains(&n), l > depth - k, "{n}");
        }
    }
    assert_eq!(names.len(), modnet.len() + 2 * k);
    let backbone = c.backbone.parameter_names();
    assert!(!backbone.is_empty());
    assert!(backbone.iter().all(|n| !names.contains(n)));
}

#[test]
fn gradients_reach_every_modnet_parameter() {
    let (mut trainer, samples, _ds) = trainer_with(|c| c.modnet.zero_init_final = false);
    let (loss, _) = trainer.batch_loss(&one_of_each(&samples)).unwrap();
    let grads = loss.backward().unwrap();
    for (name, var) in trainer.components.modnet.params().named_vars() {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0 && norm.is_finite(), "{name}: {norm}");
    }
    // The backbone stays off the tape.
    let bb = trainer.components.backbone.parameter_names();
    assert!(!bb.is_empty());
}

#[test]
fn frozen_weights_survive_training_steps() {
    let (mut trainer, samples, _ds) = trainer_with(|c| c.training.learning_rate = 1e-3);
    let batch = one_of_each(&samples);
    let c = &trainer.components;
    let checksum = c.backbone.parameter_checksum().unwrap();
    let k = c.config.encoder.trainable_suffix_layers;
    let frozen: Vec<String> = (1..=c.encoder.depth() - k)
        .map(|l| format!("encoder.layer{l}.weight"))
        .collect();
    let read = |t: &Trainer, n: &str| -> Vec<f64> {
        t.components
            .encoder
            .params()
            .get(n)
            .unwrap()
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    };
    let before: Vec<Vec<f64>> = frozen.iter().map(|n| read(&trainer, n)).collect();
    let modnet_before = c.modnet.params().checksum().unwrap();
    let suffix = format!("encoder.layer{}.weight", c.encoder.depth());
    let suffix_before = read(&trainer, &suffix);
    let reference = sketchmod::sketch::EncoderConfig {
        trainable_suffix_layers: k,
        frozen_reference: true,
    };
    let ref_before = c
        .encoder
        .encode_sketch(&batch[0].sketch, &reference)
        .unwrap()
        .pooled()
        .unwrap();

    for _ in 0..3 {
        trainer.train_step(&batch).unwrap();
    }
    let c = &trainer.components;
    assert_eq!(c.backbone.parameter_checksum().unwrap(), checksum);
    for (n, b) in frozen.iter().zip(&before) {
        assert_eq!(&read(&trainer, n), b, "{n} moved");
    }
    assert_ne!(c.modnet.params().checksum().unwrap(), modnet_before);
    assert_ne!(read(&trainer, &suffix), suffix_before);
    let ref_after = c
        .encoder
        .encode_sketch(&batch[0].sketch, &reference)
        .unwrap()
        .pooled()
        .unwrap();
    assert_eq!(ref_before, ref_after);
}

#[test]
fn batch_loss_is_identical_under_both_policies() {
    let run = |exec: Execution| {
        let (mut trainer, samples, _ds) = trainer_with(|c| c.execution = exec);
        let batch = one_of_each(&samples);
        let (_, b) = trainer.batch_loss(&batch).unwrap();
        (
            b,
            trainer.last_timesteps().to_vec(),
            trainer.evaluate_loss(&batch).unwrap(),
        )
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
