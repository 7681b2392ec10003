//! Randomized invariants checked against scalar oracles.

mod common;

use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

use common::*;
use sketchmod::data::{clip_similarity, frechet_distance, mean_and_covariance, sqrt_psd};
use sketchmod::exec::Execution;
use sketchmod::losses::{attention_loss, l1_regularizers, noise_loss, variance_loss};
use sketchmod::modnet::modulate;
use sketchmod::sketch::{derive_masks_with, LabelQuery, SketchFeatureGrid};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..9, 1usize..9)
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn modulation_matches_elementwise_rule(sh in shape(), seed in any::<u64>()) {
        let mut r = seeded(seed);
        let eps = latent(sh, &mut r);
        let m = maps(sh, &mut r);
        let got = modulate(&eps, &m).unwrap().to_vec().unwrap();
        let want = modulate_oracle(&eps.to_vec().unwrap(), &m.scale.to_vec().unwrap(), &m.shift.to_vec().unwrap());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn zero_maps_are_the_identity(sh in shape(), seed in any::<u64>()) {
        let eps = latent(sh, &mut seeded(seed));
        let m = sketchmod::modnet::ModulationMaps::zeros(sh, 0).unwrap();
        prop_assert_eq!(modulate(&eps, &m).unwrap().to_vec().unwrap(), eps.to_vec().unwrap());
    }

    #[test]
    fn scalar_losses_match_oracles(sh in shape(), seed in any::<u64>()) {
        let mut r = seeded(seed);
        let (a, b) = (latent(sh, &mut r), latent(sh, &mut r));
        let m = maps(sh, &mut r);
        let (av, bv) = (a.to_vec().unwrap(), b.to_vec().unwrap());
        let (sv, hv) = (m.scale.to_vec().unwrap(), m.shift.to_vec().unwrap());
        prop_assert!(rel_err(scalar(&noise_loss(&a, &b).unwrap()), noise_oracle(&av, &bv)) < 1e-12);
        let (l1s, l1b) = l1_regularizers(&m).unwrap();
        prop_assert!(rel_err(scalar(&l1s), l1_oracle(&sv)) < 1e-12);
        prop_assert!(rel_err(scalar(&l1b), l1_oracle(&hv)) < 1e-12);
        let var = scalar(&variance_loss(&m).unwrap());
        prop_assert!((var - variance_oracle(&sv, &hv)).abs() < 1e-10);
        prop_assert!(var <= 0.0);
    }

    #[test]
    fn attention_loss_matches_triple_loop(seed in any::<u64>(), n_layers in 1usize..4, tokens in 1usize..7) {
        let layers = random_layers(&mut seeded(seed), n_layers, tokens);
        let (set, masks) = to_library(&layers);
        let got = scalar(&attention_loss(&set, &masks, 0.1).unwrap());
        let want = attention_oracle(&layers, 0.1);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn attention_term_is_bounded_per_token(seed in any::<u64>()) {
        // Without the inside-mass reward each supervised token lies in [0, 1].
        let layers = random_layers(&mut seeded(seed), 3, 4);
        let (set, masks) = to_library(&layers);
        let got = scalar(&attention_loss(&set, &masks, 0.0).unwrap());
        let supervised: usize = layers
            .iter()
            .map(|l| l.masks.values().filter(|b| b.contains(&1)).count())
            .sum();
        prop_assert!(got >= -1e-12 && got <= supervised as f64 + 1e-12);
    }

    #[test]
    fn masks_match_brute_force_and_shrink_with_threshold(
        seed in any::<u64>(),
        c in 2usize..6,
        side in 1usize..6,
        lo in -0.9f64..0.5,
        gap in 0.0f64..0.4,
    ) {
        let mut r = seeded(seed);
        let data = uniform_vec(c * side * side, -1.0, 1.0, &mut r);
        let grid = SketchFeatureGrid::new(
            Tensor::from_vec(data.clone(), (c, side, side), &Device::Cpu).unwrap(),
            "test",
        ).unwrap();
        let labels: Vec<LabelQuery> = (0..3)
            .map(|i| LabelQuery { token_index: i + 1, label: format!("l{i}"), embedding: uniform_vec(c, -1.0, 1.0, &mut r) })
            .collect();
        let hi = lo + gap;
        let a = derive_masks_with(Execution::Sequential, &grid, &labels, lo).unwrap();
        let b = derive_masks_with(Execution::Parallel, &grid, &labels, hi).unwrap();
        let hw = side * side;
        for q in &labels {
            let ma = &a.masks[&q.token_index];
            prop_assert!(b.masks[&q.token_index].is_subset_of(ma));
            for p in 0..hw {
                let v: Vec<f64> = (0..c).map(|k| data[k * hw + p]).collect();
                let dot: f64 = v.iter().zip(&q.embedding).map(|(x, y)| x * y).sum();
                let n1 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let n2 = q.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = if n1 == 0.0 || n2 == 0.0 { 0.0 } else { dot / (n1 * n2) };
                prop_assert_eq!(ma.bits[p], (cos >= lo) as u8);
            }
        }
    }

    #[test]
    fn psd_square_root_squares_back(seed in any::<u64>(), d in 1usize..7) {
        let mut r = seeded(seed);
        let a = DMatrix::from_vec(d, d + 2, uniform_vec(d * (d + 2), -1.0, 1.0, &mut r));
        let c = &a * a.transpose();
        let s = sqrt_psd(&c).unwrap();
        prop_assert!((&s * &s - &c).abs().max() < 1e-8);
        prop_assert!((&s - s.transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn frechet_is_a_nonnegative_symmetric_discrepancy(seed in any::<u64>(), d in 1usize..6) {
        let mut r = seeded(seed);
        let draw = |r: &mut rand_chacha::ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..3 * d + 4).map(|_| uniform_vec(d, -1.0 + shift, 1.0 + shift, r)).collect()
        };
        let (m1, c1) = mean_and_covariance(&draw(&mut r, 0.0)).unwrap();
        let (m2, c2) = mean_and_covariance(&draw(&mut r, 0.5)).unwrap();
        let ab = frechet_distance(&m1, &c1, &m2, &c2).unwrap();
        let ba = frechet_distance(&m2, &c2, &m1, &c1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        prop_assert!(frechet_distance(&m1, &c1, &m1, &c1).unwrap() < 1e-8);
        // Translating both sets by the same vector leaves the distance unchanged.
        let shift: Vec<f64> = uniform_vec(d, -3.0, 3.0, &mut r);
        let t1: Vec<f64> = m1.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let t2: Vec<f64> = m2.iter().zip(&shift).map(|(a, b)| a + b).collect();
        prop_assert!((frechet_distance(&t1, &c1, &t2, &c2).unwrap() - ab).abs() < 1e-8 * ab.max(1.0));
    }

    #[test]
    fn clip_similarity_is_scale_invariant(
        seed in any::<u64>(),
        d in 1usize..16,
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
        k in 0.1f64..10.0,
    ) {
        let mut r = seeded(seed);
        let a = uniform_vec(d, 0.1, 1.0, &mut r);
        let b = uniform_vec(d, -1.0, 1.0, &mut r);
        let base = clip_similarity(&a, &b, 1.0).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        prop_assert!((clip_similarity(&sa, &sb, k).unwrap() - k * base).abs() < 1e-12 * k.max(1.0));
        prop_assert!(base.abs() <= 1.0 + 1e-12);
    }
}
