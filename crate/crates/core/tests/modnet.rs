mod common;

use candle_core::{Device, Tensor};

use common::*;
use sketchmod::modnet::{parameter_count, ModNet, ModNetConfig};
use sketchmod::sketch::SketchFeatureGrid;

fn conv(ci: usize, co: usize, k: usize) -> usize {
    ci * co * k * k + co
}

fn double_conv(ci: usize, co: usize) -> usize {
    // Two 3x3 convolutions, each followed by a group norm with affine weight and bias.
    conv(ci, co, 3) + 2 * co + conv(co, co, 3) + 2 * co
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Layer-by-layer count for the toy geometry: base 8 gives paths ending at 64
/// channels and decoder widths 32, 8, 4.
fn toy_hand_count(c: &ModNetConfig) -> usize {
    let (s, l, f, t) = (c.sketch_channels, c.latent_channels, c.fusion_channels, c.time_embed_dim);
    let down = double_conv(l, 8) + double_conv(8, 16) + double_conv(16, 32) + double_conv(32, 64);
    double_conv(s, 128)
        + double_conv(128, 64)
        + 2 * down
        + linear(t, t)
        + linear(t, f)
        + double_conv(3 * 64, f)
        + conv(f, 64, 2)
        + double_conv(64, 32)
        + conv(32, 16, 2)
        + double_conv(16, 8)
        + conv(8, 4, 2)
        + double_conv(4, 4)
        + conv(4, 2 * l, 3)
}

#[test]
fn toy_count_matches_hand_count() {
    let cfg = ModNetConfig::toy();
    assert_eq!(cfg.base_channels, 8);
    assert_eq!(parameter_count(&cfg).unwrap(), toy_hand_count(&cfg));
}

#[test]
fn wider_networks_have_more_parameters() {
    let cfg = ModNetConfig::toy();
    let wide = ModNetConfig {
        sketch_channels: 2 * cfg.sketch_channels,
        fusion_channels: 2 * cfg.fusion_channels,
        time_embed_dim: 2 * cfg.time_embed_dim,
        base_channels: 2 * cfg.base_channels,
        ..cfg
    };
    assert!(parameter_count(&wide).unwrap() > parameter_count(&cfg).unwrap());
}

#[test]
fn probe_loss_reaches_every_branch() {
    let cfg = ModNetConfig {
        zero_init_final: false,
        ..ModNetConfig::toy()
    };
    let net = ModNet::new(cfg).unwrap();
    let mut r = seeded(4);
    let grid = SketchFeatureGrid::new(
        Tensor::from_vec(
            uniform_vec(cfg.sketch_channels * 16, -1.0, 1.0, &mut r),
            (cfg.sketch_channels, 4, 4),
            &Device::Cpu,
        )
        .unwrap(),
        "test",
    )
    .unwrap();
    let shape = (cfg.latent_channels, 32, 32);
    let (eps, z) = (latent(shape, &mut r), latent(shape, &mut r));
    let maps = net.forward(&grid, &eps, &z, 950).unwrap();
    let loss = (maps.scale.as_tensor().sum_all().unwrap() + maps.shift.as_tensor().sum_all().unwrap()).unwrap();
    let grads = loss.backward().unwrap();
    let mut seen = 0;
    for (name, var) in net.params().named_vars() {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0 && norm.is_finite(), "{name}: {norm}");
        seen += 1;
    }
    assert_eq!(seen, net.params().names().len());
    for branch in ["modnet.sketch.", "modnet.noise.", "modnet.latent.", "modnet.time.", "modnet.fusion."] {
        assert!(net.params().names().iter().any(|n| n.starts_with(branch)), "{branch}");
    }
}
