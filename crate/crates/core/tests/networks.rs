use chroma_core::networks::*;
use chroma_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(image_size: usize, base_channels: usize, depth: usize) -> NetConfig {
    NetConfig {
        image_size,
        base_channels,
        depth,
        ..NetConfig::default()
    }
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
}

/// Closed-form parameter count of the U-Net builder.
fn unet_params(c: &NetConfig) -> usize {
    let w = |i: usize| (c.base_channels << i).min(c.channel_cap);
    let conv = |i: usize, o: usize| i * o * 16 + o;
    let mut n = conv(1, w(0));
    for s in 1..c.depth {
        n += conv(w(s - 1), w(s)) + 2 * w(s);
    }
    for s in (0..c.depth - 1).rev() {
        let input = if s == c.depth - 2 { w(c.depth - 1) } else { 2 * w(s + 1) };
        n += conv(input, w(s)) + 2 * w(s);
    }
    let input = if c.depth == 1 { w(0) } else { 2 * w(0) };
    n + conv(input, c.color_channels())
}

fn disc_params(c: &NetConfig) -> usize {
    let w = |i: usize| (c.base_channels << i).min(c.channel_cap);
    let mut n = (1 + c.color_channels()) * w(0) * 16 + w(0);
    for s in 1..c.depth {
        n += w(s - 1) * w(s) * 16 + w(s) + 2 * w(s);
    }
    let k = c.image_size >> c.depth;
    n + w(c.depth - 1) * k * k + 1
}

#[test]
fn generator_shape_at_default_size() {
    let c = cfg(32, 64, 3);
    let gen = build_generator(&c).unwrap();
    let y = gen.predict(&random_input([1, 1, 32, 32], 1)).unwrap();
    assert_eq!(y.shape(), [1, 2, 32, 32]);
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generator_full_color_variant() {
    let c = NetConfig { predict_ab: false, ..cfg(16, 8, 2) };
    let y = build_generator(&c).unwrap().predict(&random_input([2, 1, 16, 16], 2)).unwrap();
    assert_eq!(y.shape(), [2, 3, 16, 16]);
}

#[test]
fn depth_one_is_a_minimal_unet() {
    let c = cfg(8, 4, 1);
    let gen = build_generator(&c).unwrap();
    let convs = gen.spec.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
    let ups = gen.spec.layers.iter().filter(|l| matches!(l, LayerSpec::ConvTranspose { .. })).count();
    assert_eq!((convs, ups), (1, 1));
    let y = gen.predict(&random_input([1, 1, 8, 8], 3)).unwrap();
    assert_eq!(y.shape(), [1, 2, 8, 8]);
}

#[test]
fn output_extent_matches_input_for_all_valid_depths() {
    for size in [8usize, 16, 32, 64] {
        for depth in 1..=size.trailing_zeros() as usize {
            let spec = unet_spec(&cfg(size, 2, depth), Role::Generator).unwrap();
            assert_eq!(spec.output_extent().unwrap(), (2, size), "size {size} depth {depth}");
        }
    }
}

#[test]
fn skip_concatenation_doubles_decoder_width() {
    let spec = unet_spec(&cfg(32, 64, 3), Role::Generator).unwrap();
    let extents = spec.validate().unwrap();
    let mut skips = 0;
    for (i, l) in spec.layers.iter().enumerate() {
        if let LayerSpec::ConcatSkip { from } = l {
            skips += 1;
            assert_eq!(extents[i].0, 2 * extents[i - 1].0);
            assert_eq!(extents[*from].1, extents[i].1);
        }
    }
    assert_eq!(skips, 2);
}

#[test]
fn indivisible_size_is_rejected() {
    let err = build_generator(&cfg(30, 8, 3)).unwrap_err().to_string();
    assert!(err.contains("multiple of 2^depth = 8"), "{err}");
    assert!(build_discriminator(&cfg(30, 8, 3)).is_err());
    assert!(build_baseline(&cfg(12, 8, 3)).is_err());
}

#[test]
fn parameter_names_are_stable() {
    let a = build_generator(&cfg(32, 16, 3)).unwrap();
    let b = build_generator(&cfg(32, 16, 3)).unwrap();
    assert_eq!(a.params.names(), b.params.names());
    assert_eq!(a.params.names()[..4], ["0.weight", "0.bias", "2.weight", "2.bias"]);
    let mut names = a.params.names().to_vec();
    names.dedup();
    assert_eq!(names.len(), a.params.len());
}

#[test]
fn parameter_counts_are_regression_fixtures() {
    for c in [cfg(32, 64, 3), cfg(64, 64, 4), cfg(32, 8, 2), NetConfig { predict_ab: false, ..cfg(32, 64, 3) }] {
        assert_eq!(build_generator(&c).unwrap().params.count(), unet_params(&c));
        assert_eq!(build_discriminator(&c).unwrap().params.count(), disc_params(&c));
    }
    // Frozen at the default 32×32 configuration.
    assert_eq!(build_generator(&cfg(32, 64, 3)).unwrap().params.count(), 1_448_706);
    assert_eq!(build_discriminator(&cfg(32, 64, 3)).unwrap().params.count(), 663_745);
    assert_eq!(build_generator(&cfg(64, 64, 4)).unwrap().params.count(), 6_169_602);
}

#[test]
fn baseline_mirrors_generator() {
    let c = cfg(16, 8, 2);
    let g = build_generator(&c).unwrap();
    let b = build_baseline(&c).unwrap();
    assert_eq!(g.spec.layers, b.spec.layers);
    assert_eq!(b.spec.role, Role::Baseline);
    assert!(g.params.bit_eq(&b.params));
}

#[test]
fn discriminator_emits_one_logit_per_image() {
    let c = cfg(32, 16, 3);
    let d = build_discriminator(&c).unwrap();
    assert_eq!(d.spec.input_channels, 3);
    let y = d.predict(&random_input([4, 3, 32, 32], 4)).unwrap();
    assert_eq!(y.shape(), [4, 1]);
}

#[test]
fn doubling_base_doubles_hidden_widths() {
    let widths = |base| {
        discriminator_spec(&cfg(32, base, 3))
            .unwrap()
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (widths(16), widths(32));
    let hidden = a.len() - 1;
    for i in 0..hidden {
        assert_eq!(b[i], 2 * a[i]);
    }
    let small = build_discriminator(&cfg(32, 16, 3)).unwrap().params.count();
    let big = build_discriminator(&cfg(32, 32, 3)).unwrap().params.count();
    assert_eq!(small, disc_params(&cfg(32, 16, 3)));
    assert!(big > 3 * small);
}

#[test]
fn discriminator_init_is_reproducible() {
    let a = build_discriminator(&cfg(16, 8, 2)).unwrap();
    let b = build_discriminator(&cfg(16, 8, 2)).unwrap();
    assert!(a.params.bit_eq(&b.params));
}

#[test]
fn init_statistics() {
    let mut params = ParamSet::default();
    params.push("0.weight", Tensor::zeros(&[100, 100]));
    params.push("1.gamma", Tensor::zeros(&[10_000]));
    params.push("1.beta", Tensor::ones(&[64]));
    params.push("0.bias", Tensor::ones(&[64]));
    init_weights(&mut params, 42);
    let w = params.get("0.weight").unwrap();
    let mean = w.sum_f64() / w.len() as f64;
    assert!(mean.abs() <= 0.002, "mean {mean}");
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((var.sqrt() - 0.02).abs() < 0.001);
    let gamma = params.get("1.gamma").unwrap();
    assert!((gamma.sum_f64() / gamma.len() as f64 - 1.0).abs() <= 0.002);
    assert!(params.get("1.beta").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(params.get("0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    let mut again = params.clone();
    init_weights(&mut again, 42);
    assert!(again.bit_eq(&params));
}

#[test]
fn eval_forward_is_deterministic_and_train_updates_stats() {
    let c = cfg(16, 8, 2);
    let mut gen = build_generator(&c).unwrap();
    let x = random_input([3, 1, 16, 16], 5);
    let a = gen.predict(&x).unwrap();
    let b = gen.predict(&x).unwrap();
    assert!(a.bit_eq(&b));
    let before = gen.stats.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    gen.forward(&mut g, xv, Mode::Train, true).unwrap();
    assert_ne!(gen.stats, before);
    let c2 = gen.predict(&x).unwrap();
    assert!(!c2.bit_eq(&a));
}

#[test]
fn train_forward_records_parameter_gradients() {
    let c = cfg(8, 4, 2);
    let mut gen = build_generator(&c).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random_input([2, 1, 8, 8], 6));
    let (y, params) = gen.forward(&mut g, x, Mode::Train, true).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(params.iter().all(|&p| grads.get(p).is_some()));
}
