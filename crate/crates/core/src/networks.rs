//! Declarative network descriptions and the three builders: the U-Net
//! generator, the conditional discriminator and the L1 baseline.
//!
//! A [`NetworkSpec`] is a flat layer list evaluated in order. Skip
//! connections refer back to the output of an earlier layer by index.
//! Parameters live in a [`ParamSet`] whose names (`<layer>.<role>`) are
//! stable across builds and are what checkpoints store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_extent, conv_transpose2d_output_extent, Activation, BatchNormMode, Graph, RunningStats, Tensor, Var};

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Activation(Activation),
    /// Concatenates the running activation with the output of layer `from`
    /// along channels.
    ConcatSkip {
        from: usize,
    },
    /// Collapses `N×C×1×1` to `N×C`.
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvTranspose { .. } => "conv_transpose",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::ConcatSkip { .. } => "concat_skip",
            LayerSpec::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub role: Role,
    pub image_size: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Activation extent after each layer: `(channels, spatial)`; spatial is 0
/// once flattened.
type Extent = (usize, usize);

impl NetworkSpec {
    /// Walks the layer list checking that channel counts chain, skip
    /// sources exist and match spatially. Returns each layer's output extent.
    pub fn validate(&self) -> Result<Vec<Extent>> {
        let bad = |i: usize, spec: &LayerSpec, msg: String| Error::Layer {
            layer: i,
            kind: spec.kind(),
            source: Box::new(Error::Config(msg)),
        };
        let mut cur: Extent = (self.input_channels, self.image_size);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    if in_channels != cur.0 {
                        return Err(bad(i, layer, format!("expects {in_channels} channels, receives {}", cur.0)));
                    }
                    let s = conv2d_output_extent(cur.1, kernel, stride, pad)
                        .ok_or_else(|| bad(i, layer, format!("kernel {kernel} does not fit extent {}", cur.1)))?;
                    (out_channels, s)
                }
                LayerSpec::ConvTranspose { in_channels, out_channels, kernel, stride, pad } => {
                    if in_channels != cur.0 {
                        return Err(bad(i, layer, format!("expects {in_channels} channels, receives {}", cur.0)));
                    }
                    let s = conv_transpose2d_output_extent(cur.1, kernel, stride, pad)
                        .ok_or_else(|| bad(i, layer, "empty output".into()))?;
                    (out_channels, s)
                }
                LayerSpec::BatchNorm { channels } => {
                    if channels != cur.0 {
                        return Err(bad(i, layer, format!("normalizes {channels} channels, receives {}", cur.0)));
                    }
                    cur
                }
                LayerSpec::Activation(_) => cur,
                LayerSpec::ConcatSkip { from } => {
                    let src: Extent = *out
                        .get(from)
                        .ok_or_else(|| bad(i, layer, format!("skip source {from} is not an earlier layer")))?;
                    if src.1 != cur.1 {
                        return Err(bad(i, layer, format!("skip source extent {} differs from {}", src.1, cur.1)));
                    }
                    (cur.0 + src.0, cur.1)
                }
                LayerSpec::Flatten => {
                    if cur.1 != 1 {
                        return Err(bad(i, layer, format!("flatten needs 1x1 spatial extent, got {}", cur.1)));
                    }
                    (cur.0, 0)
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_extent(&self) -> Result<Extent> {
        Ok(*self.validate()?.last().unwrap_or(&(self.input_channels, self.image_size)))
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    out.push((format!("{i}.weight"), vec![out_channels, in_channels, kernel, kernel]));
                    out.push((format!("{i}.bias"), vec![out_channels]));
                }
                LayerSpec::ConvTranspose { in_channels, out_channels, kernel, .. } => {
                    out.push((format!("{i}.weight"), vec![in_channels, out_channels, kernel, kernel]));
                    out.push((format!("{i}.bias"), vec![out_channels]));
                }
                LayerSpec::BatchNorm { channels } => {
                    out.push((format!("{i}.gamma"), vec![channels]));
                    out.push((format!("{i}.beta"), vec![channels]));
                }
                _ => {}
            }
        }
        out
    }
}

/// Named trainable tensors with a fixed iteration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// DCGAN-style initialization: convolution weights ~ N(0, 0.02²), batchnorm
/// scales ~ N(1, 0.02²), shifts and biases zero. Deterministic in `seed`.
pub fn init_weights(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = Normal::new(0.0f32, INIT_STD).expect("valid normal");
    let scale = Normal::new(1.0f32, INIT_STD).expect("valid normal");
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        let dist = if name.ends_with(".weight") {
            Some(&weight)
        } else if name.ends_with(".gamma") {
            Some(&scale)
        } else {
            None
        };
        for v in t.data_mut() {
            *v = dist.map_or(0.0, |d| d.sample(&mut rng));
        }
    }
}

/// Hyperparameters shared by the three builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub channel_cap: usize,
    /// Predict a\*b\* (2 channels) rather than L\*a\*b\* (3 channels).
    pub predict_ab: bool,
    pub leaky_slope: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 64,
            depth: 3,
            channel_cap: 512,
            predict_ab: true,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn color_channels(&self) -> usize {
        if self.predict_ab {
            2
        } else {
            3
        }
    }

    fn width(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.channel_cap)
    }

    fn check(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::Config("depth, base_channels and channel_cap must be positive".into()));
        }
        let unit = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
        if unit == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 2^depth = {} (depth {})",
                self.image_size,
                1u128 << self.depth.min(127),
                self.depth
            )));
        }
        Ok(())
    }
}

const DOWN: (usize, usize, usize) = (4, 2, 1);

fn down(in_channels: usize, out_channels: usize) -> LayerSpec {
    let (kernel, stride, pad) = DOWN;
    LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad }
}

fn up(in_channels: usize, out_channels: usize) -> LayerSpec {
    let (kernel, stride, pad) = DOWN;
    LayerSpec::ConvTranspose { in_channels, out_channels, kernel, stride, pad }
}

/// U-Net layer list. Encoder stages halve the extent and double the width
/// (capped); decoder stages mirror them and concatenate the matching
/// encoder output.
pub fn unet_spec(cfg: &NetConfig, role: Role) -> Result<NetworkSpec> {
    cfg.check()?;
    let leaky = LayerSpec::Activation(Activation::LeakyRelu(cfg.leaky_slope));
    let mut layers = Vec::new();
    let mut skips = Vec::with_capacity(cfg.depth);
    for stage in 0..cfg.depth {
        let in_ch = if stage == 0 { 1 } else { cfg.width(stage - 1) };
        layers.push(down(in_ch, cfg.width(stage)));
        if stage > 0 {
            layers.push(LayerSpec::BatchNorm { channels: cfg.width(stage) });
        }
        layers.push(leaky);
        skips.push(layers.len() - 1);
    }
    let mut channels = cfg.width(cfg.depth - 1);
    for stage in (0..cfg.depth - 1).rev() {
        let out = cfg.width(stage);
        layers.push(up(channels, out));
        layers.push(LayerSpec::BatchNorm { channels: out });
        layers.push(LayerSpec::Activation(Activation::Relu));
        layers.push(LayerSpec::ConcatSkip { from: skips[stage] });
        channels = out * 2;
    }
    layers.push(up(channels, cfg.color_channels()));
    layers.push(LayerSpec::Activation(Activation::Tanh));
    let spec = NetworkSpec {
        role,
        image_size: cfg.image_size,
        input_channels: 1,
        layers,
    };
    let extents = spec.validate()?;
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::ConcatSkip { .. } = layer {
            assert_eq!(extents[i].0, 2 * extents[i - 1].0, "skip concatenation must double decoder width");
        }
    }
    assert_eq!(extents.last().copied(), Some((cfg.color_channels(), cfg.image_size)));
    Ok(spec)
}

/// Conditional discriminator: sees `L'` concatenated with color channels
/// and emits one logit per image.
pub fn discriminator_spec(cfg: &NetConfig) -> Result<NetworkSpec> {
    cfg.check()?;
    let leaky = LayerSpec::Activation(Activation::LeakyRelu(cfg.leaky_slope));
    let input_channels = 1 + cfg.color_channels();
    let mut layers = Vec::new();
    for stage in 0..cfg.depth {
        let in_ch = if stage == 0 { input_channels } else { cfg.width(stage - 1) };
        layers.push(down(in_ch, cfg.width(stage)));
        if stage > 0 {
            layers.push(LayerSpec::BatchNorm { channels: cfg.width(stage) });
        }
        layers.push(leaky);
    }
    let remaining = cfg.image_size >> cfg.depth;
    layers.push(LayerSpec::Conv {
        in_channels: cfg.width(cfg.depth - 1),
        out_channels: 1,
        kernel: remaining,
        stride: 1,
        pad: 0,
    });
    layers.push(LayerSpec::Flatten);
    let spec = NetworkSpec {
        role: Role::Discriminator,
        image_size: cfg.image_size,
        input_channels,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A network: its layer list, parameters and batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    /// Running statistics keyed by batchnorm layer index.
    pub stats: Vec<(usize, RunningStats)>,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl Network {
    /// Allocates parameters for `spec` and initializes them from `seed`.
    pub fn new(spec: NetworkSpec, cfg: &NetConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::default();
        for (name, shape) in spec.param_shapes() {
            params.push(name, Tensor::zeros(&shape));
        }
        init_weights(&mut params, seed);
        let stats = spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::BatchNorm { channels } => Some((i, RunningStats::standard(*channels))),
                _ => None,
            })
            .collect();
        Ok(Self {
            spec,
            params,
            stats,
            bn_eps: cfg.bn_eps,
            bn_momentum: cfg.bn_momentum,
        })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.spec.input_channels, self.spec.image_size, self.spec.image_size]
    }

    /// Adds every parameter to `g` as a leaf, tracked iff `trainable`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Runs the layer list on `input` using parameters previously
    /// [`register`](Self::register)ed in the same graph. Train mode updates
    /// the running statistics.
    pub fn forward_with(&mut self, g: &mut Graph, params: &[Var], input: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        let expected = self.input_shape(shape.first().copied().unwrap_or(0));
        if shape != expected {
            return Err(Error::Layer {
                layer: 0,
                kind: self.spec.layers.first().map_or("input", LayerSpec::kind),
                source: Box::new(Error::shape("forward", &shape, &expected, "network input")),
            });
        }
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        };
        let mut outputs: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        let mut cur = input;
        let mut p = 0;
        let mut stat = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let wrap = |e: Error| Error::Layer {
                layer: i,
                kind: layer.kind(),
                source: Box::new(e),
            };
            cur = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    p += 2;
                    g.conv2d(cur, params[p - 2], params[p - 1], stride, pad).map_err(wrap)?
                }
                LayerSpec::ConvTranspose { stride, pad, .. } => {
                    p += 2;
                    g.conv_transpose2d(cur, params[p - 2], params[p - 1], stride, pad).map_err(wrap)?
                }
                LayerSpec::BatchNorm { .. } => {
                    p += 2;
                    let stats = &mut self.stats[stat].1;
                    stat += 1;
                    g.batchnorm2d(cur, params[p - 2], params[p - 1], stats, bn_mode, self.bn_eps, self.bn_momentum)
                        .map_err(wrap)?
                }
                LayerSpec::Activation(a) => g.activation(cur, a).map_err(wrap)?,
                LayerSpec::ConcatSkip { from } => g.concat(&[cur, outputs[from]]).map_err(wrap)?,
                LayerSpec::Flatten => {
                    let s = g.value(cur).shape().to_vec();
                    g.reshape(cur, &[s[0], s[1]]).map_err(wrap)?
                }
            };
            outputs.push(cur);
        }
        Ok(cur)
    }

    /// Registers parameters and runs the forward pass.
    pub fn forward(&mut self, g: &mut Graph, input: Var, mode: Mode, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let params = self.register(g, trainable);
        let out = self.forward_with(g, &params, input, mode)?;
        Ok((out, params))
    }

    /// Eval-mode inference without gradient tracking. Running statistics
    /// are left untouched.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut net = self.clone();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let (y, _) = net.forward(&mut g, x, Mode::Eval, false)?;
        Ok(g.value(y).clone())
    }
}

/// Seed offsets keep the generator and discriminator initializations
/// independent under one user seed.
const GENERATOR_STREAM: u64 = 0x6765_6e00;
const DISCRIMINATOR_STREAM: u64 = 0x6469_7300;

pub fn build_generator(cfg: &NetConfig) -> Result<Network> {
    Network::new(unet_spec(cfg, Role::Generator)?, cfg, cfg.seed ^ GENERATOR_STREAM)
}

/// Same topology and initialization as the generator; only the training
/// objective differs.
pub fn build_baseline(cfg: &NetConfig) -> Result<Network> {
    Network::new(unet_spec(cfg, Role::Baseline)?, cfg, cfg.seed ^ GENERATOR_STREAM)
}

pub fn build_discriminator(cfg: &NetConfig) -> Result<Network> {
    Network::new(discriminator_spec(cfg)?, cfg, cfg.seed ^ DISCRIMINATOR_STREAM)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            image_size: 8,
            base_channels: 4,
            depth: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn validate_rejects_bad_chains() {
        let spec = NetworkSpec {
            role: Role::Generator,
            image_size: 8,
            input_channels: 1,
            layers: vec![down(2, 4)],
        };
        assert!(spec.validate().is_err());
        let spec = NetworkSpec {
            role: Role::Generator,
            image_size: 8,
            input_channels: 1,
            layers: vec![down(1, 4), LayerSpec::ConcatSkip { from: 3 }],
        };
        assert!(spec.validate().is_err());
        let spec = NetworkSpec {
            role: Role::Generator,
            image_size: 8,
            input_channels: 1,
            layers: vec![down(1, 4), down(4, 4), LayerSpec::ConcatSkip { from: 0 }],
        };
        assert!(spec.validate().is_err(), "spatial mismatch in skip");
    }

    #[test]
    fn batchnorm_placement() {
        let spec = unet_spec(&small(), Role::Generator).unwrap();
        assert!(!matches!(spec.layers[1], LayerSpec::BatchNorm { .. }), "first encoder layer has no batchnorm");
        let n = spec.layers.len();
        assert!(matches!(spec.layers[n - 2], LayerSpec::ConvTranspose { .. }));
        assert!(matches!(spec.layers[n - 1], LayerSpec::Activation(Activation::Tanh)));
        let d = discriminator_spec(&small()).unwrap();
        assert!(matches!(d.layers[1], LayerSpec::Activation(_)));
    }

    #[test]
    fn init_is_seeded() {
        let a = build_generator(&small()).unwrap();
        let b = build_generator(&small()).unwrap();
        assert!(a.params.bit_eq(&b.params));
        let c = build_generator(&NetConfig { seed: 1, ..small() }).unwrap();
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let mut net = build_generator(&small()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let err = net.forward(&mut g, x, Mode::Train, false).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }
}
