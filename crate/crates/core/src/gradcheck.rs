//! Central finite-difference verification of every differentiable
//! operation in [`crate::tensor::Graph`].
//!
//! Each operation output `y` is reduced to the scalar `Σ r·y` with a fixed
//! random `r`. The analytic gradient comes from the tape; the numerical
//! one re-evaluates the forward pass with each input element nudged by
//! `±h`. Agreement is measured per instance as the norm-wise relative error
//! `‖a − n‖ / max(‖a‖, ‖n‖)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Activation, BatchNormMode, Graph, RunningStats, Tensor, Var};

pub const DEFAULT_STEP: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub instances: usize,
    pub step: f32,
    pub tolerance: f64,
    pub seed: u64,
    /// Scales the analytic gradient of the named op by 1.05; used to
    /// confirm the checker reports failures.
    pub perturb: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            instances: 5,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// How an input is sampled for one instance.
#[derive(Clone, Copy)]
enum Sample {
    /// Uniform in [-2, 2], kept at least `gap` away from zero.
    Uniform { gap: f32 },
    /// Uniform in [lo, hi].
    Range(f32, f32),
}

struct Input {
    shape: Vec<usize>,
    sample: Sample,
    differentiable: bool,
}

fn input(shape: &[usize]) -> Input {
    Input {
        shape: shape.to_vec(),
        sample: Sample::Uniform { gap: 0.0 },
        differentiable: true,
    }
}

fn away_from_zero(shape: &[usize], gap: f32) -> Input {
    Input {
        sample: Sample::Uniform { gap },
        ..input(shape)
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var], &Tensor) -> Result<Var>>;

struct Case {
    op: &'static str,
    inputs: Vec<Input>,
    /// Fixed non-differentiable tensor passed to `build` (targets, etc.).
    aux: Option<(Vec<usize>, Sample)>,
    build: Build,
}

fn case(op: &'static str, inputs: Vec<Input>, build: impl Fn(&mut Graph, &[Var], &Tensor) -> Result<Var> + 'static) -> Case {
    Case {
        op,
        inputs,
        aux: None,
        build: Box::new(build),
    }
}

/// Geometry variants cycled across instances.
const CONV_GEOMETRIES: [(usize, usize); 4] = [(1, 0), (1, 1), (2, 1), (2, 0)];

fn cases(instance: usize) -> Vec<Case> {
    let (stride, pad) = CONV_GEOMETRIES[instance % CONV_GEOMETRIES.len()];
    let (t_stride, t_pad) = [(2, 1), (1, 0), (2, 0), (1, 1)][instance % 4];
    let kink = 0.05;
    let mut cases = vec![
        case("add", vec![input(&[2, 3, 2]), input(&[2, 3, 2])], |g, v, _| g.add(v[0], v[1])),
        case("mul", vec![input(&[2, 3, 2]), input(&[2, 3, 2])], |g, v, _| g.mul(v[0], v[1])),
        case("scale", vec![input(&[3, 4])], |g, v, _| g.scale(v[0], -1.7)),
        case("sum", vec![input(&[2, 5])], |g, v, _| g.sum(v[0])),
        case("reshape", vec![input(&[2, 3, 4])], |g, v, _| g.reshape(v[0], &[6, 4])),
        case("concat", vec![input(&[2, 1, 2, 2]), input(&[2, 3, 2, 2])], |g, v, _| g.concat(&[v[0], v[1]])),
        case(
            "conv2d",
            vec![input(&[2, 2, 4, 4]), input(&[3, 2, 3, 3]), input(&[3])],
            move |g, v, _| g.conv2d(v[0], v[1], v[2], stride, pad),
        ),
        case(
            "conv_transpose2d",
            vec![input(&[2, 2, 3, 3]), input(&[2, 3, 3, 3]), input(&[3])],
            move |g, v, _| g.conv_transpose2d(v[0], v[1], v[2], t_stride, t_pad),
        ),
        case(
            "batchnorm2d",
            vec![input(&[2, 3, 2, 2]), input(&[3]), input(&[3])],
            |g, v, _| {
                let mut stats = RunningStats::uninitialized(3);
                g.batchnorm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train, 1e-5, 0.1)
            },
        ),
        case(
            "batchnorm2d_eval",
            vec![input(&[2, 3, 2, 2]), input(&[3]), input(&[3])],
            |g, v, _| {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.3, 0.5],
                    var: vec![0.8, 1.5, 0.4],
                    initialized: true,
                };
                g.batchnorm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Eval, 1e-5, 0.1)
            },
        ),
        case("leaky_relu", vec![away_from_zero(&[4, 5], kink)], |g, v, _| {
            g.activation(v[0], Activation::LeakyRelu(0.2))
        }),
        case("relu", vec![away_from_zero(&[4, 5], kink)], |g, v, _| g.relu(v[0])),
        case("tanh", vec![input(&[4, 5])], |g, v, _| g.tanh(v[0])),
        case("sigmoid", vec![input(&[4, 5])], |g, v, _| g.sigmoid(v[0])),
    ];
    let mut bce = case("bce_with_logits", vec![input(&[4, 3])], |g, v, t| g.bce_with_logits(v[0], t));
    bce.aux = Some((vec![4, 3], Sample::Range(0.0, 1.0)));
    cases.push(bce);
    // pred - target stays clear of the kink at zero: pred ∈ ±[kink, 2], target ∈ [-kink/2, kink/2].
    let mut target = input(&[3, 4]);
    target.sample = Sample::Range(-kink / 2.0, kink / 2.0);
    cases.push(case("l1_loss", vec![away_from_zero(&[3, 4], 2.0 * kink), target], |g, v, _| g.l1_loss(v[0], v[1])));
    cases
}

/// Every op name the suite covers, in report order.
pub fn op_names() -> Vec<&'static str> {
    cases(0).iter().map(|c| c.op).collect()
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], how: Sample) -> Tensor {
    Tensor::from_fn(shape, |_| match how {
        Sample::Uniform { gap } => {
            let v: f32 = rng.random_range(-2.0..=2.0);
            if v.abs() < gap {
                gap.copysign(v)
            } else {
                v
            }
        }
        Sample::Range(lo, hi) => rng.random_range(lo..=hi),
    })
}

/// `Σ r·y` of the op output, evaluated in f64.
fn probe(c: &Case, values: &[Tensor], aux: &Tensor, weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
    let out = (c.build)(&mut g, &vars, aux)?;
    Ok(g.value(out).dot(weights))
}

fn analytic(c: &Case, values: &[Tensor], aux: &Tensor, weights: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = c
        .inputs
        .iter()
        .zip(values)
        .map(|(inp, t)| g.leaf(t.clone(), inp.differentiable))
        .collect();
    let out = (c.build)(&mut g, &vars, aux)?;
    let r = g.constant(weights.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v).cloned()).collect())
}

fn check_instance(c: &Case, rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> Result<f64> {
    let values: Vec<Tensor> = c.inputs.iter().map(|i| sample(rng, &i.shape, i.sample)).collect();
    let aux = match &c.aux {
        Some((shape, how)) => sample(rng, shape, *how),
        None => Tensor::scalar(0.0),
    };
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = (c.build)(&mut g, &vars, &aux)?;
        g.value(out).shape().to_vec()
    };
    let weights = sample(rng, &out_shape, Sample::Range(-1.0, 1.0));
    let perturbed = opts.perturb.as_deref() == Some(c.op);

    let grads = analytic(c, &values, &aux, &weights)?;
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (i, inp) in c.inputs.iter().enumerate() {
        if !inp.differentiable {
            continue;
        }
        let grad = grads[i].clone().unwrap_or_else(|| Tensor::zeros(&inp.shape));
        for j in 0..values[i].len() {
            let x = values[i].data()[j];
            let (hi, lo) = (x + opts.step, x - opts.step);
            let mut vals = values.to_vec();
            vals[i].data_mut()[j] = hi;
            let f_hi = probe(c, &vals, &aux, &weights)?;
            vals[i].data_mut()[j] = lo;
            let f_lo = probe(c, &vals, &aux, &weights)?;
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let mut a = grad.data()[j] as f64;
            if perturbed {
                a *= 1.05;
            }
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom })
}

/// Runs the whole suite; one report per op.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<OpReport>> {
    let names = op_names();
    let mut reports: Vec<OpReport> = names
        .iter()
        .map(|&op| OpReport {
            op,
            instances: 0,
            max_rel_error: 0.0,
            passed: true,
        })
        .collect();
    for instance in 0..opts.instances {
        for (k, c) in cases(instance).iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((instance as u64) << 16) | k as u64);
            let err = check_instance(c, &mut rng, opts)?;
            let r = &mut reports[k];
            r.instances += 1;
            r.max_rel_error = r.max_rel_error.max(err);
            r.passed = r.max_rel_error <= opts.tolerance;
        }
    }
    Ok(reports)
}

pub fn all_passed(reports: &[OpReport]) -> bool {
    reports.iter().all(|r| r.passed)
}
