//! Objectives and training loops for the adversarial colorizer and the
//! L1-only baseline.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelKind, TrainConfig};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{Batch, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::networks::{build_baseline, build_discriminator, build_generator, Mode, Network};
use crate::tensor::{Adam, Graph, Tensor, Var};

pub const METRICS_HEADER: &str = "step,d_loss,g_adv,g_l1,d_real_acc,d_fake_acc,seconds";

/// Losses and discriminator accuracies of one update (or the mean over a
/// logging interval). Adversarial fields are zero for the baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f32,
    pub g_adv_loss: f32,
    pub g_l1_loss: f32,
    pub d_real_acc: f32,
    pub d_fake_acc: f32,
    pub seconds: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step, self.d_loss, self.g_adv_loss, self.g_l1_loss, self.d_real_acc, self.d_fake_acc, self.seconds
        )
    }

    /// Element-wise mean; `step` and `seconds` are taken from the last entry.
    pub fn mean(items: &[StepMetrics]) -> Option<StepMetrics> {
        let last = items.last()?;
        let avg = |f: fn(&StepMetrics) -> f32| (items.iter().map(|m| f(m) as f64).sum::<f64>() / items.len() as f64) as f32;
        Some(StepMetrics {
            step: last.step,
            d_loss: avg(|m| m.d_loss),
            g_adv_loss: avg(|m| m.g_adv_loss),
            g_l1_loss: avg(|m| m.g_l1_loss),
            d_real_acc: avg(|m| m.d_real_acc),
            d_fake_acc: avg(|m| m.d_fake_acc),
            seconds: last.seconds,
        })
    }
}

/// `bce(real, smooth) + bce(fake, 0)`. Smoothing touches the real term only.
pub fn discriminator_loss(g: &mut Graph, logits_real: Var, logits_fake: Var, label_smooth: f32) -> Result<Var> {
    let (r, f) = (g.value(logits_real).shape().to_vec(), g.value(logits_fake).shape().to_vec());
    if r != f {
        return Err(Error::shape("discriminator_loss", &r, &f, "real and fake logit batches must match"));
    }
    let real = g.bce_with_logits(logits_real, &Tensor::full(&r, label_smooth))?;
    let fake = g.bce_with_logits(logits_fake, &Tensor::zeros(&f))?;
    g.add(real, fake)
}

/// Non-saturating adversarial term plus weighted reconstruction:
/// returns `(total, bce(fake, 1), l1)`.
pub fn generator_loss(g: &mut Graph, logits_fake: Var, fake: Var, real: Var, lambda_l1: f32) -> Result<(Var, Var, Var)> {
    let shape = g.value(logits_fake).shape().to_vec();
    let adv = g.bce_with_logits(logits_fake, &Tensor::ones(&shape))?;
    let l1 = g.l1_loss(fake, real)?;
    let weighted = g.scale(l1, lambda_l1)?;
    let total = g.add(adv, weighted)?;
    Ok((total, adv, l1))
}

fn fraction(t: &Tensor, pred: impl Fn(f32) -> bool) -> f32 {
    t.data().iter().filter(|&&v| pred(v)).count() as f32 / t.len().max(1) as f32
}

fn apply(net: &mut Network, opt: &mut Adam, grads: &mut crate::tensor::Gradients, vars: &[Var]) -> Result<()> {
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(net.params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let names = net.params.names().to_vec();
    opt.step(&names, net.params.tensors_mut(), &grads)
}

/// The generator's forward pass on a batch, kept on its tape so the
/// generator update can backpropagate through it after the discriminator
/// has been updated.
pub struct GeneratorPass {
    graph: Graph,
    params: Vec<Var>,
    condition: Var,
    fake: Var,
}

impl GeneratorPass {
    pub fn run(gen: &mut Network, condition: &Tensor) -> Result<Self> {
        let mut graph = Graph::new();
        let c = graph.constant(condition.clone());
        let (fake, params) = gen.forward(&mut graph, c, Mode::Train, true)?;
        Ok(Self { graph, params, condition: c, fake })
    }

    /// Generator output, detached from the tape.
    pub fn output(&self) -> &Tensor {
        self.graph.value(self.fake)
    }
}

/// One discriminator update on matched real and fake pairs. `fake` is a
/// plain tensor, so nothing reaches the generator. Returns
/// `(loss, real accuracy, fake accuracy)`.
pub fn discriminator_update(
    disc: &mut Network,
    opt: &mut Adam,
    condition: &Tensor,
    real: &Tensor,
    fake: &Tensor,
    label_smooth: f32,
) -> Result<(f32, f32, f32)> {
    let mut g = Graph::new();
    let c = g.constant(condition.clone());
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let real_pair = g.concat(&[c, r])?;
    let fake_pair = g.concat(&[c, f])?;
    let params = disc.register(&mut g, true);
    let logits_real = disc.forward_with(&mut g, &params, real_pair, Mode::Train)?;
    let logits_fake = disc.forward_with(&mut g, &params, fake_pair, Mode::Train)?;
    let real_acc = fraction(g.value(logits_real), |v| v > 0.0);
    let fake_acc = fraction(g.value(logits_fake), |v| v < 0.0);
    let loss = discriminator_loss(&mut g, logits_real, logits_fake, label_smooth)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    apply(disc, opt, &mut grads, &params)?;
    Ok((value, real_acc, fake_acc))
}

/// Generator update through a frozen copy of the discriminator's current
/// parameters. Returns `(adversarial, l1)`.
pub fn generator_update(
    pass: GeneratorPass,
    gen: &mut Network,
    disc: &mut Network,
    opt: &mut Adam,
    real: &Tensor,
    lambda_l1: f32,
) -> Result<(f32, f32)> {
    let GeneratorPass { mut graph, params, condition, fake } = pass;
    let g = &mut graph;
    let r = g.constant(real.clone());
    let pair = g.concat(&[condition, fake])?;
    let dparams = disc.register(g, false);
    let logits = disc.forward_with(g, &dparams, pair, Mode::Train)?;
    let (total, adv, l1) = generator_loss(g, logits, fake, r, lambda_l1)?;
    let (adv, l1) = (g.value(adv).item(), g.value(l1).item());
    let mut grads = graph.backward(total)?;
    apply(gen, opt, &mut grads, &params)?;
    Ok((adv, l1))
}

/// Alternating update: `disc_updates` discriminator steps against the
/// detached generator output, then one generator step.
pub fn gan_train_step(
    gen: &mut Network,
    disc: &mut Network,
    g_opt: &mut Adam,
    d_opt: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    let pass = GeneratorPass::run(gen, &batch.l)?;
    let fake = pass.output().clone();
    let mut d = (0.0, 0.0, 0.0);
    for i in 0..config.disc_updates.max(1) {
        let r = discriminator_update(disc, d_opt, &batch.l, &batch.target, &fake, config.label_smooth)?;
        if i == 0 {
            d = r;
        }
    }
    let (adv, l1) = generator_update(pass, gen, disc, g_opt, &batch.target, config.lambda_l1)?;
    Ok(StepMetrics {
        step,
        d_loss: d.0,
        g_adv_loss: adv,
        g_l1_loss: l1,
        d_real_acc: d.1,
        d_fake_acc: d.2,
        seconds: 0.0,
    })
}

/// One L1-only update.
pub fn baseline_train_step(net: &mut Network, opt: &mut Adam, batch: &Batch, step: u64) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let c = g.constant(batch.l.clone());
    let t = g.constant(batch.target.clone());
    let (out, params) = net.forward(&mut g, c, Mode::Train, true)?;
    let loss = g.l1_loss(out, t)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    apply(net, opt, &mut grads, &params)?;
    Ok(StepMetrics {
        step,
        g_l1_loss: value,
        ..StepMetrics::default()
    })
}

/// Complete training state: networks, optimizers and position in the
/// seeded batch sequence.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Network,
    pub discriminator: Option<Network>,
    pub g_opt: Adam,
    pub d_opt: Option<Adam>,
    /// Updates applied so far.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub cursor: u64,
}

fn optimizer(config: &TrainConfig, net: &Network) -> Adam {
    Adam::new(config.adam(), net.params.tensors().iter().map(|t| t.shape()))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = config.net_config();
        let (generator, discriminator) = match config.model {
            ModelKind::Gan => (build_generator(&net)?, Some(build_discriminator(&net)?)),
            ModelKind::Baseline => (build_baseline(&net)?, None),
        };
        let g_opt = optimizer(&config, &generator);
        let d_opt = discriminator.as_ref().map(|d| optimizer(&config, d));
        Ok(Self {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
            epoch: 0,
            cursor: 0,
        })
    }

    /// Applies one update to `batch` and advances the step counter. A
    /// non-finite value anywhere becomes [`Error::NumericAbort`].
    pub fn step_batch(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let next = self.step + 1;
        let result = match (&mut self.discriminator, &mut self.d_opt) {
            (Some(d), Some(d_opt)) => gan_train_step(&mut self.generator, d, &mut self.g_opt, d_opt, batch, &self.config, next),
            _ => baseline_train_step(&mut self.generator, &mut self.g_opt, batch, next),
        };
        let metrics = result.map_err(|e| if e.is_numeric() { Error::NumericAbort { step: next } } else { e })?;
        self.step = next;
        Ok(metrics)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step}.ckpt"))
    }

    pub fn diagnostic_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("diagnostic-{step}.ckpt"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

struct MetricsLog {
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    fn open(out: Option<&TrainOutput>, fresh: bool) -> Result<Self> {
        let Some(out) = out else { return Ok(Self { file: None }) };
        std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let path = out.metrics_path();
        let exists = path.exists();
        let mut file = if fresh || !exists {
            File::create(&path)
        } else {
            OpenOptions::new().append(true).open(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        if fresh || !exists {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file: Some((path, file)) })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some((path, file)) = &mut self.file {
            writeln!(file, "{}", m.csv_row()).and_then(|_| file.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

/// Runs (or continues) the epoch loop until `config.epochs` epochs are
/// complete. Batches follow the seeded order of each epoch, starting at the
/// trainer's cursor, so a run resumed from a checkpoint continues exactly as
/// an uninterrupted one would. With an output directory, metrics rows are
/// appended to `metrics.csv` every `log_every` steps, checkpoints are written
/// every `checkpoint_every` steps and always at the end. `on_log` receives
/// each logged row. Returns the logged rows.
pub fn train(
    trainer: &mut Trainer,
    dataset: &Dataset,
    out: Option<&TrainOutput>,
    mut on_log: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let cfg = trainer.config.clone();
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            dataset.image_size, cfg.image_size
        )));
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let mut log = MetricsLog::open(out, trainer.step == 0)?;
    let start = Instant::now();
    let mut pending: Vec<StepMetrics> = Vec::new();
    let mut logged = Vec::new();
    let mut last_saved = None;
    let mut flush = |pending: &mut Vec<StepMetrics>, log: &mut MetricsLog, logged: &mut Vec<StepMetrics>| -> Result<()> {
        if let Some(m) = StepMetrics::mean(pending) {
            log.write(&m)?;
            on_log(&m);
            logged.push(m);
        }
        pending.clear();
        Ok(())
    };
    while trainer.epoch < cfg.epochs {
        let plan = BatchPlan::new(cfg.seed, trainer.epoch, dataset.len(), cfg.batch_size, cfg.flip)?;
        let batches: Vec<&[usize]> = plan.index_batches().collect();
        while (trainer.cursor as usize) < batches.len() {
            let batch = Batch::assemble(dataset, batches[trainer.cursor as usize], cfg.predict_ab, &plan.flips);
            let mut m = match trainer.step_batch(&batch) {
                Ok(m) => m,
                Err(Error::NumericAbort { step }) => {
                    if let Some(out) = out {
                        trainer.checkpoint().save(&out.diagnostic_path(step))?;
                    }
                    return Err(Error::NumericAbort { step });
                }
                Err(e) => return Err(e),
            };
            trainer.cursor += 1;
            if cfg.wall_clock_metrics {
                m.seconds = start.elapsed().as_secs_f64();
            }
            pending.push(m);
            if trainer.step.is_multiple_of(cfg.log_every) {
                flush(&mut pending, &mut log, &mut logged)?;
            }
            if let Some(out) = out {
                if cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(cfg.checkpoint_every) {
                    trainer.checkpoint().save(&out.checkpoint_path(trainer.step))?;
                    last_saved = Some(trainer.step);
                }
            }
        }
        trainer.epoch += 1;
        trainer.cursor = 0;
    }
    flush(&mut pending, &mut log, &mut logged)?;
    if let Some(out) = out {
        if last_saved != Some(trainer.step) {
            trainer.checkpoint().save(&out.checkpoint_path(trainer.step))?;
        }
    }
    Ok(logged)
}

/// Mean normalized L1 between eval-mode predictions and targets over the
/// whole dataset, in fixed-size chunks.
pub fn dataset_l1(net: &Network, dataset: &Dataset, predict_ab: bool, chunk: usize) -> Result<f64> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let flips = vec![false; dataset.len()];
    let (mut total, mut count) = (0.0f64, 0usize);
    for idx in indices.chunks(chunk.max(1)) {
        let batch = Batch::assemble(dataset, idx, predict_ab, &flips);
        let pred = net.predict(&batch.l)?;
        total += pred.data().iter().zip(batch.target.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>();
        count += pred.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Loads a checkpoint file and rebuilds the trainer it describes.
pub fn resume(path: &Path) -> Result<Trainer> {
    Checkpoint::load(path)?.into_trainer(path)
}
