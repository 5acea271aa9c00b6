//! Binary checkpoint files. The byte layout is described in
//! `docs/checkpoint-format.md`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Trainer, TrainConfig};
use crate::error::{Error, Result};
use crate::networks::Network;
use crate::tensor::{Adam, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGAN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    generator_adam_steps: u64,
    discriminator_adam_steps: Option<u64>,
}

/// Serializable snapshot of a [`Trainer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub generator_adam_steps: u64,
    pub discriminator_adam_steps: Option<u64>,
    /// Parameters, Adam moments and batchnorm running statistics.
    pub tensors: Vec<(String, Tensor)>,
    /// Data-order state: shuffle seed, completed epochs, batches consumed
    /// in the current epoch.
    pub seed: u64,
    pub epoch: u64,
    pub cursor: u64,
}

fn push_network(out: &mut Vec<(String, Tensor)>, prefix: &str, net: &Network, opt: &Adam) {
    for (name, t) in net.params.iter() {
        out.push((format!("{prefix}.param.{name}"), t.clone()));
    }
    for (name, m) in net.params.names().iter().zip(&opt.state.m) {
        out.push((format!("{prefix}.adam_m.{name}"), m.clone()));
    }
    for (name, v) in net.params.names().iter().zip(&opt.state.v) {
        out.push((format!("{prefix}.adam_v.{name}"), v.clone()));
    }
    for (layer, s) in &net.stats {
        let c = s.channels();
        out.push((format!("{prefix}.bn.{layer}.mean"), Tensor::new(&[c], s.mean.clone()).expect("stats length")));
        out.push((format!("{prefix}.bn.{layer}.var"), Tensor::new(&[c], s.var.clone()).expect("stats length")));
    }
}

fn fill_network(
    map: &mut HashMap<String, Tensor>,
    prefix: &str,
    net: &mut Network,
    opt: &mut Adam,
    path: &Path,
) -> Result<()> {
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = map.remove(&name).ok_or_else(|| corrupt(path, 0, format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(corrupt(path, 0, format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let names = net.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let shape = net.params.tensors()[i].shape().to_vec();
        net.params.tensors_mut()[i] = take(format!("{prefix}.param.{name}"), &shape)?;
        opt.state.m[i] = take(format!("{prefix}.adam_m.{name}"), &shape)?;
        opt.state.v[i] = take(format!("{prefix}.adam_v.{name}"), &shape)?;
    }
    for (layer, s) in &mut net.stats {
        let c = s.channels();
        s.mean = take(format!("{prefix}.bn.{layer}.mean"), &[c])?.into_data();
        s.var = take(format!("{prefix}.bn.{layer}.var"), &[c])?.into_data();
        s.initialized = true;
    }
    Ok(())
}

fn corrupt(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(
                self.path,
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut tensors = Vec::new();
        push_network(&mut tensors, "generator", &t.generator, &t.g_opt);
        if let (Some(d), Some(o)) = (&t.discriminator, &t.d_opt) {
            push_network(&mut tensors, "discriminator", d, o);
        }
        Self {
            config: t.config.clone(),
            step: t.step,
            generator_adam_steps: t.g_opt.state.t,
            discriminator_adam_steps: t.d_opt.as_ref().map(|o| o.state.t),
            tensors,
            seed: t.config.seed,
            epoch: t.epoch,
            cursor: t.cursor,
        }
    }

    /// Rebuilds the trainer; `path` is only used in error messages.
    pub fn into_trainer(self, path: &Path) -> Result<Trainer> {
        let mut t = Trainer::new(self.config)?;
        let mut map: HashMap<String, Tensor> = HashMap::with_capacity(self.tensors.len());
        for (name, tensor) in self.tensors {
            if map.insert(name.clone(), tensor).is_some() {
                return Err(corrupt(path, 0, format!("duplicate tensor `{name}`")));
            }
        }
        fill_network(&mut map, "generator", &mut t.generator, &mut t.g_opt, path)?;
        t.g_opt.state.t = self.generator_adam_steps;
        if let (Some(d), Some(o)) = (&mut t.discriminator, &mut t.d_opt) {
            fill_network(&mut map, "discriminator", d, o, path)?;
            o.state.t = self
                .discriminator_adam_steps
                .ok_or_else(|| corrupt(path, 0, "missing discriminator optimizer step count"))?;
        }
        if let Some(extra) = map.keys().min() {
            return Err(corrupt(path, 0, format!("unexpected tensor `{extra}`")));
        }
        if self.seed != t.config.seed {
            return Err(corrupt(path, 0, "data-order seed disagrees with the config seed"));
        }
        t.step = self.step;
        t.epoch = self.epoch;
        t.cursor = self.cursor;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            generator_adam_steps: self.generator_adam_steps,
            discriminator_adam_steps: self.discriminator_adam_steps,
        })
        .expect("header serializes");
        let body: usize = self.tensors.iter().map(|(n, t)| 5 + n.len() + 4 * t.rank() + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + body + 24);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in [self.seed, self.epoch, self.cursor] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(corrupt(path, 0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(path, 4, format!("unsupported version {version}")));
        }
        let len = r.u32("header length")? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| corrupt(path, at, format!("bad header: {e}")))?;
        let count = r.u32("entry count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| corrupt(path, at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|l| l.checked_mul(4))
                .ok_or_else(|| corrupt(path, at, "tensor size overflows"))?;
            let data = r
                .take(len, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(path, at, e.to_string()))?;
            tensors.push((name, t));
        }
        let seed = r.u64("rng seed")?;
        let epoch = r.u64("rng epoch")?;
        let cursor = r.u64("rng cursor")?;
        if r.pos != bytes.len() {
            return Err(corrupt(path, r.pos, "trailing bytes after the rng state"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            generator_adam_steps: header.generator_adam_steps,
            discriminator_adam_steps: header.discriminator_adam_steps,
            tensors,
            seed,
            epoch,
            cursor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            image_size: 8,
            base_channels: 2,
            depth: Some(2),
            ..Default::default()
        }
    }

    #[test]
    fn header_prefix_layout() {
        let ck = Trainer::new(small()).unwrap().checkpoint();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"CGAN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let h = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&b[12..12 + h]).unwrap();
        assert_eq!(json["step"], 0);
        let count = u32::from_le_bytes(b[12 + h..16 + h].try_into().unwrap()) as usize;
        assert_eq!(count, ck.tensors.len());
        let tail = &b[b.len() - 24..];
        assert_eq!(u64::from_le_bytes(tail[..8].try_into().unwrap()), ck.seed);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let b = Trainer::new(TrainConfig { model: super::super::ModelKind::Baseline, ..small() })
            .unwrap()
            .checkpoint()
            .to_bytes();
        for cut in (0..b.len()).step_by(97).chain([b.len() - 1]) {
            let err = Checkpoint::from_bytes(&b[..cut], Path::new("x.ckpt")).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
        }
    }
}
