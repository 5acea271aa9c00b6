use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::networks::{discriminator_spec, unet_spec, NetConfig, Role};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gan,
    Baseline,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gan" => Ok(ModelKind::Gan),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(format!("unknown model `{other}` (expected gan or baseline)")),
        }
    }
}

/// Everything that determines a training run. Serialized as JSON both in
/// config files and in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `limit` samples.
    pub limit: Option<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub predict_ab: bool,
    pub base_channels: usize,
    /// Encoder stages; `None` picks `log2(image_size) - 2`.
    pub depth: Option<usize>,
    pub channel_cap: usize,
    pub leaky_slope: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    pub lambda_l1: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub label_smooth: f32,
    /// Discriminator updates per generator update.
    pub disc_updates: usize,
    /// Random horizontal flips.
    pub flip: bool,
    pub log_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Fill the `seconds` metrics column with elapsed time. Off by default so
    /// metrics files are reproducible byte for byte.
    pub wall_clock_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let net = NetConfig::default();
        Self {
            model: ModelKind::Gan,
            dataset: DatasetKind::Cifar10,
            data_dir: None,
            limit: None,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            image_size: net.image_size,
            predict_ab: net.predict_ab,
            base_channels: net.base_channels,
            depth: None,
            channel_cap: net.channel_cap,
            leaky_slope: net.leaky_slope,
            bn_eps: net.bn_eps,
            bn_momentum: net.bn_momentum,
            lambda_l1: 100.0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            label_smooth: 0.9,
            disc_updates: 1,
            flip: false,
            log_every: 10,
            checkpoint_every: 0,
            wall_clock_metrics: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn resolved_depth(&self) -> usize {
        self.depth
            .unwrap_or_else(|| (self.image_size.max(1).ilog2() as usize).saturating_sub(2).max(1))
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            depth: self.resolved_depth(),
            channel_cap: self.channel_cap,
            predict_ab: self.predict_ab,
            leaky_slope: self.leaky_slope,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_l1.is_finite() && self.lambda_l1 >= 0.0) {
            return fail(format!("lambda_l1 must be finite and >= 0, got {}", self.lambda_l1));
        }
        if !(self.label_smooth > 0.0 && self.label_smooth <= 1.0) {
            return fail(format!("label_smooth must be in (0, 1], got {}", self.label_smooth));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return fail("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        if self.disc_updates == 0 || self.log_every == 0 {
            return fail("disc_updates and log_every must be at least 1".into());
        }
        if self.limit == Some(0) {
            return fail("limit must be at least 1".into());
        }
        let net = self.net_config();
        unet_spec(&net, Role::Generator)?;
        discriminator_spec(&net)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.resolved_depth(), 3);
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c = TrainConfig::from_json(r#"{"epochs": 2, "model": "baseline", "lr": 0.001}"#).unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.model, ModelKind::Baseline);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        assert!(matches!(TrainConfig::from_json(r#"{"epoch": 2}"#), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_enforced() {
        let bad = [
            TrainConfig { lambda_l1: -1.0, ..Default::default() },
            TrainConfig { label_smooth: 0.0, ..Default::default() },
            TrainConfig { label_smooth: 1.01, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { image_size: 18, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        TrainConfig { label_smooth: 1.0, lambda_l1: 0.0, ..Default::default() }.validate().unwrap();
    }
}
