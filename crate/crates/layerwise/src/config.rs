//! Run configuration: presets, config files and dotted-key overrides.
//!
//! Precedence is CLI override > config file > preset. Every run writes its
//! resolved configuration next to its outputs as `config.toml`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{DownsampleKind, NetConfig};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    /// Architecture presets only; no ingestion pipeline is provided.
    ImageNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Mem,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Option<String>,
    pub dataset: DatasetKind,
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub augment: bool,
    /// Train on the first n samples only (desk-scale runs).
    pub train_subset: Option<usize>,
    pub cache_mode: CacheMode,
}

impl TrainConfig {
    /// Named presets. The full-scale configurations reproduce the published
    /// architectures; the `-reduced` ones are sized for CPU-scale runs.
    pub fn preset(name: &str) -> Result<Self> {
        let cifar_net = |k: usize, width: usize| NetConfig {
            layers: 5,
            k,
            width,
            aux_width: 256,
            aux_width_final: None,
            downsample_at: vec![2, 3],
            downsample_kind: DownsampleKind::Invertible,
            input_downsample: true,
            batchnorm_aux: k > 1,
            batchnorm_main: k > 1,
            classes: 10,
            input_channels: 3,
            input_hw: (32, 32),
            explicit_widths: None,
            aux_prepool: false,
        };
        let cfg = match name {
            "cifar-k1" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::Cifar10,
                net: cifar_net(1, 256),
                optim: OptimConfig::default(),
                seed: 0,
                augment: true,
                train_subset: None,
                cache_mode: CacheMode::Mem,
            },
            "imagenet-k1" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::ImageNet,
                net: NetConfig {
                    layers: 8,
                    k: 1,
                    width: 256,
                    aux_width: 256,
                    aux_width_final: None,
                    downsample_at: vec![2, 3, 4, 6],
                    downsample_kind: DownsampleKind::Invertible,
                    input_downsample: true,
                    batchnorm_aux: false,
                    batchnorm_main: false,
                    classes: 1000,
                    input_channels: 3,
                    input_hw: (224, 224),
                    explicit_widths: None,
                    aux_prepool: false,
                },
                optim: OptimConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    decay_factor: 0.1,
                    decay_period: 20,
                    epochs_per_layer: 45,
                    batch_size: 256,
                    weight_decay: 5e-4,
                    max_grad_norm: Some(2.0),
                },
                seed: 0,
                augment: true,
                train_subset: None,
                cache_mode: CacheMode::Disk,
            },
            "imagenet-k23" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::ImageNet,
                net: NetConfig {
                    layers: 8,
                    k: 3,
                    width: 128,
                    aux_width: 256,
                    aux_width_final: Some(2048),
                    downsample_at: vec![2, 4, 6],
                    downsample_kind: DownsampleKind::Invertible,
                    input_downsample: true,
                    batchnorm_aux: true,
                    batchnorm_main: true,
                    classes: 1000,
                    input_channels: 3,
                    input_hw: (224, 224),
                    explicit_widths: None,
                    aux_prepool: false,
                },
                optim: OptimConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    decay_factor: 0.1,
                    decay_period: 20,
                    epochs_per_layer: 45,
                    batch_size: 256,
                    weight_decay: 5e-4,
                    max_grad_norm: Some(2.0),
                },
                seed: 0,
                augment: true,
                train_subset: None,
                cache_mode: CacheMode::Disk,
            },
            "vgg11-k3" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::ImageNet,
                net: NetConfig {
                    layers: 8,
                    k: 3,
                    width: 64,
                    aux_width: 256,
                    aux_width_final: None,
                    downsample_at: vec![1, 2, 4, 6],
                    downsample_kind: DownsampleKind::MaxPool,
                    input_downsample: false,
                    batchnorm_aux: true,
                    batchnorm_main: true,
                    classes: 1000,
                    input_channels: 3,
                    input_hw: (224, 224),
                    explicit_widths: Some(vec![64, 128, 256, 256, 512, 512, 512, 512]),
                    aux_prepool: true,
                },
                optim: OptimConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    decay_factor: 0.1,
                    decay_period: 20,
                    epochs_per_layer: 45,
                    batch_size: 256,
                    weight_decay: 5e-4,
                    max_grad_norm: Some(2.0),
                },
                seed: 0,
                augment: true,
                train_subset: None,
                cache_mode: CacheMode::Disk,
            },
            "cifar-k3-prune" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::Cifar10,
                net: NetConfig {
                    layers: 3,
                    k: 3,
                    width: 128,
                    aux_width: 128,
                    aux_width_final: Some(64),
                    downsample_at: vec![],
                    downsample_kind: DownsampleKind::Invertible,
                    input_downsample: true,
                    batchnorm_aux: true,
                    batchnorm_main: true,
                    classes: 10,
                    input_channels: 3,
                    input_hw: (32, 32),
                    explicit_widths: None,
                    aux_prepool: false,
                },
                optim: OptimConfig::default(),
                seed: 0,
                augment: true,
                train_subset: None,
                cache_mode: CacheMode::Mem,
            },
            "cifar-k1-reduced" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::Cifar10,
                net: NetConfig {
                    layers: 3,
                    k: 1,
                    width: 64,
                    aux_width: 64,
                    aux_width_final: None,
                    downsample_at: vec![],
                    downsample_kind: DownsampleKind::Invertible,
                    input_downsample: true,
                    batchnorm_aux: false,
                    batchnorm_main: false,
                    classes: 10,
                    input_channels: 3,
                    input_hw: (32, 32),
                    explicit_widths: None,
                    aux_prepool: false,
                },
                optim: OptimConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    decay_factor: 0.2,
                    decay_period: 6,
                    epochs_per_layer: 20,
                    batch_size: 128,
                    weight_decay: 5e-4,
                    max_grad_norm: Some(2.0),
                },
                seed: 0,
                augment: false,
                train_subset: Some(12800),
                cache_mode: CacheMode::Mem,
            },
            "cifar-k2-reduced" => {
                let mut cfg = Self::preset("cifar-k1-reduced")?;
                cfg.preset = Some(name.into());
                cfg.net.k = 2;
                cfg.net.batchnorm_aux = true;
                cfg.net.batchnorm_main = true;
                cfg
            }
            "cifar-k3-prune-reduced" => {
                let mut cfg = Self::preset("cifar-k1-reduced")?;
                cfg.preset = Some(name.into());
                cfg.net.k = 3;
                cfg.net.batchnorm_aux = true;
                cfg.net.batchnorm_main = true;
                cfg.optim.epochs_per_layer = 10;
                cfg.optim.decay_period = 4;
                cfg
            }
            "mnist-prop31" => Self {
                preset: Some(name.into()),
                dataset: DatasetKind::Mnist,
                net: NetConfig {
                    layers: 3,
                    k: 1,
                    width: 32,
                    aux_width: 32,
                    aux_width_final: None,
                    downsample_at: vec![],
                    downsample_kind: DownsampleKind::Invertible,
                    input_downsample: true,
                    batchnorm_aux: false,
                    batchnorm_main: false,
                    classes: 10,
                    input_channels: 1,
                    input_hw: (28, 28),
                    explicit_widths: None,
                    aux_prepool: false,
                },
                optim: OptimConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    decay_factor: 0.2,
                    decay_period: 3,
                    epochs_per_layer: 5,
                    batch_size: 32,
                    weight_decay: 5e-4,
                    max_grad_norm: Some(2.0),
                },
                seed: 0,
                augment: false,
                train_subset: Some(5000),
                cache_mode: CacheMode::Mem,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (known: cifar-k1, imagenet-k1, imagenet-k23, \
                     vgg11-k3, cifar-k3-prune, cifar-k1-reduced, cifar-k2-reduced, \
                     cifar-k3-prune-reduced, mnist-prop31)"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        crate::arch::build_network(&self.net).map(|_| ())
    }

    pub fn run_id(&self) -> String {
        let name = self.preset.as_deref().unwrap_or("custom");
        format!("{name}-s{}", self.seed)
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Apply one `key=value` override with dotted keys mirroring the config
    /// schema (e.g. `optim.lr0=0.05`, `net.k=2`). Unknown keys are rejected.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "train_subset" => {
                self.train_subset = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "cache_mode" => {
                self.cache_mode = match value {
                    "mem" => CacheMode::Mem,
                    "disk" => CacheMode::Disk,
                    _ => return Err(Error::Config(format!("invalid cache mode '{value}'"))),
                }
            }
            "net.layers" => self.net.layers = parse(key, value)?,
            "net.k" => self.net.k = parse(key, value)?,
            "net.width" => self.net.width = parse(key, value)?,
            "net.aux_width" => self.net.aux_width = parse(key, value)?,
            "net.aux_width_final" => {
                self.net.aux_width_final = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "net.downsample_at" => {
                self.net.downsample_at = if value.is_empty() {
                    vec![]
                } else {
                    value
                        .split(',')
                        .map(|s| parse("net.downsample_at", s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "net.downsample_kind" => self.net.downsample_kind = value.parse()?,
            "net.input_downsample" => self.net.input_downsample = parse(key, value)?,
            "net.batchnorm_aux" => self.net.batchnorm_aux = parse(key, value)?,
            "net.batchnorm_main" => self.net.batchnorm_main = parse(key, value)?,
            "net.classes" => self.net.classes = parse(key, value)?,
            "optim.lr0" => self.optim.lr0 = parse(key, value)?,
            "optim.momentum" => self.optim.momentum = parse(key, value)?,
            "optim.decay_factor" => self.optim.decay_factor = parse(key, value)?,
            "optim.decay_period" => self.optim.decay_period = parse(key, value)?,
            "optim.epochs_per_layer" => self.optim.epochs_per_layer = parse(key, value)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.max_grad_norm" => {
                self.optim.max_grad_norm = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in [
            "cifar-k1",
            "imagenet-k1",
            "imagenet-k23",
            "vgg11-k3",
            "cifar-k3-prune",
            "cifar-k1-reduced",
            "cifar-k2-reduced",
            "cifar-k3-prune-reduced",
            "mnist-prop31",
        ] {
            let cfg = TrainConfig::preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert!(matches!(
            TrainConfig::preset("cifar-k9"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply_with_precedence_over_preset() {
        let mut cfg = TrainConfig::preset("cifar-k1-reduced").unwrap();
        cfg.apply_override("optim.lr0", "0.05").unwrap();
        cfg.apply_override("net.k", "2").unwrap();
        cfg.apply_override("net.downsample_at", "1,2").unwrap();
        assert_eq!(cfg.optim.lr0, 0.05);
        assert_eq!(cfg.net.k, 2);
        assert_eq!(cfg.net.downsample_at, vec![1, 2]);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let mut cfg = TrainConfig::preset("cifar-k1-reduced").unwrap();
        assert!(matches!(
            cfg.apply_override("net.bogus", "1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let cfg = TrainConfig::preset("cifar-k2-reduced").unwrap();
        cfg.save_toml(&path).unwrap();
        let loaded = TrainConfig::load_toml(&path).unwrap();
        assert_eq!(cfg, loaded);
    }
}
