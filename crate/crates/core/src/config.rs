//! Run configuration: presets `config-a` .. `config-e` plus TOML overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::StickFigureSpec;
use crate::discriminator::{DiscriminatorConfig, GeneratorScope, LossKind, Objective};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::nn::{hex, AdamConfig};
use crate::projector::ProjectionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    /// Built-in randomly initialized network.
    Desk { name: String, seed: u64, channels: Vec<usize> },
    /// JSON descriptor plus weight archive.
    Plugin { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub networks: Vec<NetworkConfig>,
    pub proj_channels: usize,
    pub mode: ProjectionMode,
    pub seed: u64,
    /// Blur sigma at 288 px height; scaled to the stage height.
    pub sigma_max_288: f64,
    pub fade_budget: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub objective: Objective,
    pub loss: LossKind,
    pub generator_scope: GeneratorScope,
    pub progressive: bool,
    /// Images per stage, one entry per generator resolution. Without
    /// progressive growth the single stage runs for their sum.
    pub stage_budgets: Vec<u64>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_beta: f64,
    pub ema_ramp: bool,
    pub flip_probability: f64,
    /// Steps between checkpoints; 0 writes only at stage ends.
    pub checkpoint_every: u64,
    /// Steps between sample grids; 0 disables periodic grids.
    pub sample_every: u64,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: String,
    pub synth_count: usize,
    pub height: usize,
    pub width: usize,
    pub spec: StickFigureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub batch_size: usize,
    pub use_ema: bool,
    pub latent_seed: u64,
    pub ppl_pairs: usize,
    pub ppl_epsilon: f64,
    /// Seed of the desk network used as the Fréchet feature extractor.
    pub fid_network_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub out_dir: String,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub projector: ProjectorConfig,
    pub trainer: TrainerConfig,
    pub dataset: DatasetConfig,
    pub metrics: MetricsConfig,
}

pub const PRESETS: [&str; 5] = ["config-a", "config-b", "config-c", "config-d", "config-e"];

fn desk_network(name: &str, seed: u64, channels: &[usize]) -> NetworkConfig {
    NetworkConfig::Desk {
        name: name.into(),
        seed,
        channels: channels.to_vec(),
    }
}

impl RunConfig {
    /// Built-in defaults for a preset name.
    pub fn preset(name: &str) -> Result<Self> {
        let rank = PRESETS
            .iter()
            .position(|p| *p == name)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", "))))?;
        let mut networks = vec![desk_network("desk", 1, &[32, 64, 128, 256])];
        if rank >= 2 {
            networks.push(desk_network("desk-b", 2, &[16, 32, 64, 128]));
        }
        let generator = GeneratorConfig {
            blocks_per_stage: if rank >= 4 { 2 } else { 1 },
            ..GeneratorConfig::desk()
        };
        let stages = generator.resolutions.len();
        Ok(Self {
            preset: name.into(),
            seed: 0,
            out_dir: "runs/default".into(),
            generator,
            discriminator: DiscriminatorConfig::default(),
            projector: ProjectorConfig {
                networks,
                proj_channels: 64,
                mode: ProjectionMode::Random,
                seed: 3,
                sigma_max_288: 10.0,
                fade_budget: 4000,
            },
            trainer: TrainerConfig {
                objective: if rank >= 1 { Objective::MaskAware } else { Objective::Baseline },
                loss: LossKind::Logistic,
                generator_scope: GeneratorScope::Generated,
                progressive: rank >= 3,
                stage_budgets: vec![50_000; stages],
                batch_size: 8,
                adam: AdamConfig::default(),
                ema_beta: 0.9976,
                ema_ramp: true,
                flip_probability: 0.5,
                checkpoint_every: 1000,
                sample_every: 1000,
                sample_count: 4,
            },
            dataset: DatasetConfig {
                root: "data/stick-figures".into(),
                synth_count: 256,
                height: 72,
                width: 40,
                spec: StickFigureSpec::default(),
            },
            metrics: MetricsConfig {
                batch_size: 16,
                use_ema: true,
                latent_seed: 0,
                ppl_pairs: 64,
                ppl_epsilon: 1e-2,
                fid_network_seed: 11,
            },
        })
    }

    /// Preset defaults with `overrides` (a TOML document) merged on top.
    /// Keys absent from the preset are rejected with their full path.
    pub fn from_toml(preset: &str, overrides: &str) -> Result<Self> {
        let base = Self::preset(preset)?;
        let over: toml::Table = toml::from_str(overrides).map_err(|e| Error::config("<document>", e.to_string()))?;
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::config("<preset>", e.to_string()))?;
        merge(&mut value, toml::Value::Table(over), "")?;
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Picks the base preset (CLI flag, else the file's `preset` key, else
    /// `config-b`) and merges the file over it.
    pub fn load(text: &str, cli_preset: Option<&str>) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let preset = match (cli_preset, table.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Error::config("preset", "must be a string")),
            (None, None) => PRESETS[1].to_string(),
        };
        let mut cfg = Self::from_toml(&preset, text)?;
        cfg.preset = preset;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn num_stages(&self) -> usize {
        if self.trainer.progressive {
            self.generator.resolutions.len()
        } else {
            1
        }
    }

    /// Generator level trained during `stage`.
    pub fn stage_level(&self, stage: usize) -> usize {
        if self.trainer.progressive {
            stage
        } else {
            self.generator.resolutions.len() - 1
        }
    }

    pub fn stage_budget(&self, stage: usize) -> u64 {
        if self.trainer.progressive {
            self.trainer.stage_budgets[stage]
        } else {
            self.trainer.stage_budgets.iter().sum()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let t = &self.trainer;
        if t.stage_budgets.len() != self.generator.resolutions.len() {
            return Err(Error::config(
                "trainer.stage_budgets",
                format!("expected {} entries, one per resolution", self.generator.resolutions.len()),
            ));
        }
        if t.stage_budgets.contains(&0) {
            return Err(Error::config("trainer.stage_budgets", "budgets must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&t.flip_probability) {
            return Err(Error::config("trainer.flip_probability", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&t.ema_beta) {
            return Err(Error::config("trainer.ema_beta", "must lie in [0, 1)"));
        }
        if !(t.adam.lr > 0.0) || !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) {
            return Err(Error::config("trainer.adam", "need lr > 0 and betas in [0, 1)"));
        }
        if self.projector.networks.is_empty() {
            return Err(Error::config("projector.networks", "at least one feature network is required"));
        }
        for (i, n) in self.projector.networks.iter().enumerate() {
            if let NetworkConfig::Desk { channels, .. } = n {
                if channels.len() != 4 || channels.contains(&0) {
                    return Err(Error::config(
                        format!("projector.networks[{i}].channels"),
                        "need four positive channel counts",
                    ));
                }
            }
        }
        if self.projector.fade_budget == 0 {
            return Err(Error::config("projector.fade_budget", "must be positive"));
        }
        if self.projector.proj_channels == 0 {
            return Err(Error::config("projector.proj_channels", "must be positive"));
        }
        if self.discriminator.channels == 0 {
            return Err(Error::config("discriminator.channels", "must be positive"));
        }
        let top = *self.generator.resolutions.last().expect("validated non-empty");
        if (self.dataset.height, self.dataset.width) != top {
            return Err(Error::config(
                "dataset.height",
                format!(
                    "dataset is {}x{} but the final generator resolution is {}x{}",
                    self.dataset.height, self.dataset.width, top.0, top.1
                ),
            ));
        }
        if self.metrics.batch_size == 0 || self.metrics.ppl_pairs == 0 || !(self.metrics.ppl_epsilon > 0.0) {
            return Err(Error::config("metrics", "batch_size and ppl_pairs must be positive, ppl_epsilon > 0"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::config(p, "unknown key")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
