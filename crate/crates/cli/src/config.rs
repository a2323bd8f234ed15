//! Flat run configuration: TOML file, then flag overrides, then validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reto_core::data::{DatasetSpec, SamplingRegion, Split};
use reto_core::metrics::EntropySelector;
use reto_core::model::{ModelConfig, Variant};
use reto_core::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

/// Every knob of every command. Defaults follow the reference training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Top-level seed; data, splits, init, subsampling and evaluation derive named streams from it.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint read by eval, predict and analyze-attention.
    pub checkpoint: PathBuf,
    /// Target channels, in model output order.
    pub channels: Vec<String>,

    // dataset generation
    pub samples: usize,
    pub points: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub free_stream: f64,
    /// `shell` or `surface`.
    pub region: String,
    pub outer_radius: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    // model
    pub variant: String,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub latent_dim: usize,
    pub per_axis_dim: usize,
    pub ffn_hidden_ratio: f64,
    pub encoder_hidden: usize,
    pub wavelength_base: f64,
    pub rope_base: f64,

    // training
    pub epochs: u64,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub points_per_sample: usize,
    /// Adds per-epoch wall time to the log; turn off for byte-reproducible logs.
    pub record_wall_time: bool,

    // evaluation
    pub eval_split: String,
    pub eval_points: usize,
    pub bins: usize,
    pub top_k: usize,

    // attention analysis
    pub resolutions: Vec<usize>,
    /// Largest resolution analysed without `--force`.
    pub resolution_cap: usize,
    /// Empty selects the final block.
    pub blocks: Vec<usize>,
    /// Empty selects every head.
    pub heads: Vec<usize>,
    pub average_heads: bool,
    /// Samples of the split to pool entropies over; 0 means all.
    pub analysis_samples: usize,
    /// Point index whose attention row is exported, if set (negative disables).
    pub query_point: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let d = DatasetSpec::default();
        Self {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            checkpoint: "runs/best.ckpt".into(),
            channels: ["p", "u", "v", "w"].iter().map(|s| s.to_string()).collect(),
            samples: d.samples,
            points: d.points,
            radius_min: d.radius_min,
            radius_max: d.radius_max,
            free_stream: d.free_stream,
            region: "shell".into(),
            outer_radius: 2.0,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            variant: m.variant.as_str().into(),
            num_blocks: m.num_blocks,
            num_heads: m.num_heads,
            latent_dim: m.latent_dim,
            per_axis_dim: m.per_axis_dim,
            ffn_hidden_ratio: m.ffn_hidden_ratio,
            encoder_hidden: m.encoder_hidden,
            wavelength_base: m.wavelength_base,
            rope_base: m.rope_base,
            epochs: t.epochs,
            batch_size: t.batch_size,
            initial_lr: t.initial_lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_step_epochs: t.lr_step_epochs,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            points_per_sample: t.points_per_sample,
            record_wall_time: t.record_wall_time,
            eval_split: "test".into(),
            eval_points: reto_core::pipeline::DEFAULT_EVAL_POINTS,
            bins: reto_core::metrics::DEFAULT_BINS,
            top_k: 5,
            resolutions: vec![512],
            resolution_cap: 20_000,
            blocks: Vec::new(),
            heads: Vec::new(),
            average_heads: true,
            analysis_samples: 0,
            query_point: -1,
        }
    }
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Layers the config file, then `overrides` (already typed), then `key=value` pairs.
pub fn load(file: Option<&Path>, overrides: toml::Table, sets: &[String]) -> Result<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    table.extend(overrides);
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects key=value, got `{s}`");
        };
        table.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

fn split_named(name: &str) -> Result<Split> {
    name.parse::<Split>().map_err(|e| anyhow::anyhow!("{e}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        self.region()?;
        split_named(&self.eval_split)?;
        if self.channels.is_empty() {
            bail!("at least one channel is required");
        }
        if self.resolutions.iter().any(|&r| r < 2) {
            bail!("entropy resolutions must be at least 2 points");
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.variant.parse()?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            latent_dim: self.latent_dim,
            per_axis_dim: self.per_axis_dim,
            ffn_hidden_ratio: self.ffn_hidden_ratio,
            out_channels: self.channels.len(),
            encoder_hidden: self.encoder_hidden,
            variant: self.variant()?,
            wavelength_base: self.wavelength_base,
            rope_base: self.rope_base,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            initial_lr: self.initial_lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_step_epochs: self.lr_step_epochs,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            points_per_sample: self.points_per_sample,
            seed: self.seed,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn region(&self) -> Result<SamplingRegion> {
        match self.region.as_str() {
            "shell" => Ok(SamplingRegion::Shell {
                outer_radius: self.outer_radius,
            }),
            "surface" => Ok(SamplingRegion::Surface),
            other => bail!("unknown sampling region `{other}` (expected shell or surface)"),
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            samples: self.samples,
            points: self.points,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            free_stream: self.free_stream,
            region: self.region()?,
            seed: self.seed,
        })
    }

    pub fn split_ratios(&self) -> [f64; 3] {
        [self.train_ratio, self.val_ratio, self.test_ratio]
    }

    pub fn eval_split(&self) -> Split {
        split_named(&self.eval_split).expect("validated")
    }

    pub fn entropy_selector(&self) -> EntropySelector {
        EntropySelector {
            blocks: (!self.blocks.is_empty()).then(|| self.blocks.clone()),
            heads: (!self.heads.is_empty()).then(|| self.heads.clone()),
            average_heads: self.average_heads,
        }
    }

    pub fn query_point(&self) -> Option<usize> {
        usize::try_from(self.query_point).ok()
    }

    /// Writes the merged configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string(self).context("serializing configuration")?;
        std::fs::write(dir.join(EFFECTIVE_CONFIG_FILE), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 150);
        assert_eq!(c.initial_lr, 1e-3);
        assert_eq!((c.lr_decay_factor, c.lr_step_epochs), (0.5, 50));
        assert_eq!((c.num_blocks, c.num_heads, c.latent_dim), (5, 8, 256));
        assert_eq!(c.split_ratios(), [0.8, 0.1, 0.1]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, toml::Table::new(), &["epoch=3".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("unknown field"), "{err:#}");
    }

    #[test]
    fn flags_win_over_file_and_sets_win_over_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 7\nseed = 3\nvariant = \"no_rope\"\n").unwrap();
        let mut flags = toml::Table::new();
        flags.insert("epochs".into(), toml::Value::Integer(9));
        let c = load(Some(&path), flags, &["initial_lr=0.01".into(), "region=surface".into()]).unwrap();
        assert_eq!((c.epochs, c.seed, c.initial_lr), (9, 3, 0.01));
        assert_eq!(c.variant().unwrap(), Variant::NoRope);
        assert_eq!(c.region().unwrap(), SamplingRegion::Surface);
    }

    #[test]
    fn echoed_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            epochs: 12,
            blocks: vec![0, 1],
            ..Default::default()
        };
        c.echo(dir.path()).unwrap();
        let back = load(Some(&dir.path().join(EFFECTIVE_CONFIG_FILE)), toml::Table::new(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_fail_validation() {
        assert!(load(None, toml::Table::new(), &["variant=v7".into()]).is_err());
        assert!(load(None, toml::Table::new(), &["eval_split=holdout".into()]).is_err());
        assert!(load(None, toml::Table::new(), &["num_heads=3".into()]).is_err());
    }
}
