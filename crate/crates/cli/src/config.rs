//! Flat `key=value` configuration with section dots (`model.layers=2`).
//!
//! Values merge in order: built-in defaults, then the `--config` file, then
//! `--set key=value` overrides. Every key must be recognized; unknown keys
//! fail fast naming the offender.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dydit_core::dit::ModelConfig;
use dydit_core::train::TrainMode;

/// Raw key-value pairs after merging file and overrides.
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = split_pair(line)
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), lineno + 1))?;
                map.insert(k, v);
            }
        }
        for s in overrides {
            let (k, v) =
                split_pair(s).ok_or_else(|| anyhow!("--set {s}: expected key=value"))?;
            map.insert(k, v);
        }
        Ok(RawConfig { map })
    }
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Every setting the commands understand, typed and defaulted.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mode: TrainMode,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Defaults to `steps / 10` when not set.
    pub warmup_steps: Option<usize>,
    pub label_drop: f64,
    pub temperature: f64,
    pub data_path: Option<PathBuf>,
    pub data_count: usize,
    pub data_extent: usize,
    pub sampler_kind: String,
    pub sampler_steps: Option<usize>,
    pub sample_count: usize,
    pub sample_labels: Option<Vec<u16>>,
    pub sample_guidance: f64,
    pub profile_batches: Vec<usize>,
}

/// The shipped small recipe: trains in minutes on one core.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                layers: 2,
                channels: 64,
                heads: 4,
                patch: 4,
                extent: 16,
                image_channels: 3,
                classes: 4,
            },
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
            mode: TrainMode::Dynamic,
            lambda: 0.5,
            lr: 1e-4,
            batch: 8,
            steps: 2000,
            warmup_steps: None,
            label_drop: 0.1,
            temperature: 1.0,
            data_path: None,
            data_count: 256,
            data_extent: 16,
            sampler_kind: "ddpm".into(),
            sampler_steps: None,
            sample_count: 4,
            sample_labels: None,
            sample_guidance: 1.0,
            profile_batches: vec![1, 4],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| anyhow!("config key `{key}`: invalid value `{value}` (expected {expected})"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|part| parse::<T>(key, part.trim(), expected))
        .collect()
}

impl RunConfig {
    /// Apply raw pairs over the defaults; every key must be recognized.
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in &raw.map {
            let v = value.as_str();
            match key.as_str() {
                "model.layers" => cfg.model.layers = parse(key, v, "positive integer")?,
                "model.channels" => cfg.model.channels = parse(key, v, "positive integer")?,
                "model.heads" => cfg.model.heads = parse(key, v, "positive integer")?,
                "model.patch" => cfg.model.patch = parse(key, v, "positive integer")?,
                "model.extent" => cfg.model.extent = parse(key, v, "positive integer")?,
                "model.image_channels" => {
                    cfg.model.image_channels = parse(key, v, "positive integer")?
                }
                "model.classes" => cfg.model.classes = parse(key, v, "positive integer")?,
                "diffusion.timesteps" => cfg.timesteps = parse(key, v, "positive integer")?,
                "diffusion.beta_start" => cfg.beta_start = parse(key, v, "number")?,
                "diffusion.beta_end" => cfg.beta_end = parse(key, v, "number")?,
                "train.mode" => {
                    cfg.mode = match v {
                        "dynamic" => TrainMode::Dynamic,
                        "static" => TrainMode::Static,
                        _ => bail!("config key `train.mode`: invalid value `{v}` (expected dynamic or static)"),
                    }
                }
                "train.lambda" => cfg.lambda = parse(key, v, "number in (0, 1]")?,
                "train.lr" => cfg.lr = parse(key, v, "number")?,
                "train.batch" => cfg.batch = parse(key, v, "positive integer")?,
                "train.steps" => cfg.steps = parse(key, v, "positive integer")?,
                "train.warmup_steps" => {
                    cfg.warmup_steps = Some(parse(key, v, "non-negative integer")?)
                }
                "train.label_drop" => cfg.label_drop = parse(key, v, "number in [0, 1]")?,
                "train.temperature" => cfg.temperature = parse(key, v, "positive number")?,
                "data.path" => cfg.data_path = Some(PathBuf::from(v)),
                "data.count" => cfg.data_count = parse(key, v, "positive integer")?,
                "data.extent" => cfg.data_extent = parse(key, v, "positive integer")?,
                "sampler.kind" => {
                    if v != "ddpm" && v != "ddim" {
                        bail!("config key `sampler.kind`: invalid value `{v}` (expected ddpm or ddim)");
                    }
                    cfg.sampler_kind = v.to_string();
                }
                "sampler.steps" => cfg.sampler_steps = Some(parse(key, v, "positive integer")?),
                "sample.count" => cfg.sample_count = parse(key, v, "positive integer")?,
                "sample.labels" => {
                    cfg.sample_labels = Some(parse_list(key, v, "comma-separated labels")?)
                }
                "sample.guidance" => cfg.sample_guidance = parse(key, v, "number")?,
                "profile.batches" => {
                    cfg.profile_batches = parse_list(key, v, "comma-separated batch sizes")?
                }
                _ => bail!("unknown config key `{key}`"),
            }
        }
        Ok(cfg)
    }

    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::from_raw(RawConfig::load(file, overrides)?)
    }

    /// The dataset path, or an error naming the key to set.
    pub fn require_data_path(&self) -> Result<&Path> {
        self.data_path
            .as_deref()
            .ok_or_else(|| anyhow!("missing config key `data.path` (the dataset file to use)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_config() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.model.channels, 64);
        assert_eq!(cfg.timesteps, 100);
        assert_eq!(cfg.steps, 2000);
        assert!(cfg.data_path.is_none());
        assert!(cfg.require_data_path().is_err());
    }

    #[test]
    fn overrides_beat_defaults_and_unknown_keys_are_named() {
        let cfg = RunConfig::load(
            None,
            &["model.layers=3".into(), "train.lambda=0.7".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.lambda, 0.7);

        let err = RunConfig::load(None, &["model.depth=3".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown config key `model.depth`"), "{err}");

        let err = RunConfig::load(None, &["train.lambda=often".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("`train.lambda`") && err.contains("`often`"), "{err}");

        let err = RunConfig::load(None, &["no-equals".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("key=value"), "{err}");
    }

    #[test]
    fn files_parse_with_comments_and_merge_under_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# recipe\nmodel.heads = 8\ntrain.mode=static\n\nsample.labels=0,2\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &["model.heads=2".into()]).unwrap();
        assert_eq!(cfg.model.heads, 2, "--set wins over the file");
        assert_eq!(cfg.mode, TrainMode::Static);
        assert_eq!(cfg.sample_labels, Some(vec![0, 2]));

        std::fs::write(&path, "just words\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }
}
