//! Flat `key = value` run configuration with command-line overrides.
//!
//! A config names a model preset (`desk` or `paper`) and overrides
//! individual fields; `--key value` pairs on the command line are applied
//! after the file. Unknown keys are rejected, and every run writes its
//! fully resolved configuration next to its outputs so any run is
//! reproducible from that file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ppmn_core::model::{ConvStage, ModelConfig};
use ppmn_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = match name {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => {
                return Err(CliError::Config(format!(
                    "unknown model.preset {other:?} (expected desk or paper)"
                )))
            }
        };
        Ok(RunConfig {
            preset: name.to_string(),
            model,
            train: TrainConfig::default(),
            data_root: None,
            n_train: 0,
            n_test: 0,
            split_seed: 0,
            out_dir: PathBuf::from("out"),
        })
    }

    /// Parses the file, then applies `--key value` override tokens.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut entries = parse_flat(&text, &path.to_string_lossy())?;
        entries.extend(parse_overrides(overrides)?);
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, String)>) -> Result<Self> {
        let preset = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "model.preset")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "desk".to_string());
        let mut config = Self::preset(&preset)?;
        for (key, value) in &entries {
            config.apply(key, value)?;
        }
        config
            .model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        config
            .train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| CliError::Config(format!("key {key}: cannot parse {value:?} as {what}"));
        macro_rules! int {
            () => {
                value.parse::<usize>().map_err(|_| bad("an integer"))?
            };
        }
        macro_rules! float {
            () => {
                value.parse::<f32>().map_err(|_| bad("a number"))?
            };
        }
        macro_rules! seed {
            () => {
                value.parse::<u64>().map_err(|_| bad("a seed"))?
            };
        }
        match key {
            "model.preset" => {} // consumed up front
            "model.input_h" => self.model.input_h = int!(),
            "model.input_w" => self.model.input_w = int!(),
            "model.backbone_channels" => {
                let channels: Vec<usize> = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad("a channel list")))
                    .collect::<Result<_>>()?;
                if channels.is_empty() {
                    return Err(bad("a nonempty channel list"));
                }
                self.model.backbone = channels.into_iter().map(ConvStage::downsampling).collect();
            }
            "model.pyramid_rates" => {
                self.model.pyramid_rates = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad("a rate list")))
                    .collect::<Result<_>>()?;
            }
            "model.pyramid_kernel" => {
                let k = int!();
                self.model.pyramid_kernel = (k, k);
            }
            "model.branch_channels" => self.model.branch_channels = int!(),
            "model.fusion_channels" => self.model.fusion_channels = int!(),
            "model.pool_window" => {
                let k = int!();
                self.model.pool_window = (k, k);
            }
            "model.pool_stride" => {
                let k = int!();
                self.model.pool_stride = (k, k);
            }
            "model.fc_hidden" => self.model.fc_hidden = int!(),
            "model.seed" => self.model.seed = seed!(),
            "train.batch_size" => self.train.batch_size = int!(),
            "train.max_iters" => self.train.max_iters = int!(),
            "train.base_lr" => self.train.base_lr = float!(),
            "train.lr_power" => self.train.lr_power = float!(),
            "train.momentum" => self.train.momentum = float!(),
            "train.weight_decay" => self.train.weight_decay = float!(),
            "train.negative_ratio" => self.train.negative_ratio = int!(),
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "train.seed" => self.train.seed = seed!(),
            "train.log_every" => self.train.log_every = int!(),
            "train.checkpoint_every" => self.train.checkpoint_every = int!(),
            "hnm.enabled" => self.train.hnm.enabled = parse_bool(key, value)?,
            "hnm.retain_fraction" => self.train.hnm.retain_fraction = float!(),
            "hnm.max_candidates" => self.train.hnm.max_candidates = int!(),
            "data.root" => self.data_root = Some(PathBuf::from(value)),
            "data.n_train" => self.n_train = int!(),
            "data.n_test" => self.n_test = int!(),
            "data.split_seed" => self.split_seed = seed!(),
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(CliError::Config(format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// All keys with their final values, diff-friendly and reloadable.
    pub fn resolved(&self) -> String {
        let channels = self
            .model
            .backbone
            .iter()
            .map(|s| s.out_channels.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let rates = self
            .model
            .pyramid_rates
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        pairs.insert("model.preset", self.preset.clone());
        pairs.insert("model.input_h", self.model.input_h.to_string());
        pairs.insert("model.input_w", self.model.input_w.to_string());
        pairs.insert("model.backbone_channels", channels);
        pairs.insert("model.pyramid_rates", rates);
        pairs.insert("model.pyramid_kernel", self.model.pyramid_kernel.0.to_string());
        pairs.insert("model.branch_channels", self.model.branch_channels.to_string());
        pairs.insert("model.fusion_channels", self.model.fusion_channels.to_string());
        pairs.insert("model.pool_window", self.model.pool_window.0.to_string());
        pairs.insert("model.pool_stride", self.model.pool_stride.0.to_string());
        pairs.insert("model.fc_hidden", self.model.fc_hidden.to_string());
        pairs.insert("model.seed", self.model.seed.to_string());
        pairs.insert("train.batch_size", self.train.batch_size.to_string());
        pairs.insert("train.max_iters", self.train.max_iters.to_string());
        pairs.insert("train.base_lr", self.train.base_lr.to_string());
        pairs.insert("train.lr_power", self.train.lr_power.to_string());
        pairs.insert("train.momentum", self.train.momentum.to_string());
        pairs.insert("train.weight_decay", self.train.weight_decay.to_string());
        pairs.insert("train.negative_ratio", self.train.negative_ratio.to_string());
        pairs.insert("train.augment", self.train.augment.to_string());
        pairs.insert("train.seed", self.train.seed.to_string());
        pairs.insert("train.log_every", self.train.log_every.to_string());
        pairs.insert("train.checkpoint_every", self.train.checkpoint_every.to_string());
        pairs.insert("hnm.enabled", self.train.hnm.enabled.to_string());
        pairs.insert("hnm.retain_fraction", self.train.hnm.retain_fraction.to_string());
        pairs.insert("hnm.max_candidates", self.train.hnm.max_candidates.to_string());
        if let Some(root) = &self.data_root {
            pairs.insert("data.root", root.to_string_lossy().into_owned());
        }
        pairs.insert("data.n_train", self.n_train.to_string());
        pairs.insert("data.n_test", self.n_test.to_string());
        pairs.insert("data.split_seed", self.split_seed.to_string());
        pairs.insert("out.dir", self.out_dir.to_string_lossy().into_owned());
        let mut out = String::new();
        for (key, value) in pairs {
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        fs::write(path, self.resolved()).map_err(CliError::io(path))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(CliError::Config(format!(
            "key {key}: cannot parse {value:?} as a boolean"
        ))),
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines ignored.
pub fn parse_flat(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{origin}:{}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

/// Parses trailing `--key value` (or `--key=value`) override tokens.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    let mut iter = tokens.iter();
    while let Some(token) = iter.next() {
        let Some(key) = token.strip_prefix("--") else {
            return Err(CliError::Config(format!(
                "override {token:?} must start with --key"
            )));
        };
        if let Some((k, v)) = key.split_once('=') {
            entries.push((k.to_string(), v.to_string()));
        } else {
            let value = iter.next().ok_or_else(|| {
                CliError::Config(format!("override --{key} is missing a value"))
            })?;
            entries.push((key.to_string(), value.clone()));
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides_resolves() {
        let entries = parse_flat(
            "model.preset = desk\n# comment\ntrain.max_iters = 42\n\ndata.root = data/synth\n",
            "test",
        )
        .unwrap();
        let config = RunConfig::from_entries(entries).unwrap();
        assert_eq!(config.train.max_iters, 42);
        assert_eq!(config.model.input_h, 32);
        assert_eq!(config.data_root, Some(PathBuf::from("data/synth")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_entries(vec![("model.depth".into(), "3".into())]).unwrap_err();
        assert!(format!("{err}").contains("unknown key"));
    }

    #[test]
    fn resolved_round_trips() {
        let mut config = RunConfig::preset("desk").unwrap();
        config.train.base_lr = 0.0125;
        config.train.hnm.enabled = true;
        config.model.seed = 99;
        config.data_root = Some(PathBuf::from("d"));
        let resolved = config.resolved();
        let entries = parse_flat(&resolved, "resolved").unwrap();
        let reloaded = RunConfig::from_entries(entries).unwrap();
        assert_eq!(reloaded.train.base_lr, config.train.base_lr);
        assert!(reloaded.train.hnm.enabled);
        assert_eq!(reloaded.model.seed, 99);
        assert_eq!(reloaded.resolved(), resolved);
    }

    #[test]
    fn override_tokens_apply_last() {
        let entries = {
            let mut e = parse_flat("train.max_iters = 10\n", "test").unwrap();
            e.extend(parse_overrides(&["--train.max_iters".into(), "77".into()]).unwrap());
            e
        };
        let config = RunConfig::from_entries(entries).unwrap();
        assert_eq!(config.train.max_iters, 77);
    }

    #[test]
    fn override_syntax_errors() {
        assert!(parse_overrides(&["train.max_iters".into(), "7".into()]).is_err());
        assert!(parse_overrides(&["--train.max_iters".into()]).is_err());
        let eq = parse_overrides(&["--train.max_iters=7".into()]).unwrap();
        assert_eq!(eq, vec![("train.max_iters".into(), "7".into())]);
    }

    #[test]
    fn paper_preset_has_published_geometry() {
        let config = RunConfig::preset("paper").unwrap();
        assert_eq!(config.model.input_h, 160);
        assert_eq!(config.model.input_w, 80);
        assert_eq!(config.model.rep_channels(), 1024);
        assert!(RunConfig::preset("tiny").is_err());
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        let err = RunConfig::from_entries(vec![("model.input_h".into(), "30".into())]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
