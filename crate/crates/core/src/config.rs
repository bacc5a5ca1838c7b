//! Flat `key = value` run configuration covering the model, the optimizer
//! and the losses. Lines may appear in any order; `#` starts a comment.
//! Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::losses::RegionConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// One documented key.
#[derive(Clone, Copy, Debug)]
pub struct KeyDoc {
    pub key: &'static str,
    pub doc: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "base_channels", doc: "channel width C of the first encoder level (even, >= 4)" },
    KeyDoc { key: "input_height", doc: "training input height (multiple of 16)" },
    KeyDoc { key: "input_width", doc: "training input width (multiple of 16)" },
    KeyDoc { key: "norm_epsilon", doc: "batch-norm variance epsilon" },
    KeyDoc { key: "init_seed", doc: "seed of the parameter initialization" },
    KeyDoc { key: "cla_position", doc: "enable position attention (true/false)" },
    KeyDoc { key: "cla_channel", doc: "enable channel attention (true/false)" },
    KeyDoc { key: "fusion", doc: "decoder fusion: ffm (gated) or sum" },
    KeyDoc { key: "epochs", doc: "passes over the training set" },
    KeyDoc { key: "batch_size", doc: "samples per step" },
    KeyDoc { key: "lr_max_backbone", doc: "peak learning rate of the encoder" },
    KeyDoc { key: "lr_max_rest", doc: "peak learning rate of all other parameters" },
    KeyDoc { key: "momentum", doc: "SGD momentum" },
    KeyDoc { key: "weight_decay", doc: "L2 decay (not applied to scales, norms, biases)" },
    KeyDoc { key: "warmup_fraction", doc: "share of steps spent ramping the learning rate up" },
    KeyDoc { key: "seed", doc: "seed of batch order and augmentation" },
    KeyDoc { key: "region_window", doc: "region-loss window side at 64 px (rescaled with input)" },
    KeyDoc { key: "region_stride", doc: "region-loss window stride at 64 px" },
    KeyDoc { key: "beta_sq", doc: "beta squared of the object-level F-measure loss" },
    KeyDoc { key: "loss_pixel", doc: "enable the pixel-level BCE term" },
    KeyDoc { key: "loss_region", doc: "enable the region-level distribution term" },
    KeyDoc { key: "loss_object", doc: "enable the object-level F-measure term" },
    KeyDoc { key: "multi_stage", doc: "supervise all four heads (else the final head only)" },
    KeyDoc { key: "scales", doc: "comma-separated multi-scale factors" },
    KeyDoc { key: "flip_probability", doc: "probability of a horizontal flip" },
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Current value of every key, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut all: BTreeMap<String, String> = self.model.echo().into_iter().collect();
        all.extend(self.train.echo());
        KEYS.iter()
            .map(|k| (k.key.to_string(), all.remove(k.key).expect("every key is echoed")))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.pairs().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Sets one key without validating the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "base_channels" => m.base_channels = parse(key, v)?,
            "input_height" => m.input_size.0 = parse(key, v)?,
            "input_width" => m.input_size.1 = parse(key, v)?,
            "norm_epsilon" => m.norm_epsilon = parse(key, v)?,
            "init_seed" => m.init_seed = parse(key, v)?,
            "cla_position" => m.use_position = parse_bool(key, v)?,
            "cla_channel" => m.use_channel = parse_bool(key, v)?,
            "fusion" => {
                m.fusion = match v {
                    "ffm" => FusionKind::Gated,
                    "sum" => FusionKind::Sum,
                    _ => return Err(Error::Config(format!("fusion: expected ffm or sum, got {v:?}"))),
                }
            }
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr_max_backbone" => t.lr_max_backbone = parse(key, v)?,
            "lr_max_rest" => t.lr_max_rest = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "region_window" => t.region.window = parse(key, v)?,
            "region_stride" => t.region.stride = parse(key, v)?,
            "beta_sq" => t.beta_sq = parse(key, v)?,
            "loss_pixel" => t.terms.pixel = parse_bool(key, v)?,
            "loss_region" => t.terms.region = parse_bool(key, v)?,
            "loss_object" => t.terms.object = parse_bool(key, v)?,
            "multi_stage" => t.multi_stage = parse_bool(key, v)?,
            "scales" => {
                t.scales = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "flip_probability" => t.flip_probability = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        RegionConfig::new(self.train.region.window, self.train.region.stride)?;
        self.train.validate(self.model.input_size)
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`, then validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", n + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Table of every key with its default and meaning.
    pub fn help() -> String {
        let defaults = Self::default().pairs();
        let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, (_, d)) in KEYS.iter().zip(defaults) {
            out += &format!("  {:width$}  {:<14} {}\n", k.key, d, k.doc);
        }
        out
    }
}
