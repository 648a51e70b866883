//! Training configuration and its flat `key=value` file format.
//!
//! ```text
//! # comment
//! lr = 0.001
//! hidden_dim = 80
//! contrastive.tau = 0.5
//! aug.enabled = node_drop,subgraph
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{EncoderConfig, FactorMode};
use crate::augment::{Augmentation, AugmentationConfig};
use crate::contrastive::{ContrastiveConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::graph::FeatureDims;
use crate::optim::AdamWConfig;
use crate::qa::{FinetuneMode, GraphScope, QAConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 80,
            dropout: 0.1,
            lr: 1e-3,
            max_epochs: 30,
            patience: 5,
            batch_size: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub factor_mode: FactorMode,
    pub factor_links: bool,
    pub contrastive: ContrastiveConfig,
    pub aug: AugmentationConfig,
    pub finetune_mode: FinetuneMode,
    pub graph_scope: GraphScope,
    pub finetune_epochs: usize,
    pub head_hidden: usize,
    pub qa_layers: usize,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            hidden_dim: 80,
            layers: 2,
            heads: 4,
            batch_size: 15,
            max_seq_len: 25,
            max_epochs: 25,
            seed: 0,
            factor_mode: FactorMode::Factorized,
            factor_links: true,
            contrastive: ContrastiveConfig::default(),
            aug: AugmentationConfig::default(),
            finetune_mode: FinetuneMode::Frozen,
            graph_scope: GraphScope::TurnLevel,
            finetune_epochs: 25,
            head_hidden: 80,
            qa_layers: 2,
            probe: ProbeConfig::default(),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn augmentation(key: &str, v: &str) -> Result<Augmentation> {
    Augmentation::ALL
        .into_iter()
        .find(|a| a.key() == v)
        .ok_or_else(|| bad(key, format!("unknown augmentation `{v}`")))
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "hidden_dim" => self.hidden_dim = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "max_seq_len" => self.max_seq_len = num(key, v)?,
            "max_epochs" => self.max_epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "factor_mode" => {
                self.factor_mode = FactorMode::parse(v).ok_or_else(|| bad(key, format!("unknown mode `{v}`")))?
            }
            "factor_links" => self.factor_links = flag(key, v)?,
            "contrastive.tau" => self.contrastive.tau = num(key, v)?,
            "contrastive.include_positive_in_denominator" => {
                self.contrastive.include_positive_in_denominator = flag(key, v)?
            }
            "contrastive.symmetric_anchors" => self.contrastive.symmetric_anchors = flag(key, v)?,
            "aug.enabled" => {
                self.aug.enabled = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| augmentation(key, s))
                    .collect::<Result<_>>()?
            }
            "finetune.mode" => {
                self.finetune_mode =
                    FinetuneMode::parse(v).ok_or_else(|| bad(key, format!("unknown mode `{v}`")))?
            }
            "finetune.graph_scope" => {
                self.graph_scope = GraphScope::parse(v).ok_or_else(|| bad(key, format!("unknown scope `{v}`")))?
            }
            "finetune.epochs" => self.finetune_epochs = num(key, v)?,
            "finetune.head_hidden" => self.head_hidden = num(key, v)?,
            "finetune.layers" => self.qa_layers = num(key, v)?,
            "probe.hidden" => self.probe.hidden = num(key, v)?,
            "probe.dropout" => self.probe.dropout = num(key, v)?,
            "probe.lr" => self.probe.lr = num(key, v)?,
            "probe.max_epochs" => self.probe.max_epochs = num(key, v)?,
            "probe.patience" => self.probe.patience = num(key, v)?,
            "probe.batch_size" => self.probe.batch_size = num(key, v)?,
            _ => match key.strip_prefix("aug.") {
                Some(name) => {
                    let aug = augmentation(key, name)?;
                    self.aug.set_ratio(aug, num(key, v)?);
                }
                None => return Err(bad(key, "unknown key")),
            },
        }
        Ok(())
    }

    /// Parses a config file body over the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Rejects out-of-domain values, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive_f = [
            ("lr", self.lr),
            ("contrastive.tau", self.contrastive.tau),
            ("probe.lr", self.probe.lr),
        ];
        for (k, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(k, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.probe.dropout) {
            return Err(bad("probe.dropout", format!("must be in [0, 1), got {}", self.probe.dropout)));
        }
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("max_seq_len", self.max_seq_len),
            ("max_epochs", self.max_epochs),
            ("finetune.epochs", self.finetune_epochs),
            ("finetune.head_hidden", self.head_hidden),
            ("finetune.layers", self.qa_layers),
            ("probe.hidden", self.probe.hidden),
            ("probe.max_epochs", self.probe.max_epochs),
            ("probe.batch_size", self.probe.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "must be at least 1"));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(bad(
                "heads",
                format!("{} heads do not divide hidden_dim {}", self.heads, self.hidden_dim),
            ));
        }
        self.aug.validate().map_err(|e| match e {
            Error::NoAugmentation => bad("aug.enabled", "no augmentation is enabled"),
            e => e,
        })
    }

    /// Flat `key = value` rendering that [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = vec![
            format!("lr = {}", self.lr),
            format!("weight_decay = {}", self.weight_decay),
            format!("hidden_dim = {}", self.hidden_dim),
            format!("layers = {}", self.layers),
            format!("heads = {}", self.heads),
            format!("batch_size = {}", self.batch_size),
            format!("max_seq_len = {}", self.max_seq_len),
            format!("max_epochs = {}", self.max_epochs),
            format!("seed = {}", self.seed),
            format!("factor_mode = {}", self.factor_mode.name()),
            format!("factor_links = {}", self.factor_links),
            format!("contrastive.tau = {}", self.contrastive.tau),
            format!(
                "contrastive.include_positive_in_denominator = {}",
                self.contrastive.include_positive_in_denominator
            ),
            format!("contrastive.symmetric_anchors = {}", self.contrastive.symmetric_anchors),
        ];
        for a in Augmentation::ALL {
            out.push(format!("aug.{} = {}", a.key(), self.aug.ratio(a)));
        }
        let enabled: Vec<&str> = self.aug.enabled.iter().map(|a| a.key()).collect();
        out.push(format!("aug.enabled = {}", enabled.join(",")));
        out.extend([
            format!("finetune.mode = {}", self.finetune_mode.name()),
            format!("finetune.graph_scope = {}", self.graph_scope.name()),
            format!("finetune.epochs = {}", self.finetune_epochs),
            format!("finetune.head_hidden = {}", self.head_hidden),
            format!("finetune.layers = {}", self.qa_layers),
            format!("probe.hidden = {}", self.probe.hidden),
            format!("probe.dropout = {}", self.probe.dropout),
            format!("probe.lr = {}", self.probe.lr),
            format!("probe.max_epochs = {}", self.probe.max_epochs),
            format!("probe.patience = {}", self.probe.patience),
            format!("probe.batch_size = {}", self.probe.batch_size),
        ]);
        out.join("\n") + "\n"
    }

    pub fn encoder(&self, dims: FeatureDims) -> EncoderConfig {
        EncoderConfig {
            dims,
            hidden: self.hidden_dim,
            heads: self.heads,
            layers: self.layers,
            factor_links: self.factor_links,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            mode: self.factor_mode,
            augmentation: self.aug.clone(),
            contrastive: self.contrastive.clone(),
        }
    }

    pub fn qa(&self) -> QAConfig {
        QAConfig {
            hidden: self.hidden_dim,
            heads: self.heads,
            conv_layers: self.qa_layers,
            head_hidden: self.head_hidden,
            max_seq_len: self.max_seq_len,
            scope: self.graph_scope,
        }
    }
}
