//! Flat `dotted.key = value` configuration covering preparation, model,
//! sampling, loss, optimizer and evaluation settings.
//!
//! Files are TOML. Keys may be written nested (`[negs.uniform] count = 8192`)
//! or quoted (`"negs.uniform.count" = 8192`); `loss` and `loss.bpr_max.lambda`
//! can only coexist in quoted form. Unknown keys are rejected. The
//! [`RunConfig::snapshot`] output uses quoted keys and reloads to an equal
//! configuration.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{EventType, PrepConfig, StraddlePolicy, SupportScope, MS_PER_DAY};
use crate::error::{Error, Result};
use crate::loss::{LossKind, DEFAULT_BPR_MAX_LAMBDA};
use crate::train::{Preset, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "preset",
        "named experiment settings; applied before all other keys",
    ),
    ("epochs", "number of training epochs"),
    (
        "seed",
        "seed for initialization, shuffling, sampling and dropout",
    ),
    ("batch_size", "sessions per batch"),
    ("max_len", "most recent items kept per session"),
    (
        "pad_to_longest",
        "pad batches to their longest session instead of max_len",
    ),
    ("model.hidden_dim", "embedding and hidden width"),
    ("model.num_layers", "self-attention blocks"),
    ("model.num_heads", "attention heads per block"),
    ("model.dropout", "dropout rate during training"),
    ("model.norm", "layer-norm placement: post or pre"),
    ("model.activation", "feed-forward activation: gelu or relu"),
    ("negs.uniform.count", "uniform negatives per position"),
    (
        "negs.uniform.granularity",
        "elementwise, sessionwise or batchwise",
    ),
    ("negs.inbatch.count", "in-batch negatives per position"),
    ("negs.inbatch.granularity", "elementwise or sessionwise"),
    ("negs.inbatch.pool", "multiset or distinct"),
    (
        "negs.frequency.count",
        "frequency-proportional negatives per position",
    ),
    (
        "negs.frequency.granularity",
        "elementwise, sessionwise or batchwise",
    ),
    (
        "negs.topk",
        "keep only the k highest-scoring negatives; 0 keeps all",
    ),
    ("loss", "bce, bpr-max or ssm"),
    (
        "loss.bpr_max.lambda",
        "score regularization weight of bpr-max",
    ),
    ("optim.lr", "Adam learning rate"),
    ("optim.beta1", "Adam first-moment decay"),
    ("optim.beta2", "Adam second-moment decay"),
    ("optim.eps", "Adam denominator epsilon"),
    (
        "optim.clip_norm",
        "global gradient-norm limit; 0 disables clipping",
    ),
    ("eval.k", "cutoff for recall and MRR"),
    ("eval.average", "transition or session"),
    ("eval.chunk", "catalog items scored per block"),
    ("eval.batch_size", "windows encoded per forward pass"),
    ("eval.every", "evaluate every n epochs; 0 disables"),
    ("train.prefetch", "batches prepared ahead of the trainer"),
    ("train.threads", "worker threads; 0 uses all cores"),
    ("data.min_support", "minimum item occurrences"),
    ("data.min_len", "minimum session length"),
    ("data.holdout_days", "length of the test window in days"),
    (
        "data.support_scope",
        "count item support on all data or train only",
    ),
    ("data.straddle", "sessions crossing the split: test or cut"),
    (
        "data.event_types",
        "comma-separated event types kept (click, cart, order)",
    ),
    (
        "data.train_fraction",
        "most recent fraction of training sessions kept",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub prep: PrepConfig,
    /// Worker threads; 0 means the default pool size.
    pub threads: usize,
    bpr_max_lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            prep: PrepConfig::default(),
            threads: 0,
            bpr_max_lambda: DEFAULT_BPR_MAX_LAMBDA,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} = {value:?}: expected true or false"
        ))),
    }
}

fn straddle_name(s: StraddlePolicy) -> &'static str {
    match s {
        StraddlePolicy::TestIntact => "test",
        StraddlePolicy::Cut => "cut",
    }
}

fn scope_name(s: SupportScope) -> &'static str {
    match s {
        SupportScope::All => "all",
        SupportScope::Train => "train",
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            train: TrainConfig::preset(p),
            ..Self::default()
        }
    }

    pub fn is_known(key: &str) -> bool {
        KEYS.iter().any(|(k, _)| *k == key)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let p = &mut self.prep;
        match key {
            "preset" => t.apply_preset(parse(key, value)?),
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch.batch_size = parse(key, value)?,
            "max_len" => t.batch.t_max = parse(key, value)?,
            "pad_to_longest" => t.batch.pad_to_longest = parse_bool(key, value)?,
            "model.hidden_dim" => t.arch.hidden_dim = parse(key, value)?,
            "model.num_layers" => t.arch.num_layers = parse(key, value)?,
            "model.num_heads" => t.arch.num_heads = parse(key, value)?,
            "model.dropout" => t.arch.dropout = parse(key, value)?,
            "model.norm" => t.arch.norm = parse(key, value)?,
            "model.activation" => t.arch.activation = parse(key, value)?,
            "negs.uniform.count" => t.negs.uniform_count = parse(key, value)?,
            "negs.uniform.granularity" => t.negs.uniform_granularity = parse(key, value)?,
            "negs.inbatch.count" => t.negs.inbatch_count = parse(key, value)?,
            "negs.inbatch.granularity" => t.negs.inbatch_granularity = parse(key, value)?,
            "negs.inbatch.pool" => t.negs.inbatch_pool = parse(key, value)?,
            "negs.frequency.count" => t.negs.frequency_count = parse(key, value)?,
            "negs.frequency.granularity" => t.negs.frequency_granularity = parse(key, value)?,
            "negs.topk" => t.negs.topk = parse(key, value)?,
            "loss" => {
                t.loss = match parse::<LossKind>(key, value)? {
                    LossKind::BprMax { .. } => LossKind::BprMax {
                        lambda: self.bpr_max_lambda,
                    },
                    other => other,
                }
            }
            "loss.bpr_max.lambda" => {
                let l: f64 = parse(key, value)?;
                self.bpr_max_lambda = l;
                if let LossKind::BprMax { lambda } = &mut t.loss {
                    *lambda = l;
                }
            }
            "optim.lr" => t.optim.lr = parse(key, value)?,
            "optim.beta1" => t.optim.beta1 = parse(key, value)?,
            "optim.beta2" => t.optim.beta2 = parse(key, value)?,
            "optim.eps" => t.optim.eps = parse(key, value)?,
            "optim.clip_norm" => {
                let c: f64 = parse(key, value)?;
                t.optim.clip_norm = (c > 0.0).then_some(c);
            }
            "eval.k" => t.eval.k = parse(key, value)?,
            "eval.average" => t.eval.average = parse(key, value)?,
            "eval.chunk" => t.eval.chunk = parse(key, value)?,
            "eval.batch_size" => t.eval.batch_size = parse(key, value)?,
            "eval.every" => t.eval_every = parse(key, value)?,
            "train.prefetch" => t.prefetch = parse(key, value)?,
            "train.threads" => self.threads = parse(key, value)?,
            "data.min_support" => p.preprocess.min_support = parse(key, value)?,
            "data.min_len" => p.preprocess.min_len = parse(key, value)?,
            "data.holdout_days" => {
                let days: f64 = parse(key, value)?;
                if !(days >= 0.0 && days.is_finite()) {
                    return Err(Error::Config(format!(
                        "data.holdout_days must be a nonnegative number, got {value}"
                    )));
                }
                p.holdout_ms = (days * MS_PER_DAY as f64).round() as u64;
            }
            "data.train_fraction" => p.train_fraction = parse(key, value)?,
            "data.support_scope" => p.support_scope = parse(key, value)?,
            "data.straddle" => p.straddle = parse(key, value)?,
            "data.event_types" => {
                let types = value
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(EventType::from_str)
                    .collect::<Result<Vec<_>>>()?;
                if types.is_empty() {
                    return Err(Error::Config("data.event_types is empty".into()));
                }
                p.preprocess.keep_types = types;
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of every key (except `preset`, whose effect is already
    /// folded into the other keys), in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let p = &self.prep;
        let lambda = match t.loss {
            LossKind::BprMax { lambda } => lambda,
            _ => self.bpr_max_lambda,
        };
        let types: Vec<String> = p
            .preprocess
            .keep_types
            .iter()
            .map(|e| e.to_string())
            .collect();
        vec![
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("batch_size", t.batch.batch_size.to_string()),
            ("max_len", t.batch.t_max.to_string()),
            ("pad_to_longest", t.batch.pad_to_longest.to_string()),
            ("model.hidden_dim", t.arch.hidden_dim.to_string()),
            ("model.num_layers", t.arch.num_layers.to_string()),
            ("model.num_heads", t.arch.num_heads.to_string()),
            ("model.dropout", t.arch.dropout.to_string()),
            ("model.norm", t.arch.norm.to_string()),
            ("model.activation", t.arch.activation.to_string()),
            ("negs.uniform.count", t.negs.uniform_count.to_string()),
            (
                "negs.uniform.granularity",
                t.negs.uniform_granularity.to_string(),
            ),
            ("negs.inbatch.count", t.negs.inbatch_count.to_string()),
            (
                "negs.inbatch.granularity",
                t.negs.inbatch_granularity.to_string(),
            ),
            ("negs.inbatch.pool", t.negs.inbatch_pool.to_string()),
            ("negs.frequency.count", t.negs.frequency_count.to_string()),
            (
                "negs.frequency.granularity",
                t.negs.frequency_granularity.to_string(),
            ),
            ("negs.topk", t.negs.topk.to_string()),
            ("loss", t.loss.to_string()),
            ("loss.bpr_max.lambda", lambda.to_string()),
            ("optim.lr", t.optim.lr.to_string()),
            ("optim.beta1", t.optim.beta1.to_string()),
            ("optim.beta2", t.optim.beta2.to_string()),
            ("optim.eps", t.optim.eps.to_string()),
            (
                "optim.clip_norm",
                t.optim.clip_norm.unwrap_or(0.0).to_string(),
            ),
            ("eval.k", t.eval.k.to_string()),
            ("eval.average", t.eval.average.to_string()),
            ("eval.chunk", t.eval.chunk.to_string()),
            ("eval.batch_size", t.eval.batch_size.to_string()),
            ("eval.every", t.eval_every.to_string()),
            ("train.prefetch", t.prefetch.to_string()),
            ("train.threads", self.threads.to_string()),
            ("data.min_support", p.preprocess.min_support.to_string()),
            ("data.min_len", p.preprocess.min_len.to_string()),
            (
                "data.holdout_days",
                (p.holdout_ms as f64 / MS_PER_DAY as f64).to_string(),
            ),
            (
                "data.support_scope",
                scope_name(p.support_scope).to_string(),
            ),
            ("data.straddle", straddle_name(p.straddle).to_string()),
            ("data.event_types", types.join(",")),
            ("data.train_fraction", p.train_fraction.to_string()),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if key == "preset" {
            return self.train.preset.map(|p| p.to_string());
        }
        self.entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    /// Applies `pairs`, handling `preset` first so explicit keys override it.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        for &(k, v) in pairs.iter().filter(|(k, _)| *k == "preset") {
            self.set(k, v)?;
        }
        for &(k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies the keys of a TOML document.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config file: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        self.apply(flat.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_toml(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// TOML text that reloads to this configuration.
    pub fn snapshot(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        if let Some(p) = self.train.preset {
            // reapplied first on reload, then overridden by every key below
            out.push_str(&format!("\"preset\" = \"{p}\"\n"));
        }
        for (k, v) in self.entries() {
            let bare = v.parse::<i64>().is_ok()
                || (v.contains('.') && v.parse::<f64>().is_ok_and(f64::is_finite))
                || v == "true"
                || v == "false";
            let literal = if bare {
                v
            } else {
                toml::Value::String(v).to_string()
            };
            out.push_str(&format!("\"{k}\" = {literal}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let pp = &self.prep.preprocess;
        if pp.min_len < 2 {
            return Err(Error::Config(format!(
                "data.min_len must be at least 2, got {}",
                pp.min_len
            )));
        }
        if pp.min_support == 0 {
            return Err(Error::Config("data.min_support must be positive".into()));
        }
        let f = self.prep.train_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must be in (0, 1], got {f}"
            )));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    other => Err(Error::Config(format!(
                        "{key}: unsupported array element {other}"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            toml::Value::Datetime(_) => {
                return Err(Error::Config(format!("{key}: dates are not supported")))
            }
        };
        if !RunConfig::is_known(&key) {
            return Err(Error::Config(format!("unknown configuration key {key:?}")));
        }
        out.push((key, text));
    }
    Ok(())
}
