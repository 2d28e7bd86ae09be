use std::fmt;
use std::str::FromStr;

use crate::data::BatchConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossKind;
use crate::model::{Activation, ModelConfig, NormPlacement};
use crate::sampler::{Granularity, InBatchPool, MAX_NEGATIVES};

use super::optim::AdamConfig;

/// How many negatives of each kind are drawn per position, and how.
#[derive(Debug, Clone, PartialEq)]
pub struct NegConfig {
    pub uniform_count: usize,
    pub uniform_granularity: Granularity,
    pub inbatch_count: usize,
    pub inbatch_granularity: Granularity,
    pub inbatch_pool: InBatchPool,
    pub frequency_count: usize,
    pub frequency_granularity: Granularity,
    /// Keep only the `topk` highest-scoring negatives; 0 keeps all.
    pub topk: usize,
}

impl Default for NegConfig {
    fn default() -> Self {
        Self {
            uniform_count: 1,
            uniform_granularity: Granularity::Elementwise,
            inbatch_count: 0,
            inbatch_granularity: Granularity::Sessionwise,
            inbatch_pool: InBatchPool::Multiset,
            frequency_count: 0,
            frequency_granularity: Granularity::Sessionwise,
            topk: 0,
        }
    }
}

impl NegConfig {
    pub fn total(&self) -> usize {
        self.uniform_count + self.inbatch_count + self.frequency_count
    }

    /// Number of negatives the loss sees per position.
    pub fn effective(&self) -> usize {
        if self.topk == 0 {
            self.total()
        } else {
            self.topk.min(self.total())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Config("at least one negative is required".into()));
        }
        for (what, n) in [
            ("negs.uniform.count", self.uniform_count),
            ("negs.inbatch.count", self.inbatch_count),
            ("negs.frequency.count", self.frequency_count),
        ] {
            if n > MAX_NEGATIVES {
                return Err(Error::Config(format!(
                    "{what} = {n} exceeds the limit of {MAX_NEGATIVES}"
                )));
            }
        }
        if self.inbatch_count > 0 && self.inbatch_granularity == Granularity::Batchwise {
            return Err(Error::Config(
                "negs.inbatch.granularity cannot be batchwise".into(),
            ));
        }
        if self.topk > self.total() {
            return Err(Error::Config(format!(
                "negs.topk = {} exceeds the {} sampled negatives",
                self.topk,
                self.total()
            )));
        }
        Ok(())
    }
}

/// Named experiment settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Sasrec,
    SasrecMNegs,
    SasrecLNegs,
    SasrecBprMax,
    SasrecSsm,
    TronL,
    TronXl,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Sasrec,
        Preset::SasrecMNegs,
        Preset::SasrecLNegs,
        Preset::SasrecBprMax,
        Preset::SasrecSsm,
        Preset::TronL,
        Preset::TronXl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Sasrec => "sasrec",
            Preset::SasrecMNegs => "sasrec-m-negs",
            Preset::SasrecLNegs => "sasrec-l-negs",
            Preset::SasrecBprMax => "sasrec-bpr-max",
            Preset::SasrecSsm => "sasrec-ssm",
            Preset::TronL => "tron-l",
            Preset::TronXl => "tron-xl",
        }
    }

    pub fn negs(self) -> NegConfig {
        let sessionwise = |uniform, inbatch| NegConfig {
            uniform_count: uniform,
            uniform_granularity: Granularity::Sessionwise,
            inbatch_count: inbatch,
            ..NegConfig::default()
        };
        let tron = |uniform| NegConfig {
            uniform_count: uniform,
            uniform_granularity: Granularity::Batchwise,
            inbatch_count: 127,
            topk: 100,
            ..NegConfig::default()
        };
        match self {
            Preset::Sasrec => NegConfig::default(),
            Preset::SasrecMNegs => sessionwise(512, 16),
            Preset::SasrecLNegs | Preset::SasrecBprMax | Preset::SasrecSsm => {
                sessionwise(8192, 127)
            }
            Preset::TronL => tron(8192),
            Preset::TronXl => tron(16384),
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Preset::Sasrec | Preset::SasrecMNegs | Preset::SasrecLNegs => LossKind::Bce,
            Preset::SasrecBprMax => LossKind::BprMax {
                lambda: crate::loss::DEFAULT_BPR_MAX_LAMBDA,
            },
            Preset::SasrecSsm | Preset::TronL | Preset::TronXl => LossKind::Ssm,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown preset {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Architecture settings that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            dropout: m.dropout,
            norm: m.norm,
            activation: m.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Option<Preset>,
    pub epochs: usize,
    pub seed: u64,
    pub batch: BatchConfig,
    pub arch: ArchConfig,
    pub negs: NegConfig,
    pub loss: LossKind,
    pub optim: AdamConfig,
    pub eval: EvalConfig,
    /// Evaluate every `eval_every` epochs when a test set is available; 0 never.
    pub eval_every: usize,
    /// Batches prepared ahead of the trainer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Sasrec)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            preset: Some(p),
            epochs: 10,
            seed: 42,
            batch: BatchConfig::default(),
            arch: ArchConfig::default(),
            negs: p.negs(),
            loss: p.loss(),
            optim: AdamConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 1,
            prefetch: 4,
        }
    }

    /// Replaces the negative sampling and loss settings with those of `p`.
    pub fn apply_preset(&mut self, p: Preset) {
        self.preset = Some(p);
        self.negs = p.negs();
        self.loss = p.loss();
    }

    pub fn model_config(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_items,
            hidden_dim: self.arch.hidden_dim,
            num_layers: self.arch.num_layers,
            num_heads: self.arch.num_heads,
            max_len: self.batch.t_max,
            dropout: self.arch.dropout,
            norm: self.arch.norm,
            activation: self.arch.activation,
            ..ModelConfig::new(n_items)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.model_config(1).validate()?;
        self.negs.validate()?;
        self.optim.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        if let LossKind::BprMax { lambda } = self.loss {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!(
                    "loss.bpr_max.lambda must be a nonnegative number, got {lambda}"
                )));
            }
        }
        Ok(())
    }
}
