//! One training step: encode, score the target and the negatives, optionally
//! keep the top-k negatives, and differentiate the ranking loss.

use crate::data::{Catalog, SessionBatch};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::ModelState;
use crate::par;
use crate::rng::{CountingRng, StreamKey};
use crate::sampler::{
    concat_negatives, sample_frequency, sample_inbatch_or_uniform, sample_uniform, topk_row,
    AliasTable, BatchDims, NegativeSet, Source,
};
use crate::tensor::{kernels, Graph, Tensor, Var};

use super::config::NegConfig;

/// Draws the configured negatives for a batch.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    cfg: NegConfig,
    n_items: usize,
    alias: Option<AliasTable>,
}

/// A batch together with its negatives.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub index: usize,
    pub batch: SessionBatch,
    pub negatives: NegativeSet,
    /// Sessions whose in-batch pool was empty and got uniform negatives.
    pub fallback_rows: usize,
}

impl NegativeSampler {
    pub fn new(cfg: &NegConfig, catalog: &Catalog) -> Result<Self> {
        cfg.validate()?;
        let alias = if cfg.frequency_count > 0 {
            Some(AliasTable::new(catalog.frequencies())?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            n_items: catalog.len(),
            alias,
        })
    }

    /// Negatives in the order in-batch, frequency, uniform.
    pub fn sample(&self, batch: &SessionBatch, key: &StreamKey) -> Result<(NegativeSet, usize)> {
        let c = &self.cfg;
        let dims = BatchDims::of(batch);
        let mut negs = NegativeSet::empty();
        let mut fallback = 0;
        if c.inbatch_count > 0 {
            let d = sample_inbatch_or_uniform(
                batch,
                c.inbatch_granularity,
                c.inbatch_count,
                c.inbatch_pool,
                key,
                self.n_items,
            )?;
            fallback = d.fallback_rows.len();
            negs = concat_negatives(negs, d.negatives)?;
        }
        if let Some(alias) = &self.alias {
            let f = sample_frequency(alias, c.frequency_granularity, c.frequency_count, dims, key)?;
            negs = concat_negatives(negs, f)?;
        }
        if c.uniform_count > 0 {
            let u = sample_uniform(
                self.n_items,
                c.uniform_granularity,
                c.uniform_count,
                dims,
                key,
            )?;
            negs = concat_negatives(negs, u)?;
        }
        Ok((negs, fallback))
    }
}

/// Per-source draw totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DrawCounts {
    pub uniform: u64,
    pub frequency: u64,
    pub inbatch: u64,
}

impl DrawCounts {
    pub fn of(negs: &NegativeSet) -> Self {
        let mut c = Self::default();
        for b in negs.blocks() {
            match b.source {
                Source::Uniform => c.uniform += b.draws,
                Source::Frequency => c.frequency += b.draws,
                Source::InBatch => c.inbatch += b.draws,
            }
        }
        c
    }

    pub fn add(&mut self, o: DrawCounts) {
        self.uniform += o.uniform;
        self.frequency += o.frequency;
        self.inbatch += o.inbatch;
    }

    pub fn total(&self) -> u64 {
        self.uniform + self.frequency + self.inbatch
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    /// One gradient per parameter, in [`ModelState::named`] order.
    pub grads: Vec<Tensor>,
    /// Positions that contributed to the loss.
    pub rows: usize,
}

/// Loss and parameter gradients for one batch. `topk = 0` keeps every
/// negative; dropout is used only when `dropout_rng` is given.
pub fn loss_and_grads(
    model: &ModelState,
    batch: &SessionBatch,
    negs: &NegativeSet,
    loss: LossKind,
    topk: usize,
    dropout_rng: Option<&mut CountingRng>,
) -> Result<StepResult> {
    let zero_grads = || {
        model
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect()
    };
    let [nb, nt, width] = negs.shape();
    let (b, t) = (batch.size(), batch.width);
    if (nb != 1 && nb != b) || (nt != 1 && nt != t) {
        return Err(Error::Shape(format!(
            "negatives {:?} for a {b}×{t} batch",
            negs.shape()
        )));
    }
    if width == 0 {
        return Err(Error::Config("no negatives to train against".into()));
    }
    let valid = batch.valid_positions();
    if valid.is_empty() {
        return Ok(StepResult {
            loss: 0.0,
            grads: zero_grads(),
            rows: 0,
        });
    }
    let d = model.config.hidden_dim;
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let emb = p.item_emb();
    let h = model.encode(&mut g, &p, &batch.item_ids, b, t, dropout_rng)?;
    let hv = g.gather_rows(h, &valid)?;
    let rows = valid.len();
    let own: Vec<usize> = (0..rows).collect();

    let targets: Vec<usize> = valid.iter().map(|&i| batch.targets[i] as usize).collect();
    let te = g.gather_rows(emb, &targets)?;
    let pos = g.grouped_dot(hv, te, &own, 1)?;

    let neg = if topk > 0 && topk < width {
        let selected = select_hardest(model, g.value(hv), &valid, t, negs, topk);
        let ne = g.gather_rows(emb, &selected)?;
        g.grouped_dot(hv, ne, &own, topk)?
    } else {
        let mut parts: Vec<Var> = Vec::new();
        for blk in negs.blocks() {
            let (ids, groups): (Vec<usize>, Vec<usize>) = if blk.groups() <= rows {
                let ids = blk.ids.iter().map(|&i| i as usize).collect();
                let groups = valid.iter().map(|&i| blk.group_of(i / t, i % t)).collect();
                (ids, groups)
            } else {
                let ids = valid
                    .iter()
                    .flat_map(|&i| blk.ids_at(i / t, i % t).iter().map(|&x| x as usize))
                    .collect();
                (ids, own.clone())
            };
            let ne = g.gather_rows(emb, &ids)?;
            parts.push(g.grouped_dot(hv, ne, &groups, blk.width)?);
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_last(&parts)?
        }
    };
    debug_assert_eq!(g.shape(hv), &[rows, d]);
    let l = g.ranking_loss(pos, neg, loss, None)?;
    let value = g.value(l).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    g.backward(l)?;
    let grads = p
        .vars
        .iter()
        .zip(model.named())
        .map(|(&v, (_, t))| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(StepResult {
        loss: value,
        grads,
        rows,
    })
}

/// For each valid position, the ids of its `k` highest-scoring negatives
/// (scored without recording a graph), flattened row-major.
fn select_hardest(
    model: &ModelState,
    hidden: &Tensor,
    valid: &[usize],
    t: usize,
    negs: &NegativeSet,
    k: usize,
) -> Vec<usize> {
    let d = model.config.hidden_dim;
    let emb = model.item_emb.data();
    let width = negs.width();
    par::map(valid.len(), width * d, |i| {
        let (r, tt) = (valid[i] / t, valid[i] % t);
        let ids = negs.ids_at(r, tt);
        let h = hidden.row(i);
        let scores: Vec<f64> = ids
            .iter()
            .map(|&id| kernels::dot(h, &emb[id as usize * d..(id as usize + 1) * d]))
            .collect();
        topk_row(&scores, k)
            .into_iter()
            .map(|j| ids[j] as usize)
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}
