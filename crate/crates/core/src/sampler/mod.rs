//! Negative sampling.
//!
//! Negatives come in blocks whose leading dimensions depend on granularity:
//! `[b, T, n]` (elementwise), `[b, 1, n]` (sessionwise) or `[1, 1, n]`
//! (batchwise). A [`NegativeSet`] is a last-axis concatenation of blocks that
//! broadcast against each other; it is never expanded to `[b, T, k+m]` unless
//! asked for.

mod alias;
mod topk;

use std::fmt;
use std::str::FromStr;

pub use alias::AliasTable;
pub use topk::{topk_filter, topk_row, topk_select, TopKSelection};

use crate::data::{ItemId, SessionBatch};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{CountingRng, Purpose, StreamKey};

/// Largest number of negatives a single sampler call may produce per row.
pub const MAX_NEGATIVES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Elementwise,
    Sessionwise,
    Batchwise,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [
        Granularity::Elementwise,
        Granularity::Sessionwise,
        Granularity::Batchwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Elementwise => "elementwise",
            Granularity::Sessionwise => "sessionwise",
            Granularity::Batchwise => "batchwise",
        }
    }

    /// Leading dimensions of a block for a batch of `b` rows and width `t`.
    pub fn lead_dims(self, b: usize, t: usize) -> [usize; 2] {
        match self {
            Granularity::Elementwise => [b, t],
            Granularity::Sessionwise => [b, 1],
            Granularity::Batchwise => [1, 1],
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise" => Ok(Granularity::Elementwise),
            "sessionwise" => Ok(Granularity::Sessionwise),
            "batchwise" => Ok(Granularity::Batchwise),
            _ => Err(Error::Config(format!(
                "unknown granularity {s:?} (expected elementwise, sessionwise or batchwise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Uniform,
    Frequency,
    InBatch,
}

impl Source {
    fn purpose(self) -> Purpose {
        match self {
            Source::Uniform => Purpose::Uniform,
            Source::Frequency => Purpose::Frequency,
            Source::InBatch => Purpose::InBatch,
        }
    }
}

/// What the in-batch candidate pool is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InBatchPool {
    /// Every occurrence of an item in another session (repeats weigh more).
    #[default]
    Multiset,
    /// Each item of the other sessions once.
    Distinct,
}

impl FromStr for InBatchPool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiset" => Ok(InBatchPool::Multiset),
            "distinct" => Ok(InBatchPool::Distinct),
            _ => Err(Error::Config(format!(
                "unknown in-batch pool {s:?} (expected multiset or distinct)"
            ))),
        }
    }
}

impl fmt::Display for InBatchPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InBatchPool::Multiset => "multiset",
            InBatchPool::Distinct => "distinct",
        })
    }
}

/// Negatives from one sampler call, shape `[lead[0], lead[1], width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeBlock {
    pub source: Source,
    pub granularity: Granularity,
    pub lead: [usize; 2],
    pub width: usize,
    pub ids: Vec<ItemId>,
    /// Random draws spent producing this block.
    pub draws: u64,
}

impl NegativeBlock {
    pub fn shape(&self) -> [usize; 3] {
        [self.lead[0], self.lead[1], self.width]
    }

    /// The ids this block contributes at batch position `(r, t)`.
    pub fn ids_at(&self, r: usize, t: usize) -> &[ItemId] {
        let r = if self.lead[0] == 1 { 0 } else { r };
        let t = if self.lead[1] == 1 { 0 } else { t };
        let start = (r * self.lead[1] + t) * self.width;
        &self.ids[start..start + self.width]
    }

    /// Flat group index of `(r, t)` in this block's leading dimensions.
    pub fn group_of(&self, r: usize, t: usize) -> usize {
        let r = if self.lead[0] == 1 { 0 } else { r };
        let t = if self.lead[1] == 1 { 0 } else { t };
        r * self.lead[1] + t
    }

    pub fn groups(&self) -> usize {
        self.lead[0] * self.lead[1]
    }
}

/// A last-axis concatenation of broadcast-compatible blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeSet {
    blocks: Vec<NegativeBlock>,
}

impl NegativeSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[NegativeBlock] {
        &self.blocks
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0
    }

    /// Total negatives per position (`k + m`).
    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    /// Broadcast shape; `[1, 1, 0]` when empty.
    pub fn shape(&self) -> [usize; 3] {
        let mut lead = [1, 1];
        for b in &self.blocks {
            for (l, &d) in lead.iter_mut().zip(&b.lead) {
                *l = (*l).max(d);
            }
        }
        [lead[0], lead[1], self.width()]
    }

    /// Granularity implied by the broadcast shape.
    pub fn granularity(&self) -> Granularity {
        match self.shape() {
            [_, t, _] if t > 1 => Granularity::Elementwise,
            [b, _, _] if b > 1 => Granularity::Sessionwise,
            _ => Granularity::Batchwise,
        }
    }

    /// Negatives per source, in concatenation order.
    pub fn source_counts(&self) -> Vec<(Source, usize)> {
        self.blocks.iter().map(|b| (b.source, b.width)).collect()
    }

    /// Total draws spent on all blocks.
    pub fn draws(&self) -> u64 {
        self.blocks.iter().map(|b| b.draws).sum()
    }

    /// All negatives at position `(r, t)`, in concatenation order.
    pub fn ids_at(&self, r: usize, t: usize) -> Vec<ItemId> {
        let mut out = Vec::with_capacity(self.width());
        for b in &self.blocks {
            out.extend_from_slice(b.ids_at(r, t));
        }
        out
    }

    /// Fully broadcast `[b, T, k+m]` id tensor (row-major).
    pub fn to_dense(&self) -> ([usize; 3], Vec<ItemId>) {
        let shape = self.shape();
        let mut out = Vec::with_capacity(shape.iter().product());
        for r in 0..shape[0] {
            for t in 0..shape[1] {
                for b in &self.blocks {
                    out.extend_from_slice(b.ids_at(r, t));
                }
            }
        }
        (shape, out)
    }

    fn push(&mut self, block: NegativeBlock) -> Result<()> {
        if block.width == 0 {
            return Ok(());
        }
        let [b0, b1, _] = self.shape();
        for (have, new) in [b0, b1].into_iter().zip(block.lead) {
            if have != 1 && new != 1 && have != new {
                return Err(Error::Shape(format!(
                    "cannot broadcast negatives {:?} with {:?}",
                    self.shape(),
                    block.shape()
                )));
            }
        }
        self.blocks.push(block);
        Ok(())
    }
}

impl From<NegativeBlock> for NegativeSet {
    fn from(block: NegativeBlock) -> Self {
        if block.width == 0 {
            Self::empty()
        } else {
            Self {
                blocks: vec![block],
            }
        }
    }
}

/// `concat[first, second]` along the negative axis after broadcasting the
/// leading dimensions.
pub fn concat_negatives(first: NegativeSet, second: NegativeSet) -> Result<NegativeSet> {
    let mut out = first;
    for b in second.blocks {
        out.push(b)?;
    }
    Ok(out)
}

/// Leading dimensions of the batch negatives are drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchDims {
    pub sessions: usize,
    pub width: usize,
}

impl BatchDims {
    pub fn of(batch: &SessionBatch) -> Self {
        Self {
            sessions: batch.size(),
            width: batch.width,
        }
    }
}

fn check_count(count: usize) -> Result<()> {
    if count > MAX_NEGATIVES {
        return Err(Error::Config(format!(
            "{count} negatives requested, the limit is {MAX_NEGATIVES}"
        )));
    }
    Ok(())
}

/// Fills a block by calling `draw` once per id. Each leading row gets its
/// own stream so rows can be generated in parallel.
fn fill_block<F>(
    source: Source,
    granularity: Granularity,
    count: usize,
    dims: BatchDims,
    key: &StreamKey,
    draw: F,
) -> NegativeBlock
where
    F: Fn(&mut CountingRng) -> ItemId + Sync + Send,
{
    let lead = granularity.lead_dims(dims.sessions, dims.width);
    let per_row = lead[1] * count;
    let rows = par::map(lead[0], per_row, |r| {
        let mut rng = key.stream(source.purpose(), r as u64);
        let ids: Vec<ItemId> = (0..per_row).map(|_| draw(&mut rng)).collect();
        (ids, rng.draws())
    });
    let mut ids = Vec::with_capacity(lead[0] * per_row);
    let mut draws = 0;
    for (row, d) in rows {
        ids.extend(row);
        draws += d;
    }
    NegativeBlock {
        source,
        granularity,
        lead,
        width: count,
        ids,
        draws,
    }
}

/// iid uniform negatives over `0..n_items`. Positives are not excluded.
pub fn sample_uniform(
    n_items: usize,
    granularity: Granularity,
    count: usize,
    dims: BatchDims,
    key: &StreamKey,
) -> Result<NegativeSet> {
    check_count(count)?;
    if n_items == 0 {
        return Err(Error::Config("cannot sample from an empty catalog".into()));
    }
    Ok(
        fill_block(Source::Uniform, granularity, count, dims, key, |rng| {
            rng.index(n_items) as ItemId
        })
        .into(),
    )
}

/// iid negatives proportional to the weights in `table`. Positives are not
/// excluded.
pub fn sample_frequency(
    table: &AliasTable,
    granularity: Granularity,
    count: usize,
    dims: BatchDims,
    key: &StreamKey,
) -> Result<NegativeSet> {
    check_count(count)?;
    Ok(
        fill_block(Source::Frequency, granularity, count, dims, key, |rng| {
            table.sample(rng) as ItemId
        })
        .into(),
    )
}

/// Result of [`sample_inbatch_or_uniform`].
#[derive(Debug, Clone, PartialEq)]
pub struct InBatchDraw {
    pub negatives: NegativeSet,
    /// Rows whose candidate pool was empty and were filled uniformly instead.
    pub fallback_rows: Vec<usize>,
}

/// In-batch negatives: for each session, items of the other sessions in the
/// batch, never an item of the session itself.
///
/// Draws are without replacement from the candidate pool; if the pool holds
/// fewer than `count` candidates the remainder is drawn from it with
/// replacement. An empty pool is an error naming the session.
pub fn sample_inbatch(
    batch: &SessionBatch,
    granularity: Granularity,
    count: usize,
    pool: InBatchPool,
    key: &StreamKey,
) -> Result<NegativeSet> {
    let (negs, empty) = inbatch_impl(batch, granularity, count, pool, key, None)?;
    if let Some(&row) = empty.first() {
        return Err(Error::PoolExhausted {
            session: batch.session_ids[row],
            row,
        });
    }
    Ok(negs)
}

/// Like [`sample_inbatch`], but rows with an empty pool get uniform draws over
/// `0..n_items` (positives excluded when possible) instead of failing.
pub fn sample_inbatch_or_uniform(
    batch: &SessionBatch,
    granularity: Granularity,
    count: usize,
    pool: InBatchPool,
    key: &StreamKey,
    n_items: usize,
) -> Result<InBatchDraw> {
    let (negatives, fallback_rows) =
        inbatch_impl(batch, granularity, count, pool, key, Some(n_items))?;
    Ok(InBatchDraw {
        negatives,
        fallback_rows,
    })
}

fn inbatch_impl(
    batch: &SessionBatch,
    granularity: Granularity,
    count: usize,
    pool_kind: InBatchPool,
    key: &StreamKey,
    fallback: Option<usize>,
) -> Result<(NegativeSet, Vec<usize>)> {
    check_count(count)?;
    if granularity == Granularity::Batchwise {
        return Err(Error::Config(
            "in-batch negatives need elementwise or sessionwise granularity: \
             a single shared set cannot exclude every session's own items"
                .into(),
        ));
    }
    let dims = BatchDims::of(batch);
    let lead = granularity.lead_dims(dims.sessions, dims.width);
    if count == 0 {
        return Ok((NegativeSet::empty(), Vec::new()));
    }
    let per_row = lead[1] * count;
    let rows = par::map(lead[0], per_row + dims.sessions * dims.width, |r| {
        let mut rng = key.stream(Purpose::InBatch, r as u64);
        let mut candidates = candidate_pool(batch, r, pool_kind);
        if candidates.is_empty() {
            let Some(n_items) = fallback else {
                return (Vec::new(), 0, true);
            };
            let mut fb = key.stream(Purpose::Fallback, r as u64);
            let ids = (0..per_row)
                .map(|_| uniform_avoiding(batch, r, n_items, &mut fb))
                .collect();
            return (ids, fb.draws(), true);
        }
        let mut ids = Vec::with_capacity(per_row);
        for _ in 0..lead[1] {
            draw_from_pool(&mut candidates, count, &mut rng, &mut ids);
        }
        (ids, rng.draws(), false)
    });
    let mut ids = Vec::with_capacity(lead[0] * per_row);
    let mut draws = 0;
    let mut empty = Vec::new();
    for (r, (row, d, was_empty)) in rows.into_iter().enumerate() {
        if was_empty {
            empty.push(r);
        }
        ids.extend(row);
        draws += d;
    }
    if !empty.is_empty() && fallback.is_none() {
        return Ok((NegativeSet::empty(), empty));
    }
    let block = NegativeBlock {
        source: Source::InBatch,
        granularity,
        lead,
        width: count,
        ids,
        draws,
    };
    Ok((block.into(), empty))
}

/// Items of every other row of the batch that are not positives of row `r`.
fn candidate_pool(batch: &SessionBatch, r: usize, kind: InBatchPool) -> Vec<ItemId> {
    let mut pool: Vec<ItemId> = (0..batch.size())
        .filter(|&o| o != r)
        .flat_map(|o| batch.row(o).iter().copied())
        .filter(|&item| !batch.is_positive(r, item))
        .collect();
    if kind == InBatchPool::Distinct {
        pool.sort_unstable();
        pool.dedup();
    }
    pool
}

/// Appends `count` draws from `pool`: a partial Fisher–Yates shuffle while the
/// pool lasts, then draws with replacement. `pool` is left permuted.
fn draw_from_pool(pool: &mut [ItemId], count: usize, rng: &mut CountingRng, out: &mut Vec<ItemId>) {
    let n = pool.len();
    let unique = count.min(n);
    for i in 0..unique {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
        out.push(pool[i]);
    }
    for _ in unique..count {
        out.push(pool[rng.index(n)]);
    }
}

fn uniform_avoiding(
    batch: &SessionBatch,
    r: usize,
    n_items: usize,
    rng: &mut CountingRng,
) -> ItemId {
    let all_positive = batch.positives[r].len() >= n_items;
    loop {
        let id = rng.index(n_items) as ItemId;
        if all_positive || !batch.is_positive(r, id) {
            return id;
        }
    }
}
