use rand::seq::SliceRandom;

use super::{ItemId, Session};
use crate::error::{Error, Result};
use crate::rng::CountingRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Sessions keep at most their `t_max` most recent items.
    pub t_max: usize,
    /// Pad rows only to the longest session in the batch instead of `t_max`.
    pub pad_to_longest: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            t_max: 50,
            pad_to_longest: false,
        }
    }
}

/// Whole sessions laid out as a padded `[b × width]` matrix.
///
/// Row `r`, column `t` holds item `iₜ₊₁` of the (truncated) session and
/// `targets` holds `iₜ₊₂`; `mask` marks the positions that have a real target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionBatch {
    pub width: usize,
    pub item_ids: Vec<ItemId>,
    pub targets: Vec<ItemId>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub session_ids: Vec<u64>,
    /// Index of each row's session in the slice the batch was built from.
    pub session_refs: Vec<usize>,
    /// Distinct items of each row's full (untruncated) session, sorted.
    pub positives: Vec<Vec<ItemId>>,
    pub pad: ItemId,
}

impl SessionBatch {
    /// Builds a batch from `rows` (indices into `sessions`).
    pub fn build(
        sessions: &[Session],
        rows: &[usize],
        t_max: usize,
        pad_to_longest: bool,
        pad: ItemId,
    ) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config(format!(
                "t_max must be at least 2, got {t_max}"
            )));
        }
        let lengths: Vec<usize> = rows.iter().map(|&r| sessions[r].len().min(t_max)).collect();
        let width = if pad_to_longest {
            lengths.iter().copied().max().unwrap_or(0).max(1)
        } else {
            t_max
        };
        let b = rows.len();
        let mut item_ids = vec![pad; b * width];
        let mut targets = vec![pad; b * width];
        let mut mask = vec![false; b * width];
        for (r, &si) in rows.iter().enumerate() {
            let items = &sessions[si].items;
            let kept = &items[items.len() - lengths[r]..];
            let base = r * width;
            item_ids[base..base + kept.len()].copy_from_slice(kept);
            for t in 0..kept.len().saturating_sub(1) {
                targets[base + t] = kept[t + 1];
                mask[base + t] = true;
            }
        }
        Ok(Self {
            width,
            item_ids,
            targets,
            mask,
            lengths,
            session_ids: rows.iter().map(|&r| sessions[r].session_id).collect(),
            session_refs: rows.to_vec(),
            positives: rows.iter().map(|&r| sessions[r].positives()).collect(),
            pad,
        })
    }

    /// Number of sessions `b`.
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// The un-padded items of row `r`.
    pub fn row(&self, r: usize) -> &[ItemId] {
        &self.item_ids[r * self.width..r * self.width + self.lengths[r]]
    }

    /// Flat indices (`row · width + t`) of positions with a target.
    pub fn valid_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_positive(&self, r: usize, item: ItemId) -> bool {
        self.positives[r].binary_search(&item).is_ok()
    }
}

/// A (possibly shuffled) partition of sessions into batches; batches are
/// materialized on demand so they can be produced lazily or out of order.
#[derive(Debug, Clone)]
pub struct BatchPlan<'a> {
    sessions: &'a [Session],
    order: Vec<usize>,
    cfg: BatchConfig,
    pad: ItemId,
}

impl<'a> BatchPlan<'a> {
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.cfg.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn rows(&self, i: usize) -> &[usize] {
        let start = i * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(self.order.len());
        &self.order[start..end]
    }

    pub fn batch(&self, i: usize) -> SessionBatch {
        SessionBatch::build(
            self.sessions,
            self.rows(i),
            self.cfg.t_max,
            self.cfg.pad_to_longest,
            self.pad,
        )
        .expect("config validated in make_batches")
    }

    pub fn iter(&self) -> impl Iterator<Item = SessionBatch> + '_ {
        (0..self.len()).map(|i| self.batch(i))
    }
}

/// Partitions `sessions` into batches of whole sessions, shuffled
/// deterministically when `shuffle_seed` is given.
pub fn make_batches<'a>(
    sessions: &'a [Session],
    cfg: BatchConfig,
    shuffle_seed: Option<u64>,
    pad: ItemId,
) -> Result<BatchPlan<'a>> {
    if cfg.t_max < 2 {
        return Err(Error::Config(format!(
            "t_max must be at least 2, got {}",
            cfg.t_max
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if sessions.is_empty() {
        return Err(Error::EmptyDataset("no sessions to batch".into()));
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(CountingRng::seeded(seed).raw());
    }
    Ok(BatchPlan {
        sessions,
        order,
        cfg,
        pad,
    })
}
