use super::ModelState;
use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::par;
use crate::sampler::{topk_row, NegativeSet};
use crate::tensor::{kernels, Tensor};

fn check_hidden(state: &ModelState, hidden: &Tensor) -> Result<usize> {
    let d = state.config.hidden_dim;
    if hidden.last_dim() != d {
        return Err(Error::Shape(format!(
            "hidden states {:?} for a model of width {d}",
            hidden.shape()
        )));
    }
    Ok(d)
}

/// Scores `[b, t, k+m]` of every negative against hidden states `[b·t × d]`,
/// broadcasting blocks with fewer leading dimensions.
pub fn score(
    state: &ModelState,
    hidden: &Tensor,
    b: usize,
    t: usize,
    negs: &NegativeSet,
) -> Result<Tensor> {
    let d = check_hidden(state, hidden)?;
    if hidden.rows() != b * t {
        return Err(Error::Shape(format!(
            "hidden states {:?} for a {b}×{t} batch",
            hidden.shape()
        )));
    }
    let [nb, nt, w] = negs.shape();
    if (nb != 1 && nb != b) || (nt != 1 && nt != t) {
        return Err(Error::Shape(format!(
            "negatives {:?} for a {b}×{t} batch",
            negs.shape()
        )));
    }
    let emb = &state.item_emb;
    let n_rows = emb.rows();
    let mut out = vec![0.0; b * t * w];
    let bad = negs
        .blocks()
        .iter()
        .find_map(|blk| blk.ids.iter().find(|&&id| id as usize >= n_rows));
    if let Some(&id) = bad {
        return Err(Error::Index {
            index: id as usize,
            len: n_rows,
        });
    }
    par::for_each_row(&mut out, w.max(1), |i, row| {
        let (r, tt) = (i / t, i % t);
        let h = hidden.row(i);
        let mut o = 0;
        for blk in negs.blocks() {
            for &id in blk.ids_at(r, tt) {
                row[o] = kernels::dot(h, &emb.data()[id as usize * d..(id as usize + 1) * d]);
                o += 1;
            }
        }
    });
    Tensor::new(vec![b, t, w], out)
}

/// Scores of every catalog item (padding excluded) for each row of
/// `hidden[R×d]`, computed `chunk` items at a time.
pub fn score_all(state: &ModelState, hidden: &Tensor, chunk: usize) -> Result<Tensor> {
    let d = check_hidden(state, hidden)?;
    let n = state.config.n_items;
    let rows = hidden.rows();
    let emb = state.catalog_embeddings();
    let chunk = chunk.max(1);
    let mut out = vec![0.0; rows * n];
    par::for_each_row(&mut out, n, |r, row| {
        let h = hidden.row(r);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let scores = kernels::gemm_nt(h, &emb[start * d..end * d], 1, d, end - start);
            row[start..end].copy_from_slice(&scores);
        }
    });
    Tensor::new(vec![rows, n], out)
}

/// Ranked top-`k` catalog items per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTopK {
    pub k: usize,
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
}

impl ScoredTopK {
    pub fn row(&self, r: usize) -> &[ItemId] {
        &self.items[r * self.k..(r + 1) * self.k]
    }
}

/// Top-`k` catalog items per row, scored `chunk` items at a time; each chunk's
/// own top-`k` is merged into the running list, which is exact because the
/// global top-`k` is contained in the union of per-chunk top-`k` lists.
pub fn score_all_topk(
    state: &ModelState,
    hidden: &Tensor,
    k: usize,
    chunk: usize,
) -> Result<ScoredTopK> {
    let d = check_hidden(state, hidden)?;
    let n = state.config.n_items;
    let k = k.min(n);
    let emb = state.catalog_embeddings();
    let chunk = chunk.max(1);
    let per_row = par::map(hidden.rows(), n * d, |r| {
        let h = hidden.row(r);
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(2 * k);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let scores = kernels::gemm_nt(h, &emb[start * d..end * d], 1, d, end - start);
            for j in topk_row(&scores, k) {
                best.push((start + j, scores[j]));
            }
            best.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            best.truncate(k);
        }
        best
    });
    let mut items = Vec::with_capacity(per_row.len() * k);
    let mut scores = Vec::with_capacity(per_row.len() * k);
    for row in per_row {
        for (i, s) in row {
            items.push(i as ItemId);
            scores.push(s);
        }
    }
    Ok(ScoredTopK { k, items, scores })
}
