use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Graph, Tensor, Var};

/// The `k` highest-scoring entries of each row of a `[.., N]` score tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection {
    pub k: usize,
    /// `rows · k` column indices, each row ordered by descending score.
    pub indices: Vec<usize>,
    /// Scores at `indices`.
    pub scores: Vec<f64>,
}

impl TopKSelection {
    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[r * self.k..(r + 1) * self.k]
    }
}

/// Higher score first; equal scores keep the lower index first.
#[inline]
fn rank_order(row: &[f64], a: usize, b: usize) -> Ordering {
    row[b].total_cmp(&row[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `row`, best first.
pub fn topk_row(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let k = k.min(row.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(row, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(row, a, b));
    idx
}

/// Per-row top-`k` over the last axis. `k` may not exceed the axis length.
pub fn topk_filter(scores: &Tensor, k: usize) -> Result<TopKSelection> {
    let n = scores.last_dim();
    if k > n {
        return Err(Error::Config(format!(
            "top-k of {k} from only {n} negatives"
        )));
    }
    let rows = scores.rows();
    let per_row = par::map(rows, n, |r| topk_row(scores.row(r), k));
    let indices: Vec<usize> = per_row.into_iter().flatten().collect();
    let scores_out = indices
        .iter()
        .enumerate()
        .map(|(i, &j)| scores.row(i / k.max(1))[j])
        .collect();
    Ok(TopKSelection {
        k,
        indices,
        scores: scores_out,
    })
}

/// In-graph top-`k`: selects on the current values and returns a `[rows×k]`
/// node through which only the selected entries receive gradient.
pub fn topk_select(g: &mut Graph<'_>, scores: Var, k: usize) -> Result<(TopKSelection, Var)> {
    let sel = topk_filter(g.value(scores), k)?;
    let picked = g.select_last(scores, &sel.indices, k)?;
    Ok((sel, picked))
}
