//! Full-catalog next-item evaluation.
//!
//! Every transition `iₜ → iₜ₊₁` of every test session is scored against the
//! whole catalog; no candidate sampling. Items scoring exactly the same as the
//! target are ranked ahead of it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, Session};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::par;
use crate::tensor::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Every transition weighs the same.
    #[default]
    Transition,
    /// Metrics are averaged within each session first.
    Session,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Transition => "transition",
            Averaging::Session => "session",
        })
    }
}

impl FromStr for Averaging {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transition" => Ok(Averaging::Transition),
            "session" => Ok(Averaging::Session),
            _ => Err(Error::Config(format!(
                "unknown averaging {s:?} (expected transition or session)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    /// Catalog items scored per block.
    pub chunk: usize,
    /// Windows encoded per forward pass.
    pub batch_size: usize,
    pub average: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            chunk: 4096,
            batch_size: 128,
            average: Averaging::Transition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
    pub n_transitions: usize,
    pub n_sessions: usize,
    pub average: Averaging,
}

/// 1-based rank of `target` with ties resolved against it.
pub fn pessimistic_rank(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && v >= s)
        .count()
}

/// One encoder input: `ids` and the positions whose next item is predicted.
struct Window<'a> {
    session: usize,
    ids: &'a [ItemId],
    /// `(position in window, target item)`
    predict: Vec<(usize, ItemId)>,
}

fn windows(sessions: &[Session], t_max: usize) -> Vec<Window<'_>> {
    let mut out = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        let items = &s.items;
        let n = items.len();
        if n < 2 {
            continue;
        }
        let w = n.min(t_max);
        out.push(Window {
            session: si,
            ids: &items[..w],
            predict: (0..w - 1).map(|p| (p, items[p + 1])).collect(),
        });
        // later targets see the most recent t_max items
        for j in w..n {
            out.push(Window {
                session: si,
                ids: &items[j - t_max..j],
                predict: vec![(t_max - 1, items[j])],
            });
        }
    }
    out
}

/// Ranks of each target among all catalog items, given hidden rows.
fn rank_rows(model: &ModelState, hidden: &[f64], targets: &[ItemId], chunk: usize) -> Vec<usize> {
    let d = model.config.hidden_dim;
    let n = model.config.n_items;
    let emb = model.catalog_embeddings();
    let chunk = chunk.max(1);
    const ROWS: usize = 32;
    let blocks = targets.len().div_ceil(ROWS);
    par::map(blocks, ROWS * n * d, |bi| {
        let lo = bi * ROWS;
        let hi = (lo + ROWS).min(targets.len());
        let h = &hidden[lo * d..hi * d];
        let tscore: Vec<f64> = (lo..hi)
            .map(|r| {
                let t = targets[r] as usize;
                kernels::dot(&hidden[r * d..(r + 1) * d], &emb[t * d..(t + 1) * d])
            })
            .collect();
        let mut ahead = vec![0usize; hi - lo];
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let w = end - start;
            let s = kernels::gemm_nt(h, &emb[start * d..end * d], hi - lo, d, w);
            for (r, cnt) in ahead.iter_mut().enumerate() {
                let t = targets[lo + r] as usize;
                for (j, &v) in s[r * w..(r + 1) * w].iter().enumerate() {
                    if v >= tscore[r] && start + j != t {
                        *cnt += 1;
                    }
                }
            }
        }
        ahead.into_iter().map(|a| a + 1).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Target ranks of every transition, grouped per session in input order.
pub fn transition_ranks(
    model: &ModelState,
    sessions: &[Session],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<usize>>> {
    let n_items = model.config.n_items;
    for s in sessions {
        if let Some(&bad) = s.items.iter().find(|&&i| i as usize >= n_items) {
            return Err(Error::Index {
                index: bad as usize,
                len: n_items,
            });
        }
    }
    let d = model.config.hidden_dim;
    let pad = model.config.pad_id();
    let all = windows(sessions, model.config.max_len);
    let mut per_session: Vec<Vec<usize>> = vec![Vec::new(); sessions.len()];
    for group in all.chunks(cfg.batch_size.max(1)) {
        let width = group.iter().map(|w| w.ids.len()).max().unwrap_or(1);
        let mut ids = vec![pad; group.len() * width];
        for (r, w) in group.iter().enumerate() {
            ids[r * width..r * width + w.ids.len()].copy_from_slice(w.ids);
        }
        let hidden = model.hidden(&ids, group.len(), width)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (r, w) in group.iter().enumerate() {
            for &(p, t) in &w.predict {
                rows.extend_from_slice(hidden.row(r * width + p));
                targets.push(t);
            }
        }
        debug_assert_eq!(rows.len(), targets.len() * d);
        let ranks = rank_rows(model, &rows, &targets, cfg.chunk);
        let mut it = ranks.into_iter();
        for w in group {
            per_session[w.session].extend(it.by_ref().take(w.predict.len()));
        }
    }
    Ok(per_session)
}

/// Recall@k and MRR@k over all test transitions.
pub fn evaluate(model: &ModelState, sessions: &[Session], cfg: &EvalConfig) -> Result<EvalResult> {
    if cfg.k == 0 {
        return Err(Error::Config("eval.k must be positive".into()));
    }
    let ranks = transition_ranks(model, sessions, cfg)?;
    metrics_from_ranks(&ranks, cfg.k, cfg.average)
}

/// Aggregates per-session rank lists, summing in session and position order.
pub fn metrics_from_ranks(
    ranks: &[Vec<usize>],
    k: usize,
    average: Averaging,
) -> Result<EvalResult> {
    let n_transitions: usize = ranks.iter().map(Vec::len).sum();
    let n_sessions = ranks.iter().filter(|r| !r.is_empty()).count();
    if n_transitions == 0 {
        return Err(Error::EmptyDataset(
            "no test transitions to evaluate".into(),
        ));
    }
    let (recall, mrr) = match average {
        Averaging::Transition => {
            let mut hits = 0usize;
            let mut rr = 0.0;
            for &r in ranks.iter().flatten().filter(|&&r| r <= k) {
                hits += 1;
                rr += 1.0 / r as f64;
            }
            let n = n_transitions as f64;
            (hits as f64 / n, rr / n)
        }
        Averaging::Session => {
            let (mut rec, mut rr) = (0.0, 0.0);
            for s in ranks.iter().filter(|r| !r.is_empty()) {
                let len = s.len() as f64;
                rec += s.iter().filter(|&&r| r <= k).count() as f64 / len;
                rr += s
                    .iter()
                    .filter(|&&r| r <= k)
                    .map(|&r| 1.0 / r as f64)
                    .sum::<f64>()
                    / len;
            }
            (rec / n_sessions as f64, rr / n_sessions as f64)
        }
    };
    Ok(EvalResult {
        k,
        recall,
        mrr,
        n_transitions,
        n_sessions,
        average,
    })
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub recall_at_20: f64,
    pub mrr_at_20: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,recall_at_20,mrr_at_20,wall_seconds";

pub fn export_metrics(series: &[MetricRow], path: &Path) -> Result<()> {
    if series.is_empty() {
        return Err(Error::EmptyDataset("no metrics to export".into()));
    }
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Config(format!("cannot write metrics: {other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for row in series {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    })?;
    let header = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != METRICS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {METRICS_HEADER:?}, found {header:?}"),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_lose_ties() {
        assert_eq!(pessimistic_rank(&[1.0, 1.0, 1.0], 0), 3);
        assert_eq!(pessimistic_rank(&[0.5, 2.0, 1.0], 1), 1);
    }

    #[test]
    fn rank_four_contributes_a_quarter() {
        let r = metrics_from_ranks(&[vec![4]], 20, Averaging::Transition).unwrap();
        assert_eq!((r.recall, r.mrr), (1.0, 0.25));
        let r = metrics_from_ranks(&[vec![1, 1], vec![1]], 20, Averaging::Transition).unwrap();
        assert_eq!((r.recall, r.mrr, r.n_transitions), (1.0, 1.0, 3));
    }

    #[test]
    fn session_averaging() {
        let ranks = vec![vec![1, 30, 30, 30], vec![2]];
        let t = metrics_from_ranks(&ranks, 20, Averaging::Transition).unwrap();
        let s = metrics_from_ranks(&ranks, 20, Averaging::Session).unwrap();
        assert!((t.recall - 0.4).abs() < 1e-15);
        assert!((s.recall - 0.625).abs() < 1e-15);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(metrics_from_ranks(&[], 20, Averaging::Transition).is_err());
    }

    #[test]
    fn metrics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<MetricRow> = (1..=10)
            .map(|e| MetricRow {
                epoch: e,
                recall_at_20: 1.0 / (e as f64 + 2.0),
                mrr_at_20: 0.1 / 3.0 * e as f64,
                wall_seconds: e as f64 * 1.234_567_891_011,
            })
            .collect();
        export_metrics(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }
}
