//! Ranking losses over one positive score and K negative scores per
//! (session, position) row.
//!
//! * BCE, pointwise: `-ln σ(pos) - Σⱼ ln(1 - σ(negⱼ))`
//! * BPR-max, pairwise: with `sⱼ = softmax(neg)ⱼ`,
//!   `-ln Σⱼ sⱼ σ(pos - negⱼ) + λ Σⱼ sⱼ negⱼ²`
//! * sampled softmax, listwise: `-ln(e^pos / (e^pos + Σⱼ e^negⱼ))`, with no
//!   sampling-probability correction
//!
//! Each reduces to the mean over valid rows. The graph op calls back into
//! [`row_loss`] and [`row_grad`] so the forward value and the analytic
//! gradient share one definition.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::kernels::{log_sigmoid, log_sum_exp, sigmoid};
use crate::tensor::{Graph, Var};

/// Default BPR-max score regularization weight.
pub const DEFAULT_BPR_MAX_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Bce,
    BprMax { lambda: f64 },
    Ssm,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::BprMax { .. } => "bpr-max",
            LossKind::Ssm => "ssm",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "bpr-max" | "bpr_max" => Ok(LossKind::BprMax {
                lambda: DEFAULT_BPR_MAX_LAMBDA,
            }),
            "ssm" => Ok(LossKind::Ssm),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected bce, bpr-max or ssm)"
            ))),
        }
    }
}

/// Loss of a single row.
pub fn row_loss(kind: LossKind, pos: f64, negs: &[f64]) -> f64 {
    match kind {
        LossKind::Bce => -log_sigmoid(pos) - negs.iter().map(|&n| log_sigmoid(-n)).sum::<f64>(),
        LossKind::Ssm => {
            let mut logits = Vec::with_capacity(negs.len() + 1);
            logits.push(pos);
            logits.extend_from_slice(negs);
            log_sum_exp(&logits) - pos
        }
        LossKind::BprMax { lambda } => {
            let bm = BprMaxTerms::new(pos, negs);
            -bm.log_a + lambda * bm.reg
        }
    }
}

/// Gradient of [`row_loss`] with respect to `pos` and each negative.
pub fn row_grad(kind: LossKind, pos: f64, negs: &[f64]) -> (f64, Vec<f64>) {
    match kind {
        LossKind::Bce => (
            sigmoid(pos) - 1.0,
            negs.iter().map(|&n| sigmoid(n)).collect(),
        ),
        LossKind::Ssm => {
            let mut p = Vec::with_capacity(negs.len() + 1);
            p.push(pos);
            p.extend_from_slice(negs);
            crate::tensor::kernels::softmax_row(&mut p);
            let dpos = p[0] - 1.0;
            p.remove(0);
            (dpos, p)
        }
        LossKind::BprMax { lambda } => {
            let bm = BprMaxTerms::new(pos, negs);
            let mut dpos = 0.0;
            let dn = negs
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let sig = sigmoid(pos - n);
                    let w = (bm.log_s[j] + log_sigmoid(pos - n) - bm.log_a).exp();
                    dpos -= w * (1.0 - sig);
                    let s = bm.log_s[j].exp();
                    s - w * sig + lambda * s * (n * n - bm.reg + 2.0 * n)
                })
                .collect();
            (dpos, dn)
        }
    }
}

struct BprMaxTerms {
    /// ln softmax(negs)
    log_s: Vec<f64>,
    /// ln Σⱼ sⱼ σ(pos - negⱼ)
    log_a: f64,
    /// Σⱼ sⱼ negⱼ²
    reg: f64,
}

impl BprMaxTerms {
    fn new(pos: f64, negs: &[f64]) -> Self {
        let lse = log_sum_exp(negs);
        let log_s: Vec<f64> = negs.iter().map(|n| n - lse).collect();
        let terms: Vec<f64> = negs
            .iter()
            .zip(&log_s)
            .map(|(&n, ls)| ls + log_sigmoid(pos - n))
            .collect();
        let reg = negs
            .iter()
            .zip(&log_s)
            .map(|(n, ls)| ls.exp() * n * n)
            .sum();
        Self {
            log_a: log_sum_exp(&terms),
            log_s,
            reg,
        }
    }
}

/// Pointwise binary cross-entropy, mean over valid rows.
pub fn bce(g: &mut Graph<'_>, pos: Var, neg: Var, mask: Option<&[bool]>) -> Result<Var> {
    g.ranking_loss(pos, neg, LossKind::Bce, mask)
}

/// Pairwise BPR-max with score regularization `lambda`, mean over valid rows.
pub fn bpr_max(
    g: &mut Graph<'_>,
    pos: Var,
    neg: Var,
    lambda: f64,
    mask: Option<&[bool]>,
) -> Result<Var> {
    g.ranking_loss(pos, neg, LossKind::BprMax { lambda }, mask)
}

/// Listwise sampled softmax, mean over valid rows.
pub fn ssm(g: &mut Graph<'_>, pos: Var, neg: Var, mask: Option<&[bool]>) -> Result<Var> {
    g.ranking_loss(pos, neg, LossKind::Ssm, mask)
}
