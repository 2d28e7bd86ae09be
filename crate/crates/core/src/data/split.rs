use std::str::FromStr;

use super::preprocess::{catalog_of, densify, filter_to_fixpoint, group_sessions, RawSession};
use super::{Catalog, Event, PreprocessConfig, Session};
use crate::error::{Error, Result};

/// What happens to a session whose events straddle the holdout boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StraddlePolicy {
    /// The whole session goes to test.
    #[default]
    TestIntact,
    /// Events before the boundary go to train, the rest to test.
    Cut,
}

/// Which data the item-support threshold is counted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportScope {
    /// Full pre-split data.
    #[default]
    All,
    /// Train portion only.
    Train,
}

impl FromStr for StraddlePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" | "test-intact" => Ok(StraddlePolicy::TestIntact),
            "cut" => Ok(StraddlePolicy::Cut),
            other => Err(Error::Config(format!("unknown straddle policy `{other}`"))),
        }
    }
}

impl FromStr for SupportScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SupportScope::All),
            "train" => Ok(SupportScope::Train),
            other => Err(Error::Config(format!("unknown support scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub preprocess: PreprocessConfig,
    pub holdout_ms: u64,
    pub support_scope: SupportScope,
    pub straddle: StraddlePolicy,
    /// Keep only the most recent fraction of training sessions (by last
    /// event), applied after the split.
    pub train_fraction: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            holdout_ms: 7 * super::MS_PER_DAY,
            support_scope: SupportScope::All,
            straddle: StraddlePolicy::TestIntact,
            train_fraction: 1.0,
        }
    }
}

/// Train/test sessions over a catalog built from the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub catalog: Catalog,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

impl PreparedDataset {
    pub fn train_events(&self) -> usize {
        self.train.iter().map(Session::len).sum()
    }

    pub fn test_events(&self) -> usize {
        self.test.iter().map(Session::len).sum()
    }
}

/// Splits sessions at `max_ts - holdout_ms`: a session is test when its last
/// event is strictly later than the boundary. Only the partition is computed
/// here; see [`prepare`] for catalog rebuilding.
pub fn temporal_split(
    sessions: &[RawSession],
    holdout_ms: u64,
    straddle: StraddlePolicy,
) -> Result<(Vec<RawSession>, Vec<RawSession>)> {
    let max_ts = sessions
        .iter()
        .map(RawSession::last_timestamp)
        .max()
        .ok_or_else(|| Error::EmptyDataset("no sessions to split".into()))?;
    let boundary = max_ts.saturating_sub(holdout_ms);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in sessions {
        if s.last_timestamp() <= boundary || holdout_ms == 0 {
            train.push(s.clone());
            continue;
        }
        match straddle {
            StraddlePolicy::TestIntact => test.push(s.clone()),
            StraddlePolicy::Cut => {
                let cut = s.timestamps.partition_point(|&ts| ts <= boundary);
                if cut > 0 {
                    train.push(RawSession {
                        session_id: s.session_id,
                        items: s.items[..cut].to_vec(),
                        timestamps: s.timestamps[..cut].to_vec(),
                    });
                }
                test.push(RawSession {
                    session_id: s.session_id,
                    items: s.items[cut..].to_vec(),
                    timestamps: s.timestamps[cut..].to_vec(),
                });
            }
        }
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    Ok((train, test))
}

/// Full preparation pipeline: type filter, support/length fixpoint, temporal
/// split, train-only catalog, and test items restricted to that catalog.
pub fn prepare(events: &[Event], cfg: &PrepConfig) -> Result<PreparedDataset> {
    let pp = &cfg.preprocess;
    let mut sessions = group_sessions(events, &pp.keep_types);
    if cfg.support_scope == SupportScope::All {
        sessions = filter_to_fixpoint(sessions, pp.min_support, pp.min_len);
    }
    let (mut train, test) = temporal_split(&sessions, cfg.holdout_ms, cfg.straddle)?;
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1], got {}",
            cfg.train_fraction
        )));
    }
    if cfg.train_fraction < 1.0 {
        let keep = ((train.len() as f64) * cfg.train_fraction).ceil() as usize;
        train.sort_by_key(|s| (s.last_timestamp(), s.session_id));
        train.drain(..train.len() - keep);
        train.sort_by_key(|s| s.session_id);
    }
    train = match cfg.support_scope {
        SupportScope::Train => filter_to_fixpoint(train, pp.min_support, pp.min_len),
        SupportScope::All => {
            train.retain(|s| s.len() >= pp.min_len);
            train
        }
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset(
            "train split is empty after filtering".into(),
        ));
    }
    let catalog = catalog_of(&train);
    let train = densify(&train, &catalog);
    let mut test = densify(&test, &catalog);
    test.retain(|s| s.len() >= pp.min_len);
    if test.is_empty() {
        return Err(Error::EmptyDataset(
            "test split is empty after filtering".into(),
        ));
    }
    Ok(PreparedDataset {
        catalog,
        train,
        test,
    })
}
