use std::collections::{HashMap, HashSet};

use super::{Catalog, Event, EventType, Session};
use crate::error::{Error, Result};

/// A session still keyed by raw item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSession {
    pub session_id: u64,
    pub items: Vec<u64>,
    pub timestamps: Vec<u64>,
}

impl RawSession {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last_timestamp(&self) -> u64 {
        self.timestamps.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub min_support: usize,
    pub min_len: usize,
    pub keep_types: Vec<EventType>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_support: 5,
            min_len: 2,
            keep_types: vec![EventType::Click],
        }
    }
}

/// Groups events of the kept types into sessions ordered by session id, with
/// each session's events stably sorted by timestamp.
pub fn group_sessions(events: &[Event], keep_types: &[EventType]) -> Vec<RawSession> {
    let mut by_session: HashMap<u64, Vec<(u64, u64)>> = HashMap::new();
    for e in events.iter().filter(|e| keep_types.contains(&e.event_type)) {
        by_session
            .entry(e.session_id)
            .or_default()
            .push((e.timestamp, e.item_id));
    }
    let mut sessions: Vec<RawSession> = by_session
        .into_iter()
        .map(|(session_id, mut evs)| {
            evs.sort_by_key(|&(ts, _)| ts);
            RawSession {
                session_id,
                items: evs.iter().map(|e| e.1).collect(),
                timestamps: evs.iter().map(|e| e.0).collect(),
            }
        })
        .collect();
    sessions.sort_unstable_by_key(|s| s.session_id);
    sessions
}

/// Alternately drops items with fewer than `min_support` occurrences and
/// sessions shorter than `min_len` until neither step changes anything.
pub fn filter_to_fixpoint(
    mut sessions: Vec<RawSession>,
    min_support: usize,
    min_len: usize,
) -> Vec<RawSession> {
    loop {
        let mut support: HashMap<u64, usize> = HashMap::new();
        for s in &sessions {
            for &i in &s.items {
                *support.entry(i).or_default() += 1;
            }
        }
        let rare: HashSet<u64> = support
            .into_iter()
            .filter(|&(_, c)| c < min_support)
            .map(|(i, _)| i)
            .collect();
        let before = sessions.len();
        if !rare.is_empty() {
            for s in &mut sessions {
                let keep: Vec<bool> = s.items.iter().map(|i| !rare.contains(i)).collect();
                let mut k = keep.iter();
                s.items.retain(|_| *k.next().unwrap());
                let mut k = keep.iter();
                s.timestamps.retain(|_| *k.next().unwrap());
            }
        }
        sessions.retain(|s| s.len() >= min_len && !s.is_empty());
        if rare.is_empty() && sessions.len() == before {
            return sessions;
        }
    }
}

/// Filters `events` to the configured types, runs the support/length fixpoint
/// and maps the survivors onto a dense catalog.
pub fn preprocess(events: &[Event], cfg: &PreprocessConfig) -> Result<(Vec<Session>, Catalog)> {
    let raw = group_sessions(events, &cfg.keep_types);
    let raw = filter_to_fixpoint(raw, cfg.min_support, cfg.min_len);
    if raw.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no sessions survive min_support={} and min_len={}",
            cfg.min_support, cfg.min_len
        )));
    }
    let catalog = catalog_of(&raw);
    let sessions = densify(&raw, &catalog);
    Ok((sessions, catalog))
}

pub(super) fn catalog_of(sessions: &[RawSession]) -> Catalog {
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for s in sessions {
        for &i in &s.items {
            *counts.entry(i).or_default() += 1;
        }
    }
    Catalog::from_counts(counts)
}

/// Maps raw ids onto `catalog`, dropping items it does not contain.
pub(super) fn densify(sessions: &[RawSession], catalog: &Catalog) -> Vec<Session> {
    sessions
        .iter()
        .map(|s| {
            let (items, timestamps) = s
                .items
                .iter()
                .zip(&s.timestamps)
                .filter_map(|(&k, &ts)| catalog.id_of(k).map(|id| (id, ts)))
                .unzip();
            Session {
                session_id: s.session_id,
                items,
                timestamps,
            }
        })
        .collect()
}
