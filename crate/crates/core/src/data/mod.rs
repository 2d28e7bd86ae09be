//! Clickstream ingestion, preprocessing, temporal splitting and batching.

mod batch;
mod cache;
mod parse;
mod preprocess;
mod split;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, BatchConfig, BatchPlan, SessionBatch};
pub use cache::{load_prepared, save_prepared, Manifest};
pub use parse::{parse_events, parse_reader, InputFormat, ParseMode, ParsedEvents};
pub use preprocess::{
    filter_to_fixpoint, group_sessions, preprocess, PreprocessConfig, RawSession,
};
pub use split::{
    prepare, temporal_split, PrepConfig, PreparedDataset, StraddlePolicy, SupportScope,
};

use crate::error::{Error, Result};

/// Dense catalog-local item id.
pub type ItemId = u32;

pub const MS_PER_DAY: u64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Click,
    Cart,
    Order,
}

impl FromStr for EventType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "click" | "clicks" => Ok(EventType::Click),
            "cart" | "carts" => Ok(EventType::Cart),
            "order" | "orders" => Ok(EventType::Order),
            other => Err(Error::Config(format!("unknown event type `{other}`"))),
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventType::Click => "click",
            EventType::Cart => "cart",
            EventType::Order => "order",
        })
    }
}

/// One raw interaction; `item_id` is the source system's item key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub session_id: u64,
    pub item_id: u64,
    /// Epoch milliseconds.
    pub timestamp: u64,
    pub event_type: EventType,
}

/// A time-ordered sequence of dense item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: u64,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<u64>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last_timestamp(&self) -> u64 {
        self.timestamps.last().copied().unwrap_or(0)
    }

    /// Distinct items of the session, sorted.
    pub fn positives(&self) -> Vec<ItemId> {
        let mut p = self.items.clone();
        p.sort_unstable();
        p.dedup();
        p
    }

    /// Number of next-item transitions, `T - 1`.
    pub fn transitions(&self) -> usize {
        self.items.len().saturating_sub(1)
    }
}

/// The item universe with dense ids and interaction counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    keys: Vec<u64>,
    index: HashMap<u64, ItemId>,
    frequencies: Vec<u64>,
}

impl Catalog {
    /// Builds a catalog from `(raw key, count)` pairs; ids follow ascending key
    /// order.
    pub fn from_counts(counts: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut pairs: Vec<(u64, u64)> = counts.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        let keys: Vec<u64> = pairs.iter().map(|p| p.0).collect();
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i as ItemId))
            .collect();
        Self {
            keys,
            index,
            frequencies: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id_of(&self, key: u64) -> Option<ItemId> {
        self.index.get(&key).copied()
    }

    pub fn key_of(&self, id: ItemId) -> u64 {
        self.keys[id as usize]
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn frequency(&self, id: ItemId) -> u64 {
        self.frequencies[id as usize]
    }

    pub fn total_events(&self) -> u64 {
        self.frequencies.iter().sum()
    }

    /// Sentinel id used for padding; equals the catalog size.
    pub fn pad_id(&self) -> ItemId {
        self.keys.len() as ItemId
    }
}
