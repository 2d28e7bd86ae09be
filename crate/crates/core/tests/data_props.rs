mod common;

use std::collections::HashMap;
use std::io::Cursor;

use proptest::prelude::*;
use tron_core::data::{
    filter_to_fixpoint, load_prepared, make_batches, parse_reader, prepare, save_prepared,
    temporal_split, BatchConfig, Event, EventType, InputFormat, ItemId, Manifest, ParseMode,
    PrepConfig, RawSession, StraddlePolicy, MS_PER_DAY,
};

fn raw(id: u64, items: &[u64]) -> RawSession {
    RawSession {
        session_id: id,
        items: items.to_vec(),
        timestamps: (0..items.len() as u64).map(|t| id * 100 + t).collect(),
    }
}

/// Removes one offending item or session per round; slow but obviously right.
fn fixpoint_reference(
    mut sessions: Vec<Vec<u64>>,
    min_support: usize,
    min_len: usize,
) -> Vec<Vec<u64>> {
    loop {
        let mut support: HashMap<u64, usize> = HashMap::new();
        for s in &sessions {
            for &i in s {
                *support.entry(i).or_default() += 1;
            }
        }
        if let Some((&rare, _)) = support.iter().filter(|&(_, &c)| c < min_support).min() {
            for s in &mut sessions {
                s.retain(|&i| i != rare);
            }
            continue;
        }
        if let Some(pos) = sessions
            .iter()
            .position(|s| s.len() < min_len || s.is_empty())
        {
            sessions.remove(pos);
            continue;
        }
        return sessions;
    }
}

fn sessions_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..15, 0..8), 0..25)
}

#[test]
fn fixpoint_example() {
    let out = filter_to_fixpoint(
        vec![raw(1, &[1, 2, 1]), raw(2, &[1, 2]), raw(3, &[3, 1])],
        2,
        2,
    );
    let items: Vec<Vec<u64>> = out.iter().map(|s| s.items.clone()).collect();
    assert_eq!(items, vec![vec![1, 2, 1], vec![1, 2]]);
}

#[test]
fn split_boundary_example() {
    let s = |id, day: u64| RawSession {
        session_id: id,
        items: vec![1, 2],
        timestamps: vec![day * MS_PER_DAY, day * MS_PER_DAY + 1],
    };
    let (train, test) = temporal_split(
        &[s(1, 1), s(2, 9)],
        7 * MS_PER_DAY,
        StraddlePolicy::TestIntact,
    )
    .unwrap();
    assert_eq!(train[0].session_id, 1);
    assert_eq!(test[0].session_id, 2);
    assert!(temporal_split(&[s(1, 1), s(2, 9)], 0, StraddlePolicy::TestIntact).is_err());
}

#[test]
fn parse_then_prepare_then_cache_round_trip() {
    let mut csv = String::from("session_id,item_id,timestamp\n");
    for s in 0..60u64 {
        for t in 0..4u64 {
            csv.push_str(&format!("{s},{},{}\n", (s + t) % 9, s * MS_PER_DAY / 4 + t));
        }
    }
    let parsed = parse_reader(Cursor::new(csv), InputFormat::EventCsv, ParseMode::Strict).unwrap();
    assert_eq!(parsed.events.len(), 240);
    let cfg = PrepConfig {
        holdout_ms: 3 * MS_PER_DAY,
        ..PrepConfig::default()
    };
    let ds = prepare(&parsed.events, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_prepared(dir.path(), &ds, &Manifest::of(&ds)).unwrap();
    let (back, manifest) = load_prepared(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(manifest.train_sessions, ds.train.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fixpoint_matches_reference(sessions in sessions_strategy(), min_support in 1usize..4, min_len in 1usize..4) {
        let input: Vec<RawSession> = sessions.iter().enumerate().map(|(i, s)| raw(i as u64, s)).collect();
        let got: Vec<Vec<u64>> = filter_to_fixpoint(input, min_support, min_len)
            .into_iter()
            .map(|s| s.items)
            .collect();
        prop_assert_eq!(got, fixpoint_reference(sessions, min_support, min_len));
    }

    #[test]
    fn fixpoint_is_idempotent_and_satisfies_thresholds(sessions in sessions_strategy(), min_support in 1usize..4) {
        let input: Vec<RawSession> = sessions.iter().enumerate().map(|(i, s)| raw(i as u64, s)).collect();
        let once = filter_to_fixpoint(input, min_support, 2);
        let twice = filter_to_fixpoint(once.clone(), min_support, 2);
        prop_assert_eq!(&once, &twice);
        let mut support: HashMap<u64, usize> = HashMap::new();
        for s in &once {
            prop_assert!(s.len() >= 2);
            prop_assert_eq!(s.items.len(), s.timestamps.len());
            for &i in &s.items {
                *support.entry(i).or_default() += 1;
            }
        }
        prop_assert!(support.values().all(|&c| c >= min_support));
    }

    #[test]
    fn split_partitions_by_last_timestamp(ends in prop::collection::vec(0u64..20, 2..40), holdout in 1u64..10) {
        let sessions: Vec<RawSession> = ends
            .iter()
            .enumerate()
            .map(|(i, &e)| RawSession {
                session_id: i as u64,
                items: vec![1, 2],
                timestamps: vec![e * MS_PER_DAY, e * MS_PER_DAY + 5],
            })
            .collect();
        let max_ts = sessions.iter().map(|s| s.last_timestamp()).max().unwrap();
        let boundary = max_ts - (holdout * MS_PER_DAY).min(max_ts);
        match temporal_split(&sessions, holdout * MS_PER_DAY, StraddlePolicy::TestIntact) {
            Ok((train, test)) => {
                prop_assert_eq!(train.len() + test.len(), sessions.len());
                prop_assert!(train.iter().all(|s| s.last_timestamp() <= boundary));
                prop_assert!(test.iter().all(|s| s.last_timestamp() > boundary));
            }
            Err(_) => {
                let n_test = sessions.iter().filter(|s| s.last_timestamp() > boundary).count();
                prop_assert!(n_test == 0 || n_test == sessions.len());
            }
        }
    }

    #[test]
    fn prepared_test_items_come_from_the_train_catalog(seed in any::<u64>()) {
        let mut events = Vec::new();
        let mut s = seed | 1;
        for sid in 0..80u64 {
            for t in 0..5u64 {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                events.push(Event {
                    session_id: sid,
                    item_id: s % 12,
                    timestamp: sid * MS_PER_DAY / 4 + t,
                    event_type: EventType::Click,
                });
            }
        }
        let mut cfg = PrepConfig {
            holdout_ms: 4 * MS_PER_DAY,
            ..PrepConfig::default()
        };
        cfg.preprocess.min_support = 3;
        if let Ok(ds) = prepare(&events, &cfg) {
            let n = ds.catalog.len() as ItemId;
            prop_assert!(ds.test.iter().all(|s| s.len() >= 2 && s.items.iter().all(|&i| i < n)));
            let mut counts = vec![0u64; ds.catalog.len()];
            for sess in &ds.train {
                for &i in &sess.items {
                    counts[i as usize] += 1;
                }
            }
            prop_assert_eq!(&counts[..], ds.catalog.frequencies());
        }
    }

    #[test]
    fn batches_cover_every_session_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>()) {
        let data = common::random_dataset(20, n, 0, 9, seed);
        let cfg = BatchConfig { batch_size: bs, t_max: 5, pad_to_longest: seed % 2 == 0 };
        let plan = make_batches(&data.train, cfg, Some(seed), 20).unwrap();
        let mut seen: Vec<usize> = (0..plan.len()).flat_map(|i| plan.rows(i).to_vec()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for b in plan.iter() {
            for r in 0..b.size() {
                let full = &data.train[b.session_refs[r]].items;
                let kept = &full[full.len() - b.lengths[r]..];
                prop_assert_eq!(b.row(r), kept);
                prop_assert_eq!(b.lengths[r], full.len().min(5));
            }
            prop_assert_eq!(b.n_valid(), b.lengths.iter().map(|l| l.saturating_sub(1)).sum::<usize>());
        }
    }
}
