//! Helpers shared by the integration tests.
#![allow(dead_code)]

use tron_core::data::{Catalog, ItemId, PreparedDataset, Session};
use tron_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor so that two zero vectors agree.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

pub fn session(id: u64, items: &[ItemId]) -> Session {
    Session {
        session_id: id,
        items: items.to_vec(),
        timestamps: (0..items.len() as u64).map(|t| id * 1000 + t).collect(),
    }
}

fn catalog_for(n_items: usize, sessions: &[Session]) -> Catalog {
    let mut counts = vec![0u64; n_items];
    for s in sessions {
        for &i in &s.items {
            counts[i as usize] += 1;
        }
    }
    Catalog::from_counts(
        counts
            .into_iter()
            .enumerate()
            .map(|(k, c)| (k as u64, c.max(1))),
    )
}

/// Sessions over `n_items` where item `i` is always followed by `i + 1`
/// (mod `n_items`), starting at pseudo-random items.
pub fn cyclic_dataset(
    n_items: usize,
    train: usize,
    test: usize,
    len: usize,
    seed: u64,
) -> PreparedDataset {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut make = |count: usize, offset: u64| -> Vec<Session> {
        (0..count)
            .map(|s| {
                let start = next() as usize % n_items;
                let l = 2 + next() as usize % (len - 1);
                let items: Vec<ItemId> =
                    (0..l).map(|t| ((start + t) % n_items) as ItemId).collect();
                session(offset + s as u64, &items)
            })
            .collect()
    };
    let train = make(train, 0);
    let test = make(test, 1_000_000);
    PreparedDataset {
        catalog: catalog_for(n_items, &train),
        train,
        test,
    }
}

/// Random sessions over `n_items` items.
pub fn random_dataset(
    n_items: usize,
    train: usize,
    test: usize,
    max_len: usize,
    seed: u64,
) -> PreparedDataset {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut make = |count: usize, offset: u64| -> Vec<Session> {
        (0..count)
            .map(|s| {
                let l = 2 + next() as usize % (max_len - 1);
                let items: Vec<ItemId> = (0..l)
                    .map(|_| (next() % n_items as u64) as ItemId)
                    .collect();
                session(offset + s as u64, &items)
            })
            .collect()
    };
    let train = make(train, 0);
    let test = make(test, 1_000_000);
    PreparedDataset {
        catalog: catalog_for(n_items, &train),
        train,
        test,
    }
}
