mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use tron_core::data::{ItemId, SessionBatch};
use tron_core::loss::LossKind;
use tron_core::model::{
    score, score_all, score_all_topk, Activation, ModelConfig, ModelState, NormPlacement,
};
use tron_core::rng::StreamKey;
use tron_core::sampler::{sample_uniform, topk_row, BatchDims, Granularity};
use tron_core::tensor::kernels;
use tron_core::train::loss_and_grads;

fn model(
    n: usize,
    d: usize,
    heads: usize,
    t: usize,
    norm: NormPlacement,
    act: Activation,
    seed: u64,
) -> ModelState {
    let mut cfg = ModelConfig::new(n);
    cfg.hidden_dim = d;
    cfg.num_layers = 2;
    cfg.num_heads = heads;
    cfg.max_len = t;
    cfg.norm = norm;
    cfg.activation = act;
    ModelState::init(cfg, seed).unwrap()
}

fn variant() -> impl Strategy<Value = (NormPlacement, Activation)> {
    (
        prop_oneof![Just(NormPlacement::Post), Just(NormPlacement::Pre)],
        prop_oneof![Just(Activation::Gelu), Just(Activation::Relu)],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn future_items_do_not_change_the_past(
        (norm, act) in variant(),
        ids in prop::collection::vec(0u32..30, 2..9),
        cut in any::<prop::sample::Index>(),
        replacement in 0u32..29,
        seed in 0u64..100,
    ) {
        let t = ids.len();
        let m = model(30, 8, 2, 8, norm, act, seed);
        let cut = cut.index(t - 1) + 1;
        let mut changed = ids.clone();
        for v in &mut changed[cut..] {
            *v = (*v + replacement + 1) % 30;
        }
        let a = m.hidden(&ids, 1, t).unwrap();
        let b = m.hidden(&changed, 1, t).unwrap();
        for i in 0..cut {
            prop_assert_eq!(a.row(i), b.row(i));
        }
        prop_assert_ne!(a.row(t - 1), b.row(t - 1));
    }

    #[test]
    fn padding_leaves_real_positions_unchanged(
        ids in prop::collection::vec(0u32..30, 1..6),
        extra in 1usize..4,
        seed in 0u64..100,
    ) {
        let m = model(30, 8, 1, 10, NormPlacement::Post, Activation::Gelu, seed);
        let t = ids.len();
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat_n(30 as ItemId, extra));
        let a = m.hidden(&ids, 1, t).unwrap();
        let b = m.hidden(&padded, 1, t + extra).unwrap();
        for i in 0..t {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn scores_use_the_tied_item_embeddings(seed in 0u64..1000, g in prop::sample::select(Granularity::ALL.to_vec())) {
        let m = model(25, 8, 2, 5, NormPlacement::Post, Activation::Gelu, seed);
        let ids: Vec<ItemId> = (0..10).map(|i| ((i * 7 + seed) % 25) as ItemId).collect();
        let h = m.hidden(&ids, 2, 5).unwrap();
        let negs = sample_uniform(25, g, 6, BatchDims { sessions: 2, width: 5 }, &StreamKey::new(seed, 0, 0)).unwrap();
        let s = score(&m, &h, 2, 5, &negs).unwrap();
        for r in 0..2 {
            for t in 0..5 {
                for (j, id) in negs.ids_at(r, t).into_iter().enumerate() {
                    let e = &m.item_emb.data()[id as usize * 8..(id as usize + 1) * 8];
                    prop_assert_eq!(s.data()[(r * 5 + t) * 6 + j], kernels::dot(h.row(r * 5 + t), e));
                }
            }
        }
    }

    #[test]
    fn chunked_scoring_is_exact(seed in 0u64..1000, chunk in 1usize..50, k in 1usize..50) {
        let m = model(40, 8, 1, 4, NormPlacement::Pre, Activation::Relu, seed);
        let ids: Vec<ItemId> = (0..8).map(|i| ((i * 3 + seed) % 40) as ItemId).collect();
        let h = m.hidden(&ids, 2, 4).unwrap();
        let full = score_all(&m, &h, 4096).unwrap();
        prop_assert_eq!(&score_all(&m, &h, chunk).unwrap(), &full);
        let top = score_all_topk(&m, &h, k, chunk).unwrap();
        for r in 0..8 {
            let want: Vec<ItemId> = topk_row(full.row(r), k).into_iter().map(|i| i as ItemId).collect();
            prop_assert_eq!(top.row(r), &want[..]);
        }
    }
}

fn toy_batch(n: usize, seed: u64) -> SessionBatch {
    let data = common::random_dataset(n, 3, 0, 6, seed);
    SessionBatch::build(&data.train, &[0, 1, 2], 6, false, n as ItemId).unwrap()
}

#[test]
fn topk_gradient_matches_finite_differences() {
    let m = model(15, 4, 1, 6, NormPlacement::Post, Activation::Gelu, 11);
    let batch = toy_batch(15, 4);
    let negs = sample_uniform(
        15,
        Granularity::Batchwise,
        10,
        BatchDims::of(&batch),
        &StreamKey::new(2, 0, 0),
    )
    .unwrap();
    for kind in [LossKind::Ssm, LossKind::Bce] {
        let step = loss_and_grads(&m, &batch, &negs, kind, 3, None).unwrap();
        let analytic: Vec<f64> = step.grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let flat: Vec<f64> = m
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let numeric = common::fd_gradient(&flat, 1e-6, |v| {
            let mut c = m.clone();
            let mut off = 0;
            for p in c.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
            loss_and_grads(&c, &batch, &negs, kind, 3, None)
                .unwrap()
                .loss
        });
        let err = common::rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "{kind:?}: {err:.2e}");
    }
}

#[test]
fn unselected_negatives_get_no_embedding_gradient() {
    let m = model(60, 8, 2, 6, NormPlacement::Post, Activation::Gelu, 3);
    let batch = toy_batch(60, 9);
    let negs = sample_uniform(
        60,
        Granularity::Batchwise,
        40,
        BatchDims::of(&batch),
        &StreamKey::new(5, 0, 0),
    )
    .unwrap();
    let k = 4;
    let step = loss_and_grads(&m, &batch, &negs, LossKind::Ssm, k, None).unwrap();
    let h = m
        .hidden(&batch.item_ids, batch.size(), batch.width)
        .unwrap();
    let s = score(&m, &h, batch.size(), batch.width, &negs).unwrap();
    let mut allowed: HashSet<usize> = batch.item_ids.iter().map(|&i| i as usize).collect();
    allowed.extend(batch.targets.iter().map(|&i| i as usize));
    let ids = negs.ids_at(0, 0);
    for p in batch.valid_positions() {
        for j in topk_row(s.row(p), k) {
            allowed.insert(ids[j] as usize);
        }
    }
    let grad = &step.grads[0];
    for row in 0..=60 {
        if !allowed.contains(&row) {
            assert!(
                grad.row(row).iter().all(|&v| v == 0.0),
                "item {row} received gradient"
            );
        }
    }
    assert!(
        grad.row(60).iter().all(|&v| v == 0.0),
        "padding row received gradient"
    );
}
