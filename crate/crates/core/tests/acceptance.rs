//! Acceptance suite: runs every criterion and prints one status line each.
//!
//! Exits nonzero if any runnable criterion fails. Criteria that need data
//! which is not present print BLOCKED with the reason instead of running.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use tron_core::data::{
    parse_events, prepare, InputFormat, ItemId, ParseMode, PrepConfig, SessionBatch,
};
use tron_core::eval::{evaluate, pessimistic_rank, read_metrics, EvalConfig};
use tron_core::loss::{self, LossKind};
use tron_core::model::{score_all, ModelConfig, ModelState};
use tron_core::rng::StreamKey;
use tron_core::sampler::{
    concat_negatives, sample_frequency, sample_inbatch, sample_uniform, topk_filter, topk_select,
    AliasTable, BatchDims, Granularity, InBatchPool, NegativeSet,
};
use tron_core::tensor::{kernels, Graph, Tensor};
use tron_core::train::{loss_and_grads, train, NegativeSampler, Preset, TrainConfig, Trainer};

enum Status {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn loss_grad_error(kind: LossKind, pos: f64, negs: &[f64]) -> f64 {
    let mut x = vec![pos];
    x.extend_from_slice(negs);
    let (dp, dn) = loss::row_grad(kind, pos, negs);
    let mut analytic = vec![dp];
    analytic.extend(dn);
    let numeric = common::fd_gradient(&x, common::FD_STEP, |v| loss::row_loss(kind, v[0], &v[1..]));
    common::rel_error(&analytic, &numeric)
}

fn toy_model_error() -> Result<f64, String> {
    let mut cfg = ModelConfig::new(20);
    cfg.hidden_dim = 8;
    cfg.num_layers = 1;
    cfg.max_len = 6;
    let model = ModelState::init(cfg, 5).map_err(|e| e.to_string())?;
    let data = common::random_dataset(20, 4, 0, 6, 3);
    let rows: Vec<usize> = (0..4).collect();
    let batch = SessionBatch::build(&data.train, &rows, 6, false, 20).map_err(|e| e.to_string())?;
    let key = StreamKey::new(1, 1, 0);
    let dims = BatchDims::of(&batch);
    let negs = concat_negatives(
        sample_inbatch(
            &batch,
            Granularity::Sessionwise,
            3,
            InBatchPool::Multiset,
            &key,
        )
        .unwrap_or_default(),
        sample_uniform(20, Granularity::Batchwise, 5, dims, &key).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for kind in [
        LossKind::Bce,
        LossKind::BprMax { lambda: 0.5 },
        LossKind::Ssm,
    ] {
        let step =
            loss_and_grads(&model, &batch, &negs, kind, 0, None).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = step.grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let flat: Vec<f64> = model
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let numeric = common::fd_gradient(&flat, common::FD_STEP, |v| {
            let mut m = model.clone();
            let mut off = 0;
            for p in m.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
            loss_and_grads(&m, &batch, &negs, kind, 0, None)
                .unwrap()
                .loss
        });
        worst = worst.max(common::rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_loss: f64 = 0.0;
    for seed in 0..50u64 {
        let t = common::tensor(&[6], seed);
        let (pos, negs) = (
            t.data()[0] * 3.0,
            t.data()[1..].iter().map(|v| v * 3.0).collect::<Vec<_>>(),
        );
        for kind in [
            LossKind::Bce,
            LossKind::BprMax { lambda: 0.5 },
            LossKind::Ssm,
        ] {
            worst_loss = worst_loss.max(loss_grad_error(kind, pos, &negs));
        }
    }
    let worst_model = toy_model_error()?;
    check(worst_loss < 1e-4, || {
        format!("loss gradient relative error {worst_loss:.2e} ≥ 1e-4")
    })?;
    check(worst_model < 1e-3, || {
        format!("end-to-end relative error {worst_model:.2e} ≥ 1e-3")
    })?;
    check(start.elapsed().as_secs() < 60, || {
        "gradient suite took over a minute".into()
    })?;
    Ok(format!(
        "losses max rel err {worst_loss:.1e} (< 1e-4), end-to-end d=8 L=1 |I|=20 b=4 T=6 max rel err {worst_model:.1e} (< 1e-3)"
    ))
}

// ---------------------------------------------------------------- 2, 3

fn random_batch(b: usize, t: usize, n_items: usize, seed: u64) -> SessionBatch {
    let data = common::random_dataset(n_items, b, 0, t, seed);
    let rows: Vec<usize> = (0..b).collect();
    SessionBatch::build(&data.train, &rows, t, false, n_items as ItemId).unwrap()
}

#[derive(Debug, Clone, Copy)]
enum Src {
    Uniform,
    Frequency,
    InBatch,
    Mixed,
}

fn sample_source(
    src: Src,
    g: Granularity,
    batch: &SessionBatch,
    n: usize,
    k: usize,
    m: usize,
    key: &StreamKey,
) -> tron_core::Result<NegativeSet> {
    let dims = BatchDims::of(batch);
    let alias = AliasTable::new(&(1..=n as u64).collect::<Vec<_>>()).unwrap();
    match src {
        Src::Uniform => sample_uniform(n, g, k + m, dims, key),
        Src::Frequency => sample_frequency(&alias, g, k + m, dims, key),
        Src::InBatch => sample_inbatch(batch, g, k + m, InBatchPool::Multiset, key),
        Src::Mixed => concat_negatives(
            sample_frequency(&alias, g, m, dims, key)?,
            sample_uniform(n, g, k, dims, key)?,
        ),
    }
}

fn criterion_2() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (1usize..12, 2usize..10, 1usize..20, 1usize..20, any::<u64>());
    let combos = std::sync::atomic::AtomicUsize::new(0);
    runner
        .run(&strategy, |(b, t, k, m, seed)| {
            let batch = random_batch(b + 1, t, 40, seed);
            let (b, t) = (batch.size(), batch.width);
            let key = StreamKey::new(seed, 0, 0);
            for g in Granularity::ALL {
                for src in [Src::Uniform, Src::Frequency, Src::InBatch, Src::Mixed] {
                    let want = match g {
                        Granularity::Elementwise => [b, t, k + m],
                        Granularity::Sessionwise => [b, 1, k + m],
                        Granularity::Batchwise => [1, 1, k + m],
                    };
                    match (sample_source(src, g, &batch, 40, k, m, &key), src, g) {
                        (
                            Err(tron_core::Error::Config(_)),
                            Src::InBatch,
                            Granularity::Batchwise,
                        ) => {}
                        (Err(tron_core::Error::PoolExhausted { .. }), Src::InBatch, _) => {}
                        (Ok(s), _, _) => {
                            prop_assert_eq!(s.shape(), want, "{:?} {:?}", src, g);
                            let (shape, ids) = s.to_dense();
                            prop_assert_eq!(ids.len(), shape.iter().product::<usize>());
                            prop_assert!(ids.iter().all(|&i| (i as usize) < 40));
                        }
                        (Err(e), _, _) => prop_assert!(false, "{:?} {:?}: {}", src, g, e),
                    }
                    combos.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "1000 cases × 12 combinations ({} checks); in-batch × batchwise is a config error by design",
        combos.into_inner()
    ))
}

fn criterion_3() -> Outcome {
    let mut drawn = 0usize;
    let mut exhausted = 0usize;
    for i in 0..10_000u64 {
        let b = 2 + (i % 14) as usize;
        let batch = random_batch(b, 2 + (i % 9) as usize, 30, i);
        let g = if i % 2 == 0 {
            Granularity::Sessionwise
        } else {
            Granularity::Elementwise
        };
        let pool = if i % 3 == 0 {
            InBatchPool::Distinct
        } else {
            InBatchPool::Multiset
        };
        let key = StreamKey::new(i, 0, 0);
        let negs = match sample_inbatch(&batch, g, 1 + (i % 16) as usize, pool, &key) {
            Ok(n) => n,
            Err(tron_core::Error::PoolExhausted { .. }) => {
                exhausted += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        let [_, t, _] = negs.shape();
        for r in 0..batch.size() {
            for tt in 0..t {
                for id in negs.ids_at(r, tt) {
                    drawn += 1;
                    check(!batch.is_positive(r, id), || {
                        format!("batch {i}: row {r} received its own item {id}")
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "10000 batches, {drawn} sampled ids, 0 collisions with the owning session ({exhausted} batches hit pool exhaustion)"
    ))
}

// ---------------------------------------------------------------- 4

fn uniform_p_value(n: usize, draws: usize, seed: u64) -> Result<(f64, f64), String> {
    let dims = BatchDims {
        sessions: 1,
        width: 1,
    };
    let key = StreamKey::new(seed, 0, 0);
    let u =
        sample_uniform(n, Granularity::Batchwise, draws, dims, &key).map_err(|e| e.to_string())?;
    let mut counts = vec![0f64; n];
    for id in u.to_dense().1 {
        counts[id as usize] += 1.0;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    Ok((
        chi2,
        1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2),
    ))
}

fn criterion_4() -> Outcome {
    let dims = BatchDims {
        sessions: 1,
        width: 1,
    };
    let key = StreamKey::new(0, 0, 0);
    let n = 50;
    let (chi2, p) = uniform_p_value(n, 100_000, 0)?;
    // a level-0.01 test should reject about 1% of seeds, not more
    let mut rejected = 0;
    for seed in 1..=200 {
        if uniform_p_value(n, 100_000, seed)?.1 <= 0.01 {
            rejected += 1;
        }
    }

    let weights: Vec<u64> = (0..n as u64).map(|i| 1 + (i * 37 % 11) * (i % 5)).collect();
    let total: u64 = weights.iter().sum();
    let table = AliasTable::new(&weights).map_err(|e| e.to_string())?;
    let f = sample_frequency(&table, Granularity::Batchwise, 100_000, dims, &key)
        .map_err(|e| e.to_string())?;
    let mut fc = vec![0f64; n];
    for id in f.to_dense().1 {
        fc[id as usize] += 1.0;
    }
    let tv: f64 = 0.5
        * fc.iter()
            .zip(&weights)
            .map(|(c, &w)| (c / 100_000.0 - w as f64 / total as f64).abs())
            .sum::<f64>();
    check(p > 0.01, || format!("uniform chi-square p = {p:.4} ≤ 0.01"))?;
    check(rejected <= 8, || {
        format!("{rejected}/200 seeds rejected at 0.01")
    })?;
    check(tv < 0.02, || {
        format!("frequency TV distance {tv:.4} ≥ 0.02")
    })?;
    Ok(format!(
        "uniform χ²={chi2:.1} (49 dof) p={p:.3} > 0.01, {rejected}/200 other seeds reject at 0.01; frequency TV={tv:.4} < 0.02"
    ))
}

// ---------------------------------------------------------------- 5

fn sort_oracle(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn criterion_5() -> Outcome {
    let mut ties = 0;
    let mut grad_checks = 0;
    let mut state = 0x5eed_u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for case in 0..10_000 {
        let n = 1 + (next() % 4096) as usize;
        let k = (next() % (n as u64 + 1)) as usize;
        let tied = case % 3 == 0;
        let levels = 1 + next() % 8;
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    (next() % levels) as f64
                } else {
                    (next() >> 11) as f64 / (1u64 << 53) as f64
                }
            })
            .collect();
        if tied {
            ties += 1;
        }
        let t = Tensor::new(vec![n], v.clone()).unwrap();
        let sel = topk_filter(&t, k).map_err(|e| e.to_string())?;
        let want = sort_oracle(&v, k);
        check(sel.indices == want, || {
            format!("case {case}: n={n} k={k} differs from sort oracle")
        })?;
        if case % 20 == 0 && k > 0 {
            grad_checks += 1;
            let mut g = Graph::new();
            let x = g.variable(t.clone());
            let (_, picked) = topk_select(&mut g, x, k).map_err(|e| e.to_string())?;
            let w = g.constant(common::tensor(&[1, k], case as u64));
            let picked = g.reshape(picked, &[1, k]).map_err(|e| e.to_string())?;
            let prod = g.mul(picked, w).map_err(|e| e.to_string())?;
            let s = g.sum(prod);
            g.backward(s).map_err(|e| e.to_string())?;
            let grad = g.grad(x).unwrap().data();
            let wv = common::tensor(&[1, k], case as u64);
            for (j, &gj) in grad.iter().enumerate() {
                match want.iter().position(|&w| w == j) {
                    Some(p) => check(gj == wv.data()[p], || {
                        format!("case {case}: selected grad mismatch")
                    })?,
                    None => check(gj == 0.0, || {
                        format!("case {case}: unselected index {j} got gradient {gj}")
                    })?,
                }
            }
        }
    }
    Ok(format!(
        "10000 vectors (N ≤ 4096, {ties} with ties) equal the sort oracle; {grad_checks} backward checks give exactly 0 to unselected entries"
    ))
}

// ---------------------------------------------------------------- 6

fn brute_force(
    model: &ModelState,
    sessions: &[tron_core::data::Session],
    k: usize,
) -> (f64, f64, usize) {
    let t_max = model.config.max_len;
    let n = model.config.n_items;
    let d = model.config.hidden_dim;
    let (mut hits, mut rr, mut count) = (0usize, 0.0, 0usize);
    for s in sessions {
        for t in 1..s.items.len() {
            let prefix = &s.items[t.saturating_sub(t_max)..t];
            let h = model.hidden(prefix, 1, prefix.len()).unwrap();
            let h = h.row(prefix.len() - 1);
            let scores: Vec<f64> = (0..n)
                .map(|j| kernels::dot(h, &model.item_emb.data()[j * d..(j + 1) * d]))
                .collect();
            let target = s.items[t] as usize;
            // sort all items; the target goes after every item with an equal score
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then((a == target).cmp(&(b == target)))
            });
            let rank = 1 + order.iter().position(|&j| j == target).unwrap();
            count += 1;
            if rank <= k {
                hits += 1;
                rr += 1.0 / rank as f64;
            }
        }
    }
    (hits as f64 / count as f64, rr / count as f64, count)
}

fn criterion_6() -> Outcome {
    let mut checked = 0;
    for seed in 0..6u64 {
        let n = 20 + (seed as usize * 16) % 81;
        let data = common::random_dataset(n, 10, 10 + seed as usize * 8, 14, seed + 100);
        let mut cfg = ModelConfig::new(n);
        cfg.hidden_dim = 8;
        cfg.num_heads = 2;
        cfg.max_len = 8;
        let mut model = ModelState::init(cfg, seed).unwrap();
        if seed == 5 {
            // constant scores: every transition is a tie for the whole catalog
            model.item_emb.data_mut().fill(0.5);
        }
        let (recall, mrr, count) = brute_force(&model, &data.test, 20);
        for chunk in [1, 7, n, 4096] {
            let r = evaluate(
                &model,
                &data.test,
                &EvalConfig {
                    chunk,
                    batch_size: 3,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            check(
                r.recall == recall && r.mrr == mrr && r.n_transitions == count,
                || {
                    format!(
                        "seed {seed} chunk {chunk}: eval ({}, {}) vs brute force ({recall}, {mrr})",
                        r.recall, r.mrr
                    )
                },
            )?;
            checked += 1;
        }
        let h = model.hidden(&data.test[0].items[..2], 1, 2).unwrap();
        let a = score_all(&model, &h, n).unwrap();
        let b = score_all(&model, &h, 3).unwrap();
        check(a == b, || "chunked score_all differs".into())?;
        let row = a.row(1);
        check(pessimistic_rank(row, 0) >= 1, || "rank".into())?;
    }
    Ok(format!("{checked} evaluations (6 toy models, |I| ≤ 100, ≤ 50 sessions, chunk ∈ {{1,7,|I|,4096}}) equal brute force exactly"))
}

// ---------------------------------------------------------------- 7

fn cyclic_config() -> TrainConfig {
    let mut cfg = TrainConfig::preset(Preset::TronXl);
    cfg.negs.uniform_count = 64;
    cfg.negs.topk = 16;
    cfg.arch.hidden_dim = 32;
    cfg.batch.t_max = 10;
    cfg.epochs = 20;
    cfg.eval_every = 0;
    cfg
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let data = common::cyclic_dataset(100, 2048, 200, 10, 7);
    let mut tr = Trainer::new(cyclic_config(), &data).map_err(|e| e.to_string())?;
    let ev = EvalConfig {
        k: 1,
        ..Default::default()
    };
    let mut curve = Vec::new();
    for _ in 0..20 {
        tr.run_epoch().map_err(|e| e.to_string())?;
        let r = evaluate(tr.model(), &data.test, &ev).map_err(|e| e.to_string())?;
        curve.push(r.recall);
        if r.recall >= 0.95 {
            check(start.elapsed().as_secs() < 600, || {
                "took over 10 minutes".into()
            })?;
            return Ok(format!(
                "Recall@1 = {:.4} after epoch {} (tron-xl with 64 batchwise uniform + 127 in-batch, top-16, d=32)",
                r.recall,
                curve.len()
            ));
        }
    }
    Err(format!(
        "Recall@1 never reached 0.95 in 20 epochs: {curve:.3?}"
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Status {
    let Some(path) = std::env::var_os("TRON_DIGINETICA").map(PathBuf::from) else {
        return Status::Blocked(
            "Diginetica is not available offline; set TRON_DIGINETICA to a session_id,item_id,timestamp CSV or session JSON-lines file to run".into(),
        );
    };
    match directional(&path) {
        Ok(s) => Status::Pass(s),
        Err(s) => Status::Fail(s),
    }
}

fn directional(path: &std::path::Path) -> Outcome {
    let fraction: f64 = std::env::var("TRON_DIGINETICA_FRACTION")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.1);
    let epochs: usize = std::env::var("TRON_DIGINETICA_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(10);
    let format = InputFormat::from_path(path).ok_or("unrecognised input extension")?;
    let parsed = parse_events(path, format, ParseMode::Lenient).map_err(|e| e.to_string())?;
    let prep = PrepConfig {
        train_fraction: fraction,
        ..PrepConfig::default()
    };
    let data = prepare(&parsed.events, &prep).map_err(|e| e.to_string())?;
    let run = |p: Preset, topk: Option<usize>| -> Result<f64, String> {
        let mut cfg = TrainConfig::preset(p);
        if let Some(k) = topk {
            cfg.negs.topk = k;
        }
        cfg.epochs = epochs;
        cfg.eval_every = 0;
        let (model, _) = train(cfg.clone(), &data, None).map_err(|e| e.to_string())?;
        Ok(evaluate(&model, &data.test, &cfg.eval)
            .map_err(|e| e.to_string())?
            .recall)
    };
    let bce = run(Preset::SasrecLNegs, None)?;
    let ssm = run(Preset::SasrecSsm, None)?;
    let full = run(Preset::TronL, Some(0))?;
    let top = run(Preset::TronL, None)?;
    check(ssm > bce, || {
        format!("ssm R@20 {ssm:.4} not above bce {bce:.4}")
    })?;
    check(top >= 0.99 * full, || {
        format!("top-k R@20 {top:.4} below 99% of {full:.4}")
    })?;
    Ok(format!(
        "R@20 bce {bce:.4} < ssm {ssm:.4}; tron-l top-100 {top:.4} vs all negatives {full:.4}"
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let (b, t, km) = (128, 50, 8192);
    let dims = BatchDims {
        sessions: b,
        width: t,
    };
    let n_items = 43_000;
    let key = StreamKey::new(9, 1, 0);
    let bw = sample_uniform(n_items, Granularity::Batchwise, km, dims, &key)
        .map_err(|e| e.to_string())?;
    let ew = sample_uniform(n_items, Granularity::Elementwise, km, dims, &key)
        .map_err(|e| e.to_string())?;
    check(bw.draws() == km as u64, || {
        format!("batchwise drew {} times", bw.draws())
    })?;
    check(ew.draws() == (b * t * km) as u64, || {
        format!("elementwise drew {} times", ew.draws())
    })?;

    // the negative sets of full presets follow the same law
    let data = common::random_dataset(1000, 128, 0, 50, 1);
    let rows: Vec<usize> = (0..128).collect();
    let batch = SessionBatch::build(&data.train, &rows, 50, false, 1000).unwrap();
    let sampler =
        NegativeSampler::new(&Preset::TronXl.negs(), &data.catalog).map_err(|e| e.to_string())?;
    let (negs, _) = sampler.sample(&batch, &key).map_err(|e| e.to_string())?;
    let uniform_draws = tron_core::train::DrawCounts::of(&negs).uniform;
    check(uniform_draws == 16384, || {
        format!("tron-xl drew {uniform_draws} uniform negatives per batch")
    })?;

    let time = |g: Granularity, reps: usize| -> f64 {
        let start = Instant::now();
        for r in 0..reps {
            let k = StreamKey::new(9, 2, r as u64);
            std::hint::black_box(sample_uniform(n_items, g, km, dims, &k).unwrap());
        }
        reps as f64 / start.elapsed().as_secs_f64()
    };
    let e_rate = time(Granularity::Elementwise, 3);
    let b_rate = time(Granularity::Batchwise, 300);
    let speedup = b_rate / e_rate;
    check(speedup >= 10.0, || {
        format!("batchwise only {speedup:.1}× faster")
    })?;
    Ok(format!(
        "draws per batch: batchwise {} = k+m, elementwise {} = b·T·(k+m), tron-xl 16384 uniform; batchwise {b_rate:.0} vs elementwise {e_rate:.2} negative sets/s ({speedup:.0}×)",
        bw.draws(),
        ew.draws()
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let data = common::random_dataset(60, 300, 40, 12, 10);
    let mut cfg = TrainConfig::preset(Preset::TronL);
    cfg.negs.uniform_count = 40;
    cfg.negs.inbatch_count = 8;
    cfg.negs.topk = 10;
    cfg.arch.hidden_dim = 16;
    cfg.arch.dropout = 0.1;
    cfg.batch.t_max = 12;
    cfg.batch.batch_size = 32;
    cfg.epochs = 2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for d in &dirs {
        let (_, r) = train(cfg.clone(), &data, Some(d.path())).map_err(|e| e.to_string())?;
        reports.push(r);
    }
    let (l0, l1) = (reports[0].epochs[0].loss, reports[1].epochs[0].loss);
    check((l0 - l1).abs() <= 1e-12, || {
        format!("epoch-1 losses {l0} vs {l1}")
    })?;
    let m: Vec<_> = dirs
        .iter()
        .map(|d| read_metrics(&d.path().join("metrics.csv")).unwrap())
        .collect();
    let strip = |rows: &Vec<tron_core::eval::MetricRow>| {
        rows.iter()
            .map(|r| (r.epoch, r.recall_at_20.to_bits(), r.mrr_at_20.to_bits()))
            .collect::<Vec<_>>()
    };
    check(strip(&m[0]) == strip(&m[1]), || "metrics differ".into())?;
    let ck: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(d.path().join("ckpt/epoch-2.bin")).unwrap())
        .collect();
    check(ck[0] == ck[1], || "final checkpoints differ".into())?;
    Ok(format!(
        "epoch-1 loss {l0:.15} in both runs; metrics rows identical except wall_seconds; final checkpoints byte-identical"
    ))
}

fn main() {
    // cargo passes libtest flags such as --list; there is nothing to list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    type Criterion = (u8, &'static str, Box<dyn Fn() -> Status>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient suite", Box::new(|| wrap(criterion_1()))),
        (2, "sampler shape law", Box::new(|| wrap(criterion_2()))),
        (3, "in-batch exclusion", Box::new(|| wrap(criterion_3()))),
        (4, "statistical laws", Box::new(|| wrap(criterion_4()))),
        (5, "top-k oracle", Box::new(|| wrap(criterion_5()))),
        (
            6,
            "exhaustive-eval oracle",
            Box::new(|| wrap(criterion_6())),
        ),
        (7, "learnability sanity", Box::new(|| wrap(criterion_7()))),
        (8, "directional reproduction", Box::new(criterion_8)),
        (9, "draw-count/speed law", Box::new(|| wrap(criterion_9()))),
        (10, "determinism", Box::new(|| wrap(criterion_10()))),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let status = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match status {
            Status::Pass(d) => ("PASS", d),
            Status::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Status::Blocked(d) => ("BLOCKED", d),
        };
        println!("criterion {id:>2} {name}: {tag} [{secs:.1}s] {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn wrap(o: Outcome) -> Status {
    match o {
        Ok(s) => Status::Pass(s),
        Err(s) => Status::Fail(s),
    }
}
