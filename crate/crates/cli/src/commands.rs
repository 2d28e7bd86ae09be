use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use tron_core::config::RunConfig;
use tron_core::data::{
    load_prepared, parse_events, prepare, save_prepared, InputFormat, Manifest, ParseMode,
};
use tron_core::eval::{evaluate, export_metrics};
use tron_core::model::read_checkpoint;
use tron_core::par;
use tron_core::rng::StreamKey;
use tron_core::sampler::{sample_uniform, BatchDims, Granularity};
use tron_core::train::{read_report, Trainer, REPORT_FILE};

use crate::args::{
    BenchArgs, ConfigArgs, EvalArgs, ExportArgs, Invocation, PrepArgs, TrainArgs, Verb,
};

pub const CONFIG_SNAPSHOT: &str = "config.toml";

pub fn run(inv: Invocation) -> Result<()> {
    let overrides = inv.key_overrides;
    match inv.cli.command {
        Verb::Prep(a) => prep(resolve(&a.cfg, &overrides)?, &a),
        Verb::Train(a) => train(resolve(&a.cfg, &overrides)?, &a),
        Verb::Eval(a) => eval(resolve(&a.cfg, &overrides)?, &a),
        Verb::Bench(a) => bench(resolve(&a.cfg, &overrides)?, &a),
        Verb::Export(a) => {
            resolve(&a.cfg, &overrides)?;
            export(&a)
        }
    }
}

/// Config file, then dedicated flags, then `--<key>` flags, then `--set`.
fn resolve(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("preset", args.preset.clone());
    push("seed", args.seed.map(|v| v.to_string()));
    push("epochs", args.epochs.map(|v| v.to_string()));
    push("loss", args.loss.clone());
    push("eval.k", args.eval_k.map(|v| v.to_string()));
    push("data.min_support", args.min_support.map(|v| v.to_string()));
    push("data.min_len", args.min_len.map(|v| v.to_string()));
    push(
        "data.holdout_days",
        args.holdout_days.map(|v| v.to_string()),
    );
    pairs.extend(overrides.iter().cloned());
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    par::configure_threads(cfg.threads);
    Ok(cfg)
}

fn write_snapshot(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.snapshot()).with_context(|| format!("writing {}", path.display()))
}

fn prep(cfg: RunConfig, a: &PrepArgs) -> Result<()> {
    let format = match &a.format {
        Some(f) => InputFormat::from_str(f)?,
        None => InputFormat::from_path(&a.input).with_context(|| {
            format!(
                "cannot tell the format of {}; pass --format jsonl or csv",
                a.input.display()
            )
        })?,
    };
    let mode = if a.lenient {
        ParseMode::Lenient
    } else {
        ParseMode::Strict
    };
    let start = Instant::now();
    let parsed = parse_events(&a.input, format, mode)?;
    if parsed.skipped > 0 {
        eprintln!("skipped {} malformed records", parsed.skipped);
        for (line, msg) in &parsed.errors {
            eprintln!("  line {line}: {msg}");
        }
    }
    let ds = prepare(&parsed.events, &cfg.prep)?;
    let manifest = Manifest::of(&ds)
        .with("input", a.input.display())
        .with("raw_events", parsed.events.len())
        .with("skipped_records", parsed.skipped);
    save_prepared(&a.output_dir, &ds, &manifest)?;
    write_snapshot(&cfg, &a.output_dir.join(CONFIG_SNAPSHOT))?;
    eprintln!(
        "prepared {} train sessions ({} events), {} test sessions ({} events), {} items in {:.1}s -> {}",
        manifest.train_sessions,
        manifest.train_events,
        manifest.test_sessions,
        manifest.test_events,
        manifest.items,
        start.elapsed().as_secs_f64(),
        a.output_dir.display()
    );
    Ok(())
}

fn train(cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    let (data, _) = load_prepared(&a.data)?;
    let out = a.output_dir.clone().unwrap_or_else(|| {
        let name = cfg
            .train
            .preset
            .map_or_else(|| "custom".to_string(), |p| p.to_string());
        PathBuf::from("runs").join(name)
    });
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_snapshot(&cfg, &out.join(CONFIG_SNAPSHOT))?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(cfg.train.clone(), &data, ckpt)?,
        None => Trainer::new(cfg.train.clone(), &data)?,
    };
    eprintln!(
        "training {} parameters on {} sessions over {} items, epochs {}..={} -> {}",
        trainer.model().num_parameters(),
        data.train.len(),
        data.catalog.len(),
        trainer.epoch() + 1,
        cfg.train.epochs,
        out.display()
    );
    let report = trainer.train(Some(&out), |ep| {
        let mut line = format!(
            "epoch {:>3}  loss {:.5}  {:.1}s ({:.1} epochs/h)  draws {}",
            ep.epoch,
            ep.loss,
            ep.seconds,
            ep.epochs_per_hour,
            ep.draws.total()
        );
        if let Some(r) = &ep.eval {
            line.push_str(&format!(
                "  recall@{k} {:.4}  mrr@{k} {:.4}",
                r.recall,
                r.mrr,
                k = r.k
            ));
        }
        eprintln!("{line}");
    })?;
    eprintln!(
        "finished {} epochs; report in {}",
        report.epochs.len(),
        out.join(REPORT_FILE).display()
    );
    Ok(())
}

fn eval(cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let (data, _) = load_prepared(&a.data)?;
    if ck.model.config.n_items != data.catalog.len() {
        bail!(
            "checkpoint has {} items but the dataset has {}",
            ck.model.config.n_items,
            data.catalog.len()
        );
    }
    let result = evaluate(&ck.model, &data.test, &cfg.train.eval)?;
    let out = match &a.output_dir {
        Some(d) => d.clone(),
        None => a
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = a
        .checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let path = out.join(format!("{stem}.eval.json"));
    fs::write(&path, serde_json::to_string_pretty(&result)?)
        .with_context(|| format!("writing {}", path.display()))?;
    write_snapshot(&cfg, &out.join(format!("{stem}.eval.toml")))?;
    println!(
        "recall@{k} {:.4}  mrr@{k} {:.4}  ({} transitions, {} sessions)",
        result.recall,
        result.mrr,
        result.n_transitions,
        result.n_sessions,
        k = result.k
    );
    eprintln!("wrote {}", path.display());
    Ok(())
}

struct BenchRow {
    granularity: Granularity,
    negs: usize,
    draws: u64,
    batches_per_second: f64,
}

fn bench(cfg: RunConfig, a: &BenchArgs) -> Result<()> {
    let (b, t) = (cfg.train.batch.batch_size, cfg.train.batch.t_max);
    let dims = BatchDims {
        sessions: b,
        width: t,
    };
    let grans = a
        .granularity
        .iter()
        .map(|g| Granularity::from_str(g))
        .collect::<tron_core::Result<Vec<_>>>()?;
    if a.items == 0 {
        bail!("--items must be positive");
    }
    let mut rows = Vec::new();
    for &negs in &a.negs {
        for &g in &grans {
            eprintln!("sampling {negs} {g} negatives for a {b}x{t} batch");
            let mut reps = 0u64;
            let mut draws = 0;
            let start = Instant::now();
            while reps == 0 || start.elapsed().as_secs_f64() < a.min_seconds {
                let key = StreamKey::new(cfg.train.seed, 0, reps);
                let set = sample_uniform(a.items, g, negs, dims, &key)?;
                draws = set.draws();
                std::hint::black_box(set);
                reps += 1;
            }
            rows.push(BenchRow {
                granularity: g,
                negs,
                draws,
                batches_per_second: reps as f64 / start.elapsed().as_secs_f64(),
            });
        }
    }
    println!(
        "{:<12} {:>10} {:>16} {:>14} {:>16}",
        "granularity", "negatives", "draws/batch", "batches/s", "draws/s"
    );
    for r in &rows {
        println!(
            "{:<12} {:>10} {:>16} {:>14.2} {:>16.3e}",
            r.granularity.name(),
            r.negs,
            r.draws,
            r.batches_per_second,
            r.batches_per_second * r.draws as f64
        );
    }
    if let Some(dir) = &a.output_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut csv = String::from(
            "granularity,negatives,batch_size,max_len,draws_per_batch,batches_per_second\n",
        );
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{b},{t},{},{}\n",
                r.granularity.name(),
                r.negs,
                r.draws,
                r.batches_per_second
            ));
        }
        fs::write(dir.join("bench.csv"), csv).context("writing bench.csv")?;
        write_snapshot(&cfg, &dir.join(CONFIG_SNAPSHOT))?;
    }
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let report = read_report(&a.run.join(REPORT_FILE))?;
    let rows = report.metric_rows();
    if rows.is_empty() {
        bail!("{} has no evaluated epochs", a.run.display());
    }
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| a.run.join("metrics.csv"));
    export_metrics(&rows, &out)?;
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
