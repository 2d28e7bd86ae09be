//! The training loop.
//!
//! Batches and their negatives are prepared on a producer thread and handed
//! to the trainer through a bounded channel. All randomness is keyed by
//! `(seed, epoch, batch)`, so the trajectory does not depend on timing.

mod config;
mod optim;
mod step;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{ArchConfig, NegConfig, Preset, TrainConfig};
pub use optim::{Adam, AdamConfig};
pub use step::{loss_and_grads, DrawCounts, NegativeSampler, SampledBatch, StepResult};

use crate::data::{make_batches, PreparedDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_metrics, EvalResult, MetricRow};
use crate::model::{read_checkpoint, write_checkpoint, ModelState};
use crate::rng::{Purpose, StreamKey};
use crate::tensor::Tensor;

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CKPT_DIR: &str = "ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
    pub epochs_per_hour: f64,
    pub batches: usize,
    pub positions: usize,
    pub draws: DrawCounts,
    pub fallback_rows: usize,
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub preset: Option<String>,
    pub parameters: usize,
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn total_draws(&self) -> DrawCounts {
        let mut d = DrawCounts::default();
        for e in &self.epochs {
            d.add(e.draws);
        }
        d
    }

    /// Metric rows for the epochs that were evaluated.
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.epochs
            .iter()
            .filter_map(|e| {
                e.eval.as_ref().map(|r| MetricRow {
                    epoch: e.epoch,
                    recall_at_20: r.recall,
                    mrr_at_20: r.mrr,
                    wall_seconds: e.seconds,
                })
            })
            .collect()
    }
}

/// Owns the model and optimizer across epochs.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a PreparedDataset,
    model: ModelState,
    opt: Adam,
    sampler: NegativeSampler,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a PreparedDataset) -> Result<Self> {
        cfg.validate()?;
        if data.catalog.is_empty() || data.train.is_empty() {
            return Err(Error::EmptyDataset("no training sessions".into()));
        }
        let init_seed = StreamKey::new(cfg.seed, 0, 0).derive_seed(Purpose::Init, 0);
        let model = ModelState::init(cfg.model_config(data.catalog.len()), init_seed)?;
        let shapes: Vec<Vec<usize>> = model
            .named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let opt = Adam::new(cfg.optim.clone(), &shape_refs);
        let sampler = NegativeSampler::new(&cfg.negs, &data.catalog)?;
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            sampler,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: TrainConfig, data: &'a PreparedDataset, path: &Path) -> Result<Self> {
        let mut tr = Self::new(cfg, data)?;
        let ck = read_checkpoint(path)?;
        if ck.model.config != tr.model.config {
            return Err(Error::Checkpoint(format!(
                "checkpoint model {:?} does not match configuration {:?}",
                ck.model.config, tr.model.config
            )));
        }
        let names: Vec<String> = ck.model.named().into_iter().map(|(n, _)| n).collect();
        let find = |key: String| -> Result<Tensor> {
            ck.extra
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))
        };
        tr.opt.m = names
            .iter()
            .map(|n| find(format!("adam.m.{n}")))
            .collect::<Result<_>>()?;
        tr.opt.v = names
            .iter()
            .map(|n| find(format!("adam.v.{n}")))
            .collect::<Result<_>>()?;
        let meta_num = |key: &str| -> Result<u64> {
            ck.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or bad metadata {key}")))
        };
        tr.opt.t = meta_num("adam.t")?;
        tr.epoch = meta_num("epoch")? as usize;
        tr.model = ck.model;
        Ok(tr)
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.model.named().into_iter().map(|(n, _)| n).collect();
        let mut extra: Vec<(String, &Tensor)> = Vec::with_capacity(2 * names.len());
        for (n, m) in names.iter().zip(&self.opt.m) {
            extra.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            extra.push((format!("adam.v.{n}"), v));
        }
        let meta = vec![
            ("epoch".to_string(), self.epoch.to_string()),
            ("adam.t".to_string(), self.opt.t.to_string()),
            ("seed".to_string(), self.cfg.seed.to_string()),
            (
                "preset".to_string(),
                self.cfg.preset.map(|p| p.to_string()).unwrap_or_default(),
            ),
        ];
        write_checkpoint(path, &self.model, &extra, &meta)
    }

    /// Applies one optimizer step for `batch` under `key`.
    pub fn step(&mut self, sampled: &SampledBatch, key: &StreamKey) -> Result<StepResult> {
        let mut drop_rng = key.stream(Purpose::Dropout, 0);
        let res = loss_and_grads(
            &self.model,
            &sampled.batch,
            &sampled.negatives,
            self.cfg.loss,
            self.cfg.negs.topk,
            Some(&mut drop_rng),
        );
        let diverged = |detail: String| Error::Divergence {
            epoch: key.epoch as usize,
            batch: key.batch as usize,
            detail,
        };
        let res = res.map_err(|e| match e {
            Error::Numeric(m) => diverged(m),
            other => other,
        })?;
        if res.rows > 0 {
            self.opt
                .step(self.model.params_mut(), &res.grads)
                .map_err(|e| match e {
                    Error::Numeric(m) => diverged(m),
                    other => other,
                })?;
        }
        Ok(res)
    }

    /// Runs one epoch over the training sessions (without evaluation).
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let epoch = self.epoch + 1;
        let seed = self.cfg.seed;
        let shuffle = StreamKey::new(seed, epoch as u64, 0).derive_seed(Purpose::Shuffle, 0);
        let pad = self.data.catalog.pad_id();
        let plan = make_batches(&self.data.train, self.cfg.batch, Some(shuffle), pad)?;
        let n_batches = plan.len();
        let start = Instant::now();

        let (mut loss_sum, mut positions, mut fallback) = (0.0, 0usize, 0usize);
        let mut draws = DrawCounts::default();
        let cap = self.cfg.prefetch.max(1);
        let sampler = self.sampler.clone();
        thread::scope(|s| -> Result<()> {
            let sampler = &sampler;
            let (tx, rx) = mpsc::sync_channel::<Result<SampledBatch>>(cap);
            let plan = &plan;
            s.spawn(move || {
                for i in 0..n_batches {
                    let key = StreamKey::new(seed, epoch as u64, i as u64);
                    let batch = plan.batch(i);
                    let item = sampler
                        .sample(&batch, &key)
                        .map(|(negatives, fallback_rows)| SampledBatch {
                            index: i,
                            batch,
                            negatives,
                            fallback_rows,
                        });
                    let failed = item.is_err();
                    if tx.send(item).is_err() || failed {
                        break;
                    }
                }
            });
            for item in rx {
                let sampled = item?;
                let key = StreamKey::new(seed, epoch as u64, sampled.index as u64);
                let res = self.step(&sampled, &key)?;
                loss_sum += res.loss;
                positions += res.rows;
                fallback += sampled.fallback_rows;
                draws.add(DrawCounts::of(&sampled.negatives));
            }
            Ok(())
        })?;

        let seconds = start.elapsed().as_secs_f64();
        self.epoch = epoch;
        Ok(EpochReport {
            epoch,
            loss: if n_batches == 0 {
                0.0
            } else {
                loss_sum / n_batches as f64
            },
            seconds,
            epochs_per_hour: if seconds > 0.0 {
                3600.0 / seconds
            } else {
                f64::INFINITY
            },
            batches: n_batches,
            positions,
            draws,
            fallback_rows: fallback,
            eval: None,
        })
    }

    /// Runs the remaining epochs up to `cfg.epochs`, evaluating and writing
    /// outputs as configured. `on_epoch` sees every finished epoch.
    pub fn train(
        &mut self,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<TrainReport> {
        let mut report = TrainReport {
            preset: self.cfg.preset.map(|p| p.to_string()),
            parameters: self.model.num_parameters(),
            epochs: Vec::new(),
        };
        let ckpt_dir = out_dir.map(|d| d.join(CKPT_DIR));
        if let Some(dir) = &ckpt_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.cfg.epochs {
            let snapshot = out_dir.map(|_| self.model.clone());
            let mut ep = match self.run_epoch() {
                Ok(ep) => ep,
                Err(e @ Error::Divergence { .. }) => {
                    if let (Some(dir), Some(model)) = (out_dir, snapshot) {
                        let path = dir.join("divergence.bin");
                        let meta = [("error".to_string(), e.to_string())];
                        // best effort: the divergence itself is the error to report
                        let _ = write_checkpoint(&path, &model, &[], &meta);
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let every = self.cfg.eval_every;
            if every > 0 && ep.epoch % every == 0 && !self.data.test.is_empty() {
                ep.eval = Some(evaluate(&self.model, &self.data.test, &self.cfg.eval)?);
            }
            if let (Some(dir), Some(ck)) = (out_dir, &ckpt_dir) {
                self.save_checkpoint(&ck.join(format!("epoch-{}.bin", ep.epoch)))?;
                report.epochs.push(ep.clone());
                write_report(&report, &dir.join(REPORT_FILE))?;
                let rows = report.metric_rows();
                if !rows.is_empty() {
                    export_metrics(&rows, &dir.join(METRICS_FILE))?;
                }
            } else {
                report.epochs.push(ep.clone());
            }
            on_epoch(&ep);
        }
        if let Some(dir) = out_dir {
            write_report(&report, &dir.join(REPORT_FILE))?;
        }
        Ok(report)
    }
}

pub fn write_report(report: &TrainReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("cannot encode report: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Trains from scratch; `out_dir` receives checkpoints, the report and metrics.
pub fn train(
    cfg: TrainConfig,
    data: &PreparedDataset,
    out_dir: Option<&Path>,
) -> Result<(ModelState, TrainReport)> {
    let mut tr = Trainer::new(cfg, data)?;
    let report = tr.train(out_dir, |_| {})?;
    Ok((tr.into_model(), report))
}

/// Path of the checkpoint for `epoch` under an output directory.
pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CKPT_DIR).join(format!("epoch-{epoch}.bin"))
}
