//! Trains configs on demand, at most once per config hash.
//!
//! Finished runs are kept in memory and, when a store directory is set, as
//! checkpoints under `<store>/<hash>/` so later invocations can reuse them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::results::ResultRow;
use crate::harness::{evaluate, train_with, EpochLog, ExperimentConfig};
use crate::model::{account, load_checkpoint, save_checkpoint, InferMode, Model};

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub hash: String,
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub wall_s: f64,
}

#[derive(Serialize, Deserialize)]
struct RunInfo {
    hash: String,
    config: String,
    best_epoch: usize,
    best_val_iou: f64,
    log: Vec<EpochLog>,
    steps: u64,
    wall_s: f64,
}

impl RunRecord {
    /// Test-split row for `mode`, evaluated with deterministic masks.
    pub fn test_row(&self, experiment: &str, data: &Dataset, mode: InferMode) -> Result<ResultRow> {
        let ev = evaluate(&self.model, &data.test, mode)?;
        let mut row = ResultRow {
            experiment: experiment.to_string(),
            config_hash: self.hash.clone(),
            split: "test".into(),
            mode: mode.name().into(),
            epoch: self.best_epoch,
            oa: 0.0,
            iou: 0.0,
            f1: 0.0,
            prec: 0.0,
            rec: 0.0,
            params: self.model.param_count(),
            macs: ev.macs,
            wall_s: self.wall_s,
        };
        row.set_scores(ev.scores);
        Ok(row)
    }

    /// One validation row per epoch.
    pub fn val_rows(&self, experiment: &str) -> Result<Vec<ResultRow>> {
        let macs = account(self.model.config())?.forward_macs;
        Ok(self
            .log
            .iter()
            .map(|e| {
                let mut row = ResultRow {
                    experiment: experiment.to_string(),
                    config_hash: self.hash.clone(),
                    split: "val".into(),
                    mode: InferMode::Siamese.name().into(),
                    epoch: e.epoch,
                    oa: 0.0,
                    iou: 0.0,
                    f1: 0.0,
                    prec: 0.0,
                    rec: 0.0,
                    params: self.model.param_count(),
                    macs,
                    wall_s: e.wall_s,
                };
                row.set_scores(e.val);
                row
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let info = RunInfo {
            hash: self.hash.clone(),
            config: self.config.canonical(),
            best_epoch: self.best_epoch,
            best_val_iou: self.best_val_iou,
            log: self.log.clone(),
            steps: self.steps,
            wall_s: self.wall_s,
        };
        save_checkpoint(dir, &self.model, None, self.steps, serde_json::to_value(info)?)?;
        let cfg_path = dir.join("config.cfg");
        std::fs::write(&cfg_path, self.config.canonical()).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        let info: RunInfo = serde_json::from_value(ckpt.info).map_err(|e| Error::Format {
            path: dir.join("manifest.json"),
            reason: format!("run info: {e}"),
        })?;
        let config = ExperimentConfig::parse(&info.config)?;
        if config.hash() != info.hash {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                reason: format!("stored hash {} does not match its config", info.hash),
            });
        }
        Ok(Self {
            config,
            hash: info.hash,
            model: ckpt.model,
            best_epoch: info.best_epoch,
            best_val_iou: info.best_val_iou,
            log: info.log,
            steps: info.steps,
            wall_s: info.wall_s,
        })
    }
}

type Slot = Arc<Mutex<Option<Arc<RunRecord>>>>;

#[derive(Debug, Default)]
pub struct Runner {
    store: Option<PathBuf>,
    verbose: bool,
    runs: Mutex<HashMap<String, Slot>>,
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
    trainings: AtomicUsize,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_store(mut self, dir: impl Into<PathBuf>) -> Self {
        self.store = Some(dir.into());
        self
    }

    /// Per-epoch progress on stderr.
    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    /// Number of trainings actually executed (cache misses).
    pub fn trainings(&self) -> usize {
        self.trainings.load(Ordering::Relaxed)
    }

    pub fn dataset(&self, cfg: &ExperimentConfig) -> Result<Arc<Dataset>> {
        let key = format!("{}|{}", serde_json::to_string(&cfg.data)?, cfg.shift_px);
        if let Some(d) = self.datasets.lock().expect("dataset cache").get(&key) {
            return Ok(d.clone());
        }
        // Generated without holding the lock; a racing duplicate is harmless.
        let data = Arc::new(Dataset::generate(&cfg.data, cfg.shift_px)?);
        Ok(self
            .datasets
            .lock()
            .expect("dataset cache")
            .entry(key)
            .or_insert(data)
            .clone())
    }

    pub fn run(&self, cfg: &ExperimentConfig) -> Result<Arc<RunRecord>> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let hash = cfg.hash();
        let slot = self
            .runs
            .lock()
            .expect("run cache")
            .entry(hash.clone())
            .or_default()
            .clone();
        let mut guard = slot.lock().expect("run slot");
        if let Some(r) = guard.as_ref() {
            return Ok(r.clone());
        }
        let dir = self.store.as_ref().map(|s| s.join(&hash));
        if let Some(d) = dir.as_ref().filter(|d| d.join("manifest.json").exists()) {
            let r = Arc::new(RunRecord::load(d)?);
            *guard = Some(r.clone());
            return Ok(r);
        }
        let label = format!("{} [{}] {}", cfg.name, &hash[..8], cfg.arch.label());
        let verbose = self.verbose;
        let out = train_with(cfg, &data, |e| {
            if verbose {
                eprintln!(
                    "{label} epoch {:>2} loss {:.4} val iou {:.4} ({:.1}s)",
                    e.epoch, e.train_loss, e.val.iou, e.wall_s
                );
            }
        })?;
        self.trainings.fetch_add(1, Ordering::Relaxed);
        let r = Arc::new(RunRecord {
            config: cfg.clone(),
            hash,
            model: out.model,
            best_epoch: out.best_epoch,
            best_val_iou: out.best_val_iou,
            log: out.log,
            steps: out.steps,
            wall_s: out.wall_s,
        });
        if let Some(d) = dir {
            r.save(&d)?;
        }
        *guard = Some(r.clone());
        Ok(r)
    }
}
