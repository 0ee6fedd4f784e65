//! Run directories: config snapshot, loss traces, per-epoch checkpoints and
//! JSON outputs.
//!
//! ```text
//! <run>/config.json            resolved config; `--config` accepts it as-is
//! <run>/loss.csv               step,epoch,loss,lr  (loss-<net>.csv in stage 2)
//! <run>/checkpoints/...        per-epoch checkpoints, newest few kept
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use word4per_core::encoder::ToyDualEncoder;
use word4per_core::losses::Supervision;
use word4per_core::tinet::TiNet;
use word4per_core::training::{StepRecord, TrainObserver};
use word4per_core::Fingerprint;

use crate::config::Config;
use crate::error::{AppError, Result};
use crate::formats::{write_encoder, write_tinet, TinetCheckpoint};
use crate::manifest::write_atomic;

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_snapshot(&self, cfg: &Config) -> Result<()> {
        write_atomic(&self.path("config.json"), cfg.to_json().as_bytes())
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let path = self.path(rel);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::format(&path, e.to_string()))?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn write_csv<T: Serialize>(&self, rel: impl AsRef<Path>, rows: &[T]) -> Result<PathBuf> {
        let path = self.path(rel);
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| AppError::format(&path, e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| AppError::format(&path, e.to_string()))?;
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

/// Saves every `every` epochs and deletes all but the newest `keep` files.
struct Retention {
    every: usize,
    keep: usize,
    saved: VecDeque<PathBuf>,
}

impl Retention {
    fn due(&self, epoch: usize) -> bool {
        (epoch + 1).is_multiple_of(self.every)
    }

    fn saved(&mut self, path: PathBuf) -> Result<()> {
        self.saved.push_back(path);
        while self.keep > 0 && self.saved.len() > self.keep {
            let old = self.saved.pop_front().unwrap();
            std::fs::remove_file(&old).map_err(|e| AppError::io(&old, e))?;
        }
        Ok(())
    }
}

/// Stage-2 network identity used for checkpoint files.
pub struct NetInfo {
    pub name: String,
    pub mode: Supervision,
}

/// Training observer that streams loss traces to CSV and writes per-epoch
/// checkpoints. Filesystem failures abort training; [`TrainLog::finish`]
/// surfaces the original error.
pub struct TrainLog {
    dir: PathBuf,
    traces: Vec<csv::Writer<File>>,
    trace_paths: Vec<PathBuf>,
    nets: Vec<NetInfo>,
    fingerprint: Option<Fingerprint>,
    retention: Vec<Retention>,
    error: Option<AppError>,
}

impl TrainLog {
    fn open(dir: &Path, trace_names: &[String]) -> Result<Self> {
        let ckpt = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt).map_err(|e| AppError::io(&ckpt, e))?;
        let mut traces = Vec::new();
        let mut trace_paths = Vec::new();
        for name in trace_names {
            let p = dir.join(name);
            let f = File::create(&p).map_err(|e| AppError::io(&p, e))?;
            traces.push(csv::Writer::from_writer(f));
            trace_paths.push(p);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            traces,
            trace_paths,
            nets: Vec::new(),
            fingerprint: None,
            retention: Vec::new(),
            error: None,
        })
    }

    /// Fine-tuning: `loss.csv` and `checkpoints/encoder-epoch-NNN.w4pe`.
    pub fn stage1(run: &RunDir, every: usize, keep: usize) -> Result<Self> {
        let mut log = Self::open(run.root(), &["loss.csv".into()])?;
        log.retention.push(Retention {
            every,
            keep,
            saved: VecDeque::new(),
        });
        Ok(log)
    }

    /// Inversion training: `loss-<name>.csv` and
    /// `checkpoints/<name>-epoch-NNN.w4pt` per network.
    pub fn stage2(run: &RunDir, nets: Vec<NetInfo>, fingerprint: Fingerprint, every: usize, keep: usize) -> Result<Self> {
        let names: Vec<String> = nets.iter().map(|n| format!("loss-{}.csv", n.name)).collect();
        let mut log = Self::open(run.root(), &names)?;
        log.retention = nets
            .iter()
            .map(|_| Retention {
                every,
                keep,
                saved: VecDeque::new(),
            })
            .collect();
        log.nets = nets;
        log.fingerprint = Some(fingerprint);
        Ok(log)
    }

    fn stash(&mut self, e: AppError) -> word4per_core::Error {
        let msg = e.to_string();
        self.error = Some(e);
        word4per_core::Error::Aborted(msg)
    }

    /// Maps a training error back to the filesystem error that caused it.
    pub fn explain(&mut self, e: word4per_core::Error) -> AppError {
        match (self.error.take(), e) {
            (Some(io), word4per_core::Error::Aborted(_)) => io,
            (_, e) => e.into(),
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        for (w, p) in self.traces.iter_mut().zip(&self.trace_paths) {
            w.flush().map_err(|e| AppError::io(p, e))?;
            w.get_ref().sync_all().map_err(|e| AppError::io(p, e))?;
        }
        Ok(())
    }

    fn checkpoint_path(&self, file: String) -> PathBuf {
        self.dir.join("checkpoints").join(file)
    }
}

impl TrainObserver for TrainLog {
    fn on_step(&mut self, run: usize, record: &StepRecord) -> word4per_core::Result<()> {
        let (Some(w), Some(p)) = (self.traces.get_mut(run), self.trace_paths.get(run)) else {
            return Err(word4per_core::Error::Aborted(format!("no loss trace for run {run}")));
        };
        if let Err(e) = w.serialize(record) {
            let err = AppError::format(p, e.to_string());
            return Err(self.stash(err));
        }
        Ok(())
    }

    fn on_stage1_epoch(&mut self, epoch: usize, encoder: &ToyDualEncoder) -> word4per_core::Result<()> {
        let Some(ret) = self.retention.first() else {
            return Ok(());
        };
        if !ret.due(epoch) {
            return Ok(());
        }
        let path = self.checkpoint_path(format!("encoder-epoch-{:03}.w4pe", epoch + 1));
        let res = write_encoder(&path, encoder).and_then(|_| self.retention[0].saved(path));
        res.map_err(|e| self.stash(e))
    }

    fn on_stage2_epoch(&mut self, epoch: usize, tinets: &[TiNet]) -> word4per_core::Result<()> {
        let fp = self.fingerprint.expect("stage-2 log knows its encoder");
        for (k, t) in tinets.iter().enumerate() {
            if !self.retention[k].due(epoch) {
                continue;
            }
            let net = &self.nets[k];
            let path = self.checkpoint_path(format!("{}-epoch-{:03}.w4pt", net.name, epoch + 1));
            let ckpt = TinetCheckpoint {
                name: net.name.clone(),
                mode: net.mode,
                tinet: t.clone().with_encoder(fp),
                metadata: BTreeMap::from([("epoch".to_string(), Value::from(epoch + 1))]),
            };
            let res = write_tinet(&path, &ckpt).and_then(|_| self.retention[k].saved(path));
            res.map_err(|e| self.stash(e))?;
        }
        Ok(())
    }
}
