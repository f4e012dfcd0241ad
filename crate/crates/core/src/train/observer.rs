use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::Result;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the stage started.
    pub wall_time: f64,
}

pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Line-delimited JSON log of every `every`-th step.
pub struct JsonLines<W: Write> {
    out: W,
    every: u64,
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W, every: u64) -> Self {
        Self {
            out,
            every: every.max(1),
        }
    }
}

impl<W: Write> TrainObserver for JsonLines<W> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        if record.step.is_multiple_of(self.every) || record.step == 1 {
            let line = serde_json::to_string(record).expect("plain record serializes");
            writeln!(self.out, "{line}")?;
            self.out.flush()?;
        }
        Ok(())
    }
}

/// Writes every snapshot as `stage{S}_step{NNNNNN}.ckpt` into a directory.
pub struct SnapshotWriter {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl SnapshotWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }
}

impl TrainObserver for SnapshotWriter {
    fn on_snapshot(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let name = format!("stage{}_step{:06}.ckpt", checkpoint.progress.stage, checkpoint.progress.step);
        let path = self.dir.join(name);
        save_checkpoint(checkpoint, &path)?;
        self.written.push(path);
        Ok(())
    }
}

/// Keeps the loss curve and snapshot steps in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<u64>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }

    fn on_snapshot(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.snapshots.push(checkpoint.progress.step);
        Ok(())
    }
}

impl<A: TrainObserver, B: TrainObserver> TrainObserver for (A, B) {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.0.on_step(record)?;
        self.1.on_step(record)
    }

    fn on_snapshot(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.0.on_snapshot(checkpoint)?;
        self.1.on_snapshot(checkpoint)
    }
}

impl<T: TrainObserver + ?Sized> TrainObserver for &mut T {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        (**self).on_step(record)
    }

    fn on_snapshot(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        (**self).on_snapshot(checkpoint)
    }
}
