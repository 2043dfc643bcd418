//! Bookkeeping shared by the two training loops.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::ParameterStore;

/// Called every `every` iterations with the iteration count and the current
/// model; returning `true` ends training early.
pub struct Monitor<'a, M> {
    pub every: usize,
    pub callback: Box<dyn FnMut(usize, &M) -> Result<bool> + 'a>,
}

pub struct TrainOptions<'a, M> {
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub monitor: Option<Monitor<'a, M>>,
}

impl<M> Default for TrainOptions<'_, M> {
    fn default() -> Self {
        Self { checkpoint_every: None, checkpoint_dir: None, monitor: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.losses.len()
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `k` losses.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.eitp"))
}

pub(crate) struct Loop<'a, 'b, M> {
    opts: &'b mut TrainOptions<'a, M>,
    pub report: TrainReport,
}

impl<'a, 'b, M> Loop<'a, 'b, M> {
    pub fn new(opts: &'b mut TrainOptions<'a, M>) -> Result<Self> {
        if opts.checkpoint_every == Some(0) || opts.monitor.as_ref().is_some_and(|m| m.every == 0) {
            return Err(Error::invalid("cadences must be positive"));
        }
        if opts.checkpoint_every.is_some() && opts.checkpoint_dir.is_none() {
            return Err(Error::invalid("checkpoint cadence set without a directory"));
        }
        if let Some(d) = &opts.checkpoint_dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self { opts, report: TrainReport { losses: Vec::new(), checkpoints: Vec::new(), stopped_early: false } })
    }

    /// Records the loss of step `it` (zero based); returns `true` to stop.
    pub fn after_step(&mut self, it: usize, loss: f64, model: &M, store: &ParameterStore) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        self.report.losses.push(loss);
        let done = it + 1;
        if let (Some(every), Some(dir)) = (self.opts.checkpoint_every, &self.opts.checkpoint_dir) {
            if done.is_multiple_of(every) {
                let p = checkpoint_path(dir, done);
                store.save(&p)?;
                self.report.checkpoints.push(p);
            }
        }
        if let Some(m) = &mut self.opts.monitor {
            if done.is_multiple_of(m.every) && (m.callback)(done, model)? {
                self.report.stopped_early = true;
                return Ok(true);
            }
        }
        Ok(false)
    }
}
