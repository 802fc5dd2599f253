//! Optimisation, staged training loops, linear probing and checkpoints.

pub mod analysis;
pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod schedule;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::encoders::{pool_patches, EncoderConfig, PooledImage, TokenSequence};
use crate::error::{Error, Result};
use crate::inference::ProgressionLabel;
use crate::numerics::ParamStore;
use crate::synthdata::{assign_change_flag, Dataset, Lexicon};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use finetune::{finetune, Classifier, FinetuneConfig, FinetuneLogRecord, FinetuneVariant};
pub use optim::{adamw_step, AdamWConfig, OptimState, Optimizer};
pub use pretrain::{pretrain, PretrainConfig, PretrainLogRecord};
pub use probe::{linear_probe_binary, ProbeConfig, ProbeResult};
pub use schedule::{lr_at, LrSchedule};

/// A study reduced to what the models consume.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedStudy {
    pub id: String,
    pub prev: PooledImage,
    pub cur: PooledImage,
    pub report: TokenSequence,
    /// Generator ground truth.
    pub change: u8,
    /// Rule-based label derived from the report; `None` when abstaining.
    pub assessed: Option<u8>,
    /// Progression per finding, in dataset finding order.
    pub labels: Vec<ProgressionLabel>,
}

pub fn prepare(data: &Dataset, cfg: &EncoderConfig, lexicon: &Lexicon) -> Result<Vec<PreparedStudy>> {
    data.studies
        .iter()
        .map(|s| {
            Ok(PreparedStudy {
                id: s.id.clone(),
                prev: pool_patches(&s.prev, cfg)?,
                cur: pool_patches(&s.cur, cfg)?,
                report: s.report.clone(),
                change: s.change,
                assessed: assign_change_flag("prior study", &lexicon.detokenize(&s.report)).flag(),
                labels: s.labels(),
            })
        })
        .collect()
}

/// Trained parameters and the per-epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<R> {
    pub params: ParamStore,
    pub log: Vec<R>,
}

/// Line-delimited JSON, one record per line.
pub fn log_lines<R: Serialize>(records: &[R]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("log record serialises") + "\n")
        .collect()
}

pub fn write_log<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    fs::write(path, log_lines(records)).map_err(|e| Error::io(path, e))
}

/// Optional wall clock for logs; absent unless requested so that logs stay
/// byte-reproducible.
pub(crate) struct Clock(Option<Instant>);

impl Clock {
    pub(crate) fn new(enabled: bool) -> Self {
        Clock(enabled.then(Instant::now))
    }

    pub(crate) fn elapsed(&self) -> Option<f64> {
        self.0.map(|t| t.elapsed().as_secs_f64())
    }
}

pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}
