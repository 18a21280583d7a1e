//! Drives the whole pipeline: per-shot imaging jobs on a local worker pool,
//! the reduction service summing their images as they arrive, and the cost
//! report computed from the measured job runtimes.

pub mod config;
pub mod pool;
pub mod report;
pub mod worker;

use std::fs;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batchsim::SimError;
use crate::blobstore::{decode_image, BlobError, BlobId, BlobKind, BlobStore, FormatError};
use crate::msgqueue::{MessageQueue, QueueError};
use crate::reducer::{run_reduction_service_until, ReduceError, ReductionConfig, ReductionReport};
use crate::wavekernel::{ImageGrid, KernelError};

pub use config::{Launcher, PipelineConfig, Survey};
pub use pool::PoolStats;
pub use report::{report, CostReport, ReportOptions};
pub use worker::{process_shot, JobBoard};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error("worker: {0}")]
    Worker(String),
    #[error("map phase failed: shots {failed:?} failed, {} completed", completed.len())]
    MapFailed {
        completed: Vec<JobTrace>,
        failed: Vec<u64>,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One completed map job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTrace {
    pub shot_id: u64,
    pub worker_id: u64,
    pub attempt: u32,
    /// Unix milliseconds.
    pub start_ms: u64,
    pub end_ms: u64,
    pub wall_seconds: f64,
    pub output_blob_id: BlobId,
}

#[derive(Debug, Clone)]
pub struct MapOutcome {
    pub traces: Vec<JobTrace>,
    pub pool: PoolStats,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub image: ImageGrid,
    pub leaf_count: u64,
    pub reduction: ReductionReport,
    pub cost: CostReport,
    pub traces: Vec<JobTrace>,
    pub pool: PoolStats,
}

/// Validates the config, clears any previous queue and work list under
/// `work_dir`, writes `config.json` and fills the work list.
pub fn prepare(config: &PipelineConfig) -> Result<usize, OrchestratorError> {
    config.validate()?;
    fs::create_dir_all(&config.work_dir)?;
    for dir in [config.queue_dir(), config.jobs_dir()] {
        match fs::remove_dir_all(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
    }
    BlobStore::open(config.store_dir())?;
    MessageQueue::open(config.queue_dir())?;
    let board = JobBoard::open(config.jobs_dir())?;
    fs::write(config.work_dir.join("config.json"), config.to_json())?;
    let n = config.geometry.n_receivers;
    for shot in 0..n as u64 {
        board.add(shot)?;
    }
    Ok(n)
}

fn map_jobs(config: &PipelineConfig) -> Result<MapOutcome, OrchestratorError> {
    let board = JobBoard::open(config.jobs_dir())?;
    let pool = pool::run_pool(config, &board)?;
    let traces = board.traces()?;
    let failed = board.failed()?;
    if !failed.is_empty() {
        return Err(OrchestratorError::MapFailed {
            completed: traces,
            failed,
        });
    }
    Ok(MapOutcome { traces, pool })
}

/// Images every shot on the worker pool. Each worker stores its image with
/// leaf count 1 and enqueues a reference to it.
pub fn run_map_phase(config: &PipelineConfig) -> Result<MapOutcome, OrchestratorError> {
    prepare(config)?;
    map_jobs(config)
}

fn reduction_config(config: &PipelineConfig, total: u64) -> ReductionConfig {
    ReductionConfig {
        fan_in: config.fan_in,
        max_parallel_invocations: config.reducer_parallel,
        visibility: Duration::from_secs_f64(config.visibility_seconds),
        ..ReductionConfig::new(total)
    }
}

/// Map phase and reduction service side by side; the reducer starts
/// summing as soon as the first images land in the queue.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome, OrchestratorError> {
    let total = prepare(config)? as u64;
    let store = BlobStore::open(config.store_dir())?;
    let queue = MessageQueue::open(config.queue_dir())?;
    let rconfig = reduction_config(config, total);
    let cancel = AtomicBool::new(false);

    let (map, reduction) = thread::scope(|s| {
        let reducer = s.spawn(|| run_reduction_service_until(&rconfig, &queue, &store, &cancel));
        let map = map_jobs(config);
        if map.is_err() {
            cancel.store(true, Ordering::Relaxed);
        }
        (map, reducer.join().expect("reduction service panicked"))
    });
    let map = map?;
    let reduction = reduction?;

    let blob = decode_image(&store.get(&reduction.final_blob_id)?)?;
    if blob.kind != BlobKind::Image {
        return Err(ReduceError::NotAnImage(reduction.final_blob_id.clone()).into());
    }
    let mut options = ReportOptions::new(config.workers);
    options.scale_latency_seconds = config.scale_latency_seconds;
    let cost = report(&map.traces, &config.pricing, &options)?;
    Ok(PipelineOutcome {
        image: blob.to_image(),
        leaf_count: blob.leaf_count,
        reduction,
        cost,
        traces: map.traces,
        pool: map.pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &std::path::Path, shots: usize, workers: usize) -> PipelineConfig {
        PipelineConfig::default()
            .with_overrides([
                ("model.nz", "41"),
                ("model.nx", "41"),
                ("nt", "300"),
                ("geometry.n_sources", "9"),
                ("launcher", "thread"),
            ])
            .map(|mut c| {
                c.geometry.n_receivers = shots;
                c.workers = workers;
                c.work_dir = dir.to_path_buf();
                c
            })
            .unwrap()
    }

    #[test]
    fn single_shot_single_worker() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(dir.path(), 1, 1);
        let out = run_map_phase(&c).unwrap();
        assert_eq!(out.traces.len(), 1);
        let queue = MessageQueue::open(c.queue_dir()).unwrap();
        let msgs = queue.dequeue(10, Duration::from_secs(5)).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].0.leaf_count, 1);
    }

    #[test]
    fn single_shot_pipeline_returns_that_image() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(dir.path(), 1, 1);
        let out = run_pipeline(&c).unwrap();
        assert_eq!(out.leaf_count, 1);
        assert_eq!(out.reduction.invocation_count, 0);
        let survey = c.build_survey().unwrap();
        let direct = process_shot(&survey, &survey.plans[0], &c).unwrap();
        assert_eq!(out.image.values, direct.values);
    }

    #[test]
    fn thread_fault_requeues() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path(), 3, 2);
        c.fault.kill_shot = Some(1);
        let out = run_pipeline(&c).unwrap();
        assert_eq!(out.leaf_count, 3);
        let retried = out.traces.iter().find(|t| t.shot_id == 1).unwrap();
        assert_eq!(retried.attempt, 2);
        assert_eq!(out.pool.requeued, 1);
    }
}
