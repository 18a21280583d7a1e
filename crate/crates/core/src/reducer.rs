//! Event-driven recursive image summation.
//!
//! A dispatcher polls the queue, gathers up to `fan_in` image references and
//! hands each full batch to a summing invocation running on its own thread.
//! Invocations store the partial sum and enqueue a reference to it, which
//! the dispatcher later picks up again, until one message carries every leaf.
//!
//! Batches are dispatched only when full, except once every outstanding leaf
//! is accounted for (held by the dispatcher or inside a running invocation):
//! then the dispatcher waits for running invocations when their outputs fit
//! into one last batch, and flushes whatever it holds when nothing else is
//! running. Without redeliveries this gives exactly
//! `ceil((N - 1) / (fan_in - 1))` summing invocations for `N` leaves,
//! whatever the arrival order.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::{
    decode_image, encode_image, BlobError, BlobId, BlobKind, BlobStore, FormatError,
};
use crate::msgqueue::{
    now_ms, MessageQueue, QueueError, QueueMessage, Receipt, DEFAULT_VISIBILITY,
};

pub const DEFAULT_FAN_IN: usize = 10;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("invalid reduction config: {0}")]
    InvalidConfig(String),
    #[error("cannot sum images on different grids ({0})")]
    DimensionMismatch(String),
    #[error("blob {0} is not an image")]
    NotAnImage(BlobId),
    #[error(
        "message carries {found} leaves but only {total} exist; a partial sum was counted twice"
    )]
    OverCount { found: u64, total: u64 },
    #[error("reduction incomplete after {waited:?}: {tally} of {total} leaves accounted for")]
    Incomplete {
        tally: u64,
        total: u64,
        waited: Duration,
    },
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub fan_in: usize,
    pub total_leaves: u64,
    pub poll_interval: Duration,
    pub max_parallel_invocations: usize,
    pub visibility: Duration,
    /// Give up when the final sum has not appeared after this long.
    pub timeout: Option<Duration>,
}

impl ReductionConfig {
    pub fn new(total_leaves: u64) -> Self {
        Self {
            fan_in: DEFAULT_FAN_IN,
            total_leaves,
            poll_interval: Duration::from_millis(20),
            max_parallel_invocations: 4,
            visibility: DEFAULT_VISIBILITY,
            timeout: None,
        }
    }

    pub fn validate(&self) -> Result<(), ReduceError> {
        if !(2..=32).contains(&self.fan_in) {
            return Err(ReduceError::InvalidConfig(format!(
                "fan_in {} outside 2..=32",
                self.fan_in
            )));
        }
        if self.total_leaves == 0 {
            return Err(ReduceError::InvalidConfig(
                "total_leaves must be >= 1".into(),
            ));
        }
        if self.max_parallel_invocations == 0 {
            return Err(ReduceError::InvalidConfig(
                "max_parallel_invocations must be >= 1".into(),
            ));
        }
        if self.visibility.is_zero() {
            return Err(ReduceError::InvalidConfig(
                "visibility timeout must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvocationLog {
    pub input_leaf_counts: Vec<u64>,
    pub output_leaf_count: u64,
    pub output_blob_id: BlobId,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    /// Inputs whose receipt had gone stale by the time of deletion.
    pub stale_deletes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionReport {
    pub invocation_count: usize,
    pub final_blob_id: BlobId,
    pub final_leaf_count: u64,
    pub wall_time_seconds: f64,
    pub redeliveries: usize,
    pub invocations: Vec<InvocationLog>,
}

/// Sums the referenced images into one stored blob. A single message is
/// returned unchanged without touching the store.
pub fn reduce_step(
    messages: &[QueueMessage],
    store: &BlobStore,
) -> Result<QueueMessage, ReduceError> {
    match messages {
        [] => Err(ReduceError::InvalidConfig(
            "reduce_step needs at least one message".into(),
        )),
        [single] => Ok(single.clone()),
        [first, rest @ ..] => {
            let mut acc = load_image(store, &first.blob_id)?;
            let mut leaves = first.leaf_count;
            for msg in rest {
                let img = load_image(store, &msg.blob_id)?;
                if !acc.same_grid(&img) {
                    return Err(ReduceError::DimensionMismatch(format!(
                        "{}x{} vs {}x{}",
                        acc.nz, acc.nx, img.nz, img.nx
                    )));
                }
                acc.values
                    .iter_mut()
                    .zip(&img.values)
                    .for_each(|(a, b)| *a += b);
                leaves += msg.leaf_count;
            }
            acc.leaf_count = leaves;
            let id = store.put(&encode_image(&acc)?)?;
            Ok(QueueMessage::new(id, leaves))
        }
    }
}

fn load_image(store: &BlobStore, id: &BlobId) -> Result<crate::blobstore::ImageBlob, ReduceError> {
    let blob = decode_image(&store.get(id)?)?;
    if blob.kind != BlobKind::Image {
        return Err(ReduceError::NotAnImage(id.clone()));
    }
    Ok(blob)
}

/// One summing invocation: sum, store, enqueue the output, then delete the
/// inputs. The output is enqueued before the inputs are deleted, so a crash
/// in between duplicates leaves (caught as an over-count) rather than
/// losing them.
fn invoke(
    batch: Vec<(QueueMessage, Receipt)>,
    store: &BlobStore,
    queue: &MessageQueue,
) -> Result<InvocationLog, ReduceError> {
    let started_at_ms = now_ms();
    let messages: Vec<QueueMessage> = batch.iter().map(|(m, _)| m.clone()).collect();
    let output = reduce_step(&messages, store)?;
    queue.enqueue(&output)?;
    let mut stale_deletes = 0;
    for (_, receipt) in &batch {
        match queue.delete(receipt) {
            Ok(()) => {}
            Err(QueueError::StaleReceipt(_)) => stale_deletes += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(InvocationLog {
        input_leaf_counts: messages.iter().map(|m| m.leaf_count).collect(),
        output_leaf_count: output.leaf_count,
        output_blob_id: output.blob_id,
        started_at_ms,
        finished_at_ms: now_ms(),
        stale_deletes,
    })
}

struct Held {
    message: QueueMessage,
    receipt: Receipt,
}

/// Runs until a message holding all `total_leaves` leaves is dequeued, then
/// deletes it and reports. Safe to restart: all state lives in the queue.
pub fn run_reduction_service(
    config: &ReductionConfig,
    queue: &MessageQueue,
    store: &BlobStore,
) -> Result<ReductionReport, ReduceError> {
    run_reduction_service_until(config, queue, store, &AtomicBool::new(false))
}

/// Same as [`run_reduction_service`], but gives up with
/// [`ReduceError::Incomplete`] as soon as `cancel` is set.
pub fn run_reduction_service_until(
    config: &ReductionConfig,
    queue: &MessageQueue,
    store: &BlobStore,
    cancel: &AtomicBool,
) -> Result<ReductionReport, ReduceError> {
    config.validate()?;
    let start = Instant::now();
    let total = config.total_leaves;
    let (tx, rx) = mpsc::channel::<Result<InvocationLog, ReduceError>>();
    let mut held: Vec<Held> = Vec::new();
    let mut running = 0usize;
    let mut running_leaves = 0u64;
    let mut logs: Vec<InvocationLog> = Vec::new();
    let mut redeliveries = 0usize;
    let mut failure: Option<ReduceError> = None;

    let outcome = loop {
        // Collect finished invocations.
        let mut progressed = false;
        while let Ok(result) = rx.try_recv() {
            progressed = true;
            running -= 1;
            match result {
                Ok(log) => {
                    running_leaves -= log.output_leaf_count;
                    redeliveries += log.stale_deletes;
                    logs.push(log);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(e) = failure.take() {
            break Err(e);
        }

        let timed_out = config.timeout.is_some_and(|limit| start.elapsed() > limit);
        if timed_out || cancel.load(Ordering::Relaxed) {
            let tally = held.iter().map(|h| h.message.leaf_count).sum::<u64>() + running_leaves;
            break Err(ReduceError::Incomplete {
                tally,
                total,
                waited: start.elapsed(),
            });
        }

        let room = config.fan_in - held.len();
        if room > 0 {
            let batch = queue.dequeue(room, config.visibility)?;
            progressed |= !batch.is_empty();
            for (message, receipt) in batch {
                held.push(Held { message, receipt });
            }
        }

        let held_leaves: u64 = held.iter().map(|h| h.message.leaf_count).sum();
        if let Some(h) = held.iter().find(|h| h.message.leaf_count > total) {
            break Err(ReduceError::OverCount {
                found: h.message.leaf_count,
                total,
            });
        }
        // An invocation's output can be dequeued before its completion is
        // collected, so the tally is only exact when nothing is running.
        if running == 0 && held_leaves > total {
            break Err(ReduceError::OverCount {
                found: held_leaves,
                total,
            });
        }
        if held.len() == 1 && running == 0 && held_leaves == total {
            let done = held.pop().expect("one held message");
            match queue.delete(&done.receipt) {
                Ok(()) => {}
                Err(QueueError::StaleReceipt(_)) => redeliveries += 1,
                Err(e) => break Err(e.into()),
            }
            break Ok(done.message);
        }

        let all_accounted = held_leaves + running_leaves == total;
        let dispatch = running < config.max_parallel_invocations
            && held.len() >= 2
            && (held.len() == config.fan_in || (all_accounted && running == 0));
        if dispatch {
            let batch: Vec<(QueueMessage, Receipt)> =
                held.drain(..).map(|h| (h.message, h.receipt)).collect();
            running += 1;
            running_leaves += batch.iter().map(|(m, _)| m.leaf_count).sum::<u64>();
            let (tx, store, queue) = (tx.clone(), store.clone(), queue.clone());
            thread::spawn(move || {
                let _ = tx.send(invoke(batch, &store, &queue));
            });
            continue;
        }

        // Keep held claims alive while waiting for more leaves.
        let renew_before = now_ms() + config.visibility.as_millis() as u64 / 2;
        for h in held.iter_mut() {
            if h.receipt.deadline_ms < renew_before {
                match queue.extend(&h.receipt, config.visibility) {
                    Ok(r) => h.receipt = r,
                    Err(QueueError::StaleReceipt(_)) => {
                        // Lost the claim; someone else sees it now.
                        redeliveries += 1;
                        h.receipt.deadline_ms = 0;
                    }
                    Err(e) => {
                        failure.get_or_insert(e.into());
                    }
                }
            }
        }
        held.retain(|h| h.receipt.deadline_ms != 0);

        if !progressed {
            thread::sleep(config.poll_interval);
        }
    };

    // Let running invocations finish so no thread outlives the service.
    while running > 0 {
        if let Ok(Ok(log)) = rx.recv() {
            logs.push(log);
        }
        running -= 1;
    }
    for h in &held {
        let _ = queue.release(&h.receipt);
    }

    let final_message = outcome?;
    Ok(ReductionReport {
        invocation_count: logs.len(),
        final_blob_id: final_message.blob_id,
        final_leaf_count: final_message.leaf_count,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        redeliveries,
        invocations: logs,
    })
}
