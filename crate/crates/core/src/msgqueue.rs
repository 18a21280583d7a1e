//! File-backed queue with visibility timeouts and at-least-once delivery.
//!
//! Every message is one file. A visible message lives at
//! `<root>/visible/<id>.json`; claiming it renames the file to
//! `<root>/inflight/<id>~<deadline_ms>~<nonce>.json`. Rename is atomic, so
//! exactly one consumer wins a race for a message. Once the deadline passes,
//! the next `dequeue` from anyone renames the file back to `visible/`, which
//! invalidates the old receipt. Ordering is not FIFO.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::BlobId;

pub const DEFAULT_VISIBILITY: Duration = Duration::from_secs(120);
pub const MAX_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("receipt for message {0} is stale (expired and redelivered, or already deleted)")]
    StaleReceipt(String),
    #[error("batch size {0} outside 1..={MAX_BATCH}")]
    BadBatchSize(usize),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("queue I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Reference to a stored image plus how many shot images it already sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueMessage {
    pub blob_id: BlobId,
    pub leaf_count: u64,
    pub enqueue_time: String,
}

impl QueueMessage {
    pub fn new(blob_id: BlobId, leaf_count: u64) -> Self {
        Self {
            blob_id,
            leaf_count,
            enqueue_time: chrono::Utc::now().to_rfc3339(),
        }
    }
}

/// Proof of a claim, valid until `deadline_ms` (Unix milliseconds).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub message_id: String,
    pub deadline_ms: u64,
    handle: String,
}

impl Receipt {
    pub fn expired(&self) -> bool {
        now_ms() >= self.deadline_ms
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock before 1970")
        .as_millis() as u64
}

#[derive(Debug, Clone)]
pub struct MessageQueue {
    root: PathBuf,
}

impl MessageQueue {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, QueueError> {
        let root = root.into();
        for sub in ["visible", "inflight", "tmp", "malformed"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn visible_path(&self, id: &str) -> PathBuf {
        self.root.join("visible").join(format!("{id}.json"))
    }

    fn inflight_path(&self, handle: &str) -> PathBuf {
        self.root.join("inflight").join(handle)
    }

    pub fn enqueue(&self, msg: &QueueMessage) -> Result<String, QueueError> {
        if msg.leaf_count == 0 {
            return Err(QueueError::InvalidMessage("leaf_count must be >= 1".into()));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let line =
            serde_json::to_string(msg).map_err(|e| QueueError::InvalidMessage(e.to_string()))?;
        let tmp = self.root.join("tmp").join(&id);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(line.as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.visible_path(&id))?;
        Ok(id)
    }

    /// Moves every claim whose deadline has passed back to `visible/`.
    fn restore_expired(&self) -> Result<(), QueueError> {
        let now = now_ms();
        for entry in fs::read_dir(self.root.join("inflight"))? {
            let entry = match entry {
                Ok(e) => e,
                Err(_) => continue,
            };
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some((id, deadline)) = parse_handle(&name) else {
                continue;
            };
            if deadline <= now {
                match fs::rename(entry.path(), self.visible_path(id)) {
                    Ok(()) => {}
                    // Deleted or restored by someone else in the meantime.
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }

    pub fn dequeue(
        &self,
        max: usize,
        visibility: Duration,
    ) -> Result<Vec<(QueueMessage, Receipt)>, QueueError> {
        if !(1..=MAX_BATCH).contains(&max) {
            return Err(QueueError::BadBatchSize(max));
        }
        self.restore_expired()?;
        let mut out = Vec::with_capacity(max);
        for entry in fs::read_dir(self.root.join("visible"))? {
            if out.len() == max {
                break;
            }
            let Ok(entry) = entry else { continue };
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(id) = name.strip_suffix(".json") else {
                continue;
            };
            let deadline_ms = now_ms() + visibility.as_millis() as u64;
            let nonce = uuid::Uuid::new_v4().simple().to_string();
            let handle = format!("{id}~{deadline_ms}~{nonce}.json");
            let claimed = self.inflight_path(&handle);
            match fs::rename(entry.path(), &claimed) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            }
            let text = fs::read_to_string(&claimed)?;
            match serde_json::from_str::<QueueMessage>(text.trim()) {
                Ok(msg) => out.push((
                    msg,
                    Receipt {
                        message_id: id.to_owned(),
                        deadline_ms,
                        handle,
                    },
                )),
                Err(_) => {
                    let _ = fs::rename(&claimed, self.root.join("malformed").join(&name));
                }
            }
        }
        Ok(out)
    }

    /// Permanently removes a claimed message.
    pub fn delete(&self, receipt: &Receipt) -> Result<(), QueueError> {
        match fs::remove_file(self.inflight_path(&receipt.handle)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(QueueError::StaleReceipt(receipt.message_id.clone()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Makes a claimed message visible again right away.
    pub fn release(&self, receipt: &Receipt) -> Result<(), QueueError> {
        match fs::rename(
            self.inflight_path(&receipt.handle),
            self.visible_path(&receipt.message_id),
        ) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(QueueError::StaleReceipt(receipt.message_id.clone()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Pushes a claim's deadline out to `now + visibility`, returning the new
    /// receipt. The old receipt stops working.
    pub fn extend(&self, receipt: &Receipt, visibility: Duration) -> Result<Receipt, QueueError> {
        let deadline_ms = now_ms() + visibility.as_millis() as u64;
        let nonce = uuid::Uuid::new_v4().simple().to_string();
        let handle = format!("{}~{deadline_ms}~{nonce}.json", receipt.message_id);
        match fs::rename(
            self.inflight_path(&receipt.handle),
            self.inflight_path(&handle),
        ) {
            Ok(()) => Ok(Receipt {
                message_id: receipt.message_id.clone(),
                deadline_ms,
                handle,
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(QueueError::StaleReceipt(receipt.message_id.clone()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Visible plus in-flight messages. Racy under concurrent use.
    pub fn approximate_count(&self) -> Result<usize, QueueError> {
        let count = |sub: &str| -> Result<usize, QueueError> {
            Ok(fs::read_dir(self.root.join(sub))?
                .filter_map(Result::ok)
                .filter(|e| e.file_name().to_string_lossy().ends_with(".json"))
                .count())
        };
        Ok(count("visible")? + count("inflight")?)
    }
}

fn parse_handle(name: &str) -> Option<(&str, u64)> {
    let stem = name.strip_suffix(".json")?;
    let mut parts = stem.split('~');
    let id = parts.next()?;
    let deadline = parts.next()?.parse().ok()?;
    parts.next()?;
    Some((id, deadline))
}
