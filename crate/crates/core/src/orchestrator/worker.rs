//! Shared work list and the per-shot job a worker runs.
//!
//! The list lives under `jobs/`: a ticket in `pending/` is claimed by
//! renaming it into `running/` with the worker id in its name, so exactly one
//! worker wins each ticket. A finished job leaves its [`JobTrace`] in
//! `done/`. Tickets orphaned in `running/` by a dead worker are put back
//! once and moved to `failed/` on the second loss.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::blobstore::{encode_image, BlobStore, ImageBlob};
use crate::msgqueue::{now_ms, MessageQueue, QueueMessage};
use crate::survey::ShotGatherPlan;
use crate::wavekernel::{model_data, rtm_shot_image, ImageGrid};

use super::config::{PipelineConfig, Survey};
use super::{JobTrace, OrchestratorError};

pub const MAX_ATTEMPTS: u32 = 2;
const STALL_LIMIT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub shot_id: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone)]
pub struct Claim {
    pub ticket: Ticket,
    path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct JobBoard {
    root: PathBuf,
}

fn shot_name(shot_id: u64) -> String {
    format!("{shot_id:08}")
}

fn write_atomic(dir: &Path, tmp: &Path, name: &str, bytes: &[u8]) -> io::Result<()> {
    let tmp_path = tmp.join(format!("{name}.{}", uuid::Uuid::new_v4().simple()));
    let mut f = fs::File::create(&tmp_path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp_path, dir.join(name))
}

impl JobBoard {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["pending", "running", "done", "failed", "tmp"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.root.join(sub)
    }

    fn names(&self, sub: &str) -> io::Result<Vec<String>> {
        let mut names: Vec<String> = fs::read_dir(self.dir(sub))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();
        Ok(names)
    }

    fn put_ticket(&self, sub: &str, ticket: &Ticket) -> io::Result<()> {
        let bytes = serde_json::to_vec(ticket)?;
        write_atomic(
            &self.dir(sub),
            &self.dir("tmp"),
            &format!("{}.json", shot_name(ticket.shot_id)),
            &bytes,
        )
    }

    pub fn add(&self, shot_id: u64) -> io::Result<()> {
        self.put_ticket(
            "pending",
            &Ticket {
                shot_id,
                attempt: 1,
            },
        )
    }

    pub fn pending_count(&self) -> io::Result<usize> {
        Ok(self.names("pending")?.len())
    }

    pub fn running_count(&self) -> io::Result<usize> {
        Ok(self.names("running")?.len())
    }

    /// Claims the lowest pending shot id, or `None` when nothing is pending.
    pub fn claim(&self, worker_id: u64) -> io::Result<Option<Claim>> {
        for name in self.names("pending")? {
            let stem = name.trim_end_matches(".json");
            let target = self
                .dir("running")
                .join(format!("{stem}~w{worker_id}.json"));
            match fs::rename(self.dir("pending").join(&name), &target) {
                Ok(()) => {
                    let ticket: Ticket = serde_json::from_slice(&fs::read(&target)?)?;
                    return Ok(Some(Claim {
                        ticket,
                        path: target,
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    }

    /// Running claims, with the id of the worker holding each.
    pub fn running(&self) -> io::Result<Vec<(u64, Ticket)>> {
        let mut out = Vec::new();
        for name in self.names("running")? {
            let Some(worker) = name
                .trim_end_matches(".json")
                .rsplit_once("~w")
                .and_then(|(_, w)| w.parse().ok())
            else {
                continue;
            };
            match fs::read(self.dir("running").join(&name)) {
                Ok(bytes) => out.push((worker, serde_json::from_slice(&bytes)?)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn complete(&self, claim: &Claim, trace: &JobTrace) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(trace)?;
        write_atomic(
            &self.dir("done"),
            &self.dir("tmp"),
            &format!("{}.json", shot_name(trace.shot_id)),
            &bytes,
        )?;
        fs::remove_file(&claim.path)
    }

    /// Returns the tickets `worker_id` left behind to the pending list, or
    /// to `failed/` once they have used up their attempts. Returns how many
    /// were re-queued and how many failed.
    pub fn recover(&self, worker_id: u64) -> io::Result<(usize, usize)> {
        let (mut requeued, mut failed) = (0, 0);
        for name in self.names("running")? {
            if !name.ends_with(&format!("~w{worker_id}.json")) {
                continue;
            }
            let path = self.dir("running").join(&name);
            let ticket: Ticket = serde_json::from_slice(&fs::read(&path)?)?;
            if ticket.attempt < MAX_ATTEMPTS {
                self.put_ticket(
                    "pending",
                    &Ticket {
                        attempt: ticket.attempt + 1,
                        ..ticket
                    },
                )?;
                requeued += 1;
            } else {
                self.put_ticket("failed", &ticket)?;
                failed += 1;
            }
            fs::remove_file(&path)?;
        }
        Ok((requeued, failed))
    }

    pub fn traces(&self) -> io::Result<Vec<JobTrace>> {
        self.names("done")?
            .iter()
            .map(|n| {
                Ok(serde_json::from_slice(&fs::read(
                    self.dir("done").join(n),
                )?)?)
            })
            .collect()
    }

    pub fn failed(&self) -> io::Result<Vec<u64>> {
        self.names("failed")?
            .iter()
            .map(|n| {
                Ok(
                    serde_json::from_slice::<Ticket>(&fs::read(self.dir("failed").join(n))?)?
                        .shot_id,
                )
            })
            .collect()
    }
}

/// Models observed data as `data(truth) - data(background)` and migrates it
/// in the background model.
pub fn process_shot(
    survey: &Survey,
    plan: &ShotGatherPlan,
    config: &PipelineConfig,
) -> Result<ImageGrid, OrchestratorError> {
    let w = survey.wavelet.scaled(config.source_amplitude);
    let full = model_data(
        &survey.truth,
        plan.source,
        &w,
        &plan.receivers,
        config.dt,
        config.nt,
    )?;
    let direct = model_data(
        &survey.background,
        plan.source,
        &w,
        &plan.receivers,
        config.dt,
        config.nt,
    )?;
    let mut observed = full.difference(&direct)?;
    observed.shot_id = plan.shot_id;
    Ok(rtm_shot_image(
        &survey.background,
        plan,
        &observed,
        &survey.wavelet,
    )?)
}

/// Claims and runs jobs until none are pending. Returns the number of jobs
/// completed. An injected fault stalls the worker, which the orchestrator
/// then kills; thread workers cannot be killed and just abandon the claim.
pub fn run_worker(
    work_dir: &Path,
    worker_id: u64,
    as_thread: bool,
) -> Result<usize, OrchestratorError> {
    let config = PipelineConfig::load(&work_dir.join("config.json"))?;
    let survey = config.build_survey()?;
    let store = BlobStore::open(config.store_dir())?;
    let queue = MessageQueue::open(config.queue_dir())?;
    let board = JobBoard::open(config.jobs_dir())?;
    let mut completed = 0;
    while let Some(claim) = board.claim(worker_id)? {
        let Ticket { shot_id, attempt } = claim.ticket;
        if config.fault.kill_shot == Some(shot_id) && attempt == 1 {
            if as_thread {
                return Ok(completed);
            }
            let t = Instant::now();
            while t.elapsed() < STALL_LIMIT {
                thread::sleep(Duration::from_millis(50));
            }
            return Err(OrchestratorError::Worker(format!(
                "worker {worker_id} stalled on shot {shot_id} and was not killed"
            )));
        }
        let plan = survey
            .plans
            .iter()
            .find(|p| p.shot_id == shot_id)
            .ok_or_else(|| OrchestratorError::Worker(format!("no plan for shot {shot_id}")))?;
        let start_ms = now_ms();
        let t = Instant::now();
        let image = process_shot(&survey, plan, &config)?;
        let bytes = encode_image(&ImageBlob::from_image(&image, 1))?;
        let blob_id = store.put(&bytes)?;
        queue.enqueue(&QueueMessage::new(blob_id.clone(), 1))?;
        let trace = JobTrace {
            shot_id,
            worker_id,
            attempt,
            start_ms,
            end_ms: now_ms(),
            wall_seconds: t.elapsed().as_secs_f64(),
            output_blob_id: blob_id,
        };
        board.complete(&claim, &trace)?;
        completed += 1;
    }
    Ok(completed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claims_are_exclusive_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let board = JobBoard::open(dir.path()).unwrap();
        for id in [2, 0, 1] {
            board.add(id).unwrap();
        }
        let a = board.claim(7).unwrap().unwrap();
        let b = board.claim(8).unwrap().unwrap();
        assert_eq!((a.ticket.shot_id, b.ticket.shot_id), (0, 1));
        assert_eq!(board.pending_count().unwrap(), 1);
        let running = board.running().unwrap();
        assert_eq!(running.len(), 2);
        assert!(running.contains(&(
            7,
            Ticket {
                shot_id: 0,
                attempt: 1
            }
        )));
    }

    #[test]
    fn orphaned_claims_get_one_retry() {
        let dir = tempfile::tempdir().unwrap();
        let board = JobBoard::open(dir.path()).unwrap();
        board.add(5).unwrap();
        board.claim(1).unwrap().unwrap();
        assert_eq!(board.recover(1).unwrap(), (1, 0));
        let retry = board.claim(2).unwrap().unwrap();
        assert_eq!(
            retry.ticket,
            Ticket {
                shot_id: 5,
                attempt: 2
            }
        );
        assert_eq!(board.recover(1).unwrap(), (0, 0));
        assert_eq!(board.recover(2).unwrap(), (0, 1));
        assert_eq!(board.failed().unwrap(), vec![5]);
        assert!(board.claim(3).unwrap().is_none());
    }

    #[test]
    fn concurrent_claimers_never_share() {
        let dir = tempfile::tempdir().unwrap();
        let board = JobBoard::open(dir.path()).unwrap();
        for id in 0..200 {
            board.add(id).unwrap();
        }
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let board = board.clone();
                thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some(c) = board.claim(w).unwrap() {
                        got.push(c.ticket.shot_id);
                    }
                    got
                })
            })
            .collect();
        let mut all: Vec<u64> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }
}
