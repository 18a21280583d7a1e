//! Keeps up to `workers` worker processes (or threads) alive while the work
//! list has pending tickets, and recovers the claims of workers that die.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::config::{Launcher, PipelineConfig};
use super::worker::{run_worker, JobBoard};
use super::OrchestratorError;

const POLL: Duration = Duration::from_millis(20);

enum Handle {
    Process(Child),
    Thread(JoinHandle<Result<usize, OrchestratorError>>),
}

struct Live {
    id: u64,
    handle: Handle,
}

/// What happened to the pool's workers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolStats {
    pub spawned: u64,
    pub killed: u64,
    pub crashed: u64,
    pub requeued: usize,
    pub max_live: usize,
}

pub fn worker_binary(config: &PipelineConfig) -> Result<PathBuf, OrchestratorError> {
    if let Some(p) = &config.worker_binary {
        return Ok(p.clone());
    }
    if let Some(p) = std::env::var_os("RTM_WORKER_BIN") {
        return Ok(PathBuf::from(p));
    }
    Ok(std::env::current_exe()?)
}

fn spawn(config: &PipelineConfig, work_dir: &Path, id: u64) -> Result<Handle, OrchestratorError> {
    match config.launcher {
        Launcher::Process => {
            let child = Command::new(worker_binary(config)?)
                .arg("worker")
                .arg("--work-dir")
                .arg(work_dir)
                .arg("--worker-id")
                .arg(id.to_string())
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .spawn()?;
            Ok(Handle::Process(child))
        }
        Launcher::Thread => {
            let dir = work_dir.to_path_buf();
            Ok(Handle::Thread(thread::spawn(move || {
                run_worker(&dir, id, true)
            })))
        }
    }
}

/// `Some(success)` once the worker has exited.
fn poll_exit(handle: &mut Handle) -> Result<Option<bool>, OrchestratorError> {
    match handle {
        Handle::Process(child) => Ok(child.try_wait()?.map(|s| s.success())),
        Handle::Thread(h) if h.is_finished() => Ok(Some(true)),
        Handle::Thread(_) => Ok(None),
    }
}

fn finish(live: Live) -> Result<Option<OrchestratorError>, OrchestratorError> {
    match live.handle {
        Handle::Process(mut child) => {
            child.wait()?;
            Ok(None)
        }
        Handle::Thread(h) => match h.join() {
            Ok(Ok(_)) => Ok(None),
            Ok(Err(e)) => Ok(Some(e)),
            Err(_) => Ok(Some(OrchestratorError::Worker(format!(
                "worker thread {} panicked",
                live.id
            )))),
        },
    }
}

/// Runs workers until no ticket is pending or running.
pub fn run_pool(config: &PipelineConfig, board: &JobBoard) -> Result<PoolStats, OrchestratorError> {
    let work_dir = config.work_dir.clone();
    let mut live: Vec<Live> = Vec::new();
    let mut stats = PoolStats::default();
    let mut idle_failures = 0u64;
    let mut last_error: Option<OrchestratorError> = None;

    loop {
        let mut i = 0;
        while i < live.len() {
            let Some(ok) = poll_exit(&mut live[i].handle)? else {
                i += 1;
                continue;
            };
            let done = live.swap_remove(i);
            let id = done.id;
            let err = finish(done)?;
            let (requeued, _) = board.recover(id)?;
            stats.requeued += requeued;
            if !ok || err.is_some() {
                stats.crashed += 1;
                if requeued == 0 {
                    idle_failures += 1;
                }
            }
            if let Some(e) = err {
                last_error = Some(e);
            }
        }

        if let Some(shot) = config.fault.kill_shot {
            for (worker, ticket) in board.running()? {
                if ticket.shot_id != shot || ticket.attempt != 1 {
                    continue;
                }
                if let Some(pos) = live.iter().position(|l| l.id == worker) {
                    if let Handle::Process(child) = &mut live[pos].handle {
                        let _ = child.kill();
                        let _ = child.wait();
                        let dead = live.swap_remove(pos);
                        stats.killed += 1;
                        stats.requeued += board.recover(dead.id)?.0;
                    }
                }
            }
        }

        // Workers that die before claiming anything would otherwise be
        // respawned forever.
        if idle_failures > 3 * config.workers as u64 {
            for mut l in live.drain(..) {
                if let Handle::Process(child) = &mut l.handle {
                    let _ = child.kill();
                    let _ = child.wait();
                }
            }
            let detail = last_error
                .map(|e| e.to_string())
                .unwrap_or_else(|| "worker exited with failure".into());
            return Err(OrchestratorError::Worker(format!(
                "workers keep failing: {detail}"
            )));
        }

        let pending = board.pending_count()?;
        let running = board.running_count()?;
        if pending == 0 && live.is_empty() {
            break;
        }
        let wanted = config.workers.min(pending + running);
        while live.len() < wanted && pending > 0 {
            let id = stats.spawned;
            stats.spawned += 1;
            live.push(Live {
                id,
                handle: spawn(config, &work_dir, id)?,
            });
        }
        stats.max_live = stats.max_live.max(live.len());
        thread::sleep(POLL);
    }

    Ok(stats)
}
