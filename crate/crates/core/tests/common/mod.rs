//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod queue_checks;
pub mod reduce_checks;

use std::path::Path;

use rtm_core::blobstore::{encode_image, BlobKind, BlobStore, ImageBlob};
use rtm_core::msgqueue::{MessageQueue, QueueMessage};
use rtm_core::rng::SplitMix64;

/// Step-wise event-list FCFS schedule for single-VM jobs. Time advances from
/// event to event; at each event every idle VM (lowest index first) takes the
/// next waiting job. Returns `(makespan, busy, idle)` for a fixed cluster.
pub fn fcfs_event_oracle(durations: &[f64], n_vms: usize) -> (f64, f64, f64) {
    let mut busy_until = vec![0.0_f64; n_vms];
    let mut next_job = 0;
    let mut now = 0.0_f64;
    while next_job < durations.len() {
        for v in 0..n_vms {
            if next_job < durations.len() && busy_until[v] <= now {
                busy_until[v] = now + durations[next_job];
                next_job += 1;
            }
        }
        // Jump to the earliest completion still in the future.
        let upcoming = busy_until
            .iter()
            .copied()
            .filter(|&t| t > now)
            .fold(f64::INFINITY, f64::min);
        if upcoming.is_finite() {
            now = upcoming;
        }
    }
    let makespan = busy_until.iter().copied().fold(0.0, f64::max);
    let busy: f64 = durations.iter().sum();
    (makespan, busy, n_vms as f64 * makespan - busy)
}

/// Every sequence of length 1..=max_len over `values`.
pub fn all_sequences(values: &[f64], max_len: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                values.iter().map(move |&v| {
                    let mut n = s.clone();
                    n.push(v);
                    n
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

pub fn random_image(nz: usize, nx: usize, seed: u64, lo: f64, hi: f64) -> ImageBlob {
    let mut rng = SplitMix64::new(seed);
    ImageBlob {
        kind: BlobKind::Image,
        nz,
        nx,
        dz: 10.0,
        dx: 10.0,
        oz: 0.0,
        ox: 0.0,
        leaf_count: 1,
        values: (0..nz * nx).map(|_| rng.uniform_range(lo, hi)).collect(),
    }
}

/// Element-wise sum in leaf order.
pub fn direct_sum(images: &[ImageBlob]) -> Vec<f64> {
    let mut acc = vec![0.0; images[0].values.len()];
    for im in images {
        for (a, v) in acc.iter_mut().zip(&im.values) {
            *a += v;
        }
    }
    acc
}

/// Largest per-element relative difference.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Largest difference relative to the largest magnitude of `b`.
pub fn max_diff_rel_to_peak(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let peak = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / peak
}

pub fn put_leaf(store: &BlobStore, image: &ImageBlob) -> QueueMessage {
    let id = store.put(&encode_image(image).unwrap()).unwrap();
    QueueMessage::new(id, image.leaf_count)
}

pub fn open_pair(dir: &Path) -> (BlobStore, MessageQueue) {
    (
        BlobStore::open(dir.join("store")).unwrap(),
        MessageQueue::open(dir.join("queue")).unwrap(),
    )
}

pub fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Pipeline config using real worker processes of the `rtm` binary.
pub fn process_config(
    work_dir: &Path,
    shots: usize,
    workers: usize,
) -> rtm_core::orchestrator::PipelineConfig {
    let mut c = rtm_core::orchestrator::PipelineConfig::default();
    c.geometry.n_receivers = shots;
    c.workers = workers;
    c.work_dir = work_dir.to_path_buf();
    c.launcher = rtm_core::orchestrator::Launcher::Process;
    c.worker_binary = Some(env!("CARGO_BIN_EXE_rtm").into());
    c
}

/// Smaller, faster variant for tests that do not look at the physics.
pub fn small_process_config(
    work_dir: &Path,
    shots: usize,
    workers: usize,
) -> rtm_core::orchestrator::PipelineConfig {
    let mut c = process_config(work_dir, shots, workers);
    c.model.nz = 41;
    c.model.nx = 41;
    c.nt = 300;
    c.geometry.n_sources = 9;
    c
}

/// Largest number of traces whose `[start, end)` intervals overlap.
pub fn max_overlap(traces: &[rtm_core::orchestrator::JobTrace]) -> usize {
    let mut events: Vec<(u64, i32)> = traces
        .iter()
        .flat_map(|t| [(t.start_ms, 1), (t.end_ms, -1)])
        .collect();
    events.sort();
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in events {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}
