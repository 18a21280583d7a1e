//! Reduction scenarios shared by the reducer tests and the acceptance runner.

use std::path::Path;
use std::thread;
use std::time::Duration;

use rtm_core::blobstore::decode_image;
use rtm_core::reducer::{run_reduction_service, ReductionConfig, ReductionReport};

use super::{direct_sum, max_rel_diff, open_pair, put_leaf, random_image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arrival {
    /// Every leaf is queued before the service starts.
    AllAtOnce,
    /// Leaves trickle in one by one while the service runs.
    Sequential,
}

pub struct Outcome {
    pub report: ReductionReport,
    pub max_rel_error: f64,
    pub final_leaf_count: u64,
}

/// Sums `n` random `size x size` leaves with the given fan-in and
/// parallelism and compares against the direct sum.
pub fn reduce_random_leaves(
    dir: &Path,
    n: usize,
    size: usize,
    fan_in: usize,
    parallel: usize,
    arrival: Arrival,
    seed: u64,
) -> Result<Outcome, String> {
    let (store, queue) = open_pair(dir);
    // Values bounded away from zero keep per-element relative error meaningful.
    let leaves: Vec<_> = (0..n)
        .map(|i| random_image(size, size, seed * 1000 + i as u64, 0.5, 1.5))
        .collect();
    let oracle = direct_sum(&leaves);
    let config = ReductionConfig {
        fan_in,
        max_parallel_invocations: parallel,
        poll_interval: Duration::from_millis(2),
        timeout: Some(Duration::from_secs(60)),
        ..ReductionConfig::new(n as u64)
    };
    let report = thread::scope(|s| {
        let producer = s.spawn(|| {
            for leaf in &leaves {
                let msg = put_leaf(&store, leaf);
                if arrival == Arrival::Sequential {
                    thread::sleep(Duration::from_millis(3));
                }
                queue.enqueue(&msg).unwrap();
            }
        });
        if arrival == Arrival::AllAtOnce {
            producer.join().unwrap();
        }
        run_reduction_service(&config, &queue, &store)
    })
    .map_err(|e| e.to_string())?;
    let blob = decode_image(
        &store
            .get(&report.final_blob_id)
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    Ok(Outcome {
        max_rel_error: max_rel_diff(&blob.values, &oracle),
        final_leaf_count: blob.leaf_count,
        report,
    })
}
