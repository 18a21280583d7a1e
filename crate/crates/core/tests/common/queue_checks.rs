//! Queue semantics checks usable from both the test harness and the
//! acceptance runner. Each returns `Err` with a description on violation.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rtm_core::blobstore::BlobId;
use rtm_core::msgqueue::{MessageQueue, QueueError, QueueMessage};

pub fn tagged(tag: &str) -> QueueMessage {
    QueueMessage::new(BlobId::of(tag.as_bytes()), 1)
}

/// `producers` threads each enqueue `per_producer` messages while
/// `consumers` threads dequeue and delete until all are seen. Checks that
/// every message arrives and none is delivered twice without a timeout.
pub fn zero_loss(
    dir: &Path,
    producers: usize,
    consumers: usize,
    per_producer: usize,
) -> Result<(), String> {
    let queue = MessageQueue::open(dir).map_err(|e| e.to_string())?;
    let expected: HashSet<BlobId> = (0..producers)
        .flat_map(|p| (0..per_producer).map(move |i| tagged(&format!("p{p}-m{i}")).blob_id))
        .collect();
    let total = expected.len();
    let seen: Arc<Mutex<Vec<BlobId>>> = Arc::default();
    let start = Arc::new(Barrier::new(producers + consumers));
    let mut handles = Vec::new();
    for p in 0..producers {
        let (queue, start) = (queue.clone(), start.clone());
        handles.push(thread::spawn(move || -> Result<(), QueueError> {
            start.wait();
            for i in 0..per_producer {
                queue.enqueue(&tagged(&format!("p{p}-m{i}")))?;
            }
            Ok(())
        }));
    }
    for _ in 0..consumers {
        let (queue, start, seen) = (queue.clone(), start.clone(), seen.clone());
        handles.push(thread::spawn(move || -> Result<(), QueueError> {
            start.wait();
            let deadline = Instant::now() + Duration::from_secs(30);
            while seen.lock().unwrap().len() < total && Instant::now() < deadline {
                let batch = queue.dequeue(7, Duration::from_secs(60))?;
                if batch.is_empty() {
                    thread::sleep(Duration::from_millis(1));
                }
                for (m, r) in batch {
                    queue.delete(&r)?;
                    seen.lock().unwrap().push(m.blob_id);
                }
            }
            Ok(())
        }));
    }
    for h in handles {
        h.join()
            .map_err(|_| "thread panicked".to_string())?
            .map_err(|e| e.to_string())?;
    }
    let seen = seen.lock().unwrap();
    let distinct: HashSet<BlobId> = seen.iter().cloned().collect();
    if distinct != expected {
        return Err(format!(
            "{} of {} messages delivered",
            distinct.len(),
            total
        ));
    }
    if seen.len() != total {
        return Err(format!(
            "{} deliveries for {} messages with no timeouts",
            seen.len(),
            total
        ));
    }
    let left = queue.approximate_count().map_err(|e| e.to_string())?;
    if left != 0 {
        return Err(format!("{left} messages left behind"));
    }
    Ok(())
}

/// Two consumers race for 10 messages with a long visibility window; no
/// message may reach both.
pub fn no_double_claim(dir: &Path, rounds: usize) -> Result<(), String> {
    for round in 0..rounds {
        let queue = MessageQueue::open(dir.join(format!("r{round}"))).map_err(|e| e.to_string())?;
        for i in 0..10 {
            queue
                .enqueue(&tagged(&format!("{round}-{i}")))
                .map_err(|e| e.to_string())?;
        }
        let barrier = Arc::new(Barrier::new(2));
        let grabs: Vec<_> = (0..2)
            .map(|_| {
                let (queue, barrier) = (queue.clone(), barrier.clone());
                thread::spawn(move || {
                    barrier.wait();
                    queue
                        .dequeue(10, Duration::from_secs(60))
                        .unwrap()
                        .into_iter()
                        .map(|(m, _)| m.blob_id)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let results: Vec<Vec<BlobId>> = grabs.into_iter().map(|h| h.join().unwrap()).collect();
        let a: HashSet<_> = results[0].iter().collect();
        if results[1].iter().any(|id| a.contains(id)) {
            return Err(format!("round {round}: a message went to both consumers"));
        }
        if results[0].len() + results[1].len() != 10 {
            return Err(format!(
                "round {round}: {} + {} claimed of 10",
                results[0].len(),
                results[1].len()
            ));
        }
    }
    Ok(())
}

/// A consumer that never deletes loses its claim after the visibility
/// window; the message comes back, and the old receipt goes stale.
pub fn redelivery_after_timeout(dir: &Path) -> Result<(), String> {
    let queue = MessageQueue::open(dir).map_err(|e| e.to_string())?;
    let vis = Duration::from_millis(150);
    for i in 0..5 {
        queue
            .enqueue(&tagged(&format!("r{i}")))
            .map_err(|e| e.to_string())?;
    }
    let first = queue.dequeue(5, vis).map_err(|e| e.to_string())?;
    if first.len() != 5 {
        return Err(format!("first dequeue returned {}", first.len()));
    }
    if !queue.dequeue(5, vis).map_err(|e| e.to_string())?.is_empty() {
        return Err("claimed messages visible inside the window".into());
    }
    thread::sleep(vis + Duration::from_millis(100));
    let second = queue
        .dequeue(5, Duration::from_secs(60))
        .map_err(|e| e.to_string())?;
    let ids = |v: &[(QueueMessage, rtm_core::msgqueue::Receipt)]| {
        v.iter()
            .map(|(m, _)| m.blob_id.clone())
            .collect::<HashSet<_>>()
    };
    if ids(&first) != ids(&second) {
        return Err("redelivered set differs from the original".into());
    }
    for (_, r) in &first {
        match queue.delete(r) {
            Err(QueueError::StaleReceipt(_)) => {}
            other => return Err(format!("old receipt should be stale, got {other:?}")),
        }
    }
    for (_, r) in &second {
        queue.delete(r).map_err(|e| e.to_string())?;
    }
    thread::sleep(vis + Duration::from_millis(50));
    if !queue.dequeue(5, vis).map_err(|e| e.to_string())?.is_empty() {
        return Err("deleted messages came back".into());
    }
    Ok(())
}

/// Consumers that crash (drop their claim) on the first delivery of every
/// message still end up processing everything: at-least-once.
pub fn at_least_once_with_crashes(dir: &Path) -> Result<(), String> {
    let queue = MessageQueue::open(dir).map_err(|e| e.to_string())?;
    let n = 40;
    for i in 0..n {
        queue
            .enqueue(&tagged(&format!("c{i}")))
            .map_err(|e| e.to_string())?;
    }
    let vis = Duration::from_millis(100);
    let deliveries: Arc<Mutex<HashMap<BlobId, usize>>> = Arc::default();
    let done: Arc<Mutex<HashSet<BlobId>>> = Arc::default();
    let workers: Vec<_> = (0..4)
        .map(|_| {
            let (queue, deliveries, done) = (queue.clone(), deliveries.clone(), done.clone());
            thread::spawn(move || {
                let deadline = Instant::now() + Duration::from_secs(20);
                while done.lock().unwrap().len() < n && Instant::now() < deadline {
                    let batch = queue.dequeue(3, vis).unwrap();
                    if batch.is_empty() {
                        thread::sleep(Duration::from_millis(5));
                    }
                    for (m, r) in batch {
                        let count = {
                            let mut d = deliveries.lock().unwrap();
                            let c = d.entry(m.blob_id.clone()).or_default();
                            *c += 1;
                            *c
                        };
                        // First delivery: pretend to crash and leave the claim.
                        if count > 1 && queue.delete(&r).is_ok() {
                            done.lock().unwrap().insert(m.blob_id);
                        }
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().map_err(|_| "worker panicked".to_string())?;
    }
    let done = done.lock().unwrap();
    if done.len() != n {
        return Err(format!("only {} of {n} messages processed", done.len()));
    }
    if deliveries.lock().unwrap().values().any(|&c| c < 2) {
        return Err("a crashed delivery was never retried".into());
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Op {
    Enqueue,
    Dequeue(usize),
    Delete,
    Release,
    Extend,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Enqueue),
        2 => (1usize..5).prop_map(Op::Dequeue),
        2 => Just(Op::Delete),
        1 => Just(Op::Release),
        1 => Just(Op::Extend),
    ]
}

/// Random operation sequences against a set model: visible and in-flight
/// messages are tracked separately and the queue must agree after every
/// operation.
pub fn model_based(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(op_strategy(), 1..40), |ops| {
            let dir = tempfile::tempdir().unwrap();
            let queue = MessageQueue::open(dir.path()).unwrap();
            let vis = Duration::from_secs(600);
            let mut visible: HashSet<BlobId> = HashSet::new();
            let mut inflight: Vec<(BlobId, rtm_core::msgqueue::Receipt)> = Vec::new();
            let mut next = 0;
            for op in ops {
                match op {
                    Op::Enqueue => {
                        let m = tagged(&format!("m{next}"));
                        next += 1;
                        queue.enqueue(&m).unwrap();
                        visible.insert(m.blob_id);
                    }
                    Op::Dequeue(k) => {
                        let got = queue.dequeue(k, vis).unwrap();
                        prop_assert_eq!(got.len(), k.min(visible.len()));
                        for (m, r) in got {
                            prop_assert!(
                                visible.remove(&m.blob_id),
                                "dequeued a message that was not visible"
                            );
                            inflight.push((m.blob_id, r));
                        }
                    }
                    Op::Delete => {
                        if let Some((_, r)) = inflight.pop() {
                            queue.delete(&r).unwrap();
                            prop_assert!(matches!(
                                queue.delete(&r),
                                Err(QueueError::StaleReceipt(_))
                            ));
                        }
                    }
                    Op::Release => {
                        if let Some((id, r)) = inflight.pop() {
                            queue.release(&r).unwrap();
                            visible.insert(id);
                        }
                    }
                    Op::Extend => {
                        if let Some((id, r)) = inflight.pop() {
                            let r2 = queue.extend(&r, vis).unwrap();
                            prop_assert!(matches!(
                                queue.delete(&r),
                                Err(QueueError::StaleReceipt(_))
                            ));
                            inflight.push((id, r2));
                        }
                    }
                }
                prop_assert_eq!(
                    queue.approximate_count().unwrap(),
                    visible.len() + inflight.len()
                );
            }
            Ok::<(), TestCaseError>(())
        })
        .map_err(|e| e.to_string())
}
