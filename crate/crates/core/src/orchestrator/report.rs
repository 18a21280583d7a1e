//! Cost summary and CSV artifacts from measured (or synthetic) job traces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batchsim::{
    apply_low_priority, idle_cost_curve, jobs_from_minutes, reported_cost_note,
    simulate_batch_pool, simulate_fixed_cluster, CurveRow, PricingModel, PAPER_JOBS,
    PAPER_MEAN_MINUTES, PAPER_POOL_VMS,
};
use crate::blobstore::BlobId;

use super::{JobTrace, OrchestratorError};

pub const RUNTIMES_CSV: &str = "runtimes_sorted.csv";
pub const CURVE_CSV: &str = "idle_cost_curve.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    /// VM count of the fixed cluster and cap of the batch pool.
    pub n_vms: usize,
    pub scale_latency_seconds: f64,
    /// Counts for the idle/cost curve; empty picks powers of two up to the
    /// job count.
    pub vm_counts: Vec<usize>,
    pub out_dir: Option<PathBuf>,
    /// Append the note comparing against the printed total cost.
    pub compare_reported: bool,
}

impl ReportOptions {
    pub fn new(n_vms: usize) -> Self {
        Self {
            n_vms,
            scale_latency_seconds: 0.0,
            vm_counts: Vec::new(),
            out_dir: None,
            compare_reported: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_jobs: usize,
    pub n_vms: usize,
    pub mean_runtime_seconds: f64,
    pub fixed_cost: f64,
    pub fixed_makespan_hours: f64,
    pub fixed_idle_vm_hours: f64,
    pub batch_cost: f64,
    pub batch_makespan_hours: f64,
    pub fixed_to_batch_ratio: f64,
    /// Batch cost at the 2x and 3x low-priority discounts.
    pub low_priority_cost_2x: f64,
    pub low_priority_cost_3x: f64,
    /// Fixed on-demand cost over the batch cost at the configured discount.
    pub total_savings_factor: f64,
    pub note: Option<String>,
}

impl CostReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "jobs: {}\nmean runtime: {:.2} s ({:.2} min)\nVMs: {}\n\
             fixed cluster: ${:.2}, makespan {:.2} h, idle {:.2} VM-h\n\
             batch pool: ${:.2}, makespan {:.2} h\n\
             fixed/batch: {:.3}\n\
             low priority: ${:.2} (2x) .. ${:.2} (3x)\n\
             total savings: {:.2}x\n",
            self.n_jobs,
            self.mean_runtime_seconds,
            self.mean_runtime_seconds / 60.0,
            self.n_vms,
            self.fixed_cost,
            self.fixed_makespan_hours,
            self.fixed_idle_vm_hours,
            self.batch_cost,
            self.batch_makespan_hours,
            self.fixed_to_batch_ratio,
            self.low_priority_cost_2x,
            self.low_priority_cost_3x,
            self.total_savings_factor,
        );
        if let Some(n) = &self.note {
            s.push_str(n);
            s.push('\n');
        }
        s
    }
}

fn default_counts(n_jobs: usize, n_vms: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = std::iter::successors(Some(1usize), |c| Some(c * 2))
        .take_while(|&c| c < n_jobs)
        .collect();
    counts.push(n_jobs);
    counts.push(n_vms);
    counts.sort_unstable();
    counts.dedup();
    counts
}

pub fn write_runtimes_csv(path: &Path, traces: &[JobTrace]) -> Result<(), OrchestratorError> {
    let mut sorted: Vec<&JobTrace> = traces.iter().collect();
    sorted.sort_by(|a, b| {
        a.wall_seconds
            .total_cmp(&b.wall_seconds)
            .then(a.shot_id.cmp(&b.shot_id))
    });
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "rank",
        "shot_id",
        "worker_id",
        "runtime_seconds",
        "runtime_minutes",
    ])?;
    for (rank, t) in sorted.iter().enumerate() {
        w.write_record([
            rank.to_string(),
            t.shot_id.to_string(),
            t.worker_id.to_string(),
            t.wall_seconds.to_string(),
            (t.wall_seconds / 60.0).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), OrchestratorError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs both schedule models on the trace runtimes and optionally writes
/// the sorted-runtime and idle/cost CSV files into `options.out_dir`.
pub fn report(
    traces: &[JobTrace],
    pricing: &PricingModel,
    options: &ReportOptions,
) -> Result<CostReport, OrchestratorError> {
    if traces.is_empty() {
        return Err(OrchestratorError::Config(
            "report needs at least one job trace".into(),
        ));
    }
    if traces.iter().any(|t| !(t.wall_seconds > 0.0)) {
        return Err(OrchestratorError::Config(
            "every job trace needs a positive runtime".into(),
        ));
    }
    let minutes: Vec<f64> = traces.iter().map(|t| t.wall_seconds / 60.0).collect();
    let jobs = jobs_from_minutes(&minutes, 1);
    let n_vms = options.n_vms.max(1);
    let fixed = simulate_fixed_cluster(&jobs, n_vms, pricing)?;
    let batch = simulate_batch_pool(&jobs, n_vms, pricing, options.scale_latency_seconds)?;
    let at = |factor: f64| {
        apply_low_priority(
            &batch,
            &PricingModel {
                low_priority_discount_factor: factor,
                ..pricing.clone()
            },
        )
        .map(|r| r.cost)
    };
    let configured = apply_low_priority(&batch, pricing)?;
    let report = CostReport {
        n_jobs: traces.len(),
        n_vms,
        mean_runtime_seconds: traces.iter().map(|t| t.wall_seconds).sum::<f64>()
            / traces.len() as f64,
        fixed_cost: fixed.cost,
        fixed_makespan_hours: fixed.makespan_hours,
        fixed_idle_vm_hours: fixed.idle_vm_hours,
        batch_cost: batch.cost,
        batch_makespan_hours: batch.makespan_hours,
        fixed_to_batch_ratio: fixed.cost / batch.cost,
        low_priority_cost_2x: at(2.0)?,
        low_priority_cost_3x: at(3.0)?,
        total_savings_factor: fixed.cost / configured.cost,
        note: options
            .compare_reported
            .then(|| reported_cost_note(batch.cost)),
    };

    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir)?;
        write_runtimes_csv(&dir.join(RUNTIMES_CSV), traces)?;
        let counts = if options.vm_counts.is_empty() {
            default_counts(jobs.len(), n_vms)
        } else {
            options.vm_counts.clone()
        };
        let rows = idle_cost_curve(&jobs, &counts, pricing, options.scale_latency_seconds)?;
        write_curve_csv(&dir.join(CURVE_CSV), &rows)?;
    }
    Ok(report)
}

/// Synthetic traces for the full-scale case: every job takes the mean
/// container runtime.
pub fn paper_traces() -> Vec<JobTrace> {
    let placeholder = BlobId::of(b"");
    (0..PAPER_JOBS as u64)
        .map(|shot_id| JobTrace {
            shot_id,
            worker_id: 0,
            attempt: 1,
            start_ms: 0,
            end_ms: 0,
            wall_seconds: PAPER_MEAN_MINUTES * 60.0,
            output_blob_id: placeholder.clone(),
        })
        .collect()
}

pub fn paper_options(out_dir: Option<PathBuf>) -> ReportOptions {
    ReportOptions {
        n_vms: PAPER_POOL_VMS,
        scale_latency_seconds: 0.0,
        vm_counts: vec![25, 50, 100, 200, 400, 800, 1500],
        out_dir,
        compare_reported: true,
    }
}
