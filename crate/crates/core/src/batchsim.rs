//! Discrete-event model of the map phase's bill: a fixed cluster that stays
//! up until the last job finishes versus a batch pool that only pays for
//! VMs while they run jobs.
//!
//! Both modes place jobs first-come-first-serve in job-id order: a job takes
//! the `vms_per_job` VMs (or pool slots) that free up earliest, ties broken
//! by lower index, and never starts before the job ahead of it.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::rng::SplitMix64;

/// Hourly on-demand price of the memory-optimized 64-vCPU instances, in $.
pub const PAPER_RATE: f64 = 3.629;
/// Average container runtime per shot image, in minutes.
pub const PAPER_MEAN_MINUTES: f64 = 119.28;
pub const PAPER_JOBS: usize = 1500;
/// Total cost as printed for the full experiment, in $.
pub const PAPER_REPORTED_COST: f64 = 10_750.0;
pub const PAPER_POOL_VMS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("need at least one job")]
    NoJobs,
    #[error("job {job_id}: {reason}")]
    BadJob { job_id: u64, reason: String },
    #[error("{n_vms} VMs cannot host a job needing {needed}")]
    TooFewVms { n_vms: usize, needed: u32 },
    #[error("invalid pricing: {0}")]
    BadPricing(String),
    #[error("invalid runtime distribution: {0}")]
    BadDistribution(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: u64,
    pub duration_hours: f64,
    pub vms_per_job: u32,
}

impl JobSpec {
    pub fn new(job_id: u64, duration_hours: f64) -> Self {
        Self {
            job_id,
            duration_hours,
            vms_per_job: 1,
        }
    }
}

/// Jobs with the given durations in minutes, ids in order.
pub fn jobs_from_minutes(minutes: &[f64], vms_per_job: u32) -> Vec<JobSpec> {
    minutes
        .iter()
        .enumerate()
        .map(|(i, m)| JobSpec {
            job_id: i as u64,
            duration_hours: m / 60.0,
            vms_per_job,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingModel {
    /// $ per VM-hour.
    pub on_demand_rate: f64,
    pub low_priority_discount_factor: f64,
    /// Billing increment in seconds; 0 bills continuously.
    pub billing_granularity_seconds: f64,
}

impl Default for PricingModel {
    fn default() -> Self {
        Self {
            on_demand_rate: PAPER_RATE,
            low_priority_discount_factor: 3.0,
            billing_granularity_seconds: 1.0,
        }
    }
}

impl PricingModel {
    pub fn with_rate(rate: f64) -> Self {
        Self {
            on_demand_rate: rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.on_demand_rate > 0.0) {
            return Err(SimError::BadPricing(format!(
                "rate {} must be positive",
                self.on_demand_rate
            )));
        }
        if !(self.billing_granularity_seconds >= 0.0) {
            return Err(SimError::BadPricing(
                "billing granularity must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Billable hours for a continuous `hours` interval.
    pub fn billable_hours(&self, hours: f64) -> f64 {
        self.units_to_hours(self.billing_units(hours))
    }

    /// Whole billing increments covering `hours` (plain hours when billing
    /// is continuous). Summing units keeps totals exact.
    fn billing_units(&self, hours: f64) -> f64 {
        let g = self.billing_granularity_seconds;
        if g <= 0.0 {
            return hours;
        }
        (hours * 3600.0 / g - 1e-9).ceil().max(0.0)
    }

    fn units_to_hours(&self, units: f64) -> f64 {
        let g = self.billing_granularity_seconds;
        if g <= 0.0 {
            units
        } else {
            units * g / 3600.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub job_id: u64,
    pub start_hours: f64,
    pub end_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub makespan_hours: f64,
    pub busy_vm_hours: f64,
    pub idle_vm_hours: f64,
    pub billed_vm_hours: f64,
    pub cost: f64,
    /// 1 for on-demand; the low-priority factor once applied.
    pub discount_factor: f64,
    pub jobs: Vec<JobTiming>,
}

/// Log-normal runtimes truncated to `z` in `[z_min, z_max]` standard units,
/// rescaled so the distribution mean is exactly `mean_minutes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeDistribution {
    pub mean_minutes: f64,
    /// Log-space standard deviation. Zero makes every runtime the mean.
    pub sigma: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub seed: u64,
}

impl RuntimeDistribution {
    pub const DEFAULT_Z_MIN: f64 = -1.5;
    pub const DEFAULT_Z_MAX: f64 = 2.5;

    /// The default spread puts the longest possible runtime at twice the
    /// shortest, with a long right tail.
    pub fn default_sigma() -> f64 {
        std::f64::consts::LN_2 / (Self::DEFAULT_Z_MAX - Self::DEFAULT_Z_MIN)
    }

    pub fn new(mean_minutes: f64, seed: u64) -> Self {
        Self {
            mean_minutes,
            sigma: Self::default_sigma(),
            z_min: Self::DEFAULT_Z_MIN,
            z_max: Self::DEFAULT_Z_MAX,
            seed,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.mean_minutes > 0.0 && self.mean_minutes.is_finite()) {
            return Err(SimError::BadDistribution(format!(
                "mean {} must be positive",
                self.mean_minutes
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SimError::BadDistribution(format!(
                "sigma {} must be >= 0",
                self.sigma
            )));
        }
        if !(self.z_min < self.z_max) {
            return Err(SimError::BadDistribution(
                "truncation window is empty".into(),
            ));
        }
        Ok(())
    }

    /// `E[exp(sigma Z)]` for a standard normal `Z` restricted to the window.
    fn truncated_mean_factor(&self) -> f64 {
        let n = Normal::standard();
        let mass = n.cdf(self.z_max) - n.cdf(self.z_min);
        let shifted = n.cdf(self.z_max - self.sigma) - n.cdf(self.z_min - self.sigma);
        (0.5 * self.sigma * self.sigma).exp() * shifted / mass
    }

    /// Shortest and longest runtime the distribution can produce.
    pub fn bounds_minutes(&self) -> (f64, f64) {
        let scale = self.mean_minutes / self.truncated_mean_factor();
        (
            scale * (self.sigma * self.z_min).exp(),
            scale * (self.sigma * self.z_max).exp(),
        )
    }
}

/// Runtimes in minutes, deterministic in `dist.seed`. Normals come from
/// [`SplitMix64`] by rejection into the truncation window.
pub fn sample_runtimes(dist: &RuntimeDistribution, n_jobs: usize) -> Result<Vec<f64>, SimError> {
    dist.validate()?;
    if n_jobs == 0 {
        return Err(SimError::NoJobs);
    }
    if dist.sigma == 0.0 {
        return Ok(vec![dist.mean_minutes; n_jobs]);
    }
    let scale = dist.mean_minutes / dist.truncated_mean_factor();
    let mut rng = SplitMix64::new(dist.seed);
    let mut out = Vec::with_capacity(n_jobs);
    while out.len() < n_jobs {
        let z = rng.standard_normal();
        if (dist.z_min..=dist.z_max).contains(&z) {
            out.push(scale * (dist.sigma * z).exp());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    free_at: f64,
    index: usize,
}

impl Eq for Slot {}

impl Ord for Slot {
    fn cmp(&self, other: &Self) -> Ordering {
        self.free_at
            .total_cmp(&other.free_at)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn validate_jobs(jobs: &[JobSpec], n_vms: usize) -> Result<(), SimError> {
    if jobs.is_empty() {
        return Err(SimError::NoJobs);
    }
    for j in jobs {
        if !(j.duration_hours > 0.0 && j.duration_hours.is_finite()) {
            return Err(SimError::BadJob {
                job_id: j.job_id,
                reason: format!("duration {}", j.duration_hours),
            });
        }
        if j.vms_per_job == 0 {
            return Err(SimError::BadJob {
                job_id: j.job_id,
                reason: "vms_per_job must be >= 1".into(),
            });
        }
        if j.vms_per_job as usize > n_vms {
            return Err(SimError::TooFewVms {
                n_vms,
                needed: j.vms_per_job,
            });
        }
    }
    Ok(())
}

/// FCFS placement. A VM picked up exactly when its previous job ends stays
/// allocated; any other pick is a fresh allocation that costs `latency`
/// hours of boot time before the job can start. Returns job timings and the
/// billed VM-hours, each VM billed per continuous allocation span.
fn place_fcfs(
    jobs: &[JobSpec],
    n_slots: usize,
    latency: f64,
    pricing: &PricingModel,
) -> (Vec<JobTiming>, f64) {
    let mut slots: BinaryHeap<Reverse<Slot>> = (0..n_slots)
        .map(|index| {
            Reverse(Slot {
                free_at: 0.0,
                index,
            })
        })
        .collect();
    // Start of the current allocation span per VM; `None` until first use.
    let mut span_start: Vec<Option<f64>> = vec![None; n_slots];
    let mut billed = 0.0;
    let mut last_alloc = 0.0_f64;
    let mut timings = Vec::with_capacity(jobs.len());
    let mut taken = Vec::new();
    for job in jobs {
        taken.clear();
        for _ in 0..job.vms_per_job {
            taken.push(slots.pop().expect("validated VM count").0);
        }
        let ready = taken.iter().map(|s| s.free_at).fold(0.0, f64::max);
        let alloc = ready.max(last_alloc);
        last_alloc = alloc;
        let warm: Vec<bool> = taken
            .iter()
            .map(|s| span_start[s.index].is_some() && s.free_at == alloc)
            .collect();
        let boot = if warm.iter().all(|&w| w) {
            0.0
        } else {
            latency
        };
        let end = alloc + boot + job.duration_hours;
        for (s, &w) in taken.iter().zip(&warm) {
            if !w {
                if let Some(t0) = span_start[s.index] {
                    billed += pricing.billing_units(s.free_at - t0);
                }
                span_start[s.index] = Some(alloc);
            }
        }
        for s in &taken {
            slots.push(Reverse(Slot {
                free_at: end,
                index: s.index,
            }));
        }
        timings.push(JobTiming {
            job_id: job.job_id,
            start_hours: alloc + boot,
            end_hours: end,
        });
    }
    for Reverse(s) in slots {
        if let Some(t0) = span_start[s.index] {
            billed += pricing.billing_units(s.free_at - t0);
        }
    }
    (timings, pricing.units_to_hours(billed))
}

fn busy_hours(jobs: &[JobSpec]) -> f64 {
    jobs.iter()
        .map(|j| j.duration_hours * j.vms_per_job as f64)
        .sum()
}

/// All `n_vms` are billed from time zero until the last job ends.
pub fn simulate_fixed_cluster(
    jobs: &[JobSpec],
    n_vms: usize,
    pricing: &PricingModel,
) -> Result<ScheduleResult, SimError> {
    pricing.validate()?;
    validate_jobs(jobs, n_vms)?;
    let (timings, _) = place_fcfs(jobs, n_vms, 0.0, pricing);
    let makespan = timings.iter().map(|t| t.end_hours).fold(0.0, f64::max);
    let busy = busy_hours(jobs);
    let billed = pricing.units_to_hours(n_vms as f64 * pricing.billing_units(makespan));
    Ok(ScheduleResult {
        makespan_hours: makespan,
        busy_vm_hours: busy,
        idle_vm_hours: billed - busy,
        billed_vm_hours: billed,
        cost: billed * pricing.on_demand_rate,
        discount_factor: 1.0,
        jobs: timings,
    })
}

/// Adds a master VM that stays up for the whole makespan.
pub fn with_master_vm(mut result: ScheduleResult, pricing: &PricingModel) -> ScheduleResult {
    let extra = pricing.billable_hours(result.makespan_hours);
    result.billed_vm_hours += extra;
    result.idle_vm_hours += extra;
    result.cost += extra * pricing.on_demand_rate / result.discount_factor;
    result
}

/// The pool grows to at most `max_pool_vms` and releases a VM as soon as no
/// job is waiting for it. Every fresh allocation pays
/// `scale_latency_seconds` of boot time before its job starts.
pub fn simulate_batch_pool(
    jobs: &[JobSpec],
    max_pool_vms: usize,
    pricing: &PricingModel,
    scale_latency_seconds: f64,
) -> Result<ScheduleResult, SimError> {
    pricing.validate()?;
    validate_jobs(jobs, max_pool_vms)?;
    if !(scale_latency_seconds >= 0.0) {
        return Err(SimError::BadPricing("scale latency must be >= 0".into()));
    }
    let (timings, billed) = place_fcfs(jobs, max_pool_vms, scale_latency_seconds / 3600.0, pricing);
    let makespan = timings.iter().map(|t| t.end_hours).fold(0.0, f64::max);
    let busy = busy_hours(jobs);
    Ok(ScheduleResult {
        makespan_hours: makespan,
        busy_vm_hours: busy,
        idle_vm_hours: billed - busy,
        billed_vm_hours: billed,
        cost: billed * pricing.on_demand_rate,
        discount_factor: 1.0,
        jobs: timings,
    })
}

/// Reprices a schedule on low-priority VMs. Preemption is not modeled.
pub fn apply_low_priority(
    result: &ScheduleResult,
    pricing: &PricingModel,
) -> Result<ScheduleResult, SimError> {
    let f = pricing.low_priority_discount_factor;
    if !(2.0..=3.0).contains(&f) {
        return Err(SimError::BadPricing(format!(
            "low-priority discount factor {f} outside [2, 3]"
        )));
    }
    Ok(ScheduleResult {
        cost: result.cost / f,
        discount_factor: result.discount_factor * f,
        ..result.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub n_vms: usize,
    pub makespan_h: f64,
    pub busy_vmh: f64,
    pub idle_vmh: f64,
    pub fixed_cost: f64,
    pub batch_cost: f64,
    pub ratio: f64,
    pub low_priority_cost: f64,
}

/// Fixed-cluster idle time and cost against a batch pool capped at the same
/// VM count, for each entry of `vm_counts`.
pub fn idle_cost_curve(
    jobs: &[JobSpec],
    vm_counts: &[usize],
    pricing: &PricingModel,
    scale_latency_seconds: f64,
) -> Result<Vec<CurveRow>, SimError> {
    vm_counts
        .iter()
        .map(|&n| {
            let fixed = simulate_fixed_cluster(jobs, n, pricing)?;
            let batch = simulate_batch_pool(jobs, n, pricing, scale_latency_seconds)?;
            let low = apply_low_priority(&batch, pricing)?;
            Ok(CurveRow {
                n_vms: n,
                makespan_h: fixed.makespan_hours,
                busy_vmh: fixed.busy_vm_hours,
                idle_vmh: fixed.idle_vm_hours,
                fixed_cost: fixed.cost,
                batch_cost: batch.cost,
                ratio: fixed.cost / batch.cost,
                low_priority_cost: low.cost,
            })
        })
        .collect()
}

/// Batch-pool cost implied by the headline arithmetic: jobs x mean runtime x rate.
pub fn paper_arithmetic_cost() -> f64 {
    PAPER_JOBS as f64 * PAPER_MEAN_MINUTES / 60.0 * PAPER_RATE
}

/// A one-line remark comparing a simulated cost with the printed $10,750.
pub fn reported_cost_note(simulated_cost: f64) -> String {
    format!(
        "note: simulated ${:.2} vs. reported ${:.0} ({:+.2}%); {} jobs x {} min x ${}/VM-h gives ${:.2}, \
         and two VMs per job would double it",
        simulated_cost,
        PAPER_REPORTED_COST,
        100.0 * (simulated_cost - PAPER_REPORTED_COST) / PAPER_REPORTED_COST,
        PAPER_JOBS,
        PAPER_MEAN_MINUTES,
        PAPER_RATE,
        paper_arithmetic_cost()
    )
}
