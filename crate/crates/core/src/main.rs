use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use rtm_core::batchsim::{
    apply_low_priority, idle_cost_curve, jobs_from_minutes, reported_cost_note, sample_runtimes,
    simulate_batch_pool, simulate_fixed_cluster, with_master_vm, PricingModel, RuntimeDistribution,
};
use rtm_core::blobstore::{encode_image, BlobStore, ImageBlob};
use rtm_core::msgqueue::MessageQueue;
use rtm_core::orchestrator::config::parse_override_args;
use rtm_core::orchestrator::report::{paper_options, paper_traces, write_curve_csv};
use rtm_core::orchestrator::worker::run_worker;
use rtm_core::orchestrator::{self, report, JobTrace, PipelineConfig, ReportOptions};
use rtm_core::reducer::{run_reduction_service, ReductionConfig, DEFAULT_FAN_IN};

type CliResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "rtm",
    version,
    about = "Serverless-style reverse-time migration on a local worker pool"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. `--model.nz 201 --workers 8`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, Box<dyn std::error::Error>> {
        let base = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let pairs = parse_override_args(&self.overrides)?;
        Ok(base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the migration and true velocity models plus the survey geometry.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full pipeline: map phase, concurrent reduction, cost report.
    Run(ConfigArgs),
    /// Run only the map phase; the queue is left for `rtm reduce`.
    Map(ConfigArgs),
    /// Run the reduction service against an existing queue and store.
    Reduce {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        total_leaves: u64,
        #[arg(long, default_value_t = DEFAULT_FAN_IN)]
        fan_in: usize,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        #[arg(long)]
        timeout_seconds: Option<f64>,
    },
    /// Simulate fixed-cluster vs. batch-pool cost for synthetic runtimes.
    Simulate(SimulateArgs),
    /// Cost report and CSV files from job traces.
    Report {
        /// `traces.json` written by `rtm map` or `rtm run`.
        #[arg(long, required_unless_present = "paper_numbers")]
        traces: Option<PathBuf>,
        /// Use 1500 synthetic jobs of 119.28 min on 100 VMs at $3.629/h.
        #[arg(long)]
        paper_numbers: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_vms: usize,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = 3.0)]
        discount: f64,
    },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long)]
        worker_id: u64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1500)]
    jobs: usize,
    #[arg(long, default_value_t = 119.28)]
    mean_minutes: f64,
    /// Log-space standard deviation of the runtimes; 0 makes them all equal.
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long, default_value_t = 3.629)]
    rate: f64,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "25,50,100,200,400,800,1500"
    )]
    vm_counts: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    vms_per_job: u32,
    #[arg(long, default_value_t = 0.0)]
    scale_latency: f64,
    #[arg(long, default_value_t = 3.0)]
    discount: f64,
    /// Billing increment in seconds; 0 bills continuously.
    #[arg(long, default_value_t = 1.0)]
    billing_granularity: f64,
    /// Bill one extra master VM for the fixed cluster's makespan.
    #[arg(long)]
    with_master: bool,
}

fn print_json(value: &impl serde::Serialize) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_traces(dir: &Path, traces: &[JobTrace]) -> CliResult {
    fs::write(dir.join("traces.json"), serde_json::to_vec_pretty(traces)?)?;
    Ok(())
}

fn generate(out: &Path, config: &PipelineConfig) -> CliResult {
    config.validate()?;
    let survey = config.build_survey()?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("velocity.rtmb"),
        encode_image(&ImageBlob::from_velocity(&survey.background))?,
    )?;
    fs::write(
        out.join("true_velocity.rtmb"),
        encode_image(&ImageBlob::from_velocity(&survey.truth))?,
    )?;
    fs::write(
        out.join("geometry.json"),
        serde_json::to_vec_pretty(&survey.geometry)?,
    )?;
    fs::write(
        out.join("plans.json"),
        serde_json::to_vec_pretty(&survey.plans)?,
    )?;
    fs::write(out.join("config.json"), config.to_json())?;
    println!(
        "wrote {}x{} models, {} sources, {} receivers, {} shot gathers to {}",
        survey.background.nz,
        survey.background.nx,
        survey.geometry.sources.len(),
        survey.geometry.receivers.len(),
        survey.plans.len(),
        out.display()
    );
    Ok(())
}

fn run(config: &PipelineConfig) -> CliResult {
    let outcome = orchestrator::run_pipeline(config)?;
    let dir = &config.work_dir;
    let blob = ImageBlob::from_image(&outcome.image, outcome.leaf_count);
    fs::write(dir.join("final_image.rtmb"), encode_image(&blob)?)?;
    write_traces(dir, &outcome.traces)?;
    let mut options = ReportOptions::new(config.workers);
    options.scale_latency_seconds = config.scale_latency_seconds;
    options.out_dir = Some(dir.join("report"));
    let cost = report(&outcome.traces, &config.pricing, &options)?;
    let survey = config.build_survey()?;
    let (iz, ix) = outcome.image.argmax_abs();
    let (sz, sx) = survey.background.nearest_cell(survey.scatterer);
    print_json(&serde_json::json!({
        "final_image": dir.join("final_image.rtmb"),
        "leaf_count": outcome.leaf_count,
        "argmax_cell": [iz, ix],
        "scatterer_cell": [sz, sx],
        "reduction": outcome.reduction,
        "cost": cost,
        "workers_spawned": outcome.pool.spawned,
        "jobs_requeued": outcome.pool.requeued,
    }))
}

fn map(config: &PipelineConfig) -> CliResult {
    let outcome = orchestrator::run_map_phase(config)?;
    write_traces(&config.work_dir, &outcome.traces)?;
    print_json(&outcome.traces)
}

fn simulate(a: &SimulateArgs) -> CliResult {
    let pricing = PricingModel {
        on_demand_rate: a.rate,
        low_priority_discount_factor: a.discount,
        billing_granularity_seconds: a.billing_granularity,
    };
    let mut dist = RuntimeDistribution::new(a.mean_minutes, a.seed);
    if let Some(s) = a.spread {
        dist = dist.with_sigma(s);
    }
    let minutes = sample_runtimes(&dist, a.jobs)?;
    let jobs = jobs_from_minutes(&minutes, a.vms_per_job);
    let mut rows = idle_cost_curve(&jobs, &a.vm_counts, &pricing, a.scale_latency)?;

    let mean = minutes.iter().sum::<f64>() / minutes.len() as f64;
    println!(
        "jobs: {}  mean runtime: {:.2} min  rate: ${}/VM-h",
        a.jobs, mean, a.rate
    );
    for row in rows.iter_mut() {
        let batch = simulate_batch_pool(&jobs, row.n_vms, &pricing, a.scale_latency)?;
        let mut fixed = simulate_fixed_cluster(&jobs, row.n_vms, &pricing)?;
        if a.with_master {
            fixed = with_master_vm(fixed, &pricing);
            row.idle_vmh = fixed.idle_vm_hours;
            row.fixed_cost = fixed.cost;
            row.ratio = fixed.cost / batch.cost;
        }
        let low = apply_low_priority(&batch, &pricing)?;
        println!(
            "n_vms {:>5}: batch ${:.2} (makespan {:.2} h)  fixed ${:.2} (makespan {:.2} h, idle {:.2} VM-h)  \
             ratio {:.3}  low-priority ${:.2}",
            row.n_vms,
            batch.cost,
            batch.makespan_hours,
            fixed.cost,
            fixed.makespan_hours,
            fixed.idle_vm_hours,
            row.ratio,
            low.cost
        );
    }
    if let Some(best) = rows.iter().max_by(|x, y| x.ratio.total_cmp(&y.ratio)) {
        println!(
            "max fixed/batch ratio {:.3} at {} VMs; with low priority the saving is {:.2}x",
            best.ratio,
            best.n_vms,
            best.fixed_cost / best.low_priority_cost
        );
    }
    if let Some(first) = rows.first() {
        println!("{}", reported_cost_note(first.batch_cost));
    }
    if let Some(out) = &a.out {
        write_curve_csv(out, &rows)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn report_cmd(
    traces: Option<&Path>,
    paper: bool,
    out: Option<PathBuf>,
    n_vms: usize,
    rate: Option<f64>,
    discount: f64,
) -> CliResult {
    let (traces, mut options, default_rate) = if paper {
        (
            paper_traces(),
            paper_options(out),
            rtm_core::batchsim::PAPER_RATE,
        )
    } else {
        let path = traces.ok_or("--traces is required")?;
        let traces: Vec<JobTrace> = serde_json::from_slice(&fs::read(path)?)?;
        let mut options = ReportOptions::new(n_vms);
        options.out_dir = out;
        (traces, options, PricingModel::default().on_demand_rate)
    };
    if !paper {
        options.n_vms = n_vms;
    }
    let pricing = PricingModel {
        on_demand_rate: rate.unwrap_or(default_rate),
        low_priority_discount_factor: discount,
        ..PricingModel::default()
    };
    let r = report(&traces, &pricing, &options)?;
    print!("{}", r.summary());
    if let Some(dir) = &options.out_dir {
        println!("wrote CSV files to {}", dir.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate { out, config } => generate(&out, &config.load()?),
        Command::Run(c) => run(&c.load()?),
        Command::Map(c) => map(&c.load()?),
        Command::Reduce {
            queue,
            store,
            total_leaves,
            fan_in,
            parallel,
            timeout_seconds,
        } => {
            let config = ReductionConfig {
                fan_in,
                max_parallel_invocations: parallel,
                timeout: timeout_seconds.map(Duration::from_secs_f64),
                ..ReductionConfig::new(total_leaves)
            };
            let report = run_reduction_service(
                &config,
                &MessageQueue::open(queue)?,
                &BlobStore::open(store)?,
            )?;
            print_json(&report)
        }
        Command::Simulate(a) => simulate(&a),
        Command::Report {
            traces,
            paper_numbers,
            out,
            n_vms,
            rate,
            discount,
        } => report_cmd(traces.as_deref(), paper_numbers, out, n_vms, rate, discount),
        Command::Worker {
            work_dir,
            worker_id,
        } => {
            run_worker(&work_dir, worker_id, false)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
