mod common;

use std::process::{Command, Output};

use rtm_core::blobstore::decode_image;

fn rtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtm"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_reports_cost_and_discrepancy() {
    let o = rtm(&[
        "simulate",
        "--jobs",
        "1500",
        "--mean-minutes",
        "119.28",
        "--spread",
        "0",
        "--rate",
        "3.629",
        "--vm-counts",
        "100",
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("batch $10821.68"), "{s}");
    assert!(s.contains("makespan 29.82 h"));
    assert!(s.contains("reported $10750"));
}

#[test]
fn simulate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let o = rtm(&[
        "simulate",
        "--vm-counts",
        "25,50,100",
        "--seed",
        "42",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let mut rd = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        rd.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "n_vms",
            "makespan_h",
            "busy_vmh",
            "idle_vmh",
            "fixed_cost",
            "batch_cost",
            "ratio",
            "low_priority_cost"
        ]
    );
    let counts: Vec<String> = rd.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(counts, ["25", "50", "100"]);
}

#[test]
fn master_vm_raises_fixed_cost() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "simulate",
            "--vm-counts",
            "100",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        assert!(rtm(&args).status.success());
        let mut rd = csv::Reader::from_path(&out).unwrap();
        let row = rd.records().next().unwrap().unwrap();
        row[4].parse::<f64>().unwrap()
    };
    assert!(read("a.csv", &["--with-master"]) > read("b.csv", &[]));
}

#[test]
fn bad_arguments_exit_nonzero() {
    assert!(!rtm(&["simulate", "--jobs", "0"]).status.success());
    assert!(!rtm(&["simulate", "--discount", "5"]).status.success());
    assert!(!rtm(&["run", "--model.depth", "3"]).status.success());
    assert!(!rtm(&["frobnicate"]).status.success());
    assert!(!rtm(&["report"]).status.success());
}

#[test]
fn paper_report_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtm(&[
        "report",
        "--paper-numbers",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("batch pool: $10821.68, makespan 29.82 h"), "{s}");
    assert!(s.contains("mean runtime: 7156.80 s (119.28 min)"));
    assert!(dir.path().join("runtimes_sorted.csv").exists());
    assert!(dir.path().join("idle_cost_curve.csv").exists());
}

#[test]
fn generate_writes_models_and_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtm(&[
        "generate",
        "--out",
        dir.path().to_str().unwrap(),
        "--model.nz",
        "31",
        "--model.nx",
        "41",
        "--geometry.n_receivers",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = decode_image(&std::fs::read(dir.path().join("velocity.rtmb")).unwrap()).unwrap();
    let t = decode_image(&std::fs::read(dir.path().join("true_velocity.rtmb")).unwrap()).unwrap();
    assert_eq!((v.nz, v.nx), (31, 41));
    assert!(t.values.iter().sum::<f64>() > v.values.iter().sum::<f64>());
    let plans: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("plans.json")).unwrap()).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 3);
}

#[test]
fn map_then_reduce_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let cfg = dir.path().join("cfg.json");
    let mut c = common::small_process_config(&work, 5, 2);
    c.worker_binary = None;
    std::fs::write(&cfg, c.to_json()).unwrap();

    let o = rtm(&["map", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let traces: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(traces.as_array().unwrap().len(), 5);

    let o = rtm(&[
        "reduce",
        "--queue",
        work.join("queue").to_str().unwrap(),
        "--store",
        work.join("store").to_str().unwrap(),
        "--total-leaves",
        "5",
        "--fan-in",
        "2",
        "--timeout-seconds",
        "30",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["final_leaf_count"], 5);
    assert_eq!(report["invocation_count"], 4);

    let out = dir.path().join("report");
    let o = rtm(&[
        "report",
        "--traces",
        work.join("traces.json").to_str().unwrap(),
        "--n-vms",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("jobs: 5"));
    assert_eq!(
        csv::Reader::from_path(out.join("runtimes_sorted.csv"))
            .unwrap()
            .records()
            .count(),
        5
    );
}

#[test]
fn run_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let o = rtm(&[
        "run",
        "--work_dir",
        work.to_str().unwrap(),
        "--model.nz",
        "41",
        "--model.nx",
        "41",
        "--nt",
        "300",
        "--geometry.n_receivers",
        "3",
        "--geometry.n_sources",
        "9",
        "--workers",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["leaf_count"], 3);
    let image = decode_image(&std::fs::read(work.join("final_image.rtmb")).unwrap()).unwrap();
    assert_eq!((image.nz, image.nx, image.leaf_count), (41, 41, 3));
    assert!(work.join("report/idle_cost_curve.csv").exists());
}
