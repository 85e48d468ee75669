use std::path::Path;
use std::process::Command;

use fedfair::harness::*;

const TINY: &str = "\
dim=16
layers=2
heads=2
rounds=2
clients=3
local_steps=2
refine_steps=2
fglobal_cap=10
train_size=120
val_size=40
test_size=40
";

fn tiny() -> Config {
    Config::parse(TINY).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn csv_layout_and_final_row() {
    let cfg = tiny();
    let report = execute(&cfg).unwrap();
    let csv = render_csv(&report);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,client,a_b,phi_a,phi_demo,phi_eq,f_global,score,weight"));
    // three clients plus one global row per round
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let (round, rec) = final_global_row(&csv).unwrap().unwrap();
    assert_eq!(round, 1);
    let last = report.final_metrics();
    assert!((rec.phi_eq - last.phi_eq).abs() < 1e-6);
    assert!((rec.f_global.unwrap() - last.f_global.unwrap()).abs() < 1e-6);
}

#[test]
fn zero_rounds_give_header_only_csv() {
    let mut cfg = tiny();
    cfg.set("rounds", "0").unwrap();
    let report = execute(&cfg).unwrap();
    assert_eq!(render_csv(&report), format!("{CSV_HEADER}\n"));
    let md = render_summary(&cfg, &report);
    assert!(md.contains("| initial |"));
    assert!(md.contains("rounds completed: 0 of 0"));
    assert_eq!(final_global_row(&render_csv(&report)).unwrap(), None);
}

#[test]
fn baseline_rows_leave_score_empty() {
    let mut cfg = tiny();
    cfg.set("method", "fedavg_baseline").unwrap();
    let csv = render_csv(&execute(&cfg).unwrap());
    let client_row = csv.lines().nth(1).unwrap();
    assert!(client_row.starts_with("0,0,,,,,,,"), "{client_row}");
    assert!(client_row.ends_with("0.333333"));
}

#[test]
fn identical_runs_write_identical_files() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, a.path()).unwrap();
    let rb = run_experiment(&cfg, b.path()).unwrap();
    for f in [CSV_FILE, SUMMARY_FILE, CONFIG_FILE] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    assert_eq!(ra.backbone_hash, rb.backbone_hash);
    // emitting the same report again is byte-stable too
    emit_report(&cfg, &ra, b.path()).unwrap();
    assert_eq!(read(&a.path().join(CSV_FILE)), read(&b.path().join(CSV_FILE)));

    let echoed = Config::parse(&read(&a.path().join(CONFIG_FILE))).unwrap();
    assert_eq!(echoed.hash(), cfg.hash());
    assert!(read(&a.path().join(SUMMARY_FILE)).contains(&cfg.hash()));
}

#[test]
fn methods_dispatch_to_their_components() {
    let mut cfg = tiny();
    cfg.set("method", "w/o-fpf").unwrap();
    let r = execute(&cfg).unwrap();
    assert!(r.rounds.iter().all(|x| x.refine.is_none()));
    assert!(r.rounds.iter().all(|x| x.clients.iter().all(|c| c.score.is_none())));
    cfg.set("method", "fvlfp").unwrap();
    let r = execute(&cfg).unwrap();
    assert!(r.rounds.iter().all(|x| x.refine.is_some()));
}

#[test]
fn generated_splits_reload_to_the_same_run() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    write_splits(&cfg, dir.path()).unwrap();
    let mut from_disk = cfg.clone();
    from_disk.set("data_dir", dir.path().to_str().unwrap()).unwrap();
    let a = prepare_data(&cfg).unwrap();
    let b = prepare_data(&from_disk).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    assert_eq!(a.test, b.test);
    assert_eq!(a.partition, b.partition);
}

#[test]
fn feature_files_are_ingested() {
    let mut cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let row = |y: u8, g: u8, i: usize| {
        let v: Vec<String> = (0..16).map(|j| format!("{}", ((i * 7 + j) % 5) as f64 * 0.1)).collect();
        format!("{y},{g},{}\n", v.join(","))
    };
    for (name, n) in [("train.txt", 24), ("val.txt", 8), ("test.txt", 8)] {
        let mut text = format!("dim=16 count={n}\n");
        for i in 0..n {
            text.push_str(&row((i % 2) as u8, ((i / 2) % 2) as u8, i));
        }
        std::fs::write(dir.path().join(name), text).unwrap();
    }
    cfg.set("data_dir", dir.path().to_str().unwrap()).unwrap();
    cfg.set("val_size", "8").unwrap();
    cfg.set("test_size", "8").unwrap();
    let r = execute(&cfg).unwrap();
    assert!(r.complete);

    std::fs::write(dir.path().join("val.txt"), "dim=3 count=1\n0,0,1,2,3\n").unwrap();
    assert!(execute(&cfg).is_err());
}

#[test]
fn sweep_cells_reproduce_in_isolation() {
    let base = tiny();
    let plan = SweepPlan {
        axis: Axis::Alpha,
        values: vec!["100".into(), "0.1".into()],
        methods: vec![Method::Fvlfp, Method::FedavgBaseline],
        repeats: 2,
        defaults: vec![],
    };
    let cells = plan.cells(&base);
    assert_eq!(cells.len(), 8);
    let c = plan.cell_config(&base, &cells[3]).unwrap();
    assert_eq!(c.alpha, 0.1);
    assert_eq!(c.method, Method::Fvlfp);
    // same repeat, other value and method: same data seed
    let other = plan.cell_config(&base, &cells[4]).unwrap();
    assert_eq!(cells[4].repeat, 0);
    assert_eq!(plan.cell_config(&base, &cells[0]).unwrap().seed, other.seed);
    assert_ne!(c.seed, other.seed);
    assert_eq!(plan.cell_config(&base, &cells[3]).unwrap(), c);
}

#[test]
fn sweep_writes_tables_and_records_failures() {
    let base = tiny();
    let plan = SweepPlan {
        axis: Axis::Clients,
        values: vec!["2".into(), "500".into()],
        methods: vec![],
        repeats: 1,
        defaults: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    // 500 clients cannot be carved out of 120 samples; the other cell still runs
    let res = run_sweep(&base, &plan, Some(dir.path())).unwrap();
    assert_eq!(res.len(), 2);
    assert!(!res[0].failed() && res[1].failed());
    assert!(read(&dir.path().join(SWEEP_MD)).contains("## Failed cells"));
    assert!(read(&dir.path().join(SWEEP_CSV)).contains("fvlfp,500,0,failed,,,,,"));

    let plan = SweepPlan {
        values: vec!["2".into(), "3".into()],
        ..plan
    };
    let res = run_sweep(&base, &plan, Some(dir.path())).unwrap();
    assert!(res.iter().all(|r| !r.failed()));
    let md = read(&dir.path().join(SWEEP_MD));
    assert!(md.contains("| Metric | clients=2 | clients=3 |"), "{md}");
    assert!(md.contains("| Φ_eq |"));
    assert!(dir.path().join("fvlfp/clients=3/repeat0").join(CSV_FILE).exists());
    let rows = collect_runs(dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, "fvlfp/clients=2/repeat0");
}

#[test]
fn presets_have_the_documented_shape() {
    let base = Config::default();
    assert_eq!(preset("table1").unwrap().cells(&base).len(), 6);
    assert_eq!(preset("table2").unwrap().cells(&base).len(), 12);
    let t34 = preset("table3_4").unwrap();
    assert_eq!(t34.values, ["100", "1", "0.5", "0.1"]);
    assert_eq!(t34.cells(&base).len(), 24);
    assert_eq!(preset("table5").unwrap().values, ["5", "10", "20", "40"]);
    assert!(preset("table9").is_err());
    assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
}

#[test]
fn presets_start_from_their_defaults() {
    let plain = Config::default();
    assert_eq!(plain.get("lr").unwrap(), "0.0002");
    let base = preset("table1").unwrap().base_config().unwrap();
    for (key, value) in PRESET_DEFAULTS {
        let mut want = Config::default();
        want.set(key, value).unwrap();
        assert_eq!(base.get(key).unwrap(), want.get(key).unwrap(), "{key}");
    }
    assert_ne!(base.get("lr").unwrap(), plain.get("lr").unwrap());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedfair")).args(args).output().unwrap()
}

#[test]
fn cli_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, format!("{TINY}rounds=5\n")).unwrap();
    let out = dir.path().join("run");
    let o = cli(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--rounds",
        "1",
        "--method",
        "fedavg_baseline",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = Config::parse(&read(&out.join(CONFIG_FILE))).unwrap();
    assert_eq!(echoed.fed.rounds, 1);
    assert_eq!(echoed.method, Method::FedavgBaseline);

    let o = cli(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("| . |"));

    let o = cli(&["run", "--config", cfg_path.to_str().unwrap(), "--alpha", "-1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn cli_gen_data_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();
    let o = cli(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    for f in SPLIT_FILES {
        assert!(read(&dir.path().join(f)).starts_with("dim=1024 count="));
    }
}
