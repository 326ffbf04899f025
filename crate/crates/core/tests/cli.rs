use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedclass::metrics::RunReport;

const TINY: &[&str] = &[
    "--classes",
    "4",
    "--per-class",
    "30",
    "--features",
    "4",
    "--tasks",
    "2,2",
    "--clients",
    "3",
    "--rounds-per-task",
    "2",
    "--hidden-width",
    "16",
];

fn fedclass(args: &[&str], envs: &[(&str, &str)]) -> Output {
    fedclass_in(None, args, envs)
}

fn fedclass_in(cwd: Option<&Path>, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedclass"));
    cmd.args(args);
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn tiny_run(out: &Path, extra: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut args = vec!["run", "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    fedclass(&args, envs)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn run_writes_per_seed_reports_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = tiny_run(dir.path(), &["--seeds", "1,2,3", "--run-name", "demo"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let names: Vec<String> = files_in(dir.path())
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "demo_seed1.csv",
            "demo_seed1.json",
            "demo_seed2.csv",
            "demo_seed2.json",
            "demo_seed3.csv",
            "demo_seed3.json",
            "demo_summary.csv",
        ]
    );
    let summary = std::fs::read_to_string(dir.path().join("demo_summary.csv")).unwrap();
    assert!(summary.starts_with("metric,mean,std,seeds"));
    assert!(summary.contains("avg forg"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("global acc"));
}

#[test]
fn json_report_round_trips_and_agrees_with_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = tiny_run(dir.path(), &["--seeds", "4", "--run-name", "rt"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json = dir.path().join("rt_seed4.json");
    let report = RunReport::read_json(&json).unwrap();
    let text = std::fs::read_to_string(&json).unwrap();
    assert_eq!(report.to_json().unwrap(), text.trim_end());
    assert_eq!(RunReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    let csv = std::fs::read_to_string(dir.path().join("rt_seed4.csv")).unwrap();
    assert_eq!(report.to_csv().unwrap(), csv);

    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let avg = rows
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[0] == "avg_forgetting")
        .unwrap();
    assert_eq!(avg[2].parse::<f64>().unwrap(), report.avg_forgetting.unwrap());
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    // relative output dir so the echoed config is the same in both runs
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        let mut args = vec!["run", "--output-dir", "out", "--seeds", "5,6"];
        args.extend_from_slice(TINY);
        let out = fedclass_in(Some(dir.path()), &args, &[("FEDCLASS_THREADS", threads)]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let (fa, fb) = (files_in(&a.path().join("out")), files_in(&b.path().join("out")));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn config_errors_exit_with_one_and_list_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--output-dir", dir.path().to_str().unwrap(), "--alpha", "0", "--theta=-1"];
    args.extend_from_slice(&["--tasks", "3,3", "--clients", "0"]);
    let out = fedclass(&args, &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    for key in ["alpha", "theta", "tasks", "clients"] {
        assert!(err.contains(key), "missing {key} in {err}");
    }

    let out = fedclass(&["run", "--dataset", "idx", "--idx-train-images", "/no/such/file"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("idx_train_images"));

    let out = fedclass(&["run", "--set", "no_such_key=1"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = fedclass(&["run", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = tiny_run(&blocker, &["--seeds", "1"], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn check_passes_with_exit_zero() {
    let out = fedclass(&["check", "--seed", "2"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("[PASS]")));
    assert!(stdout.lines().count() >= 8);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.conf");
    std::fs::write(
        &file,
        "# tiny run\nclasses = 4\nper_class = 30\nfeatures = 4\ntasks = 2,2\nclients = 3\n\
         rounds_per_task = 2\nhidden_width = 16\nrun_name = fromfile\nseeds = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = fedclass(
        &[
            "run",
            "--config",
            file.to_str().unwrap(),
            "--run-name",
            "fromflag",
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--set",
            "beta=1.5",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = RunReport::read_json(&out_dir.join("fromflag_seed1.json")).unwrap();
    assert_eq!(report.config.classes, 4);
    assert_eq!(report.config.beta, 1.5);
    assert_eq!(report.config.run_name, "fromflag");
}

#[test]
fn sweep_writes_deltas_and_memory_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let mut args = vec!["sweep", "--param", "m", "--values", "0,2c", "--output-dir", d, "--seeds", "1"];
    args.extend_from_slice(TINY);
    let out = fedclass(&args, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("fedclass_sweep_m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,value,global_accuracy,avg_forgetting,delta");
    assert!(lines[1].starts_with("0,0,") && lines[1].ends_with(",-"));
    assert!(lines[2].starts_with("2|C^new ∪ C^old|,8,"));

    let single = dir.path().join("beta.csv");
    let mut args = vec![
        "sweep",
        "--param",
        "beta",
        "--values",
        "0",
        "--out",
        single.to_str().unwrap(),
        "--seeds",
        "1",
    ];
    args.extend_from_slice(TINY);
    let out = fedclass(&args, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(&single).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",-"));

    let out = fedclass(&["sweep", "--param", "beta", "--values", "-1"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seeded_run_matches_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = tiny_run(dir.path(), &["--seeds", "11", "--run-name", "golden"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let got = std::fs::read_to_string(dir.path().join("golden_seed11.csv")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny_seed11.csv");
    let want = std::fs::read_to_string(golden).unwrap();
    assert_eq!(got, want);
}
