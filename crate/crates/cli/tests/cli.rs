use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "dataset.num_videos=12",
    "--set",
    "schedule.total_epochs=2",
    "--set",
    "schedule.warmup_epochs=1",
    "--set",
    "batch_size=4",
];

fn taco(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taco"))
        .env("TACO_OUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn taco")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

#[test]
fn generated_manifest_has_one_line_per_video_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["generate", "--manifest-only", "--set", "dataset.num_videos=37"];
    let oa = taco(a.path(), &args);
    let ob = taco(b.path(), &args);
    assert!(oa.status.success(), "{}", stderr(&oa));
    let (ma, mb) = (fs::read_to_string(stdout(&oa)).unwrap(), fs::read_to_string(stdout(&ob)).unwrap());
    assert_eq!(ma.lines().count(), 37);
    assert_eq!(ma, mb);
}

#[test]
fn generated_frames_train_through_a_manifest_config() {
    let root = tempfile::tempdir().unwrap();
    let g = taco(root.path(), &["generate", "--set", "dataset.num_videos=4", "--set", "dataset.length=40"]);
    assert!(g.status.success(), "{}", stderr(&g));
    let manifest = stdout(&g);
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 4);
    let cfg = root.path().join("m.toml");
    fs::write(&cfg, format!("batch_size = 4\n[dataset]\nkind = \"manifest\"\npath = {manifest:?}\n")).unwrap();
    let p = taco(
        root.path(),
        &[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "schedule.total_epochs=2",
            "--set",
            "schedule.warmup_epochs=1",
        ],
    );
    assert!(p.status.success(), "{}", stderr(&p));
}

#[test]
fn malformed_config_names_the_field() {
    let root = tempfile::tempdir().unwrap();
    let o = taco(root.path(), &["pretrain", "--set", "objective.lambda_weight=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda_weight"), "{}", stderr(&o));

    let cfg = root.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nbatch_size = \"many\"\n").unwrap();
    let o = taco(root.path(), &["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn overrides_persist_and_done_runs_are_refused() {
    let root = tempfile::tempdir().unwrap();
    let args = with_tiny(&["pretrain", "--set", "objective.lambda=3"], &[]);
    let o = taco(root.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = Path::new(&stdout(&o)).parent().unwrap().to_path_buf();
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    let parsed: toml::Table = saved.parse().unwrap();
    assert_eq!(parsed["objective"]["lambda"].as_float(), Some(3.0));

    let again = taco(root.path(), &args);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("already done"), "{}", stderr(&again));

    let forced: Vec<&str> = args.iter().copied().chain(["--force"]).collect();
    assert!(taco(root.path(), &forced).status.success());

    let registry = fs::read_to_string(root.path().join("registry.jsonl")).unwrap();
    let statuses: Vec<String> = registry
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["status"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(statuses, ["pending", "running", "done", "pending", "running", "done"]);
}

#[test]
fn failures_report_the_run_id_and_are_recorded() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("m.toml");
    fs::write(&cfg, "[dataset]\nkind = \"manifest\"\npath = \"/nonexistent/manifest.jsonl\"\n").unwrap();
    let o = taco(root.path(), &["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("run pretrain-") && err.contains("loading the training set"), "{err}");
    let registry = fs::read_to_string(root.path().join("registry.jsonl")).unwrap();
    assert!(registry.lines().last().unwrap().contains("\"failed\""));
}

#[test]
fn suite_writes_a_report_and_plot() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("suite");
    let args = with_tiny(
        &["suite", "--seeds", "0,1", "--conditions", "baseline,taco:speed"],
        &["--test-videos", "9", "--eval-epochs", "2", "--out", out.to_str().unwrap()],
    );
    let o = taco(root.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "condition,mean,std,completed,failed,accuracies");
    assert!(lines[1].starts_with("baseline,") && lines[2].starts_with("taco:speed,"));
    assert!(lines[1..].iter().all(|l| l.contains(",2,0,")));
    assert!(out.join("report.svg").exists());
    assert_eq!(fs::read_to_string(out.join("runs.csv")).unwrap().lines().count(), 1 + 4);
}

#[test]
fn plotting_an_empty_report_fails_without_writing() {
    let root = tempfile::tempdir().unwrap();
    let report = root.path().join("report.csv");
    fs::write(&report, "condition,mean,std,completed,failed,accuracies\n").unwrap();
    let target = root.path().join("out.svg");
    let o = taco(root.path(), &["plot", report.to_str().unwrap(), "--out", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!target.exists());

    let matrix = root.path().join("transfer_matrix.csv");
    fs::write(&matrix, "pretrain\n").unwrap();
    let o = taco(root.path(), &["plot", matrix.to_str().unwrap(), "--out", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!target.exists());
}

#[test]
fn sweep_plot_has_one_point_per_lambda() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("sweep");
    let args = with_tiny(
        &["sweep", "--lambdas", "0,5,10,15,20", "--set", "transforms=[\"speed\"]"],
        &["--test-videos", "9", "--eval-epochs", "2", "--out", out.to_str().unwrap()],
    );
    let o = taco(root.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("lambda_sweep.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 5);
}
