use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sbfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbfa")).args(args).env_remove("SBFA_OUT_DIR").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the default victim into `dir/victim`.
fn victim(dir: &Path) -> (String, String) {
    let out = dir.join("victim");
    let o = sbfa(&["train-toy", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (path(&out.join("model.json")).into(), path(&out.join("tasks.json")).into())
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(&dir.join("report.json"))).unwrap()
}

#[test]
fn attack_writes_per_seed_runs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, tasks) = victim(tmp.path());
    let out = tmp.path().join("run");
    let o = sbfa(&["attack", "--bundle", &model, "--tasks", &tasks, "--max-iter", "3", "--out", path(&out)]);
    let c = code(&o);
    assert!(c == 0 || c == 2, "exit {c}: {}", String::from_utf8_lossy(&o.stderr));

    let summary = String::from_utf8(read(&out.join("summary.csv"))).unwrap();
    let mut lines = summary.lines();
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert_eq!(lines.next().unwrap(), "seed,pre_acc,post_acc,flips,crit_1flip,termination,exit_code,best");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",true")).count(), 1);
    let best = rows.iter().find(|r| r.ends_with(",true")).unwrap();
    assert_eq!(best.split(',').nth(6).unwrap(), c.to_string());

    for seed in 1..=3 {
        let dir = out.join(format!("seed-{seed}"));
        for f in ["report.json", "timings.json", "flips.csv", "census.csv", "distribution.csv", "timings.csv", "transfer.csv"] {
            assert!(dir.join(f).is_file(), "missing {f} for seed {seed}");
        }
        assert_eq!(report(&dir)["seed"], seed);
    }
}

#[test]
fn report_regenerates_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, tasks) = victim(tmp.path());
    let out = tmp.path().join("run");
    sbfa(&["attack", "--bundle", &model, "--tasks", &tasks, "--max-iter", "2", "--seeds", "2,1", "--out", path(&out)]);
    let files = ["seed-1/flips.csv", "seed-1/census.csv", "seed-2/distribution.csv", "seed-2/transfer.csv", "summary.csv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| read(&out.join(f))).collect();
    for f in files {
        fs::remove_file(out.join(f)).unwrap();
    }
    let o = sbfa(&["report", "--dir", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let after: Vec<Vec<u8>> = files.iter().map(|f| read(&out.join(f))).collect();
    assert_eq!(before, after);
    let summary = String::from_utf8(read(&out.join("summary.csv"))).unwrap();
    let seeds: Vec<&str> = summary.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["2", "1"]);
}

#[test]
fn census_recount_reuses_persisted_accuracies() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, tasks) = victim(tmp.path());
    let out = tmp.path().join("run");
    sbfa(&["attack", "--bundle", &model, "--tasks", &tasks, "--max-iter", "1", "--seeds", "1", "--out", path(&out)]);
    let dir = out.join("seed-1");
    let json_before = read(&dir.join("report.json"));
    let o = sbfa(&["census", "--dir", path(&dir), "--threshold", "0.999"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let census = String::from_utf8(read(&dir.join("census.csv"))).unwrap();
    assert!(census.starts_with("# config: {"));
    let rows: Vec<Vec<&str>> = census.lines().skip(2).map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    let mut critical = 0;
    for r in &rows {
        let acc: Option<f64> = r[8].parse().ok();
        let expect = acc.is_some_and(|a| a < 0.999);
        assert_eq!(r[9], expect.to_string());
        critical += expect as usize;
    }
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains(&format!("#crit-1flip {critical}")), "{stdout}");
    let dist = String::from_utf8(read(&dir.join("distribution.csv"))).unwrap();
    let total: usize = dist.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, critical);
    assert_eq!(read(&dir.join("report.json")), json_before);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, tasks) = victim(tmp.path());
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("attack.toml");
    fs::write(
        &cfg,
        format!(
            "bundle = {model:?}\ntasks = {tasks:?}\nseeds = [4]\nk = 7\nmax_iter = 1\nout = {:?}\n",
            path(&out)
        ),
    )
    .unwrap();
    let o = sbfa(&["attack", "--config", path(&cfg), "--k", "5"]);
    assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out.join("seed-4"));
    assert_eq!(r["config"]["k"], 5);
    assert_eq!(r["config"]["max_iterations"], 1);
    assert!(!out.join("seed-1").exists());
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sbfa(&["attack", "--k", "not-a-number"])), 64);
    assert_eq!(code(&sbfa(&["no-such-command"])), 64);
    assert_eq!(code(&sbfa(&["attack", "--out", path(tmp.path())])), 64);

    let missing = tmp.path().join("missing.json");
    let o = sbfa(&["attack", "--bundle", path(&missing), "--tasks", path(&missing), "--out", path(tmp.path())]);
    assert_eq!(code(&o), 65);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&sbfa(&["attack", "--config", path(&bad)])), 64);

    let (model, tasks) = victim(tmp.path());
    let o = sbfa(&["attack", "--bundle", &model, "--tasks", &tasks, "--mode", "int8", "--out", path(tmp.path())]);
    assert_eq!(code(&o), 64, "{}", String::from_utf8_lossy(&o.stderr));
    let o = sbfa(&["attack", "--bundle", &model, "--tasks", &tasks, "--task", "nope", "--out", path(tmp.path())]);
    assert_eq!(code(&o), 64);
}

#[test]
fn help_lists_csv_schemas_and_exit_codes() {
    let o = sbfa(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for needle in ["flips.csv", "census.csv", "distribution.csv", "timings.csv", "summary.csv", "Exit codes"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
}
