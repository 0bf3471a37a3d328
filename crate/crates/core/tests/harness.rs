use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use bruf::harness::output::config_hash;
use bruf::harness::{execute, exit_code, run_theorem_check, run_tracking, ExperimentConfig};
use tempfile::TempDir;

fn config(text: &str) -> ExperimentConfig {
    text.parse().unwrap()
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const SMALL_TRACKING: &str = "scenario = tracking
n_runs = 4
seed = 5

[scenario]
duration = 40

[filter bruf5]
kind = bruf
n = 5

[filter ec]
kind = ec-bruf
tol = 1e-4
";

const SMALL_RANGE: &str = "scenario = range-demo
seed = 3

[scenario]
grid_resolution = 120
ensemble_size = 40
";

#[test]
fn repeated_runs_are_byte_identical_across_thread_counts() {
    for text in [SMALL_TRACKING, SMALL_RANGE] {
        let cfg = config(text);
        let dirs: Vec<TempDir> = (0..3).map(|_| TempDir::new().unwrap()).collect();
        for (dir, threads) in dirs.iter().zip([1, 1, 2]) {
            let (_, code) = execute(&cfg, Some(threads), dir.path()).unwrap();
            assert_eq!(code, exit_code::SUCCESS);
        }
        let first = read_dir(dirs[0].path());
        assert!(first.len() > 1);
        for dir in &dirs[1..] {
            assert_eq!(read_dir(dir.path()), first);
        }
    }
}

#[test]
fn written_files_match_the_manifest() {
    let dir = TempDir::new().unwrap();
    let (artifacts, _) = execute(&config(SMALL_RANGE), Some(1), dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let mut on_disk: Vec<String> = read_dir(dir.path()).into_keys().filter(|k| k != "manifest.json").collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(listed, artifacts.files.keys().cloned().collect::<Vec<_>>());
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["scenario"], "range-demo");
}

#[test]
fn config_hash_tracks_every_parameter() {
    let base = config_hash(&config(SMALL_TRACKING));
    assert_eq!(base, config_hash(&config(&format!("# comment\n{SMALL_TRACKING}\n"))));
    for (from, to) in [
        ("n_runs = 4", "n_runs = 5"),
        ("seed = 5", "seed = 6"),
        ("duration = 40", "duration = 41"),
        ("n = 5", "n = 6"),
        ("tol = 1e-4", "tol = 2e-4"),
        ("[filter ec]", "[filter ec2]"),
    ] {
        let changed = SMALL_TRACKING.replace(from, to);
        assert_ne!(config_hash(&config(&changed)), base, "{from} -> {to}");
    }
}

#[test]
fn short_schedules_are_reported_as_a_breach() {
    let text = "scenario = theorem-check
seed = 2

[scenario]
problems = 5
schedules = 3
schedule_sum = 0.9
";
    let report = run_theorem_check(&config(text)).unwrap();
    assert!(report.artifacts.breach);
    assert!(report.max_deviation.worst() > 1e-3);
    let dir = TempDir::new().unwrap();
    let (_, code) = execute(&config(text), Some(1), dir.path()).unwrap();
    assert_eq!(code, exit_code::BREACH);

    let ok = text.replace("schedule_sum = 0.9", "");
    let report = run_theorem_check(&config(&ok)).unwrap();
    assert!(!report.artifacts.breach);
}

#[test]
fn nearly_noiseless_tracking_follows_the_truth() {
    let text = "scenario = tracking
n_runs = 3
seed = 9

[scenario]
duration = 30
q_tilde = 1e-12
sigma_r = 1e-3
sigma_u = 1e-9
sigma_v = 1e-9

[filter bruf10]
kind = bruf
n = 10
";
    let report = run_tracking(&config(text)).unwrap();
    let s = report.get("bruf10").unwrap();
    assert_eq!(s.diverged_runs, 0);
    assert!(s.position_rmse < 1.0, "position RMSE {} m", s.position_rmse);
}

fn bruf(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bruf")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("range.conf");
    std::fs::write(&cfg, SMALL_RANGE).unwrap();
    let out = dir.path().join("out");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let (code, stdout, _) = bruf(&["range-demo", "--config", cfg_s, "--out", out_s, "--threads", "1"]);
    assert_eq!(code, exit_code::SUCCESS);
    assert!(stdout.contains("wrote"));
    assert!(out.join("manifest.json").exists());

    let (code, _, stderr) = bruf(&["tracking", "--config", cfg_s, "--out", out_s]);
    assert_eq!(code, exit_code::CONFIG);
    assert!(stderr.contains("range-demo"), "{stderr}");

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "scenario = range-demo\nbogus_key = 1\n").unwrap();
    let (code, _, _) = bruf(&["range-demo", "--config", bad.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code, exit_code::CONFIG);

    let (code, _, _) = bruf(&["range-demo", "--config", "/nonexistent/x.conf"]);
    assert_eq!(code, exit_code::CONFIG);

    let breach = dir.path().join("breach.conf");
    std::fs::write(
        &breach,
        "scenario = theorem-check\n[scenario]\nproblems = 3\nschedules = 2\nschedule_sum = 0.9\n",
    )
    .unwrap();
    let (code, _, _) = bruf(&["theorem-check", "--config", breach.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code, exit_code::BREACH);
}
