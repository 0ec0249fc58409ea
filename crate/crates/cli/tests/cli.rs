//! Runs the `fincon` binary against generated fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fincon::backtest::Session;
use fincon::config::RunConfig;
use fincon::synthetic::{build_mock_script, write_fixture, write_mock_script, FixtureSpec};
use fincon::Direction;
use tempfile::TempDir;

struct Setup {
    dir: TempDir,
    config: PathBuf,
    script: PathBuf,
}

fn setup(spec: &FixtureSpec) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), spec).unwrap();
    let session = Session::load(RunConfig::load(&config, &[]).unwrap()).unwrap();
    let entries = build_mock_script(&session, &|_, i, _| if i % 4 == 3 { Direction::Short } else { Direction::Long })
        .unwrap();
    let script = dir.path().join("script.jsonl");
    write_mock_script(&script, &entries).unwrap();
    Setup { dir, config, script }
}

fn small() -> FixtureSpec {
    FixtureSpec {
        test_days: 20,
        max_episodes: 2,
        ..FixtureSpec::default()
    }
}

fn fincon(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fincon"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FINCON_LLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_data_accepts_a_good_fixture() {
    let fx = setup(&small());
    let out = fincon(&["validate-data", "--config", s(&fx.config)], fx.dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("ok: 1 tickers"));
}

#[test]
fn missing_price_file_is_an_input_error() {
    let fx = setup(&small());
    let prices = fx.dir.path().join("prices/TSLA.csv");
    fs::remove_file(&prices).unwrap();
    let out = fincon(&["validate-data", "--config", s(&fx.config)], fx.dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("TSLA.csv"), "{}", stderr(&out));
}

#[test]
fn unknown_override_key_is_rejected() {
    let fx = setup(&small());
    let out = fincon(
        &["validate-data", "--config", s(&fx.config), "--override", "run.no_such_key=1"],
        fx.dir.path(),
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn test_without_training_artifacts_fails() {
    let fx = setup(&small());
    let run = fx.dir.path().join("run");
    let out = fincon(
        &["test", "--config", s(&fx.config), "--mock-script", s(&fx.script), "--run-dir", s(&run)],
        fx.dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("prompts.json"), "{}", stderr(&out));
}

#[test]
fn mock_script_with_endpoint_is_refused() {
    let fx = setup(&small());
    let out = fincon(
        &[
            "train",
            "--config",
            s(&fx.config),
            "--mock-script",
            s(&fx.script),
            "--override",
            "llm.endpoint=http://127.0.0.1:9",
        ],
        fx.dir.path(),
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_fincon"))
        .args(["train", "--config", s(&fx.config), "--mock-script", s(&fx.script)])
        .current_dir(fx.dir.path())
        .env("FINCON_LLM_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn train_test_report_round_trip() {
    let fx = setup(&small());
    let mut snapshots = Vec::new();
    for name in ["a", "b"] {
        let run = fx.dir.path().join(name);
        let common = ["--config", s(&fx.config), "--mock-script", s(&fx.script), "--run-dir", s(&run)];
        for cmd in ["train", "test"] {
            let mut args = vec![cmd];
            args.extend(common);
            let out = fincon(&args, fx.dir.path());
            assert_eq!(out.status.code(), Some(0), "{cmd}: {}", stderr(&out));
        }
        let report_before = fs::read(run.join("report.json")).unwrap();
        let out = fincon(&["report", "--run-dir", s(&run)], fx.dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(stderr(&out).contains("test: CR"), "{}", stderr(&out));
        assert!(run.join("trajectory_test.jsonl").is_file());
        assert!(run.join("metrics.csv").is_file());
        assert!(!report_before.is_empty());
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        collect(&run, &run, &mut files);
        files.sort();
        snapshots.push(files);
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

fn collect(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap().flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect(base, &path, out);
        } else {
            let rel = path.strip_prefix(base).unwrap().display().to_string();
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}

#[test]
fn report_on_empty_run_dir_fails() {
    let fx = setup(&small());
    let run = fx.dir.path().join("empty");
    fs::create_dir_all(&run).unwrap();
    let out = fincon(&["report", "--config", s(&fx.config), "--run-dir", s(&run)], fx.dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn select_stocks_writes_a_selection() {
    let spec = FixtureSpec {
        tickers: vec!["AAA".into(), "BBB".into(), "CCC".into(), "DDD".into()],
        ..small()
    };
    let fx = setup(&spec);
    let run = fx.dir.path().join("sel");
    let out = fincon(
        &[
            "select-stocks",
            "--config",
            s(&fx.config),
            "--run-dir",
            s(&run),
            "--override",
            "portfolio.min_news=0",
            "--override",
            "portfolio.select_n=2",
        ],
        fx.dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let chosen: serde_json::Value = serde_json::from_slice(&fs::read(run.join("selection.json")).unwrap()).unwrap();
    assert_eq!(chosen["tickers"].as_array().unwrap().len(), 2);

    let out = fincon(
        &["select-stocks", "--config", s(&fx.config), "--run-dir", s(&run)],
        fx.dir.path(),
    );
    assert_eq!(out.status.code(), Some(1), "default news threshold leaves too few: {}", stderr(&out));
}
