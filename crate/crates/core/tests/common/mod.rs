//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fincon::backtest::Session;
use fincon::config::RunConfig;
use fincon::llm_gateway::{LlmGateway, MockBackend};
use fincon::synthetic::{build_mock_script, write_fixture, write_mock_script, FixtureSpec, ScriptPolicy};
use fincon::{Direction, Episode};
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub config_path: PathBuf,
    pub script_path: PathBuf,
}

impl Fixture {
    pub fn new(spec: &FixtureSpec, policy: &ScriptPolicy<'_>) -> Self {
        Self::with_overrides(spec, policy, &[])
    }

    pub fn with_overrides(spec: &FixtureSpec, policy: &ScriptPolicy<'_>, overrides: &[&str]) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let config_path = write_fixture(dir.path(), spec).expect("fixture");
        let script_path = dir.path().join("script.jsonl");
        let fx = Self {
            dir,
            config_path,
            script_path,
        };
        let session = fx.session(overrides);
        let entries = build_mock_script(&session, policy).expect("script");
        write_mock_script(&fx.script_path, &entries).expect("write script");
        fx
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self, overrides: &[&str]) -> RunConfig {
        let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::load(&self.config_path, &overrides).expect("config")
    }

    pub fn session(&self, overrides: &[&str]) -> Session {
        Session::load(self.config(overrides)).expect("session")
    }

    pub fn gateway(&self) -> LlmGateway {
        LlmGateway::mock(fincon::llm_gateway::load_mock_script(&self.script_path).expect("script loads"))
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn empty_gateway() -> LlmGateway {
    LlmGateway::mock(MockBackend::from_entries(Vec::new()).expect("empty script"))
}

const CYCLE: [Direction; 3] = [Direction::Long, Direction::Short, Direction::Neutral];

fn rotate(d: Direction) -> Direction {
    match d {
        Direction::Long => Direction::Short,
        Direction::Short => Direction::Neutral,
        Direction::Neutral => Direction::Long,
    }
}

/// Training directions whose consecutive episodes agree on exactly
/// `agreements[k - 2]` of the 49 decision days. Later days keep the previous
/// episode's label; the first `49 - m` days are rotated to a different one.
pub fn overlap_policy(agreements: &'static [usize]) -> impl Fn(Episode, usize, &str) -> Direction {
    move |episode, i, _ticker| {
        let k = match episode {
            Episode::Train(k) => k as usize,
            Episode::Test => return Direction::Long,
        };
        let mut d = CYCLE[(i * 7 + i / 3) % 3];
        for m in agreements.iter().take(k.saturating_sub(1)) {
            if i < 49 - m {
                d = rotate(d);
            }
        }
        d
    }
}

pub fn always(direction: Direction) -> impl Fn(Episode, usize, &str) -> Direction {
    move |_, _, _| direction
}

/// Collects every file under `root` as (relative path, bytes), sorted.
pub fn snapshot_dir(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).expect("read dir").flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).expect("under base").display().to_string();
                out.push((rel, std::fs::read(&path).expect("read file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
