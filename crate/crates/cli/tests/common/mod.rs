#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config(name: &str) -> PathBuf {
    workspace_root().join("configs").join(name)
}

/// Runs the binary with its output directory pinned to `out`.
pub fn picrl(out: &Path, workers: Option<usize>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_picrl"));
    cmd.env("PICRL_OUTPUT_DIR", out).env_remove("PICRL_WORKERS");
    if let Some(w) = workers {
        cmd.arg("--workers").arg(w.to_string());
    }
    cmd.args(args).output().expect("spawn picrl")
}

pub fn ok(out: &Output) -> bool {
    out.status.success()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub ict: Option<f64>,
    pub mean_len: f64,
    pub seen: f64,
}

pub fn read_trainlog(path: &Path) -> Vec<LogRow> {
    let text = std::fs::read_to_string(path).expect("trainlog");
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).expect(name);
    let (step, ict, len, seen) = (
        col("step"),
        col("reward_ict"),
        col("mean_len"),
        col("seen_fraction"),
    );
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            LogRow {
                step: f[step].parse().unwrap(),
                ict: (!f[ict].is_empty()).then(|| f[ict].parse().unwrap()),
                mean_len: f[len].parse().unwrap(),
                seen: f[seen].parse().unwrap(),
            }
        })
        .collect()
}

/// Every file under `dir` with its contents, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((
                    p.strip_prefix(base).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
