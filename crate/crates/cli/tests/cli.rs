mod common;

use std::fs;
use std::io::BufReader;
use std::path::Path;

use tempfile::TempDir;

use common::{code, config, ok, picrl, read_trainlog, stderr};
use picrl_cli::{RunConfig, EXIT_CHECK, EXIT_DIVERGED, EXIT_USAGE};
use picrl_core::policy::read_checkpoint;
use picrl_core::{EvalReport, FeatureEncoder, PolicyParams, Universe};

const SMALL: [&str; 4] = [
    "--set",
    "dataset.total_records=200",
    "--set",
    "grpo.steps=40",
];

fn toy() -> String {
    config("toy.toml").to_str().unwrap().to_string()
}

fn with_small<'a>(cmd: &'a str, cfg: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "-c", cfg];
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(extra);
    v
}

fn prepared() -> TempDir {
    let dir = TempDir::new().unwrap();
    let cfg = toy();
    assert!(ok(&picrl(
        dir.path(),
        None,
        &with_small("gen-data", &cfg, &[])
    )));
    dir
}

fn small_config(dir: &Path) -> RunConfig {
    let overrides: Vec<String> = SMALL
        .iter()
        .skip(1)
        .step_by(2)
        .map(|s| s.to_string())
        .collect();
    let mut c = RunConfig::load(Some(&config("toy.toml")), &overrides).unwrap();
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn gen_data_counts_and_reruns_identically() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = toy();
    for d in [&a, &b] {
        let out = picrl(d.path(), None, &["gen-data", "-c", &cfg]);
        assert!(ok(&out), "{}", stderr(&out));
    }
    let text = fs::read_to_string(a.path().join("dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2000);
    for f in ["dataset.jsonl", "manifest.json", "database.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["dataset"]["counts"]["OCT"], 780);
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    for text in [
        "seed = [",
        "[grpo]\nunknown_key = 1\n",
        "[grpo]\nseed = 4\n",
        "[grpo]\ngroup_size = 1\n",
    ] {
        fs::write(&bad, text).unwrap();
        let out = picrl(dir.path(), None, &["gen-data", "-c", bad.to_str().unwrap()]);
        assert_eq!(code(&out), EXIT_USAGE, "{text:?}");
        assert!(!stderr(&out).is_empty());
    }
    let out = picrl(
        dir.path(),
        None,
        &["gen-data", "-c", "/nonexistent/config.toml"],
    );
    assert_eq!(code(&out), EXIT_USAGE);
    let out = picrl(dir.path(), None, &["frobnicate"]);
    assert_eq!(code(&out), EXIT_USAGE);
    let out = picrl(dir.path(), None, &["gen-data", "--set", "grpo.steps"]);
    assert_eq!(code(&out), EXIT_USAGE);
}

#[test]
fn train_requires_dataset() {
    let dir = TempDir::new().unwrap();
    let out = picrl(dir.path(), None, &["train", "-c", &toy()]);
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(stderr(&out).contains("gen-data"));
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let dir = prepared();
    let cfg = toy();
    let out = picrl(
        dir.path(),
        None,
        &with_small("train", &cfg, &["--set", "grpo.steps=0"]),
    );
    assert!(ok(&out), "{}", stderr(&out));
    let (header, params) = read_checkpoint(BufReader::new(
        fs::File::open(dir.path().join("checkpoint.bin")).unwrap(),
    ))
    .unwrap();
    let rc = small_config(dir.path());
    let u = Universe::generate(&rc.world, rc.seed).unwrap();
    let enc = FeatureEncoder::new(&u.vocab, rc.world.identity_len(), rc.policy.max_len);
    assert_eq!(params, PolicyParams::initial(&enc, &rc.policy.init()));
    assert_eq!(header.step, 0);
    assert_eq!(header.vocab_hash, u.vocab.hash());
    assert!(read_trainlog(&dir.path().join("trainlog.csv")).is_empty());
}

#[test]
fn seeded_training_reruns_identically_and_writes_snapshots() {
    let dir = prepared();
    let cfg = toy();
    let args = with_small("train", &cfg, &["--set", "checkpoint_every=15"]);
    assert!(ok(&picrl(dir.path(), Some(1), &args)));
    let first = fs::read(dir.path().join("trainlog.csv")).unwrap();
    let ckpt = fs::read(dir.path().join("checkpoint.bin")).unwrap();
    assert!(ok(&picrl(dir.path(), Some(4), &args)));
    assert_eq!(first, fs::read(dir.path().join("trainlog.csv")).unwrap());
    assert_eq!(ckpt, fs::read(dir.path().join("checkpoint.bin")).unwrap());

    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("# picrl trainlog seed=0 config_hash="));
    assert_eq!(read_trainlog(&dir.path().join("trainlog.csv")).len(), 40);
    let mut snaps: Vec<String> = fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    snaps.sort();
    assert_eq!(snaps, ["step-000015.bin", "step-000030.bin"]);
}

#[test]
fn injected_nan_saves_last_good_checkpoint() {
    let dir = prepared();
    let cfg = toy();
    let out = picrl(
        dir.path(),
        None,
        &with_small("train", &cfg, &["--inject-nan-at", "7"]),
    );
    assert_eq!(code(&out), EXIT_DIVERGED, "{}", stderr(&out));
    let (header, params) = read_checkpoint(BufReader::new(
        fs::File::open(dir.path().join("checkpoint.bin")).unwrap(),
    ))
    .unwrap();
    assert_eq!(header.step, 7);
    assert!(params.is_finite());
    assert_eq!(read_trainlog(&dir.path().join("trainlog.csv")).len(), 7);

    // The saved parameters are exactly those after seven clean steps.
    let clean = TempDir::new().unwrap();
    fs::copy(
        dir.path().join("dataset.jsonl"),
        clean.path().join("dataset.jsonl"),
    )
    .unwrap();
    fs::copy(
        dir.path().join("manifest.json"),
        clean.path().join("manifest.json"),
    )
    .unwrap();
    assert!(ok(&picrl(
        clean.path(),
        None,
        &with_small("train", &cfg, &["--set", "grpo.steps=7"])
    )));
    let (_, seven) = read_checkpoint(BufReader::new(
        fs::File::open(clean.path().join("checkpoint.bin")).unwrap(),
    ))
    .unwrap();
    assert_eq!(params, seven);
}

fn eval_args<'a>(cfg: &'a str, ckpt: &'a str, mode: &'a str) -> Vec<&'a str> {
    with_small(
        "eval",
        cfg,
        &[
            "--checkpoint",
            ckpt,
            "--mode",
            mode,
            "--set",
            "eval.queries_per_count=20",
        ],
    )
}

#[test]
fn eval_modes_and_errors() {
    let dir = prepared();
    let cfg = toy();
    assert!(ok(&picrl(
        dir.path(),
        None,
        &with_small("train", &cfg, &[])
    )));
    let ckpt = dir.path().join("checkpoint.bin");
    let ck = ckpt.to_str().unwrap();

    let out = picrl(dir.path(), None, &eval_args(&cfg, ck, "wrong-demo"));
    assert!(ok(&out), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("eval-wrong-demo.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("# picrl eval mode=wrong-demo"));
    assert!(lines.next().unwrap().contains("lower is better"));
    let rep: EvalReport =
        serde_json::from_slice(&fs::read(dir.path().join("eval-wrong-demo.json")).unwrap())
            .unwrap();
    assert!(rep.note.is_some());
    assert_eq!(rep.checkpoint_hash.as_deref().map(str::len), Some(64));
    assert_eq!(rep.cases.len(), 80);

    let mut args = eval_args(&cfg, ck, "retrieval");
    args.extend(["--k", "2"]);
    assert!(ok(&picrl(dir.path(), None, &args)));
    let rep: EvalReport =
        serde_json::from_slice(&fs::read(dir.path().join("eval-retrieval.json")).unwrap()).unwrap();
    assert_eq!(rep.k, Some(2));
    assert!(rep.cases.iter().all(|c| c.demonstrations.len() == 2));

    fs::remove_file(dir.path().join("database.jsonl")).unwrap();
    let out = picrl(dir.path(), None, &eval_args(&cfg, ck, "retrieval"));
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(stderr(&out).contains("database"));
    assert!(ok(&picrl(dir.path(), None, &eval_args(&cfg, ck, "skip"))));

    let out = picrl(dir.path(), None, &eval_args(&cfg, ck, "nonsense"));
    assert_eq!(code(&out), EXIT_USAGE);

    // A checkpoint from another world is refused.
    let mut args = eval_args(&cfg, ck, "skip");
    args.extend(["--set", "world.entities=10"]);
    let out = picrl(dir.path(), None, &args);
    assert_eq!(code(&out), EXIT_USAGE);
    let out = picrl(
        dir.path(),
        None,
        &eval_args(&cfg, "/nonexistent.bin", "skip"),
    );
    assert_eq!(code(&out), EXIT_USAGE);
}

#[test]
fn check_passes_and_detects_injected_bug() {
    let dir = TempDir::new().unwrap();
    let out = picrl(dir.path(), None, &["check"]);
    assert!(ok(&out), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let err: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max gradient relative error: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-5);

    let out = picrl(dir.path(), None, &["check", "--inject-gradient-bug"]);
    assert_eq!(code(&out), EXIT_CHECK);
    assert!(stderr(&out).contains("grad_logprob"));
}

#[test]
fn workers_from_environment() {
    let dir = TempDir::new().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_picrl"))
        .env("PICRL_OUTPUT_DIR", dir.path())
        .env("PICRL_WORKERS", "2")
        .args(["gen-data", "--set", "dataset.total_records=50"])
        .output()
        .unwrap();
    assert!(ok(&out), "{}", stderr(&out));
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_picrl"))
        .env("PICRL_OUTPUT_DIR", dir.path())
        .env("PICRL_WORKERS", "lots")
        .args(["check"])
        .output()
        .unwrap();
    assert_eq!(code(&out), EXIT_USAGE);
}
