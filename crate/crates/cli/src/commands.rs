use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use picrl_core::grpo::{train_with, TrainObserver};
use picrl_core::policy::{read_checkpoint, write_checkpoint, CheckpointHeader};
use picrl_core::retrieval::{build_database, build_index, read_database, write_database};
use picrl_core::taskgen::{build_dataset, read_jsonl, write_jsonl, DatasetManifest};
use picrl_core::{
    eval, EvalMode, EvalReport, FeatureEncoder, Policy, PolicyParams, RewardEngine, TrainError,
    TrainLog, TrainRow, Universe,
};

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATABASE_FILE: &str = "database.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAINLOG_FILE: &str = "trainlog.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetManifest,
    pub database_records: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path, what: &str, hint: &str) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot open {what} {}: {e}{hint}", path.display())))
}

fn policy_for(cfg: &RunConfig, universe: &Universe) -> Policy {
    let enc = FeatureEncoder::new(
        &universe.vocab,
        cfg.world.identity_len(),
        cfg.policy.max_len,
    );
    Policy::new(enc, cfg.grpo.temperature)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes the training records, the run manifest and the concept database.
pub fn gen_data(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let universe = Universe::generate(&cfg.world, cfg.seed)?;
    let ctx = universe.ctx();
    let (records, dataset) = build_dataset(&ctx, &cfg.dataset)?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    let database = build_database(&ctx, cfg.database_seed())?;
    let out = &cfg.output_dir;

    let mut f = create(&out.join(DATASET_FILE))?;
    write_jsonl(&mut f, &records, &universe.vocab)?;
    f.flush()?;

    let mut f = create(&out.join(DATABASE_FILE))?;
    write_database(&database, &mut f)?;
    f.flush()?;

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dataset,
        database_records: database.len(),
    };
    let mut f = create(&out.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(manifest)
}

fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    universe: &Universe,
    cfg: &RunConfig,
    step: usize,
) -> Result<(), CliError> {
    let header = CheckpointHeader::new(params, universe.vocab.hash(), cfg.seed, step, cfg.hash());
    let f = create(path)?;
    write_checkpoint(f, &header, params)?;
    Ok(())
}

fn write_trainlog(path: &Path, log: &TrainLog, cfg: &RunConfig) -> Result<(), CliError> {
    let mut f = create(path)?;
    writeln!(
        f,
        "# picrl trainlog seed={} config_hash={}",
        cfg.seed,
        cfg.hash()
    )?;
    f.write_all(log.to_csv().as_bytes())?;
    f.flush()?;
    Ok(())
}

struct Checkpointer<'a> {
    cfg: &'a RunConfig,
    universe: &'a Universe,
    nan_at: Option<usize>,
    error: Option<CliError>,
}

impl TrainObserver for Checkpointer<'_> {
    fn after_step(&mut self, row: &TrainRow, params: &PolicyParams) {
        let every = self.cfg.checkpoint_every;
        let done = row.step + 1;
        if every == 0 || !done.is_multiple_of(every) || self.error.is_some() {
            return;
        }
        let path = self
            .cfg
            .output_dir
            .join(CHECKPOINT_DIR)
            .join(format!("step-{done:06}.bin"));
        if let Err(e) = save_checkpoint(&path, params, self.universe, self.cfg, done) {
            self.error = Some(e);
        }
    }

    fn inspect_gradient(&mut self, step: usize, grad: &mut [f64]) {
        if self.nan_at == Some(step) {
            if let Some(g) = grad.first_mut() {
                *g = f64::NAN;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub final_ict_reward: Option<f64>,
}

/// Trains from the generated dataset. `nan_at` poisons the gradient of
/// that step to exercise the divergence path.
pub fn train(cfg: &RunConfig, nan_at: Option<usize>) -> Result<TrainSummary, CliError> {
    let universe = Universe::generate(&cfg.world, cfg.seed)?;
    let out = &cfg.output_dir;
    let hint = "; run gen-data first";
    let manifest: RunManifest =
        serde_json::from_reader(open(&out.join(MANIFEST_FILE), "manifest", hint)?)?;
    if manifest.dataset.vocab_hash != universe.vocab.hash() {
        return Err(CliError::Usage(
            "dataset was generated from a different world configuration; rerun gen-data".into(),
        ));
    }
    let dataset = read_jsonl(
        open(&out.join(DATASET_FILE), "dataset", hint)?,
        &universe.vocab,
    )?;
    let policy = policy_for(cfg, &universe);
    let initial = PolicyParams::initial(&policy.encoder, &cfg.policy.init());
    let engine = RewardEngine::new(&universe.vocab, &cfg.rewards);
    let mut observer = Checkpointer {
        cfg,
        universe: &universe,
        nan_at,
        error: None,
    };
    let result = train_with(
        &policy,
        &dataset,
        initial,
        &cfg.grpo,
        &engine,
        &mut observer,
    );
    if let Some(e) = observer.error {
        return Err(e);
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    match result {
        Ok(outcome) => {
            save_checkpoint(&checkpoint, &outcome.params, &universe, cfg, cfg.grpo.steps)?;
            write_trainlog(&out.join(TRAINLOG_FILE), &outcome.log, cfg)?;
            Ok(TrainSummary {
                steps: cfg.grpo.steps,
                checkpoint,
                final_ict_reward: outcome.log.rows.iter().rev().find_map(|r| r.ict_reward),
            })
        }
        Err(TrainError::Diverged {
            step,
            reason,
            last_good,
            log,
        }) => {
            save_checkpoint(&checkpoint, &last_good, &universe, cfg, step)?;
            write_trainlog(&out.join(TRAINLOG_FILE), &log, cfg)?;
            Err(CliError::Diverged(format!(
                "{reason} at step {step}; last good parameters saved to {}",
                checkpoint.display()
            )))
        }
        Err(TrainError::Other(e)) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub mode: EvalMode,
    pub k: Option<usize>,
    pub case_insensitive: bool,
}

pub fn eval_report_paths(out: &Path, mode: EvalMode) -> (PathBuf, PathBuf) {
    let stem = format!("eval-{}", mode.label());
    (
        out.join(format!("{stem}.json")),
        out.join(format!("{stem}.csv")),
    )
}

/// Evaluates a checkpoint and writes `eval-<mode>.json` and `.csv`.
pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let universe = Universe::generate(&cfg.world, cfg.seed)?;
    let (header, params) = read_checkpoint(open(&opts.checkpoint, "checkpoint", "")?)?;
    let policy = policy_for(cfg, &universe);
    if header.vocab_hash != universe.vocab.hash()
        || header.rows != policy.encoder.vocab_size()
        || header.cols != policy.encoder.dim()
    {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not match the configured world and policy",
            opts.checkpoint.display()
        )));
    }
    let database = match opts.mode {
        EvalMode::Retrieval => {
            let path = cfg.database_path();
            let records = read_database(open(
                &path,
                "concept database",
                "; retrieval mode needs one",
            )?)?;
            Some(build_index(records)?)
        }
        _ => None,
    };
    let mut ecfg = cfg.eval.clone();
    if opts.k.is_some() {
        ecfg.k = opts.k;
    }
    let ctx = universe.ctx();
    let mut report = eval::run_protocol(
        &policy,
        &params,
        &ctx,
        database.as_ref(),
        opts.mode,
        &ecfg,
        opts.case_insensitive,
    )?;
    report.checkpoint_hash = Some(sha256_file(&opts.checkpoint)?);
    report.config_hash = Some(cfg.hash());

    let (json_path, csv_path) = eval_report_paths(&cfg.output_dir, opts.mode);
    let mut f = create(&json_path)?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut f = create(&csv_path)?;
    writeln!(
        f,
        "# picrl eval mode={} seed={} config_hash={} checkpoint_hash={}",
        opts.mode.label(),
        cfg.seed,
        cfg.hash(),
        report.checkpoint_hash.as_deref().unwrap_or_default()
    )?;
    if let Some(note) = &report.note {
        writeln!(f, "# note: {note}")?;
    }
    f.write_all(report.to_csv().as_bytes())?;
    f.flush()?;
    Ok(report)
}
