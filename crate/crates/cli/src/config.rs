use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use picrl_core::{
    seed, DatasetConfig, EvalConfig, GrpoConfig, PolicyConfig, RewardConfig, WorldConfig,
};

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "PICRL_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Concept database; `<output_dir>/database.jsonl` when unset.
    pub database: Option<PathBuf>,
}

/// Everything a run needs. Module seeds are derived from `seed` and may not
/// be set in the sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub rewards: RewardConfig,
    pub policy: PolicyConfig,
    pub grpo: GrpoConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            checkpoint_every: 0,
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            rewards: RewardConfig::default(),
            policy: PolicyConfig::default(),
            grpo: GrpoConfig::default(),
            retrieval: RetrievalConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const SEEDED_SECTIONS: [&str; 3] = ["dataset", "grpo", "eval"];

impl RunConfig {
    /// Reads `path`, applies `section.key=value` overrides and the output
    /// directory environment override, derives module seeds and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("malformed config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for section in SEEDED_SECTIONS {
            if table
                .get(section)
                .and_then(|v| v.as_table())
                .is_some_and(|t| t.contains_key("seed"))
            {
                return Err(CliError::Usage(format!(
                    "[{section}] seed is derived from the top-level seed and cannot be set"
                )));
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.dataset.seed = seed::derive(cfg.seed, &[1]);
        cfg.grpo.seed = seed::derive(cfg.seed, &[2]);
        cfg.eval.seed = seed::derive(cfg.seed, &[3]);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate()?;
        self.dataset.validate()?;
        self.rewards.validate()?;
        self.policy.validate()?;
        self.grpo.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn database_seed(&self) -> u64 {
        seed::derive(self.seed, &[4])
    }

    pub fn database_path(&self) -> PathBuf {
        self.retrieval
            .database
            .clone()
            .unwrap_or_else(|| self.output_dir.join("database.jsonl"))
    }

    /// SHA-256 of the resolved configuration without the output directory,
    /// so the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut view = self.clone();
        view.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key {key:?}")));
    }
    // Bare words fall back to strings so `--set output_dir=runs/a` works unquoted.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default_with_derived_seeds() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c.world, WorldConfig::default());
        assert_eq!(c.grpo.seed, seed::derive(0, &[2]));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::from_toml(
            "seed = 3\n[grpo]\nsteps = 5\n",
            &[
                "grpo.steps=7".into(),
                "rewards.length_cutoff=100".into(),
                "output_dir=runs/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.grpo.steps, 7);
        assert_eq!(c.rewards.length_cutoff, 100);
        assert!(RunConfig::from_toml("[grpo]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("nonsense = \n", &[]).is_err());
        assert!(RunConfig::from_toml("[grpo]\nseed = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["grpo.group_size=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::from_toml("output_dir = \"a\"", &[]).unwrap();
        let b = RunConfig::from_toml("output_dir = \"b\"", &[]).unwrap();
        let c = RunConfig::from_toml("seed = 1", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
