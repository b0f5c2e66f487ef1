//! Shared fixtures for the benchmarks: the default toy world, a small
//! dataset and a policy with its initial parameters.

use picrl_core::grpo::{compute_advantages, rollout_group, GrpoConfig};
use picrl_core::policy::PolicyConfig;
use picrl_core::retrieval::{build_database, build_index, RetrievalIndex};
use picrl_core::taskgen::{build_dataset, DatasetConfig};
use picrl_core::{
    FeatureEncoder, Group, Policy, PolicyParams, RewardConfig, RewardEngine, TaskRecord, Universe,
    WorldConfig,
};

pub struct Fixture {
    pub universe: Universe,
    pub dataset: Vec<TaskRecord>,
    pub policy: Policy,
    pub params: PolicyParams,
    pub rewards: RewardConfig,
    pub grpo: GrpoConfig,
}

impl Fixture {
    pub fn new(records: usize) -> Self {
        let world = WorldConfig::default();
        let universe = Universe::generate(&world, 0).expect("default world");
        let dcfg = DatasetConfig {
            total_records: records,
            ..Default::default()
        };
        let (dataset, _) = build_dataset(&universe.ctx(), &dcfg).expect("default dataset");
        let pcfg = PolicyConfig::default();
        let enc = FeatureEncoder::new(&universe.vocab, world.identity_len(), pcfg.max_len);
        let params = PolicyParams::initial(&enc, &pcfg.init());
        let grpo = GrpoConfig::default();
        Self {
            policy: Policy::new(enc, grpo.temperature),
            universe,
            dataset,
            params,
            rewards: RewardConfig::default(),
            grpo,
        }
    }

    pub fn engine(&self) -> RewardEngine<'_> {
        RewardEngine::new(&self.universe.vocab, &self.rewards)
    }

    /// A scored group with advantages for `dataset[i]`.
    pub fn group(&self, i: usize) -> Group {
        let task = &self.dataset[i];
        let mut g = rollout_group(
            &self.policy,
            &self.params,
            None,
            task,
            &self.grpo,
            &self.engine(),
            i as u64,
        )
        .expect("rollout");
        g.advantages = compute_advantages(&g.total_rewards(), self.grpo.adv_eps);
        g
    }

    pub fn index(&self) -> RetrievalIndex {
        build_index(build_database(&self.universe.ctx(), 0).expect("database")).expect("index")
    }
}
