//! Post-training dataset construction: object-consistency pairs, localization
//! tasks, single/multi-concept captioning tasks, and dataset assembly.

mod names;
pub mod templates;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::BBox;
use crate::seed;
use crate::synthworld::{compose_scene, render_view, AttrId, Entity, Scene, View, World};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

pub use names::{assign_names, NameMap, NAME_WORDLIST};

/// Most reference views a captioning query may carry.
pub const MAX_REFERENCES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "OCT")]
    Oct,
    #[serde(rename = "VLT")]
    Vlt,
    #[serde(rename = "ICT1")]
    Ict1,
    #[serde(rename = "ICTM")]
    IctM,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Oct, TaskKind::Vlt, TaskKind::Ict1, TaskKind::IctM];

    pub fn is_ict(self) -> bool {
        matches!(self, TaskKind::Ict1 | TaskKind::IctM)
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Oct => "OCT",
            TaskKind::Vlt => "VLT",
            TaskKind::Ict1 => "ICT1",
            TaskKind::IctM => "ICTM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldAnswer {
    Binary(YesNo),
    Box(BBox),
    Names(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub name: String,
    /// Absent when the demonstration came from the retrieval database.
    pub view: Option<View>,
    pub info: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedTarget {
    pub name: String,
    pub entity_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    View(View),
    Scene(Scene),
}

impl Query {
    pub fn views(&self) -> &[View] {
        match self {
            Query::View(v) => std::slice::from_ref(v),
            Query::Scene(s) => &s.views,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub record_id: u64,
    pub task_kind: TaskKind,
    /// Captioning record whose prompt asks for a detailed description.
    pub detail: bool,
    pub instruction: TokenSequence,
    pub demonstrations: Vec<Demonstration>,
    /// The referred concept of a localization task.
    pub target: Option<NamedTarget>,
    pub query: Query,
    pub gold: GoldAnswer,
}

impl TaskRecord {
    pub fn gold_names(&self) -> &[String] {
        match &self.gold {
            GoldAnswer::Names(n) => n,
            _ => &[],
        }
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidConfig(format!(
                "record {}: {m}",
                self.record_id
            )))
        };
        let n_demo = self.demonstrations.len();
        let kind_ok = match (self.task_kind, &self.gold) {
            (TaskKind::Oct, GoldAnswer::Binary(_)) => n_demo == 1,
            (TaskKind::Vlt, GoldAnswer::Box(_)) => n_demo == 0 && self.target.is_some(),
            (TaskKind::Ict1, GoldAnswer::Names(n)) => n_demo == 1 && n.len() == 1,
            (TaskKind::IctM, GoldAnswer::Names(n)) => {
                (2..=MAX_REFERENCES).contains(&n_demo) && n.len() == n_demo
            }
            _ => false,
        };
        if !kind_ok {
            return bad(format!("{} record has inconsistent shape", self.task_kind));
        }
        if let GoldAnswer::Names(names) = &self.gold {
            for n in names {
                if !self.demonstrations.iter().any(|d| &d.name == n) {
                    return bad(format!("gold name {n} missing from demonstrations"));
                }
            }
        }
        if let (GoldAnswer::Box(b), Query::Scene(s)) = (&self.gold, &self.query) {
            if !b.fits_in(s.width, s.height) {
                return bad("gold box outside the scene".into());
            }
        }
        Ok(())
    }
}

/// Shared inputs for building records over one world.
#[derive(Clone, Copy)]
pub struct TaskContext<'a> {
    pub world: &'a World,
    pub names: &'a NameMap,
    pub vocab: &'a Vocabulary,
}

impl<'a> TaskContext<'a> {
    pub fn new(world: &'a World, names: &'a NameMap, vocab: &'a Vocabulary) -> Self {
        Self {
            world,
            names,
            vocab,
        }
    }

    pub fn name(&self, entity_id: u32) -> &str {
        self.names
            .get(&entity_id)
            .map(String::as_str)
            .unwrap_or("<unnamed>")
    }

    fn dims(&self) -> (u32, u32) {
        (self.world.config.width, self.world.config.height)
    }

    fn word(&self, a: AttrId) -> &str {
        self.world.config.lexicon()[usize::from(a)]
    }

    /// Short personal description built from the canonical attributes.
    pub fn info(&self, e: &Entity) -> String {
        let a = &e.attribute_tokens;
        format!(
            "{} is a {} {} {} with a {}",
            self.name(e.entity_id),
            self.word(a[0]),
            self.word(a[1]),
            self.word(e.category),
            self.word(a[2])
        )
    }

    pub fn demonstration(&self, e: &Entity, seed: u64) -> Result<Demonstration> {
        let view = render_view(
            &self.world.config,
            e,
            self.dims(),
            self.world.config.scene_variation,
            seed,
        )?;
        Ok(Demonstration {
            name: self.name(e.entity_id).to_string(),
            view: Some(view),
            info: self.info(e),
        })
    }

    fn instruction(&self, text: &str) -> TokenSequence {
        TokenSequence::new(self.vocab.tokenize(text))
    }

    fn distinct_entities(&self, m: usize, rng: &mut seed::Rng) -> Vec<&'a Entity> {
        self.world
            .entities
            .choose_multiple(rng, m)
            .collect::<Vec<_>>()
    }

    pub fn make_oct_task(&self, positive: bool, seed: u64) -> Result<TaskRecord> {
        let needed = if positive { 1 } else { 2 };
        if self.world.entities.len() < needed {
            return Err(Error::InsufficientEntities {
                needed,
                available: self.world.entities.len(),
            });
        }
        let mut rng = seed::rng_at(seed, &[0x4f43_54]);
        let picked = self.distinct_entities(needed, &mut rng);
        let reference = picked[0];
        let queried = if positive { reference } else { picked[1] };
        let demo = self.demonstration(reference, seed::derive(seed, &[1]))?;
        let query = render_view(
            &self.world.config,
            queried,
            self.dims(),
            self.world.config.scene_variation,
            seed::derive(seed, &[2]),
        )?;
        let template = templates::OCT_TEMPLATES
            .choose(&mut rng)
            .expect("non-empty bank");
        Ok(TaskRecord {
            record_id: 0,
            task_kind: TaskKind::Oct,
            detail: false,
            instruction: self.instruction(&templates::fill(template, &demo.name)),
            demonstrations: vec![demo],
            target: None,
            query: Query::View(query),
            gold: GoldAnswer::Binary(if positive { YesNo::Yes } else { YesNo::No }),
        })
    }

    pub fn make_vlt_task(&self, scene: &Scene, target: u32, seed: u64) -> Result<TaskRecord> {
        let view = scene
            .view_of(target)
            .ok_or(Error::TargetNotInScene(target))?;
        let mut rng = seed::rng_at(seed, &[0x564c_54]);
        let name = self.name(target).to_string();
        let template = templates::VLT_TEMPLATES
            .choose(&mut rng)
            .expect("non-empty bank");
        Ok(TaskRecord {
            record_id: 0,
            task_kind: TaskKind::Vlt,
            detail: false,
            instruction: self.instruction(&templates::fill(template, &name)),
            demonstrations: Vec::new(),
            target: Some(NamedTarget {
                name,
                entity_id: target,
            }),
            query: Query::Scene(scene.clone()),
            gold: GoldAnswer::Box(view.bbox),
        })
    }

    /// Localization task over a freshly composed scene of 1 to 3 entities.
    pub fn sample_vlt_task(&self, seed: u64) -> Result<TaskRecord> {
        let mut rng = seed::rng_at(seed, &[0x5343_454e_45]);
        let cap = MAX_REFERENCES
            .min(self.world.entities.len())
            .min(self.world.config.max_entities_per_scene);
        let k = rng.random_range(1..=cap);
        let members = self.distinct_entities(k, &mut rng);
        let scene = compose_scene(&self.world.config, &members, self.dims(), seed)?;
        let target = members.choose(&mut rng).expect("k >= 1").entity_id;
        self.make_vlt_task(&scene, target, seed)
    }

    pub fn make_ict_task(&self, m: usize, detail: bool, seed: u64) -> Result<TaskRecord> {
        if m == 0 {
            return Err(Error::InvalidConfig("captioning task needs m >= 1".into()));
        }
        if m > MAX_REFERENCES {
            return Err(Error::TooManyReferences(m));
        }
        if m > self.world.entities.len() {
            return Err(Error::InsufficientEntities {
                needed: m,
                available: self.world.entities.len(),
            });
        }
        let mut rng = seed::rng_at(seed, &[0x4943_54]);
        let members = self.distinct_entities(m, &mut rng);
        let demonstrations = members
            .iter()
            .enumerate()
            .map(|(i, e)| self.demonstration(e, seed::derive(seed, &[10 + i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let scene = compose_scene(
            &self.world.config,
            &members,
            self.dims(),
            seed::derive(seed, &[3]),
        )?;
        let bank = if detail {
            templates::ict_detail_templates()
        } else {
            templates::ict_plain_templates()
        };
        let template = bank.choose(&mut rng).expect("non-empty bank");
        Ok(TaskRecord {
            record_id: 0,
            task_kind: if m == 1 {
                TaskKind::Ict1
            } else {
                TaskKind::IctM
            },
            detail,
            instruction: self.instruction(template),
            gold: GoldAnswer::Names(demonstrations.iter().map(|d| d.name.clone()).collect()),
            demonstrations,
            target: None,
            query: Query::Scene(scene),
        })
    }
}

/// Fraction of records per task kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub oct: f64,
    pub vlt: f64,
    pub ict1: f64,
    pub ictm: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            oct: 0.39,
            vlt: 0.30,
            ict1: 0.21,
            ictm: 0.10,
        }
    }
}

impl TaskMix {
    pub fn get(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Oct => self.oct,
            TaskKind::Vlt => self.vlt,
            TaskKind::Ict1 => self.ict1,
            TaskKind::IctM => self.ictm,
        }
    }

    pub fn ict_fraction(&self) -> f64 {
        self.ict1 + self.ictm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub total_records: usize,
    pub mix: TaskMix,
    /// A warning is raised when the captioning share exceeds this.
    pub ict_warning_threshold: f64,
    pub seed: u64,
    pub detail_prompt_fraction: f64,
    pub oct_positive_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            total_records: 2000,
            mix: TaskMix::default(),
            ict_warning_threshold: 0.5,
            seed: 0,
            detail_prompt_fraction: 0.2,
            oct_positive_fraction: 0.5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for k in TaskKind::ALL {
            let f = self.mix.get(k);
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("mix fraction for {k} is {f}, outside [0, 1]"));
            }
        }
        let sum: f64 = TaskKind::ALL.iter().map(|&k| self.mix.get(k)).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("mix fractions sum to {sum}, expected 1"));
        }
        for (what, v) in [
            ("ict_warning_threshold", self.ict_warning_threshold),
            ("detail_prompt_fraction", self.detail_prompt_fraction),
            ("oct_positive_fraction", self.oct_positive_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{what} is {v}, outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Splits `total` across kinds by largest remainder, ties going to the
/// earlier kind.
pub fn kind_counts(total: usize, mix: &TaskMix) -> BTreeMap<TaskKind, usize> {
    let exact: Vec<f64> = TaskKind::ALL
        .iter()
        .map(|&k| total as f64 * mix.get(k))
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    TaskKind::ALL.iter().copied().zip(counts).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub total: usize,
    pub counts: BTreeMap<TaskKind, usize>,
    pub ict_fraction: f64,
    pub detail_records: usize,
    pub oct_positive: usize,
    pub seed: u64,
    pub world_seed: u64,
    pub vocab_hash: String,
    pub vocabulary: Vec<String>,
    pub names: NameMap,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Plan {
    Oct(bool),
    Vlt,
    Ict { m: usize, detail: bool },
}

pub fn build_dataset(
    ctx: &TaskContext<'_>,
    cfg: &DatasetConfig,
) -> Result<(Vec<TaskRecord>, DatasetManifest)> {
    cfg.validate()?;
    let counts = kind_counts(cfg.total_records, &cfg.mix);
    let n_entities = ctx.world.entities.len();
    let needs = |k: TaskKind| match k {
        TaskKind::Oct if cfg.oct_positive_fraction < 1.0 => 2,
        TaskKind::IctM => 2,
        _ => 1,
    };
    for (&k, &c) in &counts {
        if c > 0 && needs(k) > n_entities {
            return Err(Error::InvalidConfig(format!(
                "mix requests {c} {k} records but the world has only {n_entities} entities"
            )));
        }
    }

    let mut rng = seed::rng_at(cfg.seed, &[0x504c_414e]);
    let max_multi = MAX_REFERENCES.min(n_entities);
    let mut plans = Vec::with_capacity(cfg.total_records);
    for (&k, &c) in &counts {
        for _ in 0..c {
            plans.push(match k {
                TaskKind::Oct => Plan::Oct(rng.random_bool(cfg.oct_positive_fraction)),
                TaskKind::Vlt => Plan::Vlt,
                TaskKind::Ict1 => Plan::Ict {
                    m: 1,
                    detail: rng.random_bool(cfg.detail_prompt_fraction),
                },
                TaskKind::IctM => Plan::Ict {
                    m: rng.random_range(2..=max_multi),
                    detail: rng.random_bool(cfg.detail_prompt_fraction),
                },
            });
        }
    }
    plans.shuffle(&mut rng);

    let records = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| {
            let s = seed::derive(cfg.seed, &[0x5245_43, i as u64]);
            let mut r = match *plan {
                Plan::Oct(positive) => ctx.make_oct_task(positive, s),
                Plan::Vlt => ctx.sample_vlt_task(s),
                Plan::Ict { m, detail } => ctx.make_ict_task(m, detail, s),
            }?;
            r.record_id = i as u64;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    let ict_fraction = cfg.mix.ict_fraction();
    if ict_fraction > cfg.ict_warning_threshold {
        warnings.push(format!(
            "captioning records make up {:.0}% of the data (threshold {:.0}%); RL training tends to fail when this share is too high",
            100.0 * ict_fraction,
            100.0 * cfg.ict_warning_threshold
        ));
    }
    let manifest = DatasetManifest {
        total: records.len(),
        counts,
        ict_fraction,
        detail_records: records.iter().filter(|r| r.detail).count(),
        oct_positive: records
            .iter()
            .filter(|r| r.gold == GoldAnswer::Binary(YesNo::Yes))
            .count(),
        seed: cfg.seed,
        world_seed: ctx.world.rng_seed,
        vocab_hash: ctx.vocab.hash(),
        vocabulary: ctx.vocab.words().to_vec(),
        names: ctx.names.clone(),
        warnings,
    };
    Ok((records, manifest))
}

// ---- JSONL wire format -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireView {
    pub entity_id: u32,
    pub visible_tokens: Vec<TokenId>,
    pub variation_tokens: Vec<TokenId>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireScene {
    pub width: u32,
    pub height: u32,
    pub views: Vec<WireView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireQuery {
    View(WireView),
    Scene(WireScene),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireDemonstration {
    pub name: String,
    pub view: Option<WireView>,
    pub info: String,
}

/// One line of the dataset file. Views carry vocabulary token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRecord {
    pub record_id: u64,
    pub task_kind: TaskKind,
    pub detail: bool,
    pub instruction: Vec<TokenId>,
    pub demonstrations: Vec<WireDemonstration>,
    pub target: Option<NamedTarget>,
    pub query: WireQuery,
    pub gold: GoldAnswer,
}

fn view_to_wire(v: &View, vocab: &Vocabulary) -> WireView {
    WireView {
        entity_id: v.entity_id,
        visible_tokens: v
            .visible_tokens
            .iter()
            .map(|&a| vocab.attr_token(a))
            .collect(),
        variation_tokens: v
            .variation_tokens
            .iter()
            .map(|&a| vocab.attr_token(a))
            .collect(),
        bbox: v.bbox,
    }
}

fn view_from_wire(w: WireView, vocab: &Vocabulary) -> Result<View> {
    let l = vocab.layout;
    let attr = |t: TokenId| -> Result<AttrId> {
        t.checked_sub(l.attr_offset)
            .filter(|&a| a < l.attr_count)
            .map(|a| a as AttrId)
            .ok_or_else(|| Error::InvalidConfig(format!("token {t} is not an attribute token")))
    };
    Ok(View {
        entity_id: w.entity_id,
        visible_tokens: w
            .visible_tokens
            .into_iter()
            .map(attr)
            .collect::<Result<_>>()?,
        variation_tokens: w
            .variation_tokens
            .into_iter()
            .map(attr)
            .collect::<Result<_>>()?,
        bbox: w.bbox,
    })
}

impl TaskRecord {
    pub fn to_wire(&self, vocab: &Vocabulary) -> WireRecord {
        WireRecord {
            record_id: self.record_id,
            task_kind: self.task_kind,
            detail: self.detail,
            instruction: self.instruction.0.clone(),
            demonstrations: self
                .demonstrations
                .iter()
                .map(|d| WireDemonstration {
                    name: d.name.clone(),
                    view: d.view.as_ref().map(|v| view_to_wire(v, vocab)),
                    info: d.info.clone(),
                })
                .collect(),
            target: self.target.clone(),
            query: match &self.query {
                Query::View(v) => WireQuery::View(view_to_wire(v, vocab)),
                Query::Scene(s) => WireQuery::Scene(WireScene {
                    width: s.width,
                    height: s.height,
                    views: s.views.iter().map(|v| view_to_wire(v, vocab)).collect(),
                }),
            },
            gold: self.gold.clone(),
        }
    }

    pub fn from_wire(w: WireRecord, vocab: &Vocabulary) -> Result<Self> {
        let instruction = TokenSequence::new(w.instruction);
        instruction.validate(vocab.len())?;
        let r = TaskRecord {
            record_id: w.record_id,
            task_kind: w.task_kind,
            detail: w.detail,
            instruction,
            demonstrations: w
                .demonstrations
                .into_iter()
                .map(|d| {
                    Ok(Demonstration {
                        name: d.name,
                        view: d.view.map(|v| view_from_wire(v, vocab)).transpose()?,
                        info: d.info,
                    })
                })
                .collect::<Result<_>>()?,
            target: w.target,
            query: match w.query {
                WireQuery::View(v) => Query::View(view_from_wire(v, vocab)?),
                WireQuery::Scene(s) => Query::Scene(Scene {
                    width: s.width,
                    height: s.height,
                    views: s
                        .views
                        .into_iter()
                        .map(|v| view_from_wire(v, vocab))
                        .collect::<Result<_>>()?,
                }),
            },
            gold: w.gold,
        };
        r.validate()?;
        Ok(r)
    }
}

pub fn write_jsonl<W: std::io::Write>(
    mut out: W,
    records: &[TaskRecord],
    vocab: &Vocabulary,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r.to_wire(vocab))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::BufRead>(input: R, vocab: &Vocabulary) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(TaskRecord::from_wire(serde_json::from_str(&line)?, vocab)?);
    }
    Ok(out)
}


/// A world together with its concept names and vocabulary.
#[derive(Debug, Clone)]
pub struct Universe {
    pub world: World,
    pub names: NameMap,
    pub vocab: Vocabulary,
}

impl Universe {
    pub fn generate(cfg: &crate::synthworld::WorldConfig, seed: u64) -> Result<Self> {
        let world = crate::synthworld::gen_world(cfg, seed)?;
        let names = assign_names(&world.entities, seed::derive(seed, &[0x4e41_4d45]))?;
        let ordered: Vec<String> = names.values().cloned().collect();
        let vocab = Vocabulary::new(cfg, &ordered)?;
        Ok(Self {
            world,
            names,
            vocab,
        })
    }

    pub fn ctx(&self) -> TaskContext<'_> {
        TaskContext::new(&self.world, &self.names, &self.vocab)
    }
}
