//! Personal-grounding evaluation: mention extraction, precision/recall/F1
//! and output length statistics under three demonstration protocols.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyParams};
use crate::primitives::{f1, GroundingScore};
use crate::retrieval::{make_demonstrations, retrieve, RetrievalIndex};
use crate::rewards::contains_name;
use crate::seed;
use crate::synthworld::{compose_scene, EmbeddingProvider, Entity};
use crate::taskgen::{templates, GoldAnswer, Query, TaskContext, TaskKind, TaskRecord};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Gold demonstrations of the query concepts.
    SkipRetrieval,
    /// Demonstrations retrieved from the concept database.
    Retrieval,
    /// Demonstrations of concepts absent from the query. Scores count
    /// mentions of the supplied names, so lower is better.
    WrongDemo,
}

impl EvalMode {
    pub fn label(self) -> &'static str {
        match self {
            EvalMode::SkipRetrieval => "skip",
            EvalMode::Retrieval => "retrieval",
            EvalMode::WrongDemo => "wrong-demo",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" | "skip_retrieval" | "skip-retrieval" => Ok(EvalMode::SkipRetrieval),
            "retrieval" => Ok(EvalMode::Retrieval),
            "wrong-demo" | "wrong_demo" => Ok(EvalMode::WrongDemo),
            other => Err(Error::InvalidConfig(format!(
                "unknown evaluation mode {other:?} (expected skip, retrieval or wrong-demo)"
            ))),
        }
    }
}

pub const WRONG_DEMO_NOTE: &str =
    "wrong demonstrations: scores count mentions of the supplied mismatched names; lower is better";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub queries_per_count: usize,
    /// Concepts per query image.
    pub concept_counts: Vec<usize>,
    /// Demonstrations retrieved per query; defaults to the concept count.
    pub k: Option<usize>,
    /// Noise on query-region embeddings in retrieval mode.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            queries_per_count: 100,
            concept_counts: vec![1, 2, 3, 4],
            k: None,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries_per_count == 0 {
            return Err(Error::InvalidConfig(
                "queries_per_count must be positive".into(),
            ));
        }
        if self.concept_counts.is_empty() || self.concept_counts.contains(&0) {
            return Err(Error::InvalidConfig(
                "concept_counts must be a non-empty list of positive counts".into(),
            ));
        }
        if self.k == Some(0) {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Distinct names from `names` that occur in `output` as whole tokens, in
/// the order of `names`.
pub fn extract_mentions(
    output: &[TokenId],
    vocab: &Vocabulary,
    names: &[String],
    case_insensitive: bool,
) -> Vec<String> {
    names
        .iter()
        .filter(|n| contains_name(output, vocab, n, case_insensitive))
        .cloned()
        .collect()
}

/// Occurrences of concept names in `output`, repeats included.
pub fn count_occurrences(
    output: &[TokenId],
    vocab: &Vocabulary,
    names: &[String],
    case_insensitive: bool,
) -> usize {
    names
        .iter()
        .map(|n| {
            let parts = n.split_whitespace().count();
            (0..output.len().saturating_sub(parts.saturating_sub(1)))
                .filter(|&i| contains_name(&output[i..i + parts], vocab, n, case_insensitive))
                .count()
        })
        .sum()
}

/// Scores distinct per-query mentions against per-query gold name sets.
///
/// Recall averages `correct/m` over all queries; precision averages
/// `correct/|mentions|` over queries with at least one mention.
pub fn score_mentions(mentions: &[Vec<String>], golds: &[Vec<String>]) -> Result<GroundingScore> {
    if mentions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: mentions.len(),
            right: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(Error::Empty("evaluation queries"));
    }
    let mut s = GroundingScore {
        queries: golds.len(),
        ..Default::default()
    };
    let (mut recall_sum, mut precision_sum, mut with_mentions) = (0.0, 0.0, 0usize);
    for (m, g) in mentions.iter().zip(golds) {
        if g.is_empty() {
            return Err(Error::Empty("gold names of a query"));
        }
        let mut distinct: Vec<&String> = m.iter().collect();
        distinct.sort();
        distinct.dedup();
        let correct = distinct.iter().filter(|n| g.contains(n)).count();
        recall_sum += correct as f64 / g.len() as f64;
        if !distinct.is_empty() {
            precision_sum += correct as f64 / distinct.len() as f64;
            with_mentions += 1;
        }
        s.correct_mentions += correct;
        s.total_mentions += distinct.len();
        s.total_gold += g.len();
    }
    s.recall = recall_sum / golds.len() as f64;
    s.no_mentions = with_mentions == 0;
    s.precision = if s.no_mentions {
        0.0
    } else {
        precision_sum / with_mentions as f64
    };
    s.f1 = f1(s.precision, s.recall);
    s.pooled_recall = s.correct_mentions as f64 / s.total_gold as f64;
    s.pooled_precision = if s.total_mentions > 0 {
        s.correct_mentions as f64 / s.total_mentions as f64
    } else {
        0.0
    };
    s.mention_occurrences = s.total_mentions;
    Ok(s)
}

/// Extracts mentions from each output and scores them.
pub fn grounding_scores(
    outputs: &[TokenSequence],
    golds: &[Vec<String>],
    vocab: &Vocabulary,
    name_vocab: &[String],
    case_insensitive: bool,
) -> Result<GroundingScore> {
    if outputs.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: outputs.len(),
            right: golds.len(),
        });
    }
    let mentions: Vec<Vec<String>> = outputs
        .iter()
        .map(|o| extract_mentions(o.content(), vocab, name_vocab, case_insensitive))
        .collect();
    let mut s = score_mentions(&mentions, golds)?;
    s.mention_occurrences = outputs
        .iter()
        .map(|o| count_occurrences(o.content(), vocab, name_vocab, case_insensitive))
        .sum();
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// Exclusive.
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: usize,
    pub max: usize,
    pub histogram: Vec<LengthBucket>,
    /// No outputs were given; every other field is zero.
    pub empty: bool,
}

pub const LENGTH_BUCKET_WIDTH: usize = 4;

/// Token counts without the end token.
pub fn length_stats(outputs: &[TokenSequence]) -> LengthStats {
    if outputs.is_empty() {
        return LengthStats {
            empty: true,
            ..Default::default()
        };
    }
    let mut lens: Vec<usize> = outputs.iter().map(TokenSequence::content_len).collect();
    lens.sort_unstable();
    let n = lens.len();
    let median = if n % 2 == 1 {
        lens[n / 2] as f64
    } else {
        (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
    };
    let max = lens[n - 1];
    let histogram = (0..=max / LENGTH_BUCKET_WIDTH)
        .map(|b| {
            let lo = b * LENGTH_BUCKET_WIDTH;
            let hi = lo + LENGTH_BUCKET_WIDTH;
            LengthBucket {
                lo,
                hi,
                count: lens.iter().filter(|&&l| (lo..hi).contains(&l)).count(),
            }
        })
        .collect();
    LengthStats {
        count: n,
        mean: lens.iter().sum::<usize>() as f64 / n as f64,
        median,
        min: lens[0],
        max,
        histogram,
        empty: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub concept_count: usize,
    /// Entities in the query image.
    pub query_entities: Vec<u32>,
    pub demonstrations: Vec<String>,
    /// Names the output is scored against.
    pub gold: Vec<String>,
    pub mentions: Vec<String>,
    pub output: String,
    pub output_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountScore {
    pub concept_count: usize,
    pub score: GroundingScore,
    pub mean_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub note: Option<String>,
    pub k: Option<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
    pub config_hash: Option<String>,
    pub overall: GroundingScore,
    pub by_concept_count: Vec<CountScore>,
    pub length: LengthStats,
    /// Retrieval mode: fraction of queries whose retrieved names equal the
    /// query concepts.
    pub retrieval_exact: Option<f64>,
    /// Retrieval mode: queries where `k` exceeded the database size.
    pub truncated_retrievals: usize,
    pub cases: Vec<EvalCase>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "scope,queries,precision,recall,f1,pooled_precision,pooled_recall,correct_mentions,total_mentions,mention_occurrences,total_gold,mean_len";

    pub fn to_csv(&self) -> String {
        let row = |scope: &str, s: &GroundingScore, len: f64| {
            format!(
                "{scope},{},{},{},{},{},{},{},{},{},{},{}\n",
                s.queries,
                s.precision,
                s.recall,
                s.f1,
                s.pooled_precision,
                s.pooled_recall,
                s.correct_mentions,
                s.total_mentions,
                s.mention_occurrences,
                s.total_gold,
                len
            )
        };
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        out.push_str(&row("all", &self.overall, self.length.mean));
        for c in &self.by_concept_count {
            out.push_str(&row(
                &format!("m={}", c.concept_count),
                &c.score,
                c.mean_len,
            ));
        }
        out
    }

    pub fn score_for(&self, concept_count: usize) -> Option<&GroundingScore> {
        self.by_concept_count
            .iter()
            .find(|c| c.concept_count == concept_count)
            .map(|c| &c.score)
    }
}

struct Built {
    record: TaskRecord,
    members: Vec<u32>,
    retrieval_exact: Option<bool>,
    truncated: bool,
}

fn build_query(
    ctx: &TaskContext<'_>,
    database: Option<&RetrievalIndex>,
    mode: EvalMode,
    cfg: &EvalConfig,
    m: usize,
    q: usize,
) -> Result<Built> {
    let world = ctx.world;
    let wc = &world.config;
    let qseed = seed::derive(cfg.seed, &[0x4556_414c, m as u64, q as u64]);
    let mut rng = seed::rng_at(qseed, &[0]);
    let members: Vec<&Entity> = world.entities.choose_multiple(&mut rng, m).collect();
    let scene = compose_scene(
        wc,
        &members,
        (wc.width, wc.height),
        seed::derive(qseed, &[1]),
    )?;
    let template = templates::EVAL_TEMPLATES
        .choose(&mut rng)
        .expect("non-empty bank");
    let member_names: Vec<String> = members
        .iter()
        .map(|e| ctx.name(e.entity_id).to_string())
        .collect();

    let mut retrieval_exact = None;
    let mut truncated = false;
    let demonstrations = match mode {
        EvalMode::SkipRetrieval => members
            .iter()
            .enumerate()
            .map(|(i, e)| ctx.demonstration(e, seed::derive(qseed, &[10 + i as u64])))
            .collect::<Result<Vec<_>>>()?,
        EvalMode::Retrieval => {
            let index = database.ok_or(Error::MissingDatabase)?;
            let provider = EmbeddingProvider::new(wc);
            let regions: Vec<_> = scene
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    provider.embed(v, cfg.noise_sigma, seed::derive(qseed, &[20 + i as u64]))
                })
                .collect();
            let k = cfg.k.unwrap_or(m);
            let r = retrieve(index, &regions, k)?;
            truncated = r.truncated;
            let mut got: Vec<&str> = r.records.iter().map(|c| c.name.as_str()).collect();
            let mut want: Vec<&str> = member_names.iter().map(String::as_str).collect();
            got.sort_unstable();
            want.sort_unstable();
            retrieval_exact = Some(got == want);
            make_demonstrations(&r.records, k)
        }
        EvalMode::WrongDemo => {
            let others: Vec<&Entity> = world
                .entities
                .iter()
                .filter(|e| !members.iter().any(|x| x.entity_id == e.entity_id))
                .collect();
            if others.len() < m {
                return Err(Error::InsufficientEntities {
                    needed: 2 * m,
                    available: world.entities.len(),
                });
            }
            others
                .choose_multiple(&mut rng, m)
                .enumerate()
                .map(|(i, e)| ctx.demonstration(e, seed::derive(qseed, &[10 + i as u64])))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let gold = match mode {
        EvalMode::WrongDemo => demonstrations.iter().map(|d| d.name.clone()).collect(),
        _ => member_names,
    };
    Ok(Built {
        record: TaskRecord {
            record_id: (m as u64) << 32 | q as u64,
            task_kind: if m == 1 {
                TaskKind::Ict1
            } else {
                TaskKind::IctM
            },
            detail: false,
            instruction: TokenSequence::new(ctx.vocab.tokenize(template)),
            demonstrations,
            target: None,
            query: Query::Scene(scene),
            gold: GoldAnswer::Names(gold),
        },
        members: members.iter().map(|e| e.entity_id).collect(),
        retrieval_exact,
        truncated,
    })
}

/// Builds the evaluation queries for `mode`, decodes one greedy caption per
/// query and scores it.
pub fn run_protocol(
    policy: &Policy,
    params: &PolicyParams,
    ctx: &TaskContext<'_>,
    database: Option<&RetrievalIndex>,
    mode: EvalMode,
    cfg: &EvalConfig,
    case_insensitive: bool,
) -> Result<EvalReport> {
    cfg.validate()?;
    if mode == EvalMode::Retrieval && database.is_none() {
        return Err(Error::MissingDatabase);
    }
    let max_m = *cfg
        .concept_counts
        .iter()
        .max()
        .expect("validated non-empty");
    let limit = ctx
        .world
        .config
        .max_entities_per_scene
        .min(ctx.world.entities.len());
    if max_m > limit {
        return Err(Error::InvalidConfig(format!(
            "concept count {max_m} exceeds the {limit} entities a scene can hold"
        )));
    }
    let name_vocab: Vec<String> = ctx.names.values().cloned().collect();
    let jobs: Vec<(usize, usize)> = cfg
        .concept_counts
        .iter()
        .flat_map(|&m| (0..cfg.queries_per_count).map(move |q| (m, q)))
        .collect();
    let results: Vec<(Built, TokenSequence)> = jobs
        .par_iter()
        .map(|&(m, q)| {
            let built = build_query(ctx, database, mode, cfg, m, q)?;
            let out = policy.greedy(params, &built.record, policy.max_len());
            Ok((built, out))
        })
        .collect::<Result<_>>()?;

    let mut cases = Vec::with_capacity(results.len());
    let mut outputs = Vec::with_capacity(results.len());
    let mut golds = Vec::with_capacity(results.len());
    for (b, out) in &results {
        let gold = b.record.gold_names().to_vec();
        cases.push(EvalCase {
            concept_count: b.members.len(),
            query_entities: b.members.clone(),
            demonstrations: b
                .record
                .demonstrations
                .iter()
                .map(|d| d.name.clone())
                .collect(),
            mentions: extract_mentions(out.content(), ctx.vocab, &name_vocab, case_insensitive),
            gold: gold.clone(),
            output: ctx.vocab.render(out.content()),
            output_len: out.content_len(),
        });
        outputs.push(out.clone());
        golds.push(gold);
    }
    let overall = grounding_scores(&outputs, &golds, ctx.vocab, &name_vocab, case_insensitive)?;
    let mut by_concept_count = Vec::new();
    for &m in &cfg.concept_counts {
        let idx: Vec<usize> = (0..cases.len())
            .filter(|&i| cases[i].concept_count == m)
            .collect();
        let o: Vec<TokenSequence> = idx.iter().map(|&i| outputs[i].clone()).collect();
        let g: Vec<Vec<String>> = idx.iter().map(|&i| golds[i].clone()).collect();
        by_concept_count.push(CountScore {
            concept_count: m,
            score: grounding_scores(&o, &g, ctx.vocab, &name_vocab, case_insensitive)?,
            mean_len: length_stats(&o).mean,
        });
    }
    let exact: Vec<bool> = results
        .iter()
        .filter_map(|(b, _)| b.retrieval_exact)
        .collect();
    Ok(EvalReport {
        mode,
        note: (mode == EvalMode::WrongDemo).then(|| WRONG_DEMO_NOTE.to_string()),
        k: (mode == EvalMode::Retrieval).then_some(cfg.k).flatten(),
        noise_sigma: cfg.noise_sigma,
        seed: cfg.seed,
        checkpoint_hash: None,
        config_hash: None,
        overall,
        by_concept_count,
        length: length_stats(&outputs),
        retrieval_exact: (!exact.is_empty())
            .then(|| exact.iter().filter(|&&e| e).count() as f64 / exact.len() as f64),
        truncated_retrievals: results.iter().filter(|(b, _)| b.truncated).count(),
        cases,
    })
}
