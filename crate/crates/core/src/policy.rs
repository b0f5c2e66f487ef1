//! Linear-softmax autoregressive policy over hand-built context features.
//!
//! The next-token distribution is `softmax(theta . phi / T)` where `phi` is a
//! sparse feature vector built from the task and the generated prefix. The
//! feature blocks, in index order:
//!
//! | block          | size      | active when                                   |
//! |----------------|-----------|-----------------------------------------------|
//! | kind bias      | 4         | always, one-hot of the task kind              |
//! | detail         | 1         | captioning record with a detail prompt        |
//! | instruction    | V         | token occurs in the instruction               |
//! | pending name   | N         | verified demonstration name not yet emitted   |
//! | unverified     | N         | same, demonstration not seen in the query     |
//! | names done     | 1         | captioning task with every name emitted       |
//! | query tokens   | A         | attribute occurs in some query view           |
//! | shared tokens  | A         | attribute occurs in both reference and query  |
//! | identity match | 1         | query shows every identity token of reference |
//! | box slot       | 4 x C     | localization step `p < 4`, referred box coord |
//! | position       | 4 x (L+1) | kind x generated length, capped at L          |
//! | previous token | V + 1     | last generated token, or begin-of-sequence    |

use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardBreakdown;
use crate::seed;
use crate::synthworld::{AttrId, View};
use crate::taskgen::{Demonstration, Query, TaskKind, TaskRecord};
use crate::vocab::{TokenId, TokenSequence, Vocabulary, EOS};

/// Sparse feature vector: `(index, value)` pairs with distinct indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextFeatures(pub Vec<(u32, f64)>);

impl ContextFeatures {
    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut d = vec![0.0; dim];
        for &(i, x) in &self.0 {
            d[i as usize] += x;
        }
        d
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, x)| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub vocab_size: u32,
    pub name_count: u32,
    pub attr_count: u32,
    pub coord_count: u32,
    pub max_len: u32,
    pub kind_bias: u32,
    pub detail: u32,
    pub instruction: u32,
    pub pending_name: u32,
    pub pending_unverified: u32,
    pub names_done: u32,
    pub query_attr: u32,
    pub shared_attr: u32,
    pub identity_match: u32,
    pub box_slot: u32,
    pub position: u32,
    pub prev_token: u32,
    pub dim: u32,
}

impl FeatureLayout {
    pub fn new(vocab: &Vocabulary, max_len: usize) -> Self {
        let v = vocab.len() as u32;
        let l = vocab.layout;
        let max_len = max_len as u32;
        let kind_bias = 0;
        let detail = kind_bias + 4;
        let instruction = detail + 1;
        let pending_name = instruction + v;
        let pending_unverified = pending_name + l.name_count;
        let names_done = pending_unverified + l.name_count;
        let query_attr = names_done + 1;
        let shared_attr = query_attr + l.attr_count;
        let identity_match = shared_attr + l.attr_count;
        let box_slot = identity_match + 1;
        let position = box_slot + 4 * l.coord_count;
        let prev_token = position + 4 * (max_len + 1);
        let dim = prev_token + v + 1;
        Self {
            vocab_size: v,
            name_count: l.name_count,
            attr_count: l.attr_count,
            coord_count: l.coord_count,
            max_len,
            kind_bias,
            detail,
            instruction,
            pending_name,
            pending_unverified,
            names_done,
            query_attr,
            shared_attr,
            identity_match,
            box_slot,
            position,
            prev_token,
            dim,
        }
    }
}

/// Prefix-independent part of a task's features.
#[derive(Debug, Clone)]
pub struct TaskFeatures {
    kind: TaskKind,
    fixed: Vec<(u32, f64)>,
    /// Name-block slot of each demonstration name, and whether the
    /// demonstrated identity shows up in the query.
    demo_names: Vec<(u32, bool)>,
    /// Referred box of a localization task.
    target_box: Option<[u32; 4]>,
}

/// Builds context features for one vocabulary.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub layout: FeatureLayout,
    vocab: Vocabulary,
    identity_len: usize,
}

impl FeatureEncoder {
    pub fn new(vocab: &Vocabulary, identity_len: usize, max_len: usize) -> Self {
        Self {
            layout: FeatureLayout::new(vocab, max_len),
            vocab: vocab.clone(),
            identity_len,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.layout.dim as usize
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab_size as usize
    }

    pub fn task_features(&self, task: &TaskRecord) -> TaskFeatures {
        let l = &self.layout;
        let mut fixed = vec![(l.kind_bias + task.task_kind.index() as u32, 1.0)];
        if task.detail {
            fixed.push((l.detail, 1.0));
        }
        let mut instr: Vec<TokenId> = task.instruction.content().to_vec();
        instr.sort_unstable();
        instr.dedup();
        fixed.extend(instr.iter().map(|&t| (l.instruction + t, 1.0)));

        let mut query_attrs: Vec<u32> = task
            .query
            .views()
            .iter()
            .flat_map(|v| v.all_tokens())
            .map(u32::from)
            .collect();
        query_attrs.sort_unstable();
        query_attrs.dedup();
        fixed.extend(query_attrs.iter().map(|&a| (l.query_attr + a, 1.0)));

        if task.task_kind == TaskKind::Oct {
            if let (Some(demo), Query::View(q)) = (
                task.demonstrations.first().and_then(|d| d.view.as_ref()),
                &task.query,
            ) {
                let mut shared: Vec<u32> = demo
                    .all_tokens()
                    .filter(|t| q.all_tokens().any(|u| u == *t))
                    .map(u32::from)
                    .collect();
                shared.sort_unstable();
                shared.dedup();
                fixed.extend(shared.iter().map(|&a| (l.shared_attr + a, 1.0)));
                let identity =
                    &demo.visible_tokens[..self.identity_len.min(demo.visible_tokens.len())];
                if identity.iter().all(|t| q.visible_tokens.contains(t)) {
                    fixed.push((l.identity_match, 1.0));
                }
            }
        }

        let query_views = task.query.views();
        let mut demo_names: Vec<(u32, bool)> = task
            .demonstrations
            .iter()
            .filter_map(|d| {
                let slot = self
                    .vocab
                    .name_token(&d.name)
                    .and_then(|t| self.vocab.name_slot(t))?;
                Some((slot as u32, self.verified(d, query_views)))
            })
            .collect();
        demo_names.sort_unstable();
        demo_names.dedup_by_key(|(s, _)| *s);

        let target_box = match (&task.target, &task.query) {
            (Some(t), Query::Scene(s)) if task.task_kind == TaskKind::Vlt => {
                s.view_of(t.entity_id).map(|v| v.bbox.coords())
            }
            _ => None,
        };
        TaskFeatures {
            kind: task.task_kind,
            fixed,
            demo_names,
            target_box,
        }
    }

    /// Whether some query view carries every identity attribute the
    /// demonstration describes. A demonstration without a view is judged
    /// by the attribute words of its info text.
    fn verified(&self, demo: &Demonstration, query: &[View]) -> bool {
        let described: Vec<AttrId> = match &demo.view {
            Some(v) => v.visible_tokens.clone(),
            None => self
                .vocab
                .tokenize(&demo.info)
                .into_iter()
                .filter_map(|t| self.vocab.attr_of(t))
                .collect(),
        };
        query.iter().any(|v| {
            let id = &v.visible_tokens[..self.identity_len.min(v.visible_tokens.len())];
            !id.is_empty() && id.iter().all(|t| described.contains(t))
        })
    }

    /// Features for the next token after `prefix`.
    pub fn features(&self, tf: &TaskFeatures, prefix: &[TokenId]) -> ContextFeatures {
        let l = &self.layout;
        let mut f = tf.fixed.clone();
        if tf.kind.is_ict() {
            let name_offset = self.vocab.layout.name_offset;
            let emitted = |slot: u32| prefix.contains(&(name_offset + slot));
            let mut pending = 0;
            for &(s, verified) in &tf.demo_names {
                if !emitted(s) {
                    let block = if verified {
                        l.pending_name
                    } else {
                        l.pending_unverified
                    };
                    f.push((block + s, 1.0));
                    pending += 1;
                }
            }
            if pending == 0 {
                f.push((l.names_done, 1.0));
            }
        }
        let pos = prefix.len();
        if let (Some(b), true) = (tf.target_box, pos < 4) {
            let c = b[pos].min(l.coord_count - 1);
            f.push((l.box_slot + pos as u32 * l.coord_count + c, 1.0));
        }
        let p = (pos as u32).min(l.max_len);
        f.push((
            l.position + tf.kind.index() as u32 * (l.max_len + 1) + p,
            1.0,
        ));
        let prev = prefix.last().copied().unwrap_or(l.vocab_size);
        f.push((l.prev_token + prev, 1.0));
        ContextFeatures(f)
    }

    pub fn encode_context(&self, task: &TaskRecord, prefix: &[TokenId]) -> ContextFeatures {
        self.features(&self.task_features(task), prefix)
    }

    /// Features at every step of `sequence`.
    pub fn step_features(&self, task: &TaskRecord, sequence: &[TokenId]) -> Vec<ContextFeatures> {
        let tf = self.task_features(task);
        (0..sequence.len())
            .map(|t| self.features(&tf, &sequence[..t]))
            .collect()
    }
}

/// Decoding cap and initialization of the captioner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub max_len: usize,
    pub eos_bias: f64,
    pub name_bias: f64,
    pub box_prior: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let init = PolicyInit::default();
        Self {
            max_len: 16,
            eos_bias: init.eos_bias,
            name_bias: init.name_bias,
            box_prior: init.box_prior,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::InvalidConfig(
                "policy max_len must be positive".into(),
            ));
        }
        for (k, v) in [
            ("eos_bias", self.eos_bias),
            ("name_bias", self.name_bias),
            ("box_prior", self.box_prior),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("policy {k} must be finite")));
            }
        }
        Ok(())
    }

    pub fn init(&self) -> PolicyInit {
        PolicyInit {
            eos_bias: self.eos_bias,
            name_bias: self.name_bias,
            box_prior: self.box_prior,
        }
    }
}

/// Initial parameter values. See [`PolicyParams::initial`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyInit {
    /// End-token weight on every kind bias and on the all-names-emitted indicator.
    pub eos_bias: f64,
    /// Weight of every name token on every kind bias.
    pub name_bias: f64,
    /// Weight linking each localization slot to its referred coordinate.
    pub box_prior: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            eos_bias: 6.0,
            name_bias: -2.0,
            box_prior: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`, one row per vocabulary token.
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            theta: vec![0.0; rows * cols],
        }
    }

    /// Starting point for training, standing in for a pretrained captioner
    /// that ends captions early, has never seen the concept names and has a
    /// rough sense of where the referred region is.
    pub fn initial(enc: &FeatureEncoder, init: &PolicyInit) -> Self {
        let l = enc.layout;
        let vl = enc.vocab().layout;
        let mut p = Self::zeros(enc.vocab_size(), enc.dim());
        for k in 0..4 {
            *p.at_mut(EOS, l.kind_bias + k) = init.eos_bias;
            for t in vl.name_offset..vl.name_offset + vl.name_count {
                *p.at_mut(t, l.kind_bias + k) = init.name_bias;
            }
        }
        *p.at_mut(EOS, l.names_done) = init.eos_bias;
        for slot in 0..4 {
            for c in 0..l.coord_count {
                *p.at_mut(vl.coord_offset + c, l.box_slot + slot * l.coord_count + c) =
                    init.box_prior;
            }
        }
        p
    }

    /// Hand-set parameters that copy every demonstration name, then stop.
    pub fn copying_oracle(enc: &FeatureEncoder) -> Self {
        let l = enc.layout;
        let name_offset = enc.vocab().layout.name_offset;
        let mut p = Self::zeros(enc.vocab_size(), enc.dim());
        for s in 0..l.name_count {
            *p.at_mut(name_offset + s, l.pending_name + s) = 20.0;
        }
        *p.at_mut(EOS, l.names_done) = 20.0;
        p
    }

    pub fn at(&self, token: TokenId, feature: u32) -> f64 {
        self.theta[token as usize * self.cols + feature as usize]
    }

    pub fn at_mut(&mut self, token: TokenId, feature: u32) -> &mut f64 {
        &mut self.theta[token as usize * self.cols + feature as usize]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    pub fn logits(&self, phi: &ContextFeatures) -> Vec<f64> {
        (0..self.rows)
            .map(|v| {
                let row = &self.theta[v * self.cols..(v + 1) * self.cols];
                phi.0.iter().map(|&(j, x)| row[j as usize] * x).sum()
            })
            .collect()
    }

    /// `theta += scale * other`.
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) {
        for (t, g) in self.theta.iter_mut().zip(other) {
            *t += scale * g;
        }
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], temperature: f64, token: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    (logits[token] - max) / temperature - lse
}

pub fn token_distribution(
    params: &PolicyParams,
    phi: &ContextFeatures,
    temperature: f64,
) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    softmax(&params.logits(phi), temperature)
}

/// Inverse-CDF draw from `p` with `u` uniform in `[0, 1)`.
pub fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (v, pv) in p.iter().enumerate() {
        acc += pv;
        if u < acc {
            return v;
        }
    }
    p.len() - 1
}

/// Per-step log-probabilities of `tokens` given per-step features.
pub fn logprob_steps(
    params: &PolicyParams,
    steps: &[ContextFeatures],
    tokens: &[TokenId],
    temperature: f64,
) -> Vec<f64> {
    steps
        .iter()
        .zip(tokens)
        .map(|(phi, &t)| log_softmax_at(&params.logits(phi), temperature, t as usize))
        .collect()
}

/// Adds `coef * d log pi(token | phi) / d theta` into `grad`, i.e.
/// `coef / T * (onehot(token) - p) (x) phi`.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    phi: &ContextFeatures,
    token: TokenId,
    temperature: f64,
    coef: f64,
    grad: &mut [f64],
) {
    if coef == 0.0 {
        return;
    }
    let p = softmax(&params.logits(phi), temperature);
    let scale = coef / temperature;
    for (v, pv) in p.iter().enumerate() {
        let d = if v == token as usize { 1.0 - pv } else { -pv };
        let row = &mut grad[v * params.cols..(v + 1) * params.cols];
        for &(j, x) in &phi.0 {
            row[j as usize] += scale * d * x;
        }
    }
}

/// Gradient of `sum_t log pi(token_t | phi_t)`.
pub fn grad_logprob_steps(
    params: &PolicyParams,
    steps: &[ContextFeatures],
    tokens: &[TokenId],
    temperature: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; params.theta.len()];
    for (phi, &t) in steps.iter().zip(tokens) {
        accumulate_logprob_grad(params, phi, t, temperature, 1.0, &mut g);
    }
    g
}

/// One sampled completion with its sampling-time log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub sequence: TokenSequence,
    pub logprobs_old: Vec<f64>,
    pub reward: Option<RewardBreakdown>,
}

/// The policy distribution for a given encoder and sampling temperature.
#[derive(Debug, Clone)]
pub struct Policy {
    pub encoder: FeatureEncoder,
    pub temperature: f64,
}

impl Policy {
    pub fn new(encoder: FeatureEncoder, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self {
            encoder,
            temperature,
        }
    }

    pub fn max_len(&self) -> usize {
        self.encoder.layout.max_len as usize
    }

    /// Ancestral sampling until the end token or `max_len` tokens.
    pub fn sample_sequence(
        &self,
        params: &PolicyParams,
        task: &TaskRecord,
        max_len: usize,
        seed: u64,
    ) -> Rollout {
        assert!(max_len >= 1, "max_len must be at least 1");
        let tf = self.encoder.task_features(task);
        let mut rng = seed::rng(seed);
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let phi = self.encoder.features(&tf, &tokens);
            let p = token_distribution(params, &phi, self.temperature);
            let pick = sample_categorical(&p, rng.random());
            tokens.push(pick as TokenId);
            logprobs.push(log_softmax_at(&params.logits(&phi), self.temperature, pick));
            if pick as TokenId == EOS {
                break;
            }
        }
        Rollout {
            sequence: TokenSequence::new(tokens),
            logprobs_old: logprobs,
            reward: None,
        }
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(
        &self,
        params: &PolicyParams,
        task: &TaskRecord,
        max_len: usize,
    ) -> TokenSequence {
        let tf = self.encoder.task_features(task);
        let mut tokens = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let logits = params.logits(&self.encoder.features(&tf, &tokens));
            let mut best = 0;
            for (v, z) in logits.iter().enumerate() {
                if *z > logits[best] {
                    best = v;
                }
            }
            tokens.push(best as TokenId);
            if best as TokenId == EOS {
                break;
            }
        }
        TokenSequence::new(tokens)
    }

    pub fn logprob_sequence(
        &self,
        params: &PolicyParams,
        task: &TaskRecord,
        sequence: &TokenSequence,
    ) -> Result<Vec<f64>> {
        sequence.validate(self.encoder.vocab_size())?;
        let steps = self.encoder.step_features(task, sequence.tokens());
        Ok(logprob_steps(
            params,
            &steps,
            sequence.tokens(),
            self.temperature,
        ))
    }

    pub fn grad_logprob(
        &self,
        params: &PolicyParams,
        task: &TaskRecord,
        sequence: &TokenSequence,
    ) -> Result<Vec<f64>> {
        sequence.validate(self.encoder.vocab_size())?;
        let steps = self.encoder.step_features(task, sequence.tokens());
        Ok(grad_logprob_steps(
            params,
            &steps,
            sequence.tokens(),
            self.temperature,
        ))
    }
}

// ---- checkpoints ---------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "picrl-policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub vocab_hash: String,
    pub seed: u64,
    pub step: usize,
    pub config_hash: String,
}

impl CheckpointHeader {
    pub fn new(
        params: &PolicyParams,
        vocab_hash: String,
        seed: u64,
        step: usize,
        config_hash: String,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            rows: params.rows,
            cols: params.cols,
            vocab_hash,
            seed,
            step,
            config_hash,
        }
    }
}

/// One JSON header line, then `rows * cols` little-endian `f64` values.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    header: &CheckpointHeader,
    params: &PolicyParams,
) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for x in &params.theta {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(CheckpointHeader, PolicyParams)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let n = header.rows * header.cols;
    let mut bytes = Vec::with_capacity(n * 8);
    input.read_to_end(&mut bytes)?;
    if bytes.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            n * 8,
            bytes.len()
        )));
    }
    let theta = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        header.clone(),
        PolicyParams {
            rows: header.rows,
            cols: header.cols,
            theta,
        },
    ))
}

#[cfg(test)]
mod tests;
