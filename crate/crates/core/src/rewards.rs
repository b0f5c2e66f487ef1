//! Verifiable rewards: answer parsing and the per-kind scoring rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{iou, BBox};
use crate::taskgen::{GoldAnswer, TaskKind, TaskRecord, YesNo};
use crate::vocab::{TokenId, TokenSequence, Vocabulary, NO, YES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub iou_threshold: f64,
    /// Minimum content length (end token excluded) that earns the length reward.
    pub length_cutoff: usize,
    pub length_weight: f64,
    pub case_insensitive_names: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            length_cutoff: 12,
            length_weight: 1.0,
            case_insensitive_names: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "iou_threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if self.length_cutoff == 0 {
            return Err(Error::InvalidConfig("length_cutoff must be >= 1".into()));
        }
        if !(self.length_weight >= 0.0 && self.length_weight.is_finite()) {
            return Err(Error::InvalidConfig("length_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    Unparsed,
    /// Captioning outputs are scored by name containment, not parsed.
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub task_reward: f64,
    pub length_reward: f64,
    /// Whether `length_reward` contributes to `total`.
    pub length_applied: bool,
    pub total: f64,
    pub matched_names: Vec<String>,
    pub parse_status: ParseStatus,
}

impl RewardBreakdown {
    pub const CSV_HEADER: &'static str =
        "task_reward,length_reward,length_applied,total,matched_names,parse_status";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.task_reward,
            self.length_reward,
            self.length_applied,
            self.total,
            self.matched_names.join(";"),
            match self.parse_status {
                ParseStatus::Parsed => "parsed",
                ParseStatus::Unparsed => "unparsed",
                ParseStatus::FreeText => "free_text",
            }
        )
    }
}

/// First yes/no token in the output.
pub fn parse_binary_answer(output: &[TokenId]) -> Option<YesNo> {
    output.iter().find_map(|&t| match t {
        YES => Some(YesNo::Yes),
        NO => Some(YesNo::No),
        _ => None,
    })
}

/// First ordered quadruple of consecutive coordinate tokens.
///
/// Commas are skipped; any other token, brackets included, breaks a run.
pub fn parse_bbox(output: &[TokenId], vocab: &Vocabulary) -> Option<BBox> {
    let mut run: Vec<u32> = Vec::with_capacity(8);
    let check = |run: &[u32]| {
        run.windows(4)
            .find_map(|w| BBox::new(w[0], w[1], w[2], w[3]))
    };
    for &t in output {
        if let Some(c) = vocab.coord_value(t) {
            run.push(c);
        } else if t != crate::vocab::COMMA {
            if let Some(b) = check(&run) {
                return Some(b);
            }
            run.clear();
        }
    }
    check(&run)
}

/// Whole-token containment of a (possibly multi-word) name.
pub fn contains_name(
    output: &[TokenId],
    vocab: &Vocabulary,
    name: &str,
    case_insensitive: bool,
) -> bool {
    let parts: Vec<&str> = name.split_whitespace().collect();
    if parts.is_empty() || parts.len() > output.len() {
        return false;
    }
    let eq = |t: TokenId, w: &str| match vocab.word(t) {
        Some(tok) if case_insensitive => tok.to_lowercase() == w.to_lowercase(),
        Some(tok) => tok == w,
        None => false,
    };
    output
        .windows(parts.len())
        .any(|win| win.iter().zip(&parts).all(|(&t, w)| eq(t, w)))
}

/// Scores outputs against records for one vocabulary and configuration.
#[derive(Debug, Clone, Copy)]
pub struct RewardEngine<'a> {
    pub vocab: &'a Vocabulary,
    pub cfg: &'a RewardConfig,
}

impl<'a> RewardEngine<'a> {
    pub fn new(vocab: &'a Vocabulary, cfg: &'a RewardConfig) -> Self {
        Self { vocab, cfg }
    }

    pub fn reward_oct(&self, task: &TaskRecord, output: &TokenSequence) -> Result<f64> {
        let GoldAnswer::Binary(gold) = task.gold else {
            return Err(Error::KindMismatch {
                expected: "OCT",
                got: task.task_kind,
            });
        };
        Ok(match parse_binary_answer(output.content()) {
            Some(a) if a == gold => 1.0,
            _ => 0.0,
        })
    }

    pub fn reward_vlt(&self, task: &TaskRecord, output: &TokenSequence) -> Result<f64> {
        let GoldAnswer::Box(gold) = task.gold else {
            return Err(Error::KindMismatch {
                expected: "VLT",
                got: task.task_kind,
            });
        };
        Ok(match parse_bbox(output.content(), self.vocab) {
            Some(pred) if iou(&pred, &gold) >= self.cfg.iou_threshold => 1.0,
            _ => 0.0,
        })
    }

    pub fn matched_names(&self, names: &[String], output: &[TokenId]) -> Vec<String> {
        names
            .iter()
            .filter(|n| contains_name(output, self.vocab, n, self.cfg.case_insensitive_names))
            .cloned()
            .collect()
    }

    /// Fraction `n/m` of the `m` gold names found in the output.
    pub fn reward_ict(&self, task: &TaskRecord, output: &TokenSequence) -> Result<f64> {
        match (&task.gold, task.task_kind.is_ict()) {
            (GoldAnswer::Names(gold), true) if !gold.is_empty() => {
                let n = self.matched_names(gold, output.content()).len();
                Ok(n as f64 / gold.len() as f64)
            }
            _ => Err(Error::KindMismatch {
                expected: "ICT1/ICTM",
                got: task.task_kind,
            }),
        }
    }

    pub fn reward_length(&self, output: &TokenSequence) -> f64 {
        if output.content_len() >= self.cfg.length_cutoff {
            1.0
        } else {
            0.0
        }
    }

    pub fn score(&self, task: &TaskRecord, output: &TokenSequence) -> Result<RewardBreakdown> {
        let length_reward = self.reward_length(output);
        let content = output.content();
        let (task_reward, status, matched) = match task.task_kind {
            TaskKind::Oct => {
                let s = if parse_binary_answer(content).is_some() {
                    ParseStatus::Parsed
                } else {
                    ParseStatus::Unparsed
                };
                (self.reward_oct(task, output)?, s, Vec::new())
            }
            TaskKind::Vlt => {
                let s = if parse_bbox(content, self.vocab).is_some() {
                    ParseStatus::Parsed
                } else {
                    ParseStatus::Unparsed
                };
                (self.reward_vlt(task, output)?, s, Vec::new())
            }
            TaskKind::Ict1 | TaskKind::IctM => (
                self.reward_ict(task, output)?,
                ParseStatus::FreeText,
                self.matched_names(task.gold_names(), content),
            ),
        };
        let length_applied = task.task_kind.is_ict();
        let total = if length_applied {
            task_reward + self.cfg.length_weight * length_reward
        } else {
            task_reward
        };
        Ok(RewardBreakdown {
            task_reward,
            length_reward,
            length_applied,
            total,
            matched_names: matched,
            parse_status: status,
        })
    }
}
