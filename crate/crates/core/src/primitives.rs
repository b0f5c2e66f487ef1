//! Shared geometric and statistical primitives.

use serde::{Deserialize, Serialize};

/// Axis-aligned box over half-open integer cell ranges `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    /// Returns `None` unless `x1 <= x2` and `y1 <= y2`.
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Option<Self> {
        (x1 <= x2 && y1 <= y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    pub fn translate(&self, dx: u32, dy: u32) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        u64::from(w) * u64::from(h)
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = String;

    fn try_from([x1, y1, x2, y2]: [u32; 4]) -> Result<Self, Self::Error> {
        BBox::new(x1, y1, x2, y2).ok_or_else(|| format!("malformed box [{x1},{y1},{x2},{y2}]"))
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean and population standard deviation.
///
/// Panics on an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std of an empty list");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fixed-dimension embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn squared_distance(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn distance(&self, other: &EmbeddingVector) -> f64 {
        self.squared_distance(other).sqrt()
    }
}

/// Precision, recall and F1 with the mention counts they came from.
///
/// `precision` and `recall` average per-query fractions; the pooled variants
/// divide summed counts instead.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundingScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pooled_precision: f64,
    pub pooled_recall: f64,
    pub queries: usize,
    pub correct_mentions: usize,
    /// Distinct concept names mentioned, summed over queries.
    pub total_mentions: usize,
    /// Every occurrence of a concept name, repeats included.
    pub mention_occurrences: usize,
    pub total_gold: usize,
    /// Set when no concept name was mentioned at all, which pins precision to 0.
    pub no_mentions: bool,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}
