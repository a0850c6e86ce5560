use ndarray::{Array2, ArrayView1};

use crate::error::{invalid, Result};
use crate::features::{l2_normalize_rows, PatchFeatureMap};
use crate::featurizer::TextQuerySet;
use crate::grid::PatchGrid;

/// Patch-level segmentation: cosine scores, labels and softmax confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    grid: PatchGrid,
    scores: Array2<f64>,
    labels: Vec<usize>,
    confidence: Vec<f64>,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Largest softmax probability of `row` (no temperature).
pub fn softmax_max(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    1.0 / denom
}

impl SegmentationResult {
    /// Labels and confidence derived from `scores` (`N x |T|`).
    pub fn from_scores(grid: PatchGrid, scores: Array2<f64>) -> Result<Self> {
        if scores.nrows() != grid.len() {
            return Err(invalid(format!(
                "{} score rows for {} patches",
                scores.nrows(),
                grid.len()
            )));
        }
        if scores.ncols() == 0 {
            return Err(invalid("scores need at least one query column"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite scores"));
        }
        let labels = scores.rows().into_iter().map(argmax).collect();
        let confidence = scores.rows().into_iter().map(softmax_max).collect();
        Ok(Self {
            grid,
            scores,
            labels,
            confidence,
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn n_queries(&self) -> usize {
        self.scores.ncols()
    }

    /// Patches whose label differs from the score argmax (background overrides).
    pub fn overridden(&self) -> Vec<bool> {
        self.scores
            .rows()
            .into_iter()
            .zip(&self.labels)
            .map(|(row, &l)| argmax(row) != l)
            .collect()
    }

    /// Fraction of patches per query label.
    pub fn coverage(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_queries()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.labels.len() as f64)
            .collect()
    }

    pub(crate) fn with_labels(&self, labels: Vec<usize>) -> Self {
        Self {
            labels,
            ..self.clone()
        }
    }
}

/// Cosine similarity of every (L2-normalized) patch feature to every query.
pub fn similarity_map(pooled: &PatchFeatureMap, queries: &TextQuerySet) -> Result<SegmentationResult> {
    if queries.is_empty() {
        return Err(invalid("no text queries"));
    }
    if pooled.dim() != queries.dim() {
        return Err(invalid(format!(
            "feature width {} does not match text embedding width {}",
            pooled.dim(),
            queries.dim()
        )));
    }
    let u = l2_normalize_rows(pooled.values(), "pooled features")?;
    let scores = u.dot(&queries.embeddings().t()).mapv(|v| v.clamp(-1.0, 1.0));
    SegmentationResult::from_scores(pooled.grid(), scores)
}
