//! Confusion matrices and mean intersection-over-union.

use std::ops::{Add, AddAssign};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Label value skipped by accumulation.
pub const IGNORE_INDEX: u32 = 255;

/// `counts[[gt, pred]]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((n_classes, n_classes)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Add one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &Array2<u32>, gt: &Array2<u32>, ignore_index: u32) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(invalid(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dim(),
                gt.dim()
            )));
        }
        let n = self.n_classes() as u32;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == ignore_index {
                continue;
            }
            if g >= n || p >= n {
                return Err(invalid(format!("label out of range: gt {g}, pred {p}, {n} classes")));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.n_classes(), rhs.n_classes(), "class counts differ");
        self.counts += &rhs.counts;
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;
    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        self += &rhs;
        self
    }
}

pub fn accumulate_confusion(
    pred: &Array2<u32>,
    gt: &Array2<u32>,
    n_classes: usize,
    ignore_index: u32,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(n_classes);
    m.accumulate(pred, gt, ignore_index)?;
    Ok(m)
}

/// Per-class IoU (`None` where the class has an empty union) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(confusion: &ConfusionMatrix) -> Result<Miou> {
    let c = confusion.counts();
    let n = confusion.n_classes();
    if n == 0 {
        return Err(invalid("empty confusion matrix"));
    }
    let row = c.sum_axis(ndarray::Axis(1));
    let col = c.sum_axis(ndarray::Axis(0));
    let per_class_iou: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let tp = c[[k, k]];
            let union = row[k] + col[k] - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric("every class has an empty union".into()));
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(Miou { per_class_iou, mean })
}
