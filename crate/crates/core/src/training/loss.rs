//! Correlation and objectness objectives with analytic gradients.

use ndarray::{Array1, Array2, Axis};

use crate::denoiser::affinity::AffinityMatrix;
use crate::denoiser::heads::{AffinityHead, ObjectnessHead, ObjectnessMap};
use crate::error::{degenerate, invalid, Result};
use crate::features::PatchFeatureMap;
use crate::teachers::BinaryAffinityTarget;

/// Probability clamp applied to `q = (A + 1) / 2`.
pub const Q_CLAMP: f64 = 1e-6;

/// Mean pairwise BCE between affinity values `a` and binary targets, with
/// the gradient with respect to every entry of `a`.
pub fn correlation_bce(a: &Array2<f64>, target: &Array2<bool>) -> Result<(f64, Array2<f64>)> {
    if a.dim() != target.dim() || a.nrows() != a.ncols() || a.is_empty() {
        return Err(invalid("affinity and target must be matching square matrices"));
    }
    let scale = 1.0 / a.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(a.dim());
    for ((g, &v), &d) in grad.iter_mut().zip(a.iter()).zip(target.iter()) {
        let raw = (v + 1.0) / 2.0;
        let q = raw.clamp(Q_CLAMP, 1.0 - Q_CLAMP);
        loss -= if d { q.ln() } else { (1.0 - q).ln() };
        if raw == q {
            let dq = if d { -1.0 / q } else { 1.0 / (1.0 - q) };
            *g = 0.5 * dq * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Correlation loss of a predicted affinity against the binarized teacher.
pub fn correlation_loss(predicted: &AffinityMatrix, target: &BinaryAffinityTarget) -> Result<f64> {
    if predicted.grid() != target.grid() {
        return Err(invalid("prediction and target grids differ"));
    }
    Ok(correlation_bce(predicted.values(), target.values())?.0)
}

/// Mean BCE of logits against binary targets in the stable form
/// `max(x, 0) - x m + ln(1 + e^-|x|)`, with the gradient per logit.
pub fn objectness_bce(logits: &Array1<f64>, target: &[bool]) -> Result<(f64, Array1<f64>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(invalid("logits and target lengths differ"));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::<f64>::zeros(logits.len());
    for ((g, &x), &m) in grad.iter_mut().zip(logits.iter()).zip(target) {
        let m = if m { 1.0 } else { 0.0 };
        loss += x.max(0.0) - x * m + (-x.abs()).exp().ln_1p();
        *g = (crate::denoiser::heads::sigmoid(x) - m) / n;
    }
    Ok((loss / n, grad))
}

/// Objectness loss of predicted logits against a binary target map.
pub fn objectness_loss(predicted: &ObjectnessMap, target: &ObjectnessMap) -> Result<f64> {
    if predicted.grid() != target.grid() {
        return Err(invalid("prediction and target grids differ"));
    }
    let logits = predicted
        .logits()
        .ok_or_else(|| invalid("objectness prediction carries no logits"))?;
    Ok(objectness_bce(logits, target.binary())?.0)
}

/// Gradient of the affinity head parameters (kernel in flattened
/// `(ky, kx, c_in) x d_g` layout).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGrad {
    pub kernel: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessGrad {
    pub kernel: Array1<f64>,
    pub bias: f64,
}

/// Correlation loss of `head` on one image and its parameter gradient.
pub fn correlation_loss_and_grad(
    head: &AffinityHead,
    intermediate: &PatchFeatureMap,
    target: &BinaryAffinityTarget,
) -> Result<(f64, AffinityGrad)> {
    if intermediate.grid() != target.grid() {
        return Err(invalid("feature and target grids differ"));
    }
    let (g, cols) = head.project_with_columns(intermediate)?;
    let norms = g.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| !(n > 0.0)) {
        return Err(degenerate("zero-norm projected feature"));
    }
    let u = &g / &norms.view().insert_axis(Axis(1));
    let mut a = u.dot(&u.t());
    for p in 0..a.nrows() {
        a[[p, p]] = 1.0;
    }
    a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    let (loss, d_a) = correlation_bce(&a, target.values())?;
    // A = U U^T, so dU = (dA + dA^T) U; then back through row normalization.
    let d_u = (&d_a + &d_a.t()).dot(&u);
    let radial = (&d_u * &u).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_g = (&d_u - &(&u * &radial)) / &norms.view().insert_axis(Axis(1));
    Ok((
        loss,
        AffinityGrad {
            kernel: cols.t().dot(&d_g),
            bias: d_g.sum_axis(Axis(0)),
        },
    ))
}

/// Objectness loss of `head` on one image and its parameter gradient.
pub fn objectness_loss_and_grad(
    head: &ObjectnessHead,
    intermediate: &PatchFeatureMap,
    target: &ObjectnessMap,
) -> Result<(f64, ObjectnessGrad)> {
    if intermediate.grid() != target.grid() {
        return Err(invalid("feature and target grids differ"));
    }
    let logits = head.logits(intermediate)?;
    let (loss, d_l) = objectness_bce(&logits, target.binary())?;
    Ok((
        loss,
        ObjectnessGrad {
            kernel: intermediate.values().t().dot(&d_l),
            bias: d_l.sum(),
        },
    ))
}
