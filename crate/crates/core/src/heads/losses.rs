//! Training losses with analytic gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::iou::iou_3d;
use crate::error::{Error, Result};
use crate::geometry::Box3d;
use crate::nn::Matrix;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Loss weighting for both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Scale of the first-stage regression term.
    pub beta: f64,
    /// Per-residual smooth-L1 weights.
    pub code_weights: Vec<f64>,
    /// Weight of the confidence term in the second-stage loss.
    pub iou_weight: f64,
    /// Weight of the regression term in the second-stage loss.
    pub reg_weight: f64,
    pub focal: FocalParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            code_weights: vec![1.0; super::CODE_SIZE],
            iou_weight: 1.0,
            reg_weight: 1.0,
            focal: FocalParams::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.focal.gamma < 0.0 || !(self.focal.alpha >= 0.0) {
            return Err(Error::Config("focal alpha and gamma must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_same(ctx: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension { context: ctx.into(), expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// Sigmoid focal loss `−α (1 − p_t)^γ log p_t` for `A × C` logits against
/// one-hot targets; summed over classes, averaged over anchors. Returns the
/// value and `dL/dlogits`.
pub fn focal_loss(logits: &Matrix, targets: &Matrix, params: FocalParams) -> Result<(f64, Matrix)> {
    check_same("focal targets", logits, targets)?;
    let a = logits.nrows().max(1) as f64;
    let FocalParams { alpha, gamma } = params;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((&z, &y), g) in logits.iter().zip(targets).zip(grad.iter_mut()) {
        let sign = if y == 1.0 {
            1.0
        } else if y == 0.0 {
            -1.0
        } else {
            return Err(Error::Contract(format!("focal targets must be 0 or 1, got {y}")));
        };
        let zt = sign * z;
        let p = sigmoid(zt);
        let q = sigmoid(-zt);
        let log_p = -softplus(-zt);
        let mod_q = q.powf(gamma);
        loss += -alpha * mod_q * log_p;
        // d/dz_t of −α q^γ log p with p = σ(z_t), q = 1 − p
        *g = sign * alpha * (gamma * mod_q * p * log_p - mod_q * q) / a;
    }
    Ok((loss / a, grad))
}

/// Binary cross-entropy on logits, summed over classes and averaged over rows.
pub fn bce_with_logits(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    check_same("bce targets", logits, targets)?;
    let a = logits.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((&z, &y), g) in logits.iter().zip(targets).zip(grad.iter_mut()) {
        loss += if y == 1.0 {
            softplus(-z)
        } else if y == 0.0 {
            softplus(z)
        } else {
            softplus(z) - y * z
        };
        *g = (sigmoid(z) - y) / a;
    }
    Ok((loss / a, grad))
}

#[inline]
pub fn smooth_l1_scalar(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 1.0 {
        0.5 * x * x
    } else {
        ax - 0.5
    }
}

#[inline]
pub fn smooth_l1_derivative(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Weighted smooth-L1 of `pred − target`: summed over residual dims,
/// averaged over rows. `weights` holds one weight per column.
pub fn smooth_l1(pred: &Matrix, target: &Matrix, weights: Option<&[f64]>) -> Result<(f64, Matrix)> {
    check_same("smooth-l1 target", pred, target)?;
    if let Some(w) = weights {
        if w.len() != pred.ncols() {
            return Err(Error::dim("smooth-l1 weights", pred.ncols(), w.len()));
        }
    }
    let n = pred.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    for ((i, j), &p) in pred.indexed_iter() {
        let w = weights.map_or(1.0, |w| w[j]);
        let x = p - target[[i, j]];
        loss += w * smooth_l1_scalar(x);
        grad[[i, j]] = w * smooth_l1_derivative(x) / n;
    }
    Ok((loss / n, grad))
}

/// `clamp(2·IoU − 0.5, 0, 1)`.
pub fn confidence_target_from_iou(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

pub fn confidence_target(roi: &Box3d, gt: &Box3d) -> f64 {
    confidence_target_from_iou(iou_3d(roi, gt))
}

/// `−p* log p − (1 − p*) log(1 − p)` with `p = σ(z)`, evaluated in logit
/// space and averaged over the batch. Returns the value and `dL/dz`.
pub fn confidence_loss(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::dim("confidence targets", logits.len(), targets.len()));
    }
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("confidence target must be in [0, 1], got {t}")));
        }
        // −t log σ(z) − (1 − t) log σ(−z)
        loss += t * softplus(-z) + (1.0 - t) * softplus(z);
        grad.push((sigmoid(z) - t) / n);
    }
    Ok((loss / n, grad))
}

/// Value and gradients of a composite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Classification term before weighting (confidence or focal).
    pub cls: f64,
    /// Regression term before weighting.
    pub reg: f64,
    pub d_logits: Matrix,
    pub d_residuals: Matrix,
}

/// Second-stage loss: weighted confidence loss plus weighted smooth-L1.
pub fn rcnn_loss(
    logits: &[f64],
    targets: &[f64],
    residuals: &Matrix,
    residual_targets: &Matrix,
    w: &LossWeights,
) -> Result<LossOutput> {
    let (cls, dl) = confidence_loss(logits, targets)?;
    let (reg, dr) = smooth_l1(residuals, residual_targets, Some(&w.code_weights))?;
    Ok(LossOutput {
        value: w.iou_weight * cls + w.reg_weight * reg,
        cls,
        reg,
        d_logits: Array2::from_shape_vec((dl.len(), 1), dl.into_iter().map(|g| g * w.iou_weight).collect())
            .expect("column vector"),
        d_residuals: dr * w.reg_weight,
    })
}

/// First-stage loss: focal classification plus `β` times smooth-L1.
pub fn rpn_loss(
    cls_logits: &Matrix,
    cls_targets: &Matrix,
    residuals: &Matrix,
    residual_targets: &Matrix,
    w: &LossWeights,
) -> Result<LossOutput> {
    w.validate()?;
    let (cls, dl) = focal_loss(cls_logits, cls_targets, w.focal)?;
    let (reg, dr) = smooth_l1(residuals, residual_targets, Some(&w.code_weights))?;
    Ok(LossOutput { value: cls + w.beta * reg, cls, reg, d_logits: dl, d_residuals: dr * w.beta })
}
