//! Training objective: mask BCE and dice, temperature-scaled embedding
//! classification, the weighted total, and prediction/ground-truth matching.

mod hungarian;

pub use hungarian::{hungarian_match, MatchAssignment};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::maskgen::InstancePredictions;
use crate::nn::{log_softmax_last, scalar_f64, sigmoid, softplus, tensor_from};
use crate::vocab::normalize;

/// `loss.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the BCE term.
    pub alpha: f64,
    /// Weight of the no-object term for unmatched predictions.
    pub noobj_weight: f64,
    pub dice_smooth: f64,
    pub tau_init: f64,
    /// Weight of the confidence BCE folded into the classification term.
    pub existence_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            noobj_weight: 0.1,
            dice_smooth: 1.0,
            tau_init: 0.07,
            existence_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 0.0) || !(self.dice_smooth > 0.0) {
            return Err(Error::config("loss.tau_init and loss.dice_smooth must be positive"));
        }
        if self.alpha < 0.0 || self.noobj_weight < 0.0 || self.existence_weight < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Elementwise `-[g log σ(x) + (1-g) log(1-σ(x))]` in logit form.
pub fn bce_elementwise(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(logits, gt)?;
    Ok((softplus(logits)? - (logits * gt)?)?)
}

/// Mean binary cross-entropy over all elements.
pub fn bce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(bce_elementwise(logits, gt)?.mean_all()?)
}

/// Per-row dice loss over the last axis, `1 - (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_rows(probs: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(probs, gt)?;
    if !(smooth > 0.0) {
        return Err(Error::domain("dice smoothing must be positive"));
    }
    let inter = (probs * gt)?.sum(D::Minus1)?;
    let denom = ((probs.sum(D::Minus1)? + gt.sum(D::Minus1)?)? + smooth)?;
    let ratio = (((inter * 2.0)? + smooth)? / denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Dice loss treating the whole tensor as one mask.
pub fn dice_loss(probs: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(probs, gt)?;
    let n = probs.elem_count();
    Ok(dice_rows(&probs.reshape((1, n))?, &gt.reshape((1, n))?, smooth)?.squeeze(0)?)
}

/// Mean cross-entropy of `softmax(z Tᵀ / τ)` against `labels`.
/// `embeddings (M, D)`, `classes (K, D)`, `tau` a scalar tensor.
pub fn classification_loss(embeddings: &Tensor, classes: &Tensor, labels: &[usize], tau: &Tensor) -> Result<Tensor> {
    let (m, d) = embeddings.dims2()?;
    let (k, dk) = classes.dims2()?;
    if d != dk {
        return Err(Error::shape(format!("embedding width {d} vs class width {dk}")));
    }
    if labels.len() != m {
        return Err(Error::shape(format!("{} labels for {m} embeddings", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::domain(format!("label {bad} outside [0, {k})")));
    }
    let logits = embeddings.matmul(&classes.t()?)?.broadcast_div(tau)?;
    let logp = log_softmax_last(&logits)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (m, 1), embeddings.device())?;
    Ok(logp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Scalar loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `alpha · bce + dice + ce` from scalar terms.
    pub fn combine(bce: f64, dice: f64, ce: f64, alpha: f64) -> Self {
        Self {
            bce,
            dice,
            ce,
            total: alpha * bce + dice + ce,
        }
    }
}

/// Differentiable loss terms.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub bce: Tensor,
    pub dice: Tensor,
    pub ce: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn new(bce: Tensor, dice: Tensor, ce: Tensor, alpha: f64) -> Result<Self> {
        let total = ((&bce * alpha)? + &dice)?.add(&ce)?;
        Ok(Self { bce, dice, ce, total })
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            bce: scalar_f64(&self.bce)?,
            dice: scalar_f64(&self.dice)?,
            ce: scalar_f64(&self.ce)?,
            total: scalar_f64(&self.total)?,
        })
    }
}

fn stable_bce(x: f64, g: f64) -> f64 {
    x.max(0.0) - x * g + (-x.abs()).exp().ln_1p()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - m - lse).collect()
}

/// Class log-probabilities of a unit-normalised embedding against `classes`.
pub fn class_log_probs(embedding: &[f64], classes: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let z = normalize(embedding.to_vec());
    let logits: Vec<f64> = classes
        .iter()
        .map(|c| c.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    log_softmax(&logits)
}

/// Per-pair matching costs `alpha·bce + dice + ce` on the stored logit grid.
/// Ground-truth masks are area-downsampled to that grid; embeddings are
/// unit-normalised before classification against `classes`.
pub fn build_cost_matrix(
    preds: &InstancePredictions,
    gt_masks: &[Mask],
    gt_labels: &[usize],
    classes: &[Vec<f64>],
    tau: f64,
    cfg: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    if gt_masks.len() != gt_labels.len() {
        return Err(Error::shape("ground-truth masks and labels differ in length"));
    }
    if let Some(&bad) = gt_labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::domain(format!("label {bad} outside [0, {})", classes.len())));
    }
    let (h, w) = (preds.logit_height, preds.logit_width);
    let gts: Vec<Vec<f64>> = gt_masks.iter().map(|m| m.downsample(h, w).to_f64()).collect();
    let gt_area: Vec<f64> = gts.iter().map(|g| g.iter().sum()).collect();
    let p = (h * w) as f64;
    let mut cost = Vec::with_capacity(preds.len());
    for i in 0..preds.len() {
        let logits = &preds.mask_logits[i];
        let probs: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let psum: f64 = probs.iter().sum();
        let logp = class_log_probs(&preds.embeddings[i], classes, tau);
        let row = gts
            .iter()
            .zip(&gt_area)
            .zip(gt_labels)
            .map(|((g, &ga), &label)| {
                let mut bce = 0.0;
                let mut inter = 0.0;
                for k in 0..logits.len() {
                    bce += stable_bce(logits[k], g[k]);
                    inter += probs[k] * g[k];
                }
                let dice = 1.0 - (2.0 * inter + cfg.dice_smooth) / (psum + ga + cfg.dice_smooth);
                cfg.alpha * bce / p + dice - logp[label]
            })
            .collect();
        cost.push(row);
    }
    Ok(cost)
}

/// One image's ground truth for the set loss.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    /// `(G, H·W)` binary masks at full resolution.
    pub masks: Tensor,
    pub labels: Vec<usize>,
}

/// Batched model outputs entering the set loss.
#[derive(Debug, Clone)]
pub struct SetPrediction<'a> {
    /// `(B, N, H, W)` full-resolution logits.
    pub mask_logits: &'a Tensor,
    /// `(B, N, D)` unit-normalised mask embeddings.
    pub embeddings: &'a Tensor,
    /// `(B, N)` confidence logits.
    pub confidence_logits: &'a Tensor,
}

fn zero(dtype: DType) -> Result<Tensor> {
    tensor_from(vec![0.0], &[], dtype)
}

/// Weighted total over matched pairs, with a no-object classification term
/// for unmatched predictions and an existence BCE on confidences.
/// `classes (K, D)` holds the category rows followed by the no-object row.
pub fn total_loss(
    pred: &SetPrediction,
    targets: &[ImageTargets],
    matches: &[MatchAssignment],
    classes: &Tensor,
    tau: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let (b, n, h, w) = pred.mask_logits.dims4()?;
    if targets.len() != b || matches.len() != b {
        return Err(Error::shape("targets and matches must cover the batch"));
    }
    let dtype = pred.mask_logits.dtype();
    let noobj = classes.dims2()?.0 - 1;
    let flat = pred.mask_logits.reshape((b * n, h * w))?;
    let emb = pred.embeddings.reshape((b * n, pred.embeddings.dims()[2]))?;

    let mut pred_rows = Vec::new();
    let mut gt_rows = Vec::new();
    let mut labels = Vec::new();
    let mut unmatched = Vec::new();
    let mut existence = vec![0.0; b * n];
    for (bi, (t, m)) in targets.iter().zip(matches).enumerate() {
        for &(i, j) in &m.pairs {
            pred_rows.push((bi * n + i) as u32);
            gt_rows.push(t.masks.get(j)?);
            labels.push(t.labels[j]);
            existence[bi * n + i] = 1.0;
        }
        unmatched.extend(m.unmatched_predictions.iter().map(|&i| (bi * n + i) as u32));
    }
    let device = flat.device();
    let (bce, dice, ce_matched) = if pred_rows.is_empty() {
        (zero(dtype)?, zero(dtype)?, zero(dtype)?)
    } else {
        let idx = Tensor::from_vec(pred_rows.clone(), pred_rows.len(), device)?;
        let logits = flat.index_select(&idx, 0)?;
        let gt = Tensor::stack(&gt_rows, 0)?.to_dtype(dtype)?;
        let bce = bce_loss(&logits, &gt)?;
        let dice = dice_rows(&sigmoid(&logits)?, &gt, cfg.dice_smooth)?.mean_all()?;
        let ce = classification_loss(&emb.index_select(&idx, 0)?, classes, &labels, tau)?;
        (bce, dice, ce)
    };
    let ce_noobj = if unmatched.is_empty() {
        zero(dtype)?
    } else {
        let k = unmatched.len();
        let idx = Tensor::from_vec(unmatched, k, device)?;
        classification_loss(&emb.index_select(&idx, 0)?, classes, &vec![noobj; k], tau)?
    };
    let exist_gt = tensor_from(existence, &[b, n], dtype)?;
    let exist = bce_loss(pred.confidence_logits, &exist_gt)?;
    let ce = ((ce_matched + (ce_noobj * cfg.noobj_weight)?)? + (exist * cfg.existence_weight)?)?;
    LossTerms::new(bce, dice, ce, cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn t(v: Vec<f64>, s: &[usize]) -> Tensor {
        tensor_from(v, s, DType::F64).unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let l = bce_loss(&t(vec![0.0; 4], &[2, 2]), &t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap();
        assert!((scalar_f64(&l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturates() {
        let l = bce_loss(&t(vec![20.0, -20.0], &[2]), &t(vec![1.0, 0.0], &[2])).unwrap();
        assert!(scalar_f64(&l).unwrap() < 1e-8);
    }

    #[test]
    fn dice_closed_form() {
        let l = dice_loss(&t(vec![0.5; 4], &[2, 2]), &t(vec![1.0; 4], &[2, 2]), 1.0).unwrap();
        assert!((scalar_f64(&l).unwrap() - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_loss_is_zero() {
        let l = classification_loss(&t(vec![0.3, -0.2], &[1, 2]), &t(vec![1.0, 0.0], &[1, 2]), &[0], &t(vec![0.07], &[])).unwrap();
        assert_eq!(scalar_f64(&l).unwrap(), 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let r = classification_loss(&t(vec![0.3, -0.2], &[1, 2]), &t(vec![1.0, 0.0], &[1, 2]), &[1], &t(vec![0.07], &[]));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn weighting_arithmetic() {
        let one = t(vec![1.0], &[]);
        let terms = LossTerms::new(one.clone(), one.clone(), one, 0.4).unwrap();
        assert!((to_f64_vec(&terms.total).unwrap()[0] - 2.4).abs() < 1e-12);
    }
}
