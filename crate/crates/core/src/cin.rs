//! Camouflaged instance normalisation: per-instance affine modulation of the
//! projected textual-visual map, a residual refinement of the coarse mask
//! logits, and an existence confidence.
//!
//! The projected map of instance `i` is `x_i(p) = Â_i(p) · G(p) + b_h` with
//! `G = W_h F`. Its spatial statistics and the 1×1 residual head therefore
//! reduce to products of `Â` with `G`, so [`Cin::forward`] never materialises
//! the `N × C_h × P` tensor. [`Cin::forward_dense`] computes the same
//! quantities explicitly.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::maskgen::InstancePredictions;
use crate::nn::{sigmoid, Init, Linear, ParamStore};
use crate::resample::{resize, Resample};
use crate::tva::{mask_pool, TextualVisualRepresentation};

pub const NORM_EPS: f64 = 1e-5;

/// `cin.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CinConfig {
    /// `C_h = hidden_factor · C_t`.
    pub hidden_factor: usize,
    pub confidence_threshold: f64,
}

impl Default for CinConfig {
    fn default() -> Self {
        Self {
            hidden_factor: 2,
            confidence_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CinOutput {
    /// Refined logits `(B, N, H/4, W/4)`.
    pub final_logits: Tensor,
    /// `(B, N)` in `[0, 1]`.
    pub confidence: Tensor,
    /// `(B, N)` pre-sigmoid confidence.
    pub confidence_logits: Tensor,
    /// Pooled instance vectors `(B, N, C_h)`.
    pub instance: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Residual logits on the attention grid `(B, N, h, w)`.
    pub residual: Tensor,
}

#[derive(Debug, Clone)]
pub struct Cin {
    /// `C_t → C_h` pointwise projection.
    pub proj: Linear,
    pub affine_a: Linear,
    pub affine_b: Linear,
    /// `C_h → 1` residual head, zero-initialised.
    pub residual: Linear,
    pub confidence: Linear,
    /// Confidence head on pooled `C_t` features, used when the module is skipped.
    pub skip_confidence: Option<Linear>,
}

/// Zero mean and unit variance over the last axis, `eps`-regularised.
pub fn instance_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(c.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Coarse logits `(B, N, H4, W4)` resampled to `h × w` and binarized at 0, detached.
pub fn coarse_masks(coarse: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, ch, _) = coarse.dims4()?;
    let small = resize(&coarse.detach(), h, w, Resample::auto(ch, h))?;
    Ok(small.gt(0.0)?.to_dtype(coarse.dtype())?.reshape((b, n, h * w))?)
}

impl Cin {
    pub fn new(store: &mut ParamStore, c_t: usize, cfg: &CinConfig, skip: bool) -> Result<Self> {
        if cfg.hidden_factor == 0 {
            return Err(Error::config("cin.hidden_factor must be at least 1"));
        }
        let c_h = cfg.hidden_factor * c_t;
        let a_init = Init::fan_in(c_h);
        Ok(Self {
            proj: Linear::new(store, "cin.proj", c_t, c_h)?,
            affine_a: Linear::with_init(store, "cin.affine_a", c_h, c_h, a_init, Init::Const(1.0))?,
            affine_b: Linear::with_init(store, "cin.affine_b", c_h, c_h, a_init, Init::Const(0.0))?,
            residual: Linear::with_init(store, "cin.residual", c_h, 1, Init::Const(0.0), Init::Const(0.0))?,
            confidence: Linear::new(store, "cin.confidence", c_h, 1)?,
            skip_confidence: if skip {
                Some(Linear::new(store, "cin.skip_confidence", c_t, 1)?)
            } else {
                None
            },
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.d_out()
    }

    fn bias_h(&self) -> Result<&Tensor> {
        self.proj
            .bias
            .as_ref()
            .ok_or_else(|| Error::shape("projection without bias"))
    }

    /// Pooled projected features: `((m ⊙ Â) G) / |m| + b_h`, zero for empty masks.
    fn instance_vectors(&self, m: &Tensor, a_hat: &Tensor, g_t: &Tensor) -> Result<Tensor> {
        let area = m.sum_keepdim(D::Minus1)?;
        let nonempty = area.gt(0.0)?.to_dtype(m.dtype())?;
        let pooled = (m * a_hat)?.matmul(g_t)?.broadcast_div(&area.clamp(1.0, f64::INFINITY)?)?;
        Ok((pooled + nonempty.broadcast_mul(self.bias_h()?)?)?)
    }

    fn finish(&self, coarse: &Tensor, r: Tensor, h: usize, w: usize, v: Tensor, gamma: Tensor, beta: Tensor) -> Result<CinOutput> {
        let (b, n, h4, w4) = coarse.dims4()?;
        let r = r.reshape((b, n, h, w))?;
        let up = resize(&r, h4, w4, Resample::Bilinear)?;
        let confidence_logits = self.confidence.forward(&v)?.squeeze(D::Minus1)?;
        Ok(CinOutput {
            final_logits: (coarse + up)?,
            confidence: sigmoid(&confidence_logits)?,
            confidence_logits,
            instance: v,
            gamma,
            beta,
            residual: r,
        })
    }

    /// Refines `coarse (B, N, H4, W4)` using the aggregation output.
    pub fn forward(&self, tvr: &TextualVisualRepresentation, coarse: &Tensor) -> Result<CinOutput> {
        let (h, w) = (tvr.height, tvr.width);
        let p = (h * w) as f64;
        let m = coarse_masks(coarse, h, w)?;
        let a_hat = &tvr.attention_filtered;
        let g = self.proj.weight.broadcast_matmul(&tvr.features)?;
        let g_t = g.transpose(1, 2)?.contiguous()?;
        let v = self.instance_vectors(&m, a_hat, &g_t)?;
        let gamma = self.affine_a.forward(&v)?;
        let beta = self.affine_b.forward(&v)?;

        let m1 = (a_hat.matmul(&g_t)? / p)?;
        let m2 = (a_hat.sqr()?.matmul(&g_t.sqr()?)? / p)?;
        let var = (m2 - m1.sqr()?)?.relu()?;
        let s = (var + NORM_EPS)?.sqrt()?;
        let w_res = self.residual.weight.squeeze(0)?;
        let w0 = self.residual.bias.as_ref().ok_or_else(|| Error::shape("residual head without bias"))?;
        let a = gamma.broadcast_mul(&w_res)?.div(&s)?;
        let r = (a_hat * a.matmul(&g)?)?;
        let shift = ((&a * &m1)?.sum_keepdim(D::Minus1)? - beta.broadcast_mul(&w_res)?.sum_keepdim(D::Minus1)?)?;
        let r = r.broadcast_sub(&shift)?.broadcast_add(w0)?;
        self.finish(coarse, r, h, w, v, gamma, beta)
    }

    /// Straightforward evaluation with the full per-instance projected maps.
    pub fn forward_dense(&self, tvr: &TextualVisualRepresentation, coarse: &Tensor) -> Result<CinOutput> {
        let (h, w) = (tvr.height, tvr.width);
        let m = coarse_masks(coarse, h, w)?;
        let x = tvr.per_instance_map()?;
        let (b, n, ct, pp) = x.dims4()?;
        let xt = x.transpose(2, 3)?.contiguous()?.reshape((b * n, pp, ct))?;
        let proj = self.proj.forward(&xt)?;
        let c_h = proj.dims()[2];
        let v = mask_pool(&proj, &m.reshape((b * n, 1, pp))?)?.reshape((b, n, c_h))?;
        let gamma = self.affine_a.forward(&v)?;
        let beta = self.affine_b.forward(&v)?;
        let xn = instance_normalize(&proj.transpose(1, 2)?.contiguous()?, NORM_EPS)?;
        let modulated = xn
            .broadcast_mul(&gamma.reshape((b * n, c_h, 1))?)?
            .broadcast_add(&beta.reshape((b * n, c_h, 1))?)?;
        let r = self.residual.forward(&modulated.transpose(1, 2)?.contiguous()?)?;
        let r = r.reshape((b, n, pp))?;
        self.finish(coarse, r, h, w, v, gamma, beta)
    }

    /// Bypass: coarse logits pass through, confidence from pooled `Â ⊙ F`.
    pub fn forward_skip(&self, tvr: &TextualVisualRepresentation, coarse: &Tensor) -> Result<CinOutput> {
        let head = self
            .skip_confidence
            .as_ref()
            .ok_or_else(|| Error::config("module was built without the bypass confidence head"))?;
        let (h, w) = (tvr.height, tvr.width);
        let m = coarse_masks(coarse, h, w)?;
        let f_t = tvr.features.transpose(1, 2)?.contiguous()?;
        let area = m.sum_keepdim(D::Minus1)?.clamp(1.0, f64::INFINITY)?;
        let pooled = (&m * &tvr.attention_filtered)?.matmul(&f_t)?.broadcast_div(&area)?;
        let confidence_logits = head.forward(&pooled)?.squeeze(D::Minus1)?;
        let zeros = pooled.zeros_like()?;
        Ok(CinOutput {
            final_logits: coarse.clone(),
            confidence: sigmoid(&confidence_logits)?,
            confidence_logits,
            instance: pooled,
            gamma: zeros.clone(),
            beta: zeros,
            residual: m.zeros_like()?,
        })
    }
}

/// One kept instance after confidence filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedInstance {
    pub index: usize,
    pub confidence: f64,
    pub mask: Mask,
}

/// Keeps instances with `confidence >= threshold`, binarizes their
/// full-resolution masks at logit 0, and sorts by descending confidence
/// (lower index first on ties).
pub fn score_and_select(preds: &InstancePredictions, threshold: f64) -> Result<Vec<SelectedInstance>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Range(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds.confidences[i] >= threshold)
        .collect();
    order.sort_by(|&a, &b| {
        preds.confidences[b]
            .total_cmp(&preds.confidences[a])
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .map(|i| SelectedInstance {
            index: i,
            confidence: preds.confidences[i],
            mask: preds.binary_mask(i),
        })
        .collect())
}
