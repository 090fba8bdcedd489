//! Textual-visual aggregation: text-weighted attention over the fused
//! feature map with mean-normalisation filtering.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Linear, ParamStore};

/// Per-instance attention maps on the 1/8 grid.
#[derive(Debug, Clone)]
pub struct TextualVisualRepresentation {
    /// Softmax weights over categories, `(B, N, C)`.
    pub weights: Tensor,
    /// `(B, N, P)`.
    pub attention_raw: Tensor,
    /// `(B, N, P)`, nonnegative.
    pub attention_filtered: Tensor,
    /// Fused features on the same grid, `(B, C_t, P)`.
    pub features: Tensor,
    pub height: usize,
    pub width: usize,
}

impl TextualVisualRepresentation {
    /// `Â_i(p) · F(p)` as `(B, N, C_t, P)`.
    pub fn per_instance_map(&self) -> Result<Tensor> {
        let a = self.attention_filtered.unsqueeze(2)?;
        let f = self.features.unsqueeze(1)?;
        Ok(a.broadcast_mul(&f)?)
    }
}

/// Mean of `features (B, P, C)` over each mask `(B, N, P)`; empty masks give 0.
pub fn mask_pool(features: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (b, p, _) = features.dims3()?;
    let (mb, _, mp) = masks.dims3()?;
    if (mb, mp) != (b, p) {
        return Err(Error::shape(format!(
            "masks {:?} do not match features {:?}",
            masks.dims(),
            features.dims()
        )));
    }
    let area = masks.sum_keepdim(D::Minus1)?.clamp(1.0, f64::INFINITY)?;
    Ok(masks.matmul(features)?.broadcast_div(&area)?)
}

/// Reference implementation of [`mask_pool`] on plain vectors:
/// `features` is `P × C` row-major, `mask` has `P` entries.
pub fn mask_pool_vec(features: &[f64], c: usize, mask: &[bool]) -> Result<Vec<f64>> {
    if features.len() != mask.len() * c {
        return Err(Error::shape("mask and feature sizes differ"));
    }
    let mut out = vec![0.0; c];
    let mut n = 0usize;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            n += 1;
            for k in 0..c {
                out[k] += features[p * c + k];
            }
        }
    }
    if n > 0 {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(out)
}

/// How mask and text embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvaMode {
    /// Scaled softmax weighting and mean-normalisation filtering.
    Full,
    /// Raw dot products as weights and no filtering.
    DotProduct,
}

#[derive(Debug, Clone)]
pub struct Tva {
    /// Text space to fused-feature space.
    pub proj: Linear,
    pub mode: TvaMode,
}

impl Tva {
    pub fn new(store: &mut ParamStore, text_dim: usize, feat_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "tva.proj", text_dim, feat_dim)?,
            mode: TvaMode::Full,
        })
    }

    /// `mask_embeddings (B, N, D)`, `text (C, D)`, `features (B, C_t, h, w)`.
    pub fn aggregate(&self, mask_embeddings: &Tensor, text: &Tensor, features: &Tensor) -> Result<TextualVisualRepresentation> {
        let (b, _, d) = mask_embeddings.dims3()?;
        let (nc, td) = text.dims2()?;
        if nc == 0 {
            return Err(Error::config("aggregation needs at least one category"));
        }
        if td != d {
            return Err(Error::shape(format!("text width {td} differs from mask-embedding width {d}")));
        }
        let (fb, ct, h, w) = features.dims4()?;
        if fb != b {
            return Err(Error::shape("feature and embedding batch sizes differ"));
        }
        let affinity = mask_embeddings.broadcast_matmul(&text.t()?)?;
        let weights = match self.mode {
            TvaMode::Full => softmax_last(&(affinity / (d as f64).sqrt())?)?,
            TvaMode::DotProduct => affinity,
        };
        let context = weights.broadcast_matmul(text)?;
        let key = self.proj.forward(&context)?;
        let feats = features.reshape((b, ct, h * w))?;
        let raw = key.matmul(&feats)?;
        let filtered = match self.mode {
            TvaMode::Full => filter_attention(&raw)?,
            TvaMode::DotProduct => raw.clone(),
        };
        Ok(TextualVisualRepresentation {
            weights,
            attention_raw: raw,
            attention_filtered: filtered,
            features: feats,
            height: h,
            width: w,
        })
    }
}

/// Subtracts each map's spatial mean and clamps negatives to zero.
///
/// Maps are shifted by their first entry before averaging, so a constant
/// map filters to exact zeros.
pub fn filter_attention(raw: &Tensor) -> Result<Tensor> {
    let first = raw.narrow(D::Minus1, 0, 1)?;
    let shifted = raw.broadcast_sub(&first)?;
    let mean = shifted.mean_keepdim(D::Minus1)?;
    Ok(shifted.broadcast_sub(&mean)?.relu()?)
}
