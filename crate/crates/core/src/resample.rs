//! Separable spatial resampling expressed as interpolation matrices.
//!
//! A resize of a `H×W` plane to `h×w` is `Rh · X · Rwᵀ`, so resampling stays a
//! pair of matrix products and is differentiable through the tensor graph.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::tensor_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Half-pixel-centre bilinear interpolation, edges clamped.
    Bilinear,
    /// Adaptive average pooling; exact block means for integer factors.
    Area,
}

impl Resample {
    /// Area for shrinking, bilinear for growing.
    pub fn auto(n_in: usize, n_out: usize) -> Self {
        if n_out <= n_in {
            Resample::Area
        } else {
            Resample::Bilinear
        }
    }
}

/// Row-major `n_out × n_in` bilinear weights.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// Row-major `n_out × n_in` adaptive-average weights.
pub fn area_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let start = (o * n_in) / n_out;
        let end = ((o + 1) * n_in).div_ceil(n_out);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m[o * n_in + i] = w;
        }
    }
    m
}

fn matrix(mode: Resample, n_in: usize, n_out: usize) -> Vec<f64> {
    match mode {
        Resample::Bilinear => bilinear_matrix(n_in, n_out),
        Resample::Area => area_matrix(n_in, n_out),
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Resizes the last two axes of `x` to `(h, w)`.
///
/// Returns `x` unchanged when the size already matches.
pub fn resize(x: &Tensor, h: usize, w: usize, mode: Resample) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    if dims.len() < 2 {
        return Err(Error::shape("resize needs at least two axes"));
    }
    let (hh, ww) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if hh == 0 || ww == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot resize {hh}x{ww} to {h}x{w}")));
    }
    if (hh, ww) == (h, w) {
        return Ok(x.clone());
    }
    let lead: usize = dims[..dims.len() - 2].iter().product();
    let dtype = x.dtype();
    let mut y = x.reshape((lead * hh, ww))?;
    if ww != w {
        let rw_t = tensor_from(transpose(&matrix(mode, ww, w), w, ww), &[ww, w], dtype)?;
        y = y.matmul(&rw_t)?;
    }
    let y = y.reshape((lead, hh, w))?.transpose(1, 2)?.contiguous()?;
    let y = if hh != h {
        let rh_t = tensor_from(transpose(&matrix(mode, hh, h), h, hh), &[hh, h], dtype)?;
        y.reshape((lead * w, hh))?.matmul(&rh_t)?
    } else {
        y.reshape((lead * w, hh))?
    };
    let y = y.reshape((lead, w, h))?.transpose(1, 2)?.contiguous()?;
    let mut out = dims;
    let n = out.len();
    out[n - 2] = h;
    out[n - 1] = w;
    Ok(y.reshape(out)?)
}

/// [`resize`] choosing area or bilinear from the size change.
pub fn resize_auto(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let hh = dims[dims.len().saturating_sub(2)];
    resize(x, h, w, Resample::auto(hh, h))
}

/// Resizes a single row-major plane of `f64` values.
pub fn resize_plane(
    plane: &[f64],
    hh: usize,
    ww: usize,
    h: usize,
    w: usize,
    mode: Resample,
) -> Vec<f64> {
    if (hh, ww) == (h, w) {
        return plane.to_vec();
    }
    let rh = matrix(mode, hh, h);
    let rw = matrix(mode, ww, w);
    // rows first: tmp = plane · Rwᵀ  (hh × w)
    let mut tmp = vec![0.0; hh * w];
    for r in 0..hh {
        for c in 0..w {
            let mut acc = 0.0;
            for k in 0..ww {
                let wt = rw[c * ww + k];
                if wt != 0.0 {
                    acc += plane[r * ww + k] * wt;
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for k in 0..hh {
            let wt = rh[r * hh + k];
            if wt == 0.0 {
                continue;
            }
            for c in 0..w {
                out[r * w + c] += wt * tmp[k * w + c];
            }
        }
    }
    out
}

/// Convenience: a tensor's dtype-preserving resize to a square grid.
pub fn resize_square(x: &Tensor, side: usize) -> Result<Tensor> {
    resize_auto(x, side, side)
}
