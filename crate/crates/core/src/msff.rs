//! Multi-scale feature fusion: a gated concatenation of encoder levels plus
//! the projected decoder-final map.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{ChannelSpec, FeaturePyramid, Scale};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear, ParamStore};
use crate::resample::{resize, Resample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Sigmoid,
    None,
}

/// `msff.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsffConfig {
    pub gate_activation: GateActivation,
    /// Denominator of the fusion resolution (8, 16 or 32).
    pub fusion_scale: usize,
}

impl Default for MsffConfig {
    fn default() -> Self {
        Self {
            gate_activation: GateActivation::Sigmoid,
            fusion_scale: 32,
        }
    }
}

/// Fused map `(B, C_cat, h, w)` at the fusion scale.
#[derive(Debug, Clone)]
pub struct FusedFeatureMap {
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct Msff {
    pub gate: Linear,
    pub decoder_proj: Linear,
    pub gate_activation: GateActivation,
    pub fusion_scale: Scale,
    /// Use only the projected decoder-final map.
    pub skip: bool,
}

/// Area for shrinking, bilinear for growing, identity when sizes match.
fn resample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let src_h = x.dims()[x.rank() - 2];
    resize(x, h, w, Resample::auto(src_h, h))
}

impl Msff {
    pub fn new(store: &mut ParamStore, spec: &ChannelSpec, cfg: &MsffConfig) -> Result<Self> {
        let c = spec.concat();
        Ok(Self {
            gate: Linear::new(store, "msff.gate", c, c)?,
            decoder_proj: Linear::new(store, "msff.decoder_proj", spec.decoder, c)?,
            gate_activation: cfg.gate_activation,
            fusion_scale: Scale::from_divisor(cfg.fusion_scale)?,
            skip: false,
        })
    }

    pub fn fuse(&self, pyramid: &FeaturePyramid) -> Result<FusedFeatureMap> {
        let target = pyramid.level(self.fusion_scale)?;
        let (h, w) = (target.dims()[2], target.dims()[3]);
        let d = resample_to(&self.decoder_proj.forward_channels(&pyramid.decoder_final)?, h, w)?;
        if self.skip {
            return Ok(FusedFeatureMap { features: d });
        }
        let parts = Scale::ALL
            .iter()
            .map(|s| resample_to(pyramid.level(*s)?, h, w))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::cat(&parts, 1)?;
        if x.dims()[1] != self.gate.d_in() {
            return Err(Error::shape(format!(
                "concatenated levels have {} channels, gate expects {}",
                x.dims()[1],
                self.gate.d_in()
            )));
        }
        let g = self.gate.forward_channels(&x)?;
        let g = match self.gate_activation {
            GateActivation::Sigmoid => sigmoid(&g)?,
            GateActivation::None => g,
        };
        let y = (g * x)?;
        Ok(FusedFeatureMap {
            features: (y + d)?,
        })
    }
}
