//! Query-based mask generator: a pixel decoder that upsamples the fused map
//! to per-pixel embeddings, and a masked-attention transformer decoder whose
//! refined queries produce class-agnostic masks and mask embeddings.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::Scale;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, tensor_from, to_f64_vec, to_tokens, Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::data::Mask;
use crate::resample::{resize, resize_plane, Resample};

/// `maskgen.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskgenConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    /// Query and pixel-decoder width.
    pub hidden_dim: usize,
    /// Mask-embedding width; must equal the text embedding width.
    pub embed_dim: usize,
    pub ffn_dim: usize,
}

impl Default for MaskgenConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            layers: 9,
            heads: 8,
            hidden_dim: 256,
            embed_dim: 64,
            ffn_dim: 1024,
        }
    }
}

/// Pixel-decoder maps at 1/32, 1/16, 1/8 and the 1/4 per-pixel embeddings.
#[derive(Debug, Clone)]
pub struct PixelDecoderOutput {
    /// `(B, C_p, h, w)` at 1/32, 1/16, 1/8, in that order.
    pub intermediate: [Tensor; 3],
    /// `(B, D_emb, H/4, W/4)`.
    pub per_pixel: Tensor,
}

pub const DECODER_SCALES: [Scale; 3] = [Scale::ThirtySecond, Scale::Sixteenth, Scale::Eighth];

/// Scale read by decoder layer `layer`: round-robin over [1/32, 1/16, 1/8].
pub fn layer_scale(layer: usize) -> Scale {
    DECODER_SCALES[layer % 3]
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub in_proj: Linear,
    pub lateral16: Linear,
    pub lateral8: Linear,
    pub conv16: Conv2d,
    pub conv8: Conv2d,
    pub out: Conv2d,
    /// Denominator of the fused map's scale.
    pub fusion_divisor: usize,
}

fn resample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let src_h = x.dims()[x.rank() - 2];
    resize(x, h, w, Resample::auto(src_h, h))
}

impl PixelDecoder {
    pub fn new(store: &mut ParamStore, c_in: usize, cfg: &MaskgenConfig, fusion_divisor: usize) -> Result<Self> {
        let c = cfg.hidden_dim;
        Ok(Self {
            in_proj: Linear::new(store, "pixel.in_proj", c_in, c)?,
            lateral16: Linear::new(store, "pixel.lateral16", c_in, c)?,
            lateral8: Linear::new(store, "pixel.lateral8", c_in, c)?,
            conv16: Conv2d::new(store, "pixel.conv16", c, c, 3, 1, 1)?,
            conv8: Conv2d::new(store, "pixel.conv8", c, c, 3, 1, 1)?,
            out: Conv2d::new(store, "pixel.out", c, cfg.embed_dim, 3, 1, 1)?,
            fusion_divisor,
        })
    }

    /// Progressive upsampling of the fused map `(B, C, h, w)`.
    pub fn forward(&self, fused: &Tensor) -> Result<PixelDecoderOutput> {
        let (_, _, fh, fw) = fused.dims4()?;
        let (img_h, img_w) = (fh * self.fusion_divisor, fw * self.fusion_divisor);
        let dims = |s: Scale| s.dims(img_h, img_w);
        let (h32, w32) = dims(Scale::ThirtySecond);
        let (h16, w16) = dims(Scale::Sixteenth);
        let (h8, w8) = dims(Scale::Eighth);
        let (h4, w4) = ((img_h as f64 / 4.0).round() as usize, (img_w as f64 / 4.0).round() as usize);

        let p32 = self.in_proj.forward_channels(&resample_to(fused, h32, w32)?)?.gelu_erf()?;
        let lat16 = self.lateral16.forward_channels(&resample_to(fused, h16, w16)?)?;
        let p16 = self
            .conv16
            .forward(&(resize(&p32, h16, w16, Resample::Bilinear)? + lat16)?)?
            .gelu_erf()?;
        let lat8 = self.lateral8.forward_channels(&resample_to(fused, h8, w8)?)?;
        let p8 = self
            .conv8
            .forward(&(resize(&p16, h8, w8, Resample::Bilinear)? + lat8)?)?
            .gelu_erf()?;
        let per_pixel = self.out.forward(&resize(&p8, h4, w4, Resample::Bilinear)?)?;
        Ok(PixelDecoderOutput {
            intermediate: [p32, p16, p8],
            per_pixel,
        })
    }
}

/// Fixed 2-D sine positional encoding, `(P, C)` for an `h × w` grid.
pub fn sine_position_encoding(h: usize, w: usize, c: usize, dtype: DType) -> Result<Tensor> {
    let half = c / 2;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let py = (y as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
            let px = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            let row = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
            for k in 0..half {
                let freq = 10000f64.powf(2.0 * (k / 2) as f64 / half.max(1) as f64);
                let f = |p: f64| if k % 2 == 0 { (p / freq).sin() } else { (p / freq).cos() };
                row[k] = f(py);
                if half + k < c {
                    row[half + k] = f(px);
                }
            }
        }
    }
    tensor_from(out, &[h * w, c], dtype)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// `query (B, Nq, D)`, `key`/`value (B, Nk, D)`, additive `bias (B, Nq, Nk)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let nk = key.dims()[1];
        let h = self.heads;
        let dh = d / h;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, nq)?;
        let k = split(self.k.forward(key)?, nk)?;
        let v = split(self.v.forward(value)?, nk)?;
        let mut scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(&bias.unsqueeze(1)?)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub cross: Attention,
    pub norm_cross: LayerNorm,
    pub self_attn: Attention,
    pub norm_self: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &MaskgenConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            cross: Attention::new(store, &format!("{name}.cross"), d, cfg.heads)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d)?,
            self_attn: Attention::new(store, &format!("{name}.self"), d, cfg.heads)?,
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_dim)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_dim, d)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d)?,
        })
    }

    /// Masked cross-attention, self-attention and feed-forward, each post-norm.
    pub fn forward(&self, q: &Tensor, memory: &Tensor, pos: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let keys = memory.broadcast_add(pos)?;
        let x = self.norm_cross.forward(&(q + self.cross.forward(q, &keys, memory, Some(bias))?)?)?;
        let x = self.norm_self.forward(&(&x + self.self_attn.forward(&x, &x, &x, None)?)?)?;
        let f = self.ffn_out.forward(&self.ffn_in.forward(&x)?.gelu_erf()?)?;
        self.norm_ffn.forward(&(x + f)?)
    }
}

/// `LayerNorm → Linear` head giving mask embeddings from queries.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub norm: LayerNorm,
    pub embed: Linear,
}

impl MaskHead {
    pub fn embed(&self, queries: &Tensor) -> Result<Tensor> {
        self.embed.forward(&self.norm.forward(queries)?)
    }
}

/// Mask logits `(B, N, H4, W4)` as `⟨embedding_i, per_pixel(p)⟩`.
pub fn mask_logits(embeddings: &Tensor, per_pixel: &Tensor) -> Result<Tensor> {
    let (b, n, d) = embeddings.dims3()?;
    let (pb, pd, h, w) = per_pixel.dims4()?;
    if pb != b || pd != d {
        return Err(Error::shape(format!(
            "embeddings {:?} incompatible with per-pixel map {:?}",
            embeddings.dims(),
            per_pixel.dims()
        )));
    }
    Ok(embeddings.matmul(&per_pixel.reshape((b, d, h * w))?)?.reshape((b, n, h, w))?)
}

/// Attention bias from mask logits: 0 where the mask is on at the target
/// grid, `-1e9` elsewhere; a query with no foreground attends everywhere.
pub fn attention_bias(logits: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, _, _) = logits.dims4()?;
    let small = resize(&logits.detach(), h, w, Resample::auto(logits.dims()[2], h))?;
    let vals = to_f64_vec(&small)?;
    let p = h * w;
    let mut bias = vec![0.0; b * n * p];
    for row in 0..b * n {
        let src = &vals[row * p..(row + 1) * p];
        if src.iter().any(|&v| v > 0.0) {
            for (dst, &v) in bias[row * p..(row + 1) * p].iter_mut().zip(src) {
                if v <= 0.0 {
                    *dst = -1e9;
                }
            }
        }
    }
    tensor_from(bias, &[b, n, p], logits.dtype())
}

/// Refined queries and their predictions.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `(B, N, D_q)`.
    pub queries: Tensor,
    /// `(B, N, D_emb)`.
    pub embeddings: Tensor,
    /// `(B, N, H/4, W/4)`.
    pub mask_logits: Tensor,
    /// Scale read by each layer.
    pub layer_scales: Vec<Scale>,
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub query_feat: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub head: MaskHead,
}

impl TransformerDecoder {
    pub fn new(store: &mut ParamStore, cfg: &MaskgenConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::config("maskgen.layers must be at least 1"));
        }
        if cfg.num_queries == 0 {
            return Err(Error::config("maskgen.num_queries must be at least 1"));
        }
        let d = cfg.hidden_dim;
        let query_feat = store.get("decoder.query_feat", &[cfg.num_queries, d], Init::Normal(1.0))?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.layer{l}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let head = MaskHead {
            norm: LayerNorm::new(store, "decoder.head_norm", d)?,
            embed: Linear::new(store, "decoder.mask_embed", d, cfg.embed_dim)?,
        };
        Ok(Self {
            query_feat,
            layers,
            head,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_feat.dims()[0]
    }

    /// Embeddings and quarter-resolution logits for `queries`.
    pub fn predict(&self, queries: &Tensor, per_pixel: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = self.head.embed(queries)?;
        let logits = mask_logits(&emb, per_pixel)?;
        Ok((emb, logits))
    }

    /// Runs all layers starting from `queries (B, N, D_q)`.
    pub fn decode_from(&self, queries: &Tensor, pdo: &PixelDecoderOutput) -> Result<DecodeOutput> {
        let mut q = queries.clone();
        let (mut embeddings, mut logits) = self.predict(&q, &pdo.per_pixel)?;
        let mut scales = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let idx = l % 3;
            let map = &pdo.intermediate[idx];
            let (_, c, h, w) = map.dims4()?;
            let memory = to_tokens(map)?;
            let pos = sine_position_encoding(h, w, c, map.dtype())?;
            let bias = attention_bias(&logits, h, w)?;
            q = layer.forward(&q, &memory, &pos, &bias)?;
            (embeddings, logits) = self.predict(&q, &pdo.per_pixel)?;
            scales.push(layer_scale(l));
        }
        Ok(DecodeOutput {
            queries: q,
            embeddings,
            mask_logits: logits,
            layer_scales: scales,
        })
    }

    /// Runs the decoder from the learned query features.
    pub fn decode(&self, pdo: &PixelDecoderOutput) -> Result<DecodeOutput> {
        let b = pdo.per_pixel.dims()[0];
        let q = self.query_feat.unsqueeze(0)?.repeat((b, 1, 1))?;
        self.decode_from(&q, pdo)
    }
}

/// Per-image predictions on plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePredictions {
    /// Image resolution.
    pub height: usize,
    pub width: usize,
    /// Grid of the stored logits.
    pub logit_height: usize,
    pub logit_width: usize,
    /// `N` maps of `logit_height × logit_width` pre-sigmoid values.
    pub mask_logits: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
}

impl InstancePredictions {
    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    /// Logits of instance `i` bilinearly upsampled to image resolution.
    pub fn full_logits(&self, i: usize) -> Vec<f64> {
        resize_plane(
            &self.mask_logits[i],
            self.logit_height,
            self.logit_width,
            self.height,
            self.width,
            Resample::Bilinear,
        )
    }

    /// Foreground where the upsampled logit is positive (sigmoid > 0.5).
    pub fn binary_mask(&self, i: usize) -> Mask {
        Mask::from_threshold(self.height, self.width, &self.full_logits(i), 0.0)
    }
}
