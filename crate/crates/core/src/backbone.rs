//! Frozen feature extractor contract, the seeded toy backbone, and the
//! diffusion noising schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    from_tokens, named_rng, normal_vec, softmax_last, tensor_from, to_tokens, Init, ParamStore,
};
use crate::resample::{resize, resize_plane, Resample};
use crate::tensor_io::{load_tensors, save_tensors};

/// Per-timestep signal and noise scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// `α` falling linearly from 1 to `1/T`, `σ = sqrt(1 − α²)`.
    pub fn linear(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::config("diffusion schedule needs at least one step"));
        }
        let t = num_steps as f64;
        let alphas: Vec<f64> = (0..num_steps).map(|i| 1.0 - i as f64 / t).collect();
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self { alphas, sigmas })
    }

    /// A schedule from explicit scale sequences.
    pub fn from_parts(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if alphas.len() != sigmas.len() || alphas.is_empty() {
            return Err(Error::config("alpha and sigma sequences must be nonempty and equal length"));
        }
        if alphas.iter().chain(&sigmas).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("schedule entries must lie in [0, 1]"));
        }
        Ok(Self { alphas, sigmas })
    }

    pub fn num_steps(&self) -> usize {
        self.alphas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {})",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// `α_t · z + σ_t · ε`.
pub fn noise_latent(z: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    if z.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "latent {:?} and noise {:?} differ in shape",
            z.dims(),
            eps.dims()
        )));
    }
    Ok(((z * schedule.alphas[t])? + (eps * schedule.sigmas[t])?)?)
}

/// Caption vector that conditions the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub vector: Vec<f64>,
}

impl CaptionEmbedding {
    /// Normalizes `v` to unit length.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::domain("caption vector must be finite and nonzero"));
        }
        Ok(Self {
            vector: v.into_iter().map(|x| x / n).collect(),
        })
    }

    /// The all-zero caption, used when text is switched off.
    pub fn zeros(dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let d: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = other.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }
}

/// Feature-map scales relative to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scale {
    Eighth,
    Sixteenth,
    ThirtySecond,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Eighth, Scale::Sixteenth, Scale::ThirtySecond];

    pub fn divisor(self) -> usize {
        match self {
            Scale::Eighth => 8,
            Scale::Sixteenth => 16,
            Scale::ThirtySecond => 32,
        }
    }

    pub fn from_divisor(d: usize) -> Result<Self> {
        match d {
            8 => Ok(Scale::Eighth),
            16 => Ok(Scale::Sixteenth),
            32 => Ok(Scale::ThirtySecond),
            _ => Err(Error::config(format!("unsupported scale 1/{d}"))),
        }
    }

    /// Spatial size of this scale for an `h × w` input.
    pub fn dims(self, h: usize, w: usize) -> (usize, usize) {
        let d = self.divisor() as f64;
        (
            ((h as f64 / d).round() as usize).max(1),
            ((w as f64 / d).round() as usize).max(1),
        )
    }
}

/// Declared channel counts of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Channels at 1/8, 1/16, 1/32.
    pub levels: [usize; 3],
    pub decoder: usize,
}

impl ChannelSpec {
    pub fn concat(&self) -> usize {
        self.levels.iter().sum()
    }

    pub fn at(&self, s: Scale) -> usize {
        match s {
            Scale::Eighth => self.levels[0],
            Scale::Sixteenth => self.levels[1],
            Scale::ThirtySecond => self.levels[2],
        }
    }
}

/// Encoder maps at 1/8, 1/16, 1/32 and the decoder-final map at 1/8, each `(B, C, h, w)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<Scale, Tensor>,
    pub decoder_final: Tensor,
}

impl FeaturePyramid {
    pub fn level(&self, s: Scale) -> Result<&Tensor> {
        self.levels
            .get(&s)
            .ok_or_else(|| Error::shape(format!("feature pyramid lacks the 1/{} level", s.divisor())))
    }

    pub fn batch(&self) -> usize {
        self.decoder_final.dims()[0]
    }

    /// Concatenates pyramids along the batch axis.
    pub fn stack(items: &[FeaturePyramid]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::shape("cannot stack zero pyramids"));
        }
        let mut levels = BTreeMap::new();
        for s in items[0].levels.keys() {
            let parts = items.iter().map(|p| p.level(*s).cloned()).collect::<Result<Vec<_>>>()?;
            levels.insert(*s, Tensor::cat(&parts, 0)?);
        }
        let dec: Vec<Tensor> = items.iter().map(|p| p.decoder_final.clone()).collect();
        Ok(Self {
            levels,
            decoder_final: Tensor::cat(&dec, 0)?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|(k, v)| Ok((*k, v.to_dtype(dtype)?)))
                .collect::<Result<_>>()?,
            decoder_final: self.decoder_final.to_dtype(dtype)?,
        })
    }

    /// Checks spatial sizes against an `h × w` input and channels against `spec`.
    pub fn validate(&self, h: usize, w: usize, spec: &ChannelSpec) -> Result<()> {
        for s in Scale::ALL {
            let t = self.level(s)?;
            let (_, c, fh, fw) = t.dims4()?;
            if (fh, fw) != s.dims(h, w) || c != spec.at(s) {
                return Err(Error::shape(format!(
                    "level 1/{} is {c}x{fh}x{fw}, expected {}x{:?}",
                    s.divisor(),
                    spec.at(s),
                    s.dims(h, w)
                )));
            }
        }
        let (_, c, fh, fw) = self.decoder_final.dims4()?;
        if (fh, fw) != Scale::Eighth.dims(h, w) || c != spec.decoder {
            return Err(Error::shape("decoder_final has the wrong shape"));
        }
        Ok(())
    }
}

/// Feature extraction contract: a frozen image model conditioned on a caption.
pub trait Backbone: Send + Sync {
    fn channel_spec(&self) -> ChannelSpec;
    fn caption_dim(&self) -> usize;
    fn schedule(&self) -> &DiffusionSchedule;
    /// Timestep used when none is given explicitly.
    fn default_timestep(&self) -> usize;
    fn implicit_caption(&self, image: &Image) -> Result<CaptionEmbedding>;
    fn extract_features(&self, image: &Image, caption: &CaptionEmbedding, t: usize) -> Result<FeaturePyramid>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    Adapter,
}

/// `backbone.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub weights_path: Option<PathBuf>,
    pub seed: u64,
    pub channels: [usize; 3],
    pub decoder_channels: usize,
    pub caption_dim: usize,
    pub num_steps: usize,
    /// Defaults to `num_steps / 2`.
    pub timestep: Option<usize>,
    /// Layer names an adapter reads its pyramid from.
    pub layers: Vec<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            weights_path: None,
            seed: 0,
            channels: [32, 64, 128],
            decoder_channels: 64,
            caption_dim: 64,
            num_steps: 1000,
            timestep: None,
            layers: vec!["stage1".into(), "stage2".into(), "stage3".into()],
        }
    }
}

impl BackboneConfig {
    pub fn spec(&self) -> ChannelSpec {
        ChannelSpec {
            levels: self.channels,
            decoder: self.decoder_channels,
        }
    }
}

const CAPTION_GRID: usize = 8;
const CAPTION_FEATURES: usize = CAPTION_GRID * CAPTION_GRID * 3 + 6;
const STAGE_NAMES: [&str; 3] = ["stage1", "stage2", "stage3"];

/// Seeded, frozen strided-conv backbone with one caption cross-attention per level.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    weights: BTreeMap<String, Tensor>,
    spec: ChannelSpec,
    caption_dim: usize,
    schedule: DiffusionSchedule,
    timestep: usize,
    seed: u64,
    dtype: DType,
}

impl ToyBackbone {
    pub fn new(cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        let spec = cfg.spec();
        let d = cfg.caption_dim;
        let mut store = ParamStore::new(cfg.seed, dtype);
        let mut c_in = 3;
        for (i, name) in STAGE_NAMES.iter().enumerate() {
            let c = spec.levels[i];
            let k = if i == 0 { 8 } else { 2 };
            let fan_in = c_in * k * k;
            store.get(&format!("{name}.conv.weight"), &[c, c_in, k, k], Init::Normal((2.0 / fan_in as f64).sqrt()))?;
            store.get(&format!("{name}.conv.bias"), &[c], Init::Normal(0.1))?;
            let attn = format!("{name}.attn");
            store.get(&format!("{attn}.q.weight"), &[c, c], Init::Normal(1.0 / (c as f64).sqrt()))?;
            store.get(&format!("{attn}.k.weight"), &[c, d], Init::Normal(1.0 / (d as f64).sqrt()))?;
            store.get(&format!("{attn}.k.bias"), &[c], Init::Normal(0.1))?;
            store.get(&format!("{attn}.v.weight"), &[c, d], Init::Normal(1.0 / (d as f64).sqrt()))?;
            store.get(&format!("{attn}.v.bias"), &[c], Init::Normal(0.1))?;
            store.get(&format!("{attn}.null"), &[d], Init::Normal(1.0 / (d as f64).sqrt()))?;
            c_in = c;
        }
        let cat = spec.concat();
        store.get("decoder.conv.weight", &[spec.decoder, cat, 3, 3], Init::Normal((2.0 / (cat * 9) as f64).sqrt()))?;
        store.get("decoder.conv.bias", &[spec.decoder], Init::Normal(0.1))?;
        store.get("caption.weight", &[d, CAPTION_FEATURES], Init::Normal(1.0 / (CAPTION_FEATURES as f64).sqrt()))?;
        store.get("caption.bias", &[d], Init::Normal(0.3))?;
        Self::from_weights(store.snapshot()?, cfg, dtype)
    }

    /// Builds the backbone around explicit weights, checking them against `cfg`.
    pub fn from_weights(weights: BTreeMap<String, Tensor>, cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        let spec = cfg.spec();
        let d = cfg.caption_dim;
        let get = |name: &str| {
            weights
                .get(name)
                .ok_or_else(|| Error::config(format!("backbone weights lack `{name}`")))
        };
        let mut c_in = 3;
        for (i, name) in STAGE_NAMES.iter().enumerate() {
            let w = get(&format!("{name}.conv.weight"))?;
            let dims = w.dims();
            if dims.len() != 4 || dims[0] != spec.levels[i] || dims[1] != c_in {
                return Err(Error::config(format!(
                    "`{name}.conv.weight` has shape {dims:?}, but the configured channels are {:?}",
                    spec.levels
                )));
            }
            let k = get(&format!("{name}.attn.k.weight"))?.dims().to_vec();
            if k != [spec.levels[i], d] {
                return Err(Error::config(format!(
                    "`{name}.attn.k.weight` has shape {k:?}, expected [{}, {d}]",
                    spec.levels[i]
                )));
            }
            c_in = spec.levels[i];
        }
        let dec = get("decoder.conv.weight")?.dims().to_vec();
        if dec[0] != spec.decoder || dec[1] != spec.concat() {
            return Err(Error::config(format!(
                "`decoder.conv.weight` has shape {dec:?}, expected [{}, {}, ..]",
                spec.decoder,
                spec.concat()
            )));
        }
        let num_steps = cfg.num_steps;
        let timestep = cfg.timestep.unwrap_or(num_steps / 2);
        let schedule = DiffusionSchedule::linear(num_steps)?;
        schedule.check(timestep).map_err(|_| {
            Error::config(format!("timestep {timestep} outside the {num_steps}-step schedule"))
        })?;
        let weights = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.detach().to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            weights,
            spec,
            caption_dim: d,
            schedule,
            timestep,
            seed: cfg.seed,
            dtype,
        })
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    /// A copy with one weight replaced (used for sensitivity checks).
    pub fn with_weight(&self, name: &str, value: Tensor) -> Result<Self> {
        let old = self
            .weights
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown backbone weight `{name}`")))?;
        if old.dims() != value.dims() {
            return Err(Error::shape("replacement weight has a different shape"));
        }
        let mut out = self.clone();
        out.weights.insert(name.to_string(), value.to_dtype(self.dtype)?);
        Ok(out)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.weights, &BTreeMap::new())
    }

    fn w(&self, name: &str) -> &Tensor {
        &self.weights[name]
    }

    fn conv(&self, x: &Tensor, prefix: &str, stride: usize, pad: usize) -> Result<Tensor> {
        let w = self.w(&format!("{prefix}.weight"));
        let b = self.w(&format!("{prefix}.bias"));
        let y = x.conv2d(w, pad, stride, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?)
    }

    /// `x + softmax(q kᵀ / √c) v` with keys/values from `[caption, null]`.
    fn cross_attend(&self, x: &Tensor, stage: &str, caption: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let p = format!("{stage}.attn");
        let null = self.w(&format!("{p}.null")).unsqueeze(0)?;
        let ctx = Tensor::cat(&[caption, &null], 0)?;
        let k = ctx
            .matmul(&self.w(&format!("{p}.k.weight")).t()?)?
            .broadcast_add(self.w(&format!("{p}.k.bias")))?;
        let v = ctx
            .matmul(&self.w(&format!("{p}.v.weight")).t()?)?
            .broadcast_add(self.w(&format!("{p}.v.bias")))?;
        let tokens = to_tokens(x)?.reshape((b * h * w, c))?;
        let q = tokens.matmul(&self.w(&format!("{p}.q.weight")).t()?)?;
        let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = (tokens + attn.matmul(&v)?)?.reshape((b, h * w, c))?;
        from_tokens(&out, h, w)
    }

    fn noise(&self, h: usize, w: usize) -> Result<Tensor> {
        let mut rng = named_rng(self.seed, &format!("latent-noise-{h}x{w}"));
        tensor_from(normal_vec(&mut rng, 3 * h * w), &[1, 3, h, w], self.dtype)
    }
}

fn caption_features(image: &Image) -> Vec<f64> {
    let mut feats = Vec::with_capacity(CAPTION_FEATURES);
    let mut stats = Vec::with_capacity(6);
    for c in 0..3 {
        let plane = image.channel(c);
        let small = resize_plane(&plane, image.height, image.width, CAPTION_GRID, CAPTION_GRID, Resample::Area);
        feats.extend(small.iter().map(|v| 2.0 * v - 1.0));
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats.push(2.0 * mean - 1.0);
        stats.push(4.0 * var.sqrt());
    }
    feats.extend(stats);
    feats
}

impl Backbone for ToyBackbone {
    fn channel_spec(&self) -> ChannelSpec {
        self.spec
    }

    fn caption_dim(&self) -> usize {
        self.caption_dim
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn default_timestep(&self) -> usize {
        self.timestep
    }

    fn implicit_caption(&self, image: &Image) -> Result<CaptionEmbedding> {
        if image.is_empty() {
            return Err(Error::shape("cannot caption an empty image"));
        }
        let f = tensor_from(caption_features(image), &[1, CAPTION_FEATURES], DType::F64)?;
        let w = self.w("caption.weight").to_dtype(DType::F64)?;
        let b = self.w("caption.bias").to_dtype(DType::F64)?;
        let v = f.matmul(&w.t()?)?.broadcast_add(&b)?;
        CaptionEmbedding::new(crate::nn::to_f64_vec(&v)?)
    }

    fn extract_features(&self, image: &Image, caption: &CaptionEmbedding, t: usize) -> Result<FeaturePyramid> {
        if image.is_empty() {
            return Err(Error::shape("cannot extract features from an empty image"));
        }
        if caption.dim() != self.caption_dim {
            return Err(Error::shape(format!(
                "caption has {} dims, backbone expects {}",
                caption.dim(),
                self.caption_dim
            )));
        }
        let (h, w) = (image.height, image.width);
        let z = ((image.to_tensor(self.dtype)? * 2.0)? - 1.0)?;
        let zt = noise_latent(&z, t, &self.noise(h, w)?, &self.schedule)?;
        let cap = tensor_from(caption.vector.clone(), &[1, self.caption_dim], self.dtype)?;

        let mut levels = BTreeMap::new();
        let mut x = zt;
        for (i, s) in Scale::ALL.iter().enumerate() {
            let name = STAGE_NAMES[i];
            let (th, tw) = s.dims(h, w);
            let stride = if i == 0 { 8 } else { 2 };
            let y = self.conv(&x, &format!("{name}.conv"), stride, 0)?;
            let y = resize(&y, th, tw, Resample::auto(y.dims()[2], th))?;
            let y = self.cross_attend(&y.gelu_erf()?, name, &cap)?;
            levels.insert(*s, y.clone());
            x = y;
        }
        let (h8, w8) = Scale::Eighth.dims(h, w);
        let up = |s: Scale| resize(&levels[&s], h8, w8, Resample::Bilinear);
        let cat = Tensor::cat(&[up(Scale::ThirtySecond)?, up(Scale::Sixteenth)?, levels[&Scale::Eighth].clone()], 1)?;
        let decoder_final = self.conv(&cat, "decoder.conv", 1, 1)?.gelu_erf()?;
        Ok(FeaturePyramid {
            levels,
            decoder_final,
        })
    }
}

/// Backbone whose weights come from an external safetensors file laid out
/// with the toy architecture's parameter names.
#[derive(Debug, Clone)]
pub struct AdapterBackbone {
    inner: ToyBackbone,
    pub source: PathBuf,
}

impl AdapterBackbone {
    pub fn load(cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        let path = cfg
            .weights_path
            .clone()
            .ok_or_else(|| Error::config("backbone.kind = \"adapter\" requires backbone.weights_path"))?;
        let (weights, _) = load_tensors(&path)?;
        let inner = ToyBackbone::from_weights(weights, cfg, dtype)?;
        Ok(Self { inner, source: path })
    }
}

impl Backbone for AdapterBackbone {
    fn channel_spec(&self) -> ChannelSpec {
        self.inner.channel_spec()
    }
    fn caption_dim(&self) -> usize {
        self.inner.caption_dim()
    }
    fn schedule(&self) -> &DiffusionSchedule {
        self.inner.schedule()
    }
    fn default_timestep(&self) -> usize {
        self.inner.default_timestep()
    }
    fn implicit_caption(&self, image: &Image) -> Result<CaptionEmbedding> {
        self.inner.implicit_caption(image)
    }
    fn extract_features(&self, image: &Image, caption: &CaptionEmbedding, t: usize) -> Result<FeaturePyramid> {
        self.inner.extract_features(image, caption, t)
    }
}

/// Instantiates the configured backbone.
pub fn build_backbone(cfg: &BackboneConfig, dtype: DType) -> Result<Box<dyn Backbone>> {
    Ok(match cfg.kind {
        BackboneKind::Toy => Box::new(ToyBackbone::new(cfg, dtype)?),
        BackboneKind::Adapter => Box::new(AdapterBackbone::load(cfg, dtype)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::linear(1000).unwrap();
        assert_eq!(s.num_steps(), 1000);
        for (a, g) in s.alphas.iter().zip(&s.sigmas) {
            assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(g));
            assert!(a * a + g * g <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn noise_latent_examples() {
        let z = tensor_from(vec![1.0, 0.0], &[2], DType::F64).unwrap();
        let e = tensor_from(vec![0.0, 1.0], &[2], DType::F64).unwrap();
        let s = DiffusionSchedule::from_parts(vec![1.0, 0.0, 0.8], vec![0.0, 1.0, 0.6]).unwrap();
        assert_eq!(to_f64_vec(&noise_latent(&z, 0, &e, &s).unwrap()).unwrap(), vec![1.0, 0.0]);
        assert_eq!(to_f64_vec(&noise_latent(&z, 1, &e, &s).unwrap()).unwrap(), vec![0.0, 1.0]);
        let v = to_f64_vec(&noise_latent(&z, 2, &e, &s).unwrap()).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15);
        assert!(matches!(noise_latent(&z, 3, &e, &s), Err(Error::Range(_))));
        let bad = tensor_from(vec![0.0; 3], &[3], DType::F64).unwrap();
        assert!(matches!(noise_latent(&z, 0, &bad, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn scale_arithmetic() {
        let bb = ToyBackbone::new(&BackboneConfig::default(), DType::F32).unwrap();
        let img = Image::filled(512, 512, 0.3);
        let cap = bb.implicit_caption(&img).unwrap();
        let p = bb.extract_features(&img, &cap, 500).unwrap();
        assert_eq!(p.level(Scale::Eighth).unwrap().dims(), &[1, 32, 64, 64]);
        assert_eq!(p.level(Scale::Sixteenth).unwrap().dims(), &[1, 64, 32, 32]);
        assert_eq!(p.level(Scale::ThirtySecond).unwrap().dims(), &[1, 128, 16, 16]);
        assert_eq!(p.decoder_final.dims(), &[1, 64, 64, 64]);
    }
}
