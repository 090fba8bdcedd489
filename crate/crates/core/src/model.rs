//! The full network: frozen backbone, fusion, mask generator, aggregation
//! and instance normalisation, plus the learned temperature and no-object row.

use candle_core::{DType, Tensor, D};

use crate::backbone::{build_backbone, Backbone, FeaturePyramid, Scale};
use crate::cin::{Cin, CinOutput};
use crate::config::{Ablation, Config};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::maskgen::{DecodeOutput, InstancePredictions, PixelDecoder, PixelDecoderOutput, TransformerDecoder};
use crate::msff::Msff;
use crate::nn::{to_f64_vec, Init, ParamStore};
use crate::resample::{resize, Resample};
use crate::tva::{TextualVisualRepresentation, Tva, TvaMode};
use crate::vocab::{embed_categories, HashTextEncoder, TextEmbeddingSet, Vocabulary};

/// Intermediate and final outputs of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub fused: Tensor,
    pub pixel: PixelDecoderOutput,
    pub decode: DecodeOutput,
    /// `(B, N, D)` unit-normalised mask embeddings.
    pub embeddings: Tensor,
    pub tvr: TextualVisualRepresentation,
    pub cin: CinOutput,
}

/// Rows scaled to unit L2 norm along the last axis.
pub fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

pub struct Model {
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub backbone: Box<dyn Backbone>,
    pub text: TextEmbeddingSet,
    pub msff: Msff,
    pub pixel: PixelDecoder,
    pub decoder: TransformerDecoder,
    pub tva: Tva,
    pub cin: Cin,
    pub log_tau: Tensor,
    pub noobj: Tensor,
    pub ablation: Ablation,
}

impl Model {
    pub fn new(config: &Config, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype();
        let backbone = build_backbone(&config.backbone, dtype)?;
        let spec = backbone.channel_spec();
        if spec != config.backbone.spec() {
            return Err(Error::config("backbone channel spec differs from the configured one"));
        }
        let text = embed_categories(vocab, &HashTextEncoder::new(config.text.dim, config.text.seed))?;
        let mut store = ParamStore::new(config.seed, dtype);
        let ablation = config.ablation;
        let mut msff = Msff::new(&mut store, &spec, &config.msff)?;
        msff.skip = ablation.skip_msff;
        let c_t = spec.concat();
        let pixel = PixelDecoder::new(&mut store, c_t, &config.maskgen, config.msff.fusion_scale)?;
        let decoder = TransformerDecoder::new(&mut store, &config.maskgen)?;
        let mut tva = Tva::new(&mut store, config.text.dim, c_t)?;
        if ablation.skip_tva {
            tva.mode = TvaMode::DotProduct;
        }
        let cin = Cin::new(&mut store, c_t, &config.cin, ablation.skip_cin)?;
        let log_tau = store.get("loss.log_tau", &[], Init::Const(config.loss.tau_init.ln()))?;
        let noobj = store.get("loss.noobj_embed", &[1, config.text.dim], Init::Normal(1.0))?;
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            store,
            backbone,
            text,
            msff,
            pixel,
            decoder,
            tva,
            cin,
            log_tau,
            noobj,
            ablation,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_queries(&self) -> usize {
        self.decoder.num_queries()
    }

    pub fn tau(&self) -> Result<f64> {
        Ok(to_f64_vec(&self.log_tau)?[0].exp())
    }

    /// Frozen backbone features of one image with its implicit caption.
    pub fn features(&self, image: &Image) -> Result<FeaturePyramid> {
        let caption = self.backbone.implicit_caption(image)?;
        let t = self.backbone.default_timestep();
        let p = self.backbone.extract_features(image, &caption, t)?;
        p.validate(image.height, image.width, &self.backbone.channel_spec())?;
        Ok(p)
    }

    /// Category rows used by aggregation and classification; zeros under `no_text`.
    pub fn text_matrix(&self) -> Result<Tensor> {
        let m = self.text.primary_only().matrix(self.dtype())?;
        Ok(if self.ablation.no_text { m.zeros_like()? } else { m })
    }

    /// Category rows followed by the unit-normalised no-object row.
    pub fn class_matrix(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[self.text_matrix()?, unit_rows(&self.noobj)?], 0)?)
    }

    /// Batched forward pass from backbone features.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<ForwardOutput> {
        let fused = self.msff.fuse(pyramid)?.features;
        let pixel = self.pixel.forward(&fused)?;
        let decode = self.decoder.decode(&pixel)?;
        let embeddings = unit_rows(&decode.embeddings)?;
        let (_, _, fh, fw) = fused.dims4()?;
        let div = self.config.msff.fusion_scale;
        let (h8, w8) = Scale::Eighth.dims(fh * div, fw * div);
        let feats = resize(&fused, h8, w8, Resample::auto(fh, h8))?;
        let tvr = self.tva.aggregate(&embeddings, &self.text_matrix()?, &feats)?;
        let cin = if self.ablation.skip_cin {
            self.cin.forward_skip(&tvr, &decode.mask_logits)?
        } else {
            self.cin.forward(&tvr, &decode.mask_logits)?
        };
        Ok(ForwardOutput {
            fused,
            pixel,
            decode,
            embeddings,
            tvr,
            cin,
        })
    }

    /// Plain per-image predictions from a forward pass.
    pub fn predictions(&self, out: &ForwardOutput, height: usize, width: usize) -> Result<Vec<InstancePredictions>> {
        let (b, n, lh, lw) = out.cin.final_logits.dims4()?;
        let logits = to_f64_vec(&out.cin.final_logits)?;
        let emb = to_f64_vec(&out.embeddings)?;
        let conf = to_f64_vec(&out.cin.confidence)?;
        let d = emb.len() / (b * n).max(1);
        let p = lh * lw;
        Ok((0..b)
            .map(|bi| InstancePredictions {
                height,
                width,
                logit_height: lh,
                logit_width: lw,
                mask_logits: (0..n).map(|i| logits[(bi * n + i) * p..(bi * n + i + 1) * p].to_vec()).collect(),
                embeddings: (0..n).map(|i| emb[(bi * n + i) * d..(bi * n + i + 1) * d].to_vec()).collect(),
                confidences: conf[bi * n..(bi + 1) * n].to_vec(),
            })
            .collect())
    }

    /// Predictions for one image.
    pub fn predict(&self, image: &Image) -> Result<InstancePredictions> {
        let out = self.forward(&self.features(image)?)?;
        let mut preds = self.predictions(&out, image.height, image.width)?;
        Ok(preds.remove(0))
    }

    /// Text set used for final classification, honouring the ensemble switch.
    pub fn classifier_text(&self) -> Result<TextEmbeddingSet> {
        let base = if self.config.text.prompt_ensemble {
            self.text.clone()
        } else {
            self.text.primary_only()
        };
        if self.ablation.no_text {
            let zeros = (0..base.num_categories())
                .map(|c| base.variants(c).iter().map(|v| vec![0.0; v.len()]).collect())
                .collect();
            return Ok(TextEmbeddingSet::from_vectors(zeros)?);
        }
        Ok(base)
    }
}
