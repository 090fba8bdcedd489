//! Training loop: AdamW with decoupled weight decay, a step learning-rate
//! schedule, set-matching losses, JSON-lines logging and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::config::{Config, TrainConfig};
use crate::data::{augment, resize_sample, AnnotatedSample, AugmentConfig};
use crate::error::{Error, Result};
use crate::losses::{build_cost_matrix, hungarian_match, total_loss, ImageTargets, LossBreakdown, SetPrediction};
use crate::model::Model;
use crate::nn::{derive_seed, named_rng, tensor_from, to_f64_vec, ParamStore};
use crate::resample::{resize, Resample};
use crate::tensor_io::{tensors_from_bytes, tensors_to_bytes};
use crate::vocab::Vocabulary;

/// Parameters excluded from weight decay.
const NO_DECAY: [&str; 1] = ["loss.log_tau"];

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.vars() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { m, v, step: 0 })
    }

    /// Clips gradients to `cfg.grad_clip` global norm and applies one update.
    /// Returns the pre-clipping gradient norm.
    pub fn update(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, cfg: &TrainConfig) -> Result<f64> {
        let mut collected = Vec::new();
        let mut sq = 0.0;
        for (name, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += to_f64_vec(&g.sqr()?.sum_all()?)?[0];
                collected.push((name.clone(), var, g.detach()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.step });
        }
        let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, var, g) in collected {
            let g = (g * scale)?;
            let m = ((&self.m[&name] * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
            let v = ((&self.v[&name] * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
            let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + cfg.eps)?)?;
            let p = var.as_tensor();
            let decay = if NO_DECAY.contains(&name.as_str()) { 0.0 } else { cfg.weight_decay };
            let new = ((p.detach() * (1.0 - lr * decay))? - (step * lr)?)?;
            var.set(&new)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name, v.detach());
        }
        Ok(norm)
    }
}

/// One JSON-lines record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(iter: usize, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            iter,
            lr,
            bce: b.bce,
            dice: b.dice,
            ce: b.ce,
            total: b.total,
        }
    }
}

pub fn log_to_jsonl(records: &[LogRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Parameters, optimiser state and run identity.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub adam_step: usize,
    pub iteration: usize,
    pub config: Config,
    pub vocab: Vocabulary,
}

const PARAM: &str = "param/";
const MOM1: &str = "adam_m/";
const MOM2: &str = "adam_v/";

impl Checkpoint {
    pub fn capture(model: &Model, opt: &AdamW, iteration: usize) -> Result<Self> {
        Ok(Self {
            params: model.store.snapshot()?,
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
            adam_step: opt.step,
            iteration,
            config: model.config.clone(),
            vocab: model.vocab.clone(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Safetensors bytes. Tensors are stored little-endian under `param/`,
    /// `adam_m/` and `adam_v/`; run identity lives in the metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        for (prefix, map) in [(PARAM, &self.params), (MOM1, &self.adam_m), (MOM2, &self.adam_v)] {
            for (k, v) in map {
                tensors.insert(format!("{prefix}{k}"), v.clone());
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), "camoseg-checkpoint-1".into());
        meta.insert("iteration".into(), self.iteration.to_string());
        meta.insert("adam_step".into(), self.adam_step.to_string());
        meta.insert("seed".into(), self.config.seed.to_string());
        meta.insert("config_hash".into(), self.config.hash()?);
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("vocab".into(), self.vocab.to_json()?);
        tensors_to_bytes(&tensors, &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tensors, meta) = tensors_from_bytes(bytes)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key `{k}` missing")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        let config: Config = serde_json::from_str(get("config")?)?;
        if &config.hash()? != get("config_hash")? {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let vocab: Vocabulary = serde_json::from_str(get("vocab")?)?;
        let mut ck = Self {
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            adam_step: parse_usize("adam_step")?,
            iteration: parse_usize("iteration")?,
            config,
            vocab,
        };
        for (k, v) in tensors {
            if let Some(n) = k.strip_prefix(PARAM) {
                ck.params.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(MOM1) {
                ck.adam_m.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(MOM2) {
                ck.adam_v.insert(n.to_string(), v);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{k}`")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(&self.config, &self.vocab)?;
        model.store.load(&self.params)?;
        Ok(model)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
            step: self.adam_step,
        }
    }
}

/// Deterministic endless stream of batches over repeat-factor epochs.
#[derive(Debug, Clone)]
pub struct BatchStream {
    factors: Vec<f64>,
    seed: u64,
    batch: usize,
    epoch: u64,
    queue: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(factors: Vec<f64>, seed: u64, batch: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::EmptyDataset("no training samples".into()));
        }
        Ok(Self {
            factors,
            seed,
            batch,
            epoch: 0,
            queue: Vec::new(),
            pos: 0,
        })
    }

    /// Next batch as `(sample index, epoch)` pairs.
    pub fn next_batch(&mut self) -> Vec<(usize, u64)> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos >= self.queue.len() {
                if !self.queue.is_empty() {
                    self.epoch += 1;
                }
                self.queue = crate::data::epoch_indices(&self.factors, self.seed, self.epoch);
                let mut rng = named_rng(derive_seed(&[self.seed, self.epoch]), "shuffle");
                self.queue.shuffle(&mut rng);
                self.pos = 0;
                if self.queue.is_empty() {
                    self.epoch += 1;
                    continue;
                }
            }
            out.push((self.queue[self.pos], self.epoch));
            self.pos += 1;
        }
        out
    }
}

/// Training samples with per-sample repeat factors.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<AnnotatedSample>,
    pub factors: Vec<f64>,
}

/// Ground truth in loss form; empty and crowd instances are skipped.
fn targets_of(sample: &AnnotatedSample, dtype: candle_core::DType) -> Result<(ImageTargets, Vec<crate::data::Mask>)> {
    let kept: Vec<&crate::data::Instance> = sample
        .instances
        .iter()
        .filter(|i| !i.iscrowd && !i.mask.is_empty())
        .collect();
    let p = sample.image.height * sample.image.width;
    let mut flat = Vec::with_capacity(kept.len() * p);
    for i in &kept {
        flat.extend(i.mask.to_f64());
    }
    Ok((
        ImageTargets {
            masks: tensor_from(flat, &[kept.len(), p], dtype)?,
            labels: kept.iter().map(|i| i.category_id).collect(),
        },
        kept.iter().map(|i| i.mask.clone()).collect(),
    ))
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// One optimisation step on a batch of prepared samples.
pub fn train_step(
    model: &Model,
    opt: &mut AdamW,
    samples: &[&AnnotatedSample],
    pyramids: &[FeaturePyramid],
    iter: usize,
) -> Result<LogRecord> {
    let cfg = &model.config;
    let dtype = model.dtype();
    let (h, w) = (samples[0].image.height, samples[0].image.width);
    let out = model.forward(&FeaturePyramid::stack(pyramids)?)?;
    let full = resize(&out.cin.final_logits, h, w, Resample::Bilinear)?;
    let preds = model.predictions(&out, h, w)?;
    let classes = model.class_matrix()?;
    let class_rows: Vec<Vec<f64>> = {
        let (k, d) = classes.dims2()?;
        let v = to_f64_vec(&classes)?;
        (0..k).map(|r| v[r * d..(r + 1) * d].to_vec()).collect()
    };
    let tau = model.log_tau.exp()?;
    let tau_f = model.tau()?;
    let mut targets = Vec::with_capacity(samples.len());
    let mut matches = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let (t, masks) = targets_of(s, dtype)?;
        let cost = build_cost_matrix(p, &masks, &t.labels, &class_rows, tau_f, &cfg.loss)?;
        let cost = if masks.is_empty() { vec![Vec::new(); p.len()] } else { cost };
        matches.push(hungarian_match(&cost)?);
        targets.push(t);
    }
    let pred = SetPrediction {
        mask_logits: &full,
        embeddings: &out.embeddings,
        confidence_logits: &out.cin.confidence_logits,
    };
    let terms = total_loss(&pred, &targets, &matches, &classes, &tau, &cfg.loss)?;
    let breakdown = terms.breakdown()?;
    if ![breakdown.bce, breakdown.dice, breakdown.ce, breakdown.total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteLoss { iteration: iter });
    }
    let lr = cfg.train.lr_at(iter);
    let grads = terms.total.backward()?;
    opt.update(&model.store, &grads, lr, &cfg.train)
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration: iter },
            other => other,
        })?;
    Ok(LogRecord::new(iter, lr, &breakdown))
}

/// Trains from scratch or resumes from `resume`; stops at `train.iterations`.
pub fn train(config: &Config, vocab: &Vocabulary, set: &TrainingSet, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    if set.samples.is_empty() {
        return Err(Error::EmptyDataset("training set has no samples".into()));
    }
    let size = config.data.image_size;
    let (model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.config.hash()? != config.hash()? {
                return Err(Error::Checkpoint("checkpoint config hash differs from the run config".into()));
            }
            let model = ck.model()?;
            (model, ck.optimizer(), ck.iteration)
        }
        None => {
            let model = Model::new(config, vocab)?;
            let opt = AdamW::new(&model.store)?;
            (model, opt, 0)
        }
    };
    let base: Vec<AnnotatedSample> = set.samples.iter().map(|s| resize_sample(s, size, size)).collect();
    let aug = AugmentConfig {
        out_size: size,
        min_scale: config.data.min_scale,
        max_scale: config.data.max_scale,
    };
    let mut cache: Vec<Option<FeaturePyramid>> = vec![None; base.len()];
    let mut stream = BatchStream::new(set.factors.clone(), config.seed, config.train.batch_size)?;
    for _ in 0..start {
        stream.next_batch();
    }
    let mut log = Vec::with_capacity(config.train.iterations.saturating_sub(start));
    for iter in start..config.train.iterations {
        let batch = stream.next_batch();
        let (samples, pyramids): (Vec<AnnotatedSample>, Vec<FeaturePyramid>) = if config.data.augment {
            batch
                .par_iter()
                .map(|&(i, epoch)| {
                    let s = augment(&base[i], derive_seed(&[config.seed, i as u64, epoch]), &aug)?;
                    let p = model.features(&s.image)?;
                    Ok((s, p))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip()
        } else {
            let missing: Vec<usize> = {
                let mut m: Vec<usize> = batch.iter().map(|b| b.0).filter(|&i| cache[i].is_none()).collect();
                m.sort_unstable();
                m.dedup();
                m
            };
            let computed = missing
                .par_iter()
                .map(|&i| model.features(&base[i].image))
                .collect::<Result<Vec<_>>>()?;
            for (i, p) in missing.into_iter().zip(computed) {
                cache[i] = Some(p);
            }
            batch
                .iter()
                .map(|&(i, _)| (base[i].clone(), cache[i].clone().expect("cached above")))
                .unzip()
        };
        let refs: Vec<&AnnotatedSample> = samples.iter().collect();
        let rec = train_step(&model, &mut opt, &refs, &pyramids, iter)?;
        if iter % 50 == 0 || iter + 1 == config.train.iterations {
            log::info!(
                "iter {iter} lr {:.1e} total {:.4} (bce {:.4} dice {:.4} ce {:.4})",
                rec.lr,
                rec.total,
                rec.bce,
                rec.dice,
                rec.ce
            );
        }
        log.push(rec);
    }
    let checkpoint = Checkpoint::capture(&model, &opt, config.train.iterations.max(start))?;
    Ok(TrainOutcome { model, checkpoint, log })
}
