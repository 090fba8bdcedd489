//! End-to-end operations behind the command-line tool: data generation,
//! training, evaluation, inference, visualisation and ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cin::score_and_select;
use crate::config::{Ablation, Config};
use crate::data::{
    filter_rare_classes, load_coco, repeat_factors, resize_sample, synth_generate, AnnotatedSample, DatasetIndex,
    Image, Instance, Rle,
};
use crate::error::{Error, Result};
use crate::eval::{average_precision, Detection, EvalMode, EvalParams, EvalResult};
use crate::kmeans::kmeans;
use crate::model::Model;
use crate::nn::{derive_seed, to_f64_vec};
use crate::train::{log_to_jsonl, train, Checkpoint, TrainOutcome, TrainingSet};
use crate::viz::{cluster_image, heatmap_image, overlay_image, save_png};
use crate::vocab::{ensemble_classify, Vocabulary};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";

/// Writes `train/` and `val/` synthetic splits under `out`.
pub fn generate_data(config: &Config, seed: u64, out: &Path) -> Result<()> {
    let s = &config.data.synth;
    synth_generate(s, s.num_images, seed, &out.join("train"))?;
    synth_generate(s, s.num_val_images, derive_seed(&[seed, 1]), &out.join("val"))?;
    Ok(())
}

/// Reads `annotations.json` from a split directory. Category names are
/// resolved against `vocab`, or against the split's own `vocab.json`.
pub fn load_split(dir: &Path, vocab: Option<&Vocabulary>) -> Result<DatasetIndex> {
    let own;
    let vocab = match vocab {
        Some(v) => v,
        None => {
            own = Vocabulary::load(&dir.join("vocab.json"))?;
            &own
        }
    };
    load_coco(&dir.join("annotations.json"), vocab)
}

pub fn load_samples(index: &DatasetIndex) -> Result<Vec<AnnotatedSample>> {
    (0..index.len()).map(|i| index.load_sample(i)).collect()
}

/// Applies the rare-class filter and repeat factors, then decodes every sample.
pub fn training_set(config: &Config, index: &DatasetIndex) -> Result<(Vocabulary, TrainingSet)> {
    let filtered = filter_rare_classes(index, config.data.min_instances);
    if filtered.is_empty() || filtered.vocab.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no category has at least {} instances",
            config.data.min_instances
        )));
    }
    let factors = repeat_factors(&filtered, config.data.repeat_threshold)?;
    let samples = load_samples(&filtered)?;
    Ok((filtered.vocab.clone(), TrainingSet { samples, factors }))
}

/// Trains on the split in `data_dir` and writes checkpoint, log and config to `out`.
pub fn run_train(config: &Config, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let index = load_split(data_dir, None)?;
    let (vocab, set) = training_set(config, &index)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = train(config, &vocab, &set, resume.as_ref())?;
    std::fs::create_dir_all(out)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    std::fs::write(out.join(LOG_FILE), log_to_jsonl(&outcome.log)?)?;
    std::fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;
    Ok(outcome)
}

/// Scored detections of one image at network resolution.
pub fn detections(model: &Model, image: &Image, score_threshold: f64) -> Result<Vec<Detection>> {
    let preds = model.predict(image)?;
    let text = model.classifier_text()?;
    let tau = model.tau()?;
    let mut out = Vec::new();
    for i in 0..preds.len() {
        let score = preds.confidences[i];
        if score < score_threshold {
            continue;
        }
        out.push(Detection {
            mask: preds.binary_mask(i),
            score,
            category: ensemble_classify(&preds.embeddings[i], &text, tau)?.category,
        });
    }
    Ok(out)
}

/// AP of `model` over samples resized to the network input size.
pub fn evaluate_samples(model: &Model, samples: &[AnnotatedSample], mode: EvalMode) -> Result<EvalResult> {
    let size = model.config.data.image_size;
    let mut dets = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let s = resize_sample(s, size, size);
        dets.push(detections(model, &s.image, model.config.eval.score_threshold)?);
        gts.push(s.instances);
    }
    let params = EvalParams {
        max_detections: model.config.eval.max_detections,
        ..EvalParams::coco(mode)
    };
    average_precision(&dets, &gts, &params)
}

/// Ground truth of a split for evaluating `model`: class-aware mode maps
/// categories onto the model's vocabulary by name.
pub fn eval_samples(model: &Model, data_dir: &Path, mode: EvalMode) -> Result<Vec<AnnotatedSample>> {
    let index = match mode {
        EvalMode::ClassAgnostic => load_split(data_dir, None)?,
        EvalMode::ClassAware => load_split(data_dir, Some(&model.vocab))?,
    };
    load_samples(&index)
}

/// Evaluates a checkpoint on a split and writes `metrics.json` to `out`.
pub fn run_eval(checkpoint: &Path, data_dir: &Path, mode: Option<EvalMode>, out: &Path) -> Result<EvalResult> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let mode = mode.unwrap_or(model.config.eval.mode);
    let samples = eval_samples(&model, data_dir, mode)?;
    let result = evaluate_samples(&model, &samples, mode)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(METRICS_FILE), result.to_json()?)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleJson {
    pub size: [usize; 2],
    pub counts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredInstance {
    pub segmentation: RleJson,
    pub confidence: f64,
    pub category_id: usize,
    pub category: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InferredInstance>,
}

/// Segments one image: instances above the confidence threshold, most
/// confident first.
pub fn infer_image(model: &Model, image: &Image, name: &str) -> Result<(InferenceRecord, Vec<crate::data::Mask>)> {
    let size = model.config.data.image_size;
    let input = crate::data::augment::resize_image(image, size, size);
    let preds = model.predict(&input)?;
    let text = model.classifier_text()?;
    let tau = model.tau()?;
    let mut instances = Vec::new();
    let mut masks = Vec::new();
    for sel in score_and_select(&preds, model.config.cin.confidence_threshold)? {
        let mask = crate::data::augment::resize_mask(&sel.mask, image.height, image.width);
        let cls = ensemble_classify(&preds.embeddings[sel.index], &text, tau)?;
        let rle = Rle::encode(&mask);
        instances.push(InferredInstance {
            segmentation: RleJson {
                size: [rle.height, rle.width],
                counts: rle.to_compressed(),
            },
            confidence: sel.confidence,
            category_id: cls.category,
            category: model.vocab.categories()[cls.category].name.clone(),
            probabilities: cls.probabilities,
        });
        masks.push(mask);
    }
    Ok((
        InferenceRecord {
            image: name.to_string(),
            height: image.height,
            width: image.width,
            instances,
        },
        masks,
    ))
}

/// Rebuilds a checkpoint's model, optionally against a new vocabulary.
pub fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<Model> {
    let ck = Checkpoint::load(checkpoint)?;
    match vocab {
        None => ck.model(),
        Some(path) => {
            let vocab = Vocabulary::load(path)?;
            let model = Model::new(&ck.config, &vocab)?;
            model.store.load(&ck.params)?;
            Ok(model)
        }
    }
}

/// Images named by `input`: a PNG file or every PNG in a directory, sorted.
pub fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        Ok(v)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Data(format!("input {} does not exist", input.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Writes `<stem>.json` and `<stem>_overlay.png` per input image.
pub fn run_infer(model: &Model, input: &Path, out: &Path) -> Result<Vec<InferenceRecord>> {
    std::fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for path in input_images(input)? {
        let image = Image::load_png(&path)?;
        let name = stem(&path);
        let (rec, masks) = infer_image(model, &image, &name)?;
        std::fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(&rec)?)?;
        save_png(&overlay_image(&image, &masks)?, &out.join(format!("{name}_overlay.png")))?;
        records.push(rec);
    }
    Ok(records)
}

/// Files written by [`run_visualize`].
#[derive(Debug, Clone, PartialEq)]
pub struct VisualizeOutput {
    pub clusters: PathBuf,
    pub attention: Vec<(PathBuf, PathBuf)>,
    pub num_clusters: usize,
}

/// K-means over fused-map pixels plus raw and filtered attention maps of
/// the `top` most confident instances.
pub fn run_visualize(model: &Model, image_path: &Path, k: usize, top: usize, out: &Path) -> Result<VisualizeOutput> {
    let size = model.config.data.image_size;
    let image = crate::data::augment::resize_image(&Image::load_png(image_path)?, size, size);
    let fwd = model.forward(&model.features(&image)?)?;
    let (_, c, h, w) = fwd.fused.dims4()?;
    let flat = to_f64_vec(&fwd.fused)?;
    let points: Vec<Vec<f64>> = (0..h * w).map(|p| (0..c).map(|ch| flat[ch * h * w + p]).collect()).collect();
    let km = kmeans(&points, k, model.config.seed, 100, 1e-6)?;
    std::fs::create_dir_all(out)?;
    let name = stem(image_path);
    let clusters = out.join(format!("{name}_clusters.png"));
    save_png(&cluster_image(&km.labels, h, w, (size / h) as u32)?, &clusters)?;

    let (_, n, _) = fwd.tvr.attention_raw.dims3()?;
    let (ah, aw) = (fwd.tvr.height, fwd.tvr.width);
    let raw = to_f64_vec(&fwd.tvr.attention_raw)?;
    let filtered = to_f64_vec(&fwd.tvr.attention_filtered)?;
    let conf = to_f64_vec(&fwd.cin.confidence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let factor = (size / ah) as u32;
    let mut attention = Vec::new();
    for (rank, &i) in order.iter().take(top).enumerate() {
        let plane = i * ah * aw..(i + 1) * ah * aw;
        let rp = out.join(format!("{name}_attention_raw_{rank}.png"));
        let fp = out.join(format!("{name}_attention_filtered_{rank}.png"));
        save_png(&heatmap_image(&raw[plane.clone()], ah, aw, factor)?, &rp)?;
        save_png(&heatmap_image(&filtered[plane], ah, aw, factor)?, &fp)?;
        attention.push((rp, fp));
    }
    Ok(VisualizeOutput {
        clusters,
        attention,
        num_clusters: km.centers.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: Ablation,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub delta_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | AP | AP50 | AP75 | ΔAP |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:+.4} |\n",
                r.variant, r.ap, r.ap50, r.ap75, r.delta_ap
            ));
        }
        s
    }
}

/// Trains and evaluates the full setting and one variant per switch.
pub fn run_ablate(config: &Config, switches: &[String], data_dir: &Path, out: &Path) -> Result<AblationReport> {
    let mut variants = vec![Ablation::default()];
    for s in switches {
        variants.push(Ablation::default().with_switch(s)?);
    }
    let train_dir = data_dir.join("train");
    let val_dir = data_dir.join("val");
    let mut rows: Vec<AblationRow> = Vec::new();
    for ab in variants {
        let mut cfg = config.clone();
        cfg.ablation = ab;
        let variant = ab.describe();
        let outcome = run_train(&cfg, &train_dir, &out.join(&variant), None)?;
        let mode = cfg.eval.mode;
        let samples = eval_samples(&outcome.model, &val_dir, mode)?;
        let r = evaluate_samples(&outcome.model, &samples, mode)?;
        let base = rows.first().map_or(r.ap, |f| f.ap);
        rows.push(AblationRow {
            variant,
            ablation: ab,
            ap: r.ap,
            ap50: r.ap50,
            ap75: r.ap75,
            delta_ap: r.ap - base,
        });
    }
    let report = AblationReport { rows };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("ablation.md"), report.to_markdown())?;
    Ok(report)
}

/// Ground truth converted to detections with unit score; AP of this is 1.
pub fn oracle_detections(gts: &[Instance]) -> Vec<Detection> {
    gts.iter()
        .filter(|g| !g.iscrowd)
        .map(|g| Detection {
            mask: g.mask.clone(),
            score: 1.0,
            category: g.category_id,
        })
        .collect()
}
