//! Procedural camouflage dataset.
//!
//! Backgrounds are sums of sinusoidal gratings. An instance is filled with the
//! same gratings shifted in phase by `contrast · π`, so objects differ from
//! their surroundings only in texture phase. Each category owns a shape
//! family (ellipse, superellipse, star, lobed blob).

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{AnnotatedSample, Image, Instance, Mask, Rle};
use crate::error::{Error, Result};
use crate::nn::named_rng;
use crate::vocab::{Category, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_images: usize,
    pub num_val_images: usize,
    pub num_categories: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub image_size: usize,
    /// Texture phase shift of instances, as a fraction of π.
    pub contrast: f64,
    /// Object radius range as fractions of the image side.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 8,
            num_val_images: 8,
            num_categories: 3,
            min_instances: 1,
            max_instances: 3,
            image_size: 64,
            contrast: 0.5,
            min_radius: 0.12,
            max_radius: 0.22,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::config("synth.num_categories must be at least 1"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::config("synth instance range must satisfy 1 <= min <= max"));
        }
        if self.image_size < 8 {
            return Err(Error::config("synth.image_size must be at least 8"));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::config("synth.contrast must be in [0, 1]"));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius && self.max_radius < 0.5) {
            return Err(Error::config("synth radius range must satisfy 0 < min <= max < 0.5"));
        }
        Ok(())
    }
}

const ANIMALS: &[(&str, &[&str])] = &[
    ("frog", &["frogs", "toad", "tree frog"]),
    ("moth", &["moths", "tiger moth", "lepidoptera"]),
    ("lizard", &["lizards", "gecko", "chameleon"]),
    ("owl", &["owls", "barn owl", "night bird"]),
    ("octopus", &["octopuses", "octopi", "cephalopod"]),
    ("crab", &["crabs", "spider crab", "crustacean"]),
    ("snake", &["snakes", "viper", "python"]),
    ("flatfish", &["flatfishes", "flounder", "stonefish"]),
    ("spider", &["spiders", "crab spider", "arachnid"]),
    ("katydid", &["katydids", "leaf insect", "grasshopper"]),
    ("seahorse", &["seahorses", "pygmy seahorse", "pipefish"]),
    ("leopard", &["leopards", "snow leopard", "big cat"]),
];

/// Animal vocabulary with synonym lists; names beyond the built-in list are numbered.
pub fn synth_vocabulary(n: usize) -> Result<Vocabulary> {
    let cats = (0..n)
        .map(|id| match ANIMALS.get(id) {
            Some((name, vars)) => Category {
                id,
                name: name.to_string(),
                variants: vars.iter().map(|v| v.to_string()).collect(),
            },
            None => Category {
                id,
                name: format!("creature {id}"),
                variants: vec![format!("creatures {id}")],
            },
        })
        .collect();
    Vocabulary::new(cats)
}

#[derive(Debug, Clone, Copy)]
struct Grating {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn texture_value(gratings: &[Grating], y: f64, x: f64, shift: f64) -> f64 {
    gratings
        .iter()
        .map(|g| g.amp * (2.0 * PI * (g.fy * y + g.fx * x) + g.phase + shift).sin())
        .sum()
}

#[derive(Debug, Clone, Copy)]
enum Family {
    Ellipse,
    Superellipse,
    Star,
    Lobed,
}

fn family(category: usize) -> Family {
    match category % 4 {
        0 => Family::Ellipse,
        1 => Family::Superellipse,
        2 => Family::Star,
        _ => Family::Lobed,
    }
}

struct Shape {
    cy: f64,
    cx: f64,
    r: f64,
    aspect: f64,
    rot: f64,
    wobble: f64,
    family: Family,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.rot.sin_cos();
        let u = (c * dx + s * dy) / self.aspect;
        let v = (-s * dx + c * dy) * self.aspect;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        match self.family {
            Family::Ellipse => rho <= self.r,
            Family::Superellipse => {
                (u.abs() / self.r).powi(4) + (v.abs() / self.r).powi(4) <= 1.0
            }
            Family::Star => rho <= self.r * (0.72 + 0.28 * (5.0 * theta + self.wobble).cos()),
            Family::Lobed => rho <= self.r * (0.8 + 0.2 * (3.0 * theta + self.wobble).sin()),
        }
    }

    fn rasterize(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

fn random_shape(rng: &mut ChaCha8Rng, cfg: &SynthConfig, category: usize, shrink: f64) -> Shape {
    let size = cfg.image_size as f64;
    let r = rng.random_range(cfg.min_radius..=cfg.max_radius) * size * shrink;
    let margin = r.min(size / 2.0 - 1.0);
    Shape {
        cy: rng.random_range(margin..=size - margin),
        cx: rng.random_range(margin..=size - margin),
        r,
        aspect: rng.random_range(0.8..=1.25),
        rot: rng.random_range(0.0..PI),
        wobble: rng.random_range(0.0..2.0 * PI),
        family: family(category),
    }
}

struct Scene {
    size: usize,
    gratings: Vec<Vec<Grating>>,
    base: Vec<f64>,
    instances: Vec<Instance>,
}

impl Scene {
    /// Renders the scene with instance pixels phase-shifted by `shift`.
    fn render(&self, shift: f64) -> Image {
        let size = self.size;
        let mut occupied = Mask::zeros(size, size);
        for inst in &self.instances {
            for (o, &v) in occupied.data.iter_mut().zip(&inst.mask.data) {
                *o |= v;
            }
        }
        let mut image = Image::filled(size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let s = if occupied.get(y, x) { shift } else { 0.0 };
                for c in 0..3 {
                    let t = texture_value(&self.gratings[c], y as f64 + 0.5, x as f64 + 0.5, s);
                    image.set(y, x, c, (self.base[c] + t).clamp(0.0, 1.0) as f32);
                }
            }
        }
        image
    }
}

/// Lays out one image. `first_instance` is the global index of this image's
/// first instance and drives the round-robin category assignment.
fn generate_scene(cfg: &SynthConfig, seed: u64, image_idx: usize, first_instance: usize, n: usize) -> Scene {
    let mut rng = named_rng(seed, &format!("synth-image-{image_idx}"));
    let size = cfg.image_size;
    let scale = size as f64;
    let gratings: Vec<Vec<Grating>> = (0..3)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let f = rng.random_range(3.0..7.0) / scale;
                    let ang = rng.random_range(0.0..PI);
                    Grating {
                        fy: f * ang.sin(),
                        fx: f * ang.cos(),
                        phase: rng.random_range(0.0..2.0 * PI),
                        amp: rng.random_range(0.08..0.14),
                    }
                })
                .collect()
        })
        .collect();
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.35..0.65)).collect();

    let mut categories: Vec<usize> = (0..n)
        .map(|k| (first_instance + k) % cfg.num_categories)
        .collect();
    categories.shuffle(&mut rng);

    let mut occupied = Mask::zeros(size, size);
    let mut instances = Vec::with_capacity(n);
    for &category in &categories {
        let mut placed = None;
        'attempts: for shrink_step in 0..8 {
            let shrink = 0.85f64.powi(shrink_step);
            for _ in 0..25 {
                let m = random_shape(&mut rng, cfg, category, shrink).rasterize(size);
                if m.area() > 0 && m.data.iter().zip(&occupied.data).all(|(a, b)| a & b == 0) {
                    placed = Some(m);
                    break 'attempts;
                }
            }
            let mut m = random_shape(&mut rng, cfg, category, shrink).rasterize(size);
            for (a, b) in m.data.iter_mut().zip(&occupied.data) {
                *a &= 1 - b;
            }
            if m.area() > 0 {
                placed = Some(m);
                break;
            }
        }
        let mask = placed.unwrap_or_else(|| {
            let k = occupied.data.iter().position(|&v| v == 0).unwrap_or(0);
            let mut m = Mask::zeros(size, size);
            m.data[k] = 1;
            m
        });
        for (o, &v) in occupied.data.iter_mut().zip(&mask.data) {
            *o |= v;
        }
        instances.push(Instance {
            mask,
            category_id: category,
            iscrowd: false,
        });
    }
    Scene {
        size,
        gratings,
        base,
        instances,
    }
}

fn scenes(cfg: &SynthConfig, num_images: usize, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut counts_rng = named_rng(seed, "synth-counts");
    let counts: Vec<usize> = (0..num_images)
        .map(|_| counts_rng.random_range(cfg.min_instances..=cfg.max_instances))
        .collect();
    let mut first = 0;
    let mut out = Vec::with_capacity(num_images);
    for (i, &n) in counts.iter().enumerate() {
        out.push(generate_scene(cfg, seed, i, first, n));
        first += n;
    }
    Ok(out)
}

/// Generates `num_images` samples in memory.
pub fn synth_samples(cfg: &SynthConfig, num_images: usize, seed: u64) -> Result<Vec<AnnotatedSample>> {
    let shift = cfg.contrast * PI;
    Ok(scenes(cfg, num_images, seed)?
        .into_iter()
        .map(|scene| AnnotatedSample {
            image: scene.render(shift),
            instances: scene.instances,
        })
        .collect())
}

/// Writes `images/*.png`, `annotations.json` (COCO, compressed RLE) and
/// `vocab.json` for `num_images` samples to `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, num_images: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let samples = synth_samples(cfg, num_images, seed)?;
    let vocab = synth_vocabulary(cfg.num_categories)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1;
    for (i, s) in samples.iter().enumerate() {
        let file_name = format!("{i:06}.png");
        s.image.save_png(&image_dir.join(&file_name))?;
        images.push(json!({
            "id": i + 1,
            "file_name": file_name,
            "height": s.image.height,
            "width": s.image.width,
        }));
        for inst in &s.instances {
            let rle = Rle::encode(&inst.mask);
            annotations.push(json!({
                "id": ann_id,
                "image_id": i + 1,
                "category_id": inst.category_id + 1,
                "iscrowd": 0,
                "area": rle.area(),
                "bbox": bbox(&inst.mask),
                "segmentation": {"size": [rle.height, rle.width], "counts": rle.to_compressed()},
            }));
            ann_id += 1;
        }
    }
    let categories: Vec<_> = vocab
        .categories()
        .iter()
        .map(|c| json!({"id": c.id + 1, "name": c.name, "supercategory": "animal"}))
        .collect();
    let doc = json!({
        "info": {"description": "synthetic camouflage", "seed": seed},
        "images": images,
        "annotations": annotations,
        "categories": categories,
    });
    std::fs::write(out_dir.join("annotations.json"), serde_json::to_string(&doc)?)?;
    vocab.save(&out_dir.join("vocab.json"))?;
    Ok(())
}

/// `[x, y, width, height]` of the foreground.
fn bbox(m: &Mask) -> [usize; 4] {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 == usize::MAX {
        return [0, 0, 0, 0];
    }
    [x0, y0, x1 - x0, y1 - y0]
}
