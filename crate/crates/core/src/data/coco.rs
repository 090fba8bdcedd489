//! COCO instances JSON ingestion.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::data::{AnnotatedSample, Image, Instance, Mask, Rle};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub category_id: usize,
    pub iscrowd: bool,
    pub rle: Rle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceRecord>,
}

/// Loaded annotations: per-image records plus category statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub image_dir: PathBuf,
    pub vocab: Vocabulary,
    pub samples: Vec<SampleRecord>,
    /// Number of images containing each category.
    pub category_freq: BTreeMap<usize, usize>,
    /// Annotations dropped for unknown categories or empty masks.
    pub rejected_annotations: usize,
}

impl DatasetIndex {
    pub fn new(
        image_dir: PathBuf,
        vocab: Vocabulary,
        samples: Vec<SampleRecord>,
        rejected_annotations: usize,
    ) -> Self {
        let category_freq = image_frequencies(&samples, vocab.len());
        Self {
            image_dir,
            vocab,
            samples,
            category_freq,
            rejected_annotations,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Total non-crowd instances per category.
    pub fn instance_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.len()];
        for s in &self.samples {
            for inst in s.instances.iter().filter(|i| !i.iscrowd) {
                counts[inst.category_id] += 1;
            }
        }
        counts
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.image_dir.join(&self.samples[i].file_name)
    }

    /// Reads the image and decodes every mask of sample `i`.
    pub fn load_sample(&self, i: usize) -> Result<AnnotatedSample> {
        let rec = &self.samples[i];
        let image = Image::load_png(&self.image_path(i))?;
        if (image.height, image.width) != (rec.height, rec.width) {
            return Err(Error::Data(format!(
                "image {} is {}x{}, annotations say {}x{}",
                rec.file_name, image.height, image.width, rec.height, rec.width
            )));
        }
        let instances = rec
            .instances
            .iter()
            .map(|inst| {
                Ok(Instance {
                    mask: inst.rle.decode()?,
                    category_id: inst.category_id,
                    iscrowd: inst.iscrowd,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotatedSample { image, instances })
    }

    /// Keeps the samples at the given positions.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(self.image_dir.clone(), self.vocab.clone(), samples, 0)
    }
}

pub(crate) fn image_frequencies(samples: &[SampleRecord], n: usize) -> BTreeMap<usize, usize> {
    let mut freq: BTreeMap<usize, usize> = (0..n).map(|c| (c, 0)).collect();
    for s in samples {
        let mut seen = vec![false; n];
        for inst in s.instances.iter().filter(|i| !i.iscrowd) {
            seen[inst.category_id] = true;
        }
        for (c, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
            *freq.get_mut(&c).unwrap() += 1;
        }
    }
    freq
}

fn field<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::schema(format!("{path}.{key}"), "missing key"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::schema(path, "expected an array"))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::schema(path, "expected a non-negative integer"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::schema(path, "expected a number"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::schema(path, "expected a string"))
}

/// Even-odd fill of one polygon, sampled at pixel centres.
fn fill_polygon(mask: &mut Mask, pts: &[(f64, f64)]) {
    let n = pts.len();
    for y in 0..mask.height {
        let py = y as f64 + 0.5;
        for x in 0..mask.width {
            let px = x as f64 + 0.5;
            let mut inside = false;
            let mut j = n - 1;
            for i in 0..n {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                mask.set(y, x, true);
            }
        }
    }
}

/// Rasterizes a polygon list as the union of its even-odd filled rings.
pub fn rasterize_polygons(height: usize, width: usize, polygons: &[Vec<f64>]) -> Mask {
    let mut mask = Mask::zeros(height, width);
    for poly in polygons {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() >= 3 {
            fill_polygon(&mut mask, &pts);
        }
    }
    mask
}

fn parse_segmentation(seg: &Value, h: usize, w: usize, path: &str) -> Result<Rle> {
    match seg {
        Value::Array(polys) => {
            let mut rings = Vec::with_capacity(polys.len());
            for (k, p) in polys.iter().enumerate() {
                let ppath = format!("{path}[{k}]");
                let coords = as_array(p, &ppath)?
                    .iter()
                    .enumerate()
                    .map(|(j, c)| as_f64(c, &format!("{ppath}[{j}]")))
                    .collect::<Result<Vec<f64>>>()?;
                if coords.len() % 2 != 0 || coords.len() < 6 {
                    return Err(Error::schema(
                        ppath,
                        "polygon needs an even number of at least 6 coordinates",
                    ));
                }
                rings.push(coords);
            }
            Ok(Rle::encode(&rasterize_polygons(h, w, &rings)))
        }
        Value::Object(_) => {
            let size = as_array(field(seg, "size", path)?, &format!("{path}.size"))?;
            if size.len() != 2 {
                return Err(Error::schema(format!("{path}.size"), "expected [height, width]"));
            }
            let sh = as_u64(&size[0], &format!("{path}.size[0]"))? as usize;
            let sw = as_u64(&size[1], &format!("{path}.size[1]"))? as usize;
            if (sh, sw) != (h, w) {
                return Err(Error::schema(
                    format!("{path}.size"),
                    format!("RLE is {sh}x{sw}, image is {h}x{w}"),
                ));
            }
            let counts = field(seg, "counts", path)?;
            let cpath = format!("{path}.counts");
            match counts {
                Value::String(s) => Rle::from_compressed(h, w, s).map_err(|e| match e {
                    Error::Parse { offset, msg } => {
                        Error::schema(cpath, format!("byte {offset}: {msg}"))
                    }
                    other => other,
                }),
                Value::Array(items) => {
                    let counts = items
                        .iter()
                        .enumerate()
                        .map(|(j, c)| as_u64(c, &format!("{cpath}[{j}]")))
                        .collect::<Result<Vec<u64>>>()?;
                    if counts.iter().sum::<u64>() != (h * w) as u64 {
                        return Err(Error::schema(cpath, "run lengths do not cover the image"));
                    }
                    Ok(Rle {
                        height: h,
                        width: w,
                        counts,
                    })
                }
                _ => Err(Error::schema(cpath, "expected a string or an integer array")),
            }
        }
        _ => Err(Error::schema(path, "expected a polygon list or an RLE object")),
    }
}

/// Parses COCO instances JSON text. Image files are looked up in `image_dir`.
pub fn parse_coco(text: &str, vocab: &Vocabulary, image_dir: PathBuf) -> Result<DatasetIndex> {
    let root: Value = serde_json::from_str(text)?;
    let images = as_array(field(&root, "images", "$")?, "$.images")?;
    let annotations = as_array(field(&root, "annotations", "$")?, "$.annotations")?;
    let categories = as_array(field(&root, "categories", "$")?, "$.categories")?;

    let mut cat_map: HashMap<u64, Option<usize>> = HashMap::new();
    for (i, c) in categories.iter().enumerate() {
        let path = format!("$.categories[{i}]");
        let id = as_u64(field(c, "id", &path)?, &format!("{path}.id"))?;
        let name = as_str(field(c, "name", &path)?, &format!("{path}.name"))?;
        cat_map.insert(id, vocab.id_of(name));
    }

    let mut samples = Vec::with_capacity(images.len());
    let mut by_id: HashMap<u64, usize> = HashMap::new();
    for (i, im) in images.iter().enumerate() {
        let path = format!("$.images[{i}]");
        let id = as_u64(field(im, "id", &path)?, &format!("{path}.id"))?;
        let file_name = as_str(field(im, "file_name", &path)?, &format!("{path}.file_name"))?;
        let height = as_u64(field(im, "height", &path)?, &format!("{path}.height"))? as usize;
        let width = as_u64(field(im, "width", &path)?, &format!("{path}.width"))? as usize;
        if by_id.insert(id, samples.len()).is_some() {
            return Err(Error::schema(format!("{path}.id"), format!("duplicate image id {id}")));
        }
        samples.push(SampleRecord {
            id,
            file_name: file_name.to_string(),
            height,
            width,
            instances: Vec::new(),
        });
    }

    let mut rejected = 0;
    for (i, ann) in annotations.iter().enumerate() {
        let path = format!("$.annotations[{i}]");
        let image_id = as_u64(field(ann, "image_id", &path)?, &format!("{path}.image_id"))?;
        let &si = by_id.get(&image_id).ok_or_else(|| {
            Error::schema(format!("{path}.image_id"), format!("unknown image id {image_id}"))
        })?;
        let cat = as_u64(field(ann, "category_id", &path)?, &format!("{path}.category_id"))?;
        let iscrowd = match ann.get("iscrowd") {
            None => false,
            Some(v) => as_u64(v, &format!("{path}.iscrowd"))? != 0,
        };
        let (h, w) = (samples[si].height, samples[si].width);
        let rle = parse_segmentation(
            field(ann, "segmentation", &path)?,
            h,
            w,
            &format!("{path}.segmentation"),
        )?;
        let Some(Some(category_id)) = cat_map.get(&cat).copied() else {
            rejected += 1;
            continue;
        };
        if !iscrowd && rle.area() == 0 {
            rejected += 1;
            continue;
        }
        samples[si].instances.push(InstanceRecord {
            category_id,
            iscrowd,
            rle,
        });
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} annotations with unknown categories or empty masks");
    }
    Ok(DatasetIndex::new(image_dir, vocab.clone(), samples, rejected))
}

/// Loads a COCO instances file; images are expected in an `images/`
/// directory next to it.
pub fn load_coco(json_path: &Path, vocab: &Vocabulary) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(json_path)?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    parse_coco(&text, vocab, dir.join("images"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_names(&["frog", "moth"]).unwrap()
    }

    #[test]
    fn minimal_rle_file() {
        let json = r#"{"images":[{"id":7,"file_name":"a.png","height":3,"width":3}],
            "annotations":[{"id":1,"image_id":7,"category_id":2,"iscrowd":0,
                "segmentation":{"size":[3,3],"counts":"045"}}],
            "categories":[{"id":2,"name":"moth"}]}"#;
        let idx = parse_coco(json, &vocab(), PathBuf::new()).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.samples[0].instances.len(), 1);
        assert_eq!(idx.samples[0].instances[0].category_id, 1);
        assert_eq!(idx.samples[0].instances[0].rle.counts, vec![0, 4, 5]);
    }

    #[test]
    fn polygon_square_covers_nine_pixels() {
        let m = rasterize_polygons(5, 5, &[vec![1.0, 1.0, 4.0, 1.0, 4.0, 4.0, 1.0, 4.0]]);
        assert_eq!(m.area(), 9);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(m.get(y, x), (1..=3).contains(&y) && (1..=3).contains(&x));
            }
        }
    }

    #[test]
    fn unknown_image_id_is_schema_error() {
        let json = r#"{"images":[],"annotations":[{"image_id":1,"category_id":1,
            "segmentation":[[0,0,1,0,1,1]]}],"categories":[]}"#;
        let err = parse_coco(json, &vocab(), PathBuf::new()).unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "$.annotations[0].image_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_key_names_path() {
        let json = r#"{"images":[{"id":1,"file_name":"a.png","height":2}],
            "annotations":[],"categories":[]}"#;
        match parse_coco(json, &vocab(), PathBuf::new()).unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "$.images[0].width"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_category_counted() {
        let json = r#"{"images":[{"id":1,"file_name":"a.png","height":2,"width":2}],
            "annotations":[{"image_id":1,"category_id":9,"segmentation":[[0,0,2,0,2,2,0,2]]}],
            "categories":[{"id":9,"name":"lizard"}]}"#;
        let idx = parse_coco(json, &vocab(), PathBuf::new()).unwrap();
        assert_eq!(idx.rejected_annotations, 1);
        assert!(idx.samples[0].instances.is_empty());
    }
}
