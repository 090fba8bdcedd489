//! Dataset ingestion, augmentation, sampling and synthetic data generation.

pub mod augment;
pub mod coco;
pub mod rle;
pub mod sampling;
pub mod synth;

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_plane, Resample};

pub use augment::{augment, rescale, resize_sample, AugmentConfig};
pub use coco::{load_coco, DatasetIndex, InstanceRecord, SampleRecord};
pub use rle::Rle;
pub use sampling::{epoch_indices, filter_rare_classes, repeat_factors};
pub use synth::{synth_generate, SynthConfig};

/// An RGB image with `f32` values in `[0, 1]`, stored height × width × channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// One channel as a row-major `f64` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(
            self.data.clone(),
            (self.height, self.width, 3),
            &candle_core::Device::Cpu,
        )?;
        Ok(t.permute((2, 0, 1))?.contiguous()?.unsqueeze(0)?.to_dtype(dtype)?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// A binary mask, row-major, one byte (0 or 1) per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    /// Builds a mask from row-major values, foreground where `value > threshold`.
    pub fn from_threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Self {
        Self {
            height,
            width,
            data: values.iter().map(|&v| (v > threshold) as u8).collect(),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Area-averages onto an `h × w` grid and binarizes at 0.5.
    pub fn downsample(&self, h: usize, w: usize) -> Mask {
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mode = Resample::auto(self.height, h);
        let v = resize_plane(&self.to_f64(), self.height, self.width, h, w, mode);
        Mask {
            height: h,
            width: w,
            data: v.iter().map(|&x| (x >= 0.5) as u8).collect(),
        }
    }
}

/// One ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    pub category_id: usize,
    pub iscrowd: bool,
}

/// An image with its ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: Image,
    pub instances: Vec<Instance>,
}

impl AnnotatedSample {
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.height != self.image.height || inst.mask.width != self.image.width {
                return Err(Error::Data(format!(
                    "instance {i} mask is {}x{}, image is {}x{}",
                    inst.mask.height, inst.mask.width, self.image.height, self.image.width
                )));
            }
            if inst.category_id >= num_categories {
                return Err(Error::Data(format!(
                    "instance {i} has category {} outside the vocabulary",
                    inst.category_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-dataset `data.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Side of the square network input.
    pub image_size: usize,
    pub augment: bool,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Categories with fewer instances are dropped.
    pub min_instances: usize,
    /// Repeat-factor threshold τ_f.
    pub repeat_threshold: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            augment: true,
            min_scale: 0.1,
            max_scale: 2.0,
            min_instances: 5,
            repeat_threshold: 0.001,
            synth: SynthConfig::default(),
        }
    }
}
