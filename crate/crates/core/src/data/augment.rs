//! Scale jitter followed by a fixed-size crop or pad.

use rand::Rng;

use crate::data::{AnnotatedSample, Image, Instance, Mask};
use crate::error::{Error, Result};
use crate::nn::named_rng;
use crate::resample::{resize_plane, Resample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub out_size: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            out_size: 512,
            min_scale: 0.1,
            max_scale: 2.0,
        }
    }
}

/// Resizes an image to `h × w` (area when shrinking, bilinear when growing).
pub fn resize_image(img: &Image, h: usize, w: usize) -> Image {
    if (h, w) == (img.height, img.width) {
        return img.clone();
    }
    let mode_h = Resample::auto(img.height, h);
    let mut data = vec![0f32; h * w * 3];
    for c in 0..3 {
        let plane = resize_plane(&img.channel(c), img.height, img.width, h, w, mode_h);
        for (k, v) in plane.into_iter().enumerate() {
            data[k * 3 + c] = v as f32;
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

/// Nearest-neighbour mask resize with pixel-centre alignment.
pub fn resize_mask(m: &Mask, h: usize, w: usize) -> Mask {
    if (h, w) == (m.height, m.width) {
        return m.clone();
    }
    let sy = m.height as f64 / h as f64;
    let sx = m.width as f64 / w as f64;
    Mask::from_fn(h, w, |y, x| {
        let yy = (((y as f64 + 0.5) * sy) as usize).min(m.height - 1);
        let xx = (((x as f64 + 0.5) * sx) as usize).min(m.width - 1);
        m.get(yy, xx)
    })
}

/// Resizes a sample to exactly `h × w`.
pub fn resize_sample(sample: &AnnotatedSample, h: usize, w: usize) -> AnnotatedSample {
    AnnotatedSample {
        image: resize_image(&sample.image, h, w),
        instances: sample
            .instances
            .iter()
            .map(|i| Instance {
                mask: resize_mask(&i.mask, h, w),
                ..i.clone()
            })
            .collect(),
    }
}

/// Scales a sample by `s`; a scale that leaves the size unchanged is a no-op.
pub fn rescale(sample: &AnnotatedSample, s: f64) -> Result<AnnotatedSample> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Range(format!("scale {s} must be positive")));
    }
    let h = ((sample.image.height as f64 * s).round() as usize).max(1);
    let w = ((sample.image.width as f64 * s).round() as usize).max(1);
    Ok(resize_sample(sample, h, w))
}

/// Crops (at `(top, left)`) or zero-pads on the bottom/right to `size × size`.
pub fn crop_or_pad(sample: &AnnotatedSample, size: usize, top: usize, left: usize) -> AnnotatedSample {
    let img = &sample.image;
    let mut out = Image::filled(size, size, 0.0);
    for y in 0..size {
        let sy = y + top;
        if sy >= img.height {
            break;
        }
        for x in 0..size {
            let sx = x + left;
            if sx >= img.width {
                break;
            }
            for c in 0..3 {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    let instances = sample
        .instances
        .iter()
        .map(|inst| {
            let m = &inst.mask;
            let mask = Mask::from_fn(size, size, |y, x| {
                let (sy, sx) = (y + top, x + left);
                sy < m.height && sx < m.width && m.get(sy, sx)
            });
            Instance {
                mask,
                ..inst.clone()
            }
        })
        .collect();
    AnnotatedSample {
        image: out,
        instances,
    }
}

/// Random scale jitter in `[min_scale, max_scale]` and a random
/// `out_size × out_size` window. Instances are kept even when the window
/// leaves them empty, so counts and category ids are preserved.
pub fn augment(sample: &AnnotatedSample, seed: u64, cfg: &AugmentConfig) -> Result<AnnotatedSample> {
    if !(cfg.min_scale > 0.0 && cfg.min_scale <= cfg.max_scale) {
        return Err(Error::Range(format!(
            "scale range [{}, {}] is invalid",
            cfg.min_scale, cfg.max_scale
        )));
    }
    let mut rng = named_rng(seed, "augment");
    let s = if cfg.min_scale == cfg.max_scale {
        cfg.min_scale
    } else {
        rng.random_range(cfg.min_scale..=cfg.max_scale)
    };
    let scaled = rescale(sample, s)?;
    let top = if scaled.image.height > cfg.out_size {
        rng.random_range(0..=scaled.image.height - cfg.out_size)
    } else {
        0
    };
    let left = if scaled.image.width > cfg.out_size {
        rng.random_range(0..=scaled.image.width - cfg.out_size)
    } else {
        0
    };
    if (scaled.image.height, scaled.image.width) == (cfg.out_size, cfg.out_size) {
        return Ok(scaled);
    }
    Ok(crop_or_pad(&scaled, cfg.out_size, top, left))
}
