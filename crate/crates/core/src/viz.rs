//! PNG renderings: cluster maps, attention maps and instance overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::{Image, Mask};
use crate::error::{Error, Result};

/// Fixed palette cycled by cluster or instance index.
const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn palette_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

/// Nearest-neighbour upscaling by an integer factor.
fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    let factor = factor.max(1);
    RgbImage::from_fn(img.width() * factor, img.height() * factor, |x, y| {
        *img.get_pixel(x / factor, y / factor)
    })
}

/// One palette color per label on an `h x w` grid, upscaled by `factor`.
pub fn cluster_image(labels: &[usize], h: usize, w: usize, factor: u32) -> Result<RgbImage> {
    if labels.len() != h * w {
        return Err(Error::shape(format!("{} labels for a {h}x{w} grid", labels.len())));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(palette_color(labels[y as usize * w + x as usize])));
    Ok(upscale(&img, factor))
}

/// Grayscale heat map scaled to the maximum absolute value.
pub fn heatmap_image(values: &[f64], h: usize, w: usize, factor: u32) -> Result<RgbImage> {
    if values.len() != h * w {
        return Err(Error::shape(format!("{} values for a {h}x{w} grid", values.len())));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize].abs();
        let g = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
        Rgb([g, g, g])
    });
    Ok(upscale(&img, factor))
}

/// The image with each mask blended in its palette color at half opacity.
pub fn overlay_image(image: &Image, masks: &[Mask]) -> Result<RgbImage> {
    let mut img = image.to_rgb8();
    for (k, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (image.height, image.width) {
            return Err(Error::shape("overlay mask size differs from the image"));
        }
        let c = palette_color(k);
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(y, x) {
                    let p = img.get_pixel_mut(x as u32, y as u32);
                    for ch in 0..3 {
                        p.0[ch] = ((p.0[ch] as u16 + c[ch] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
