//! PNG/JPEG decoding into [`RgbImage`], resize-and-crop, and PNG encoding.

use std::io::Cursor;
use std::path::Path;

use image::{imageops, DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::colorspace::RgbImage;
use crate::error::Result;

/// Decodes any supported image; 8-bit values map to `[0, 1]` by division by 255.
pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    from_dynamic(image::load_from_memory(bytes)?)
}

pub fn read(path: &Path) -> Result<RgbImage> {
    from_dynamic(image::open(path)?)
}

fn from_dynamic(img: DynamicImage) -> Result<RgbImage> {
    let rgb = img.to_rgb8();
    RgbImage::from_u8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// Bilinear resize so the shorter side equals `size`, then centre crop to `size x size`.
pub fn resize_center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    let (w, h) = (img.width(), img.height());
    if w == size && h == size {
        return Ok(img.clone());
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, img.data().to_vec()).expect("buffer matches dimensions");
    let scale = size as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as usize).max(size);
    let nh = ((h as f64 * scale).round() as usize).max(size);
    let resized = imageops::resize(&buf, nw as u32, nh as u32, imageops::FilterType::Triangle);
    let (x0, y0) = ((nw - size) / 2, (nh - size) / 2);
    let cropped = imageops::crop_imm(&resized, x0 as u32, y0 as u32, size as u32, size as u32).to_image();
    RgbImage::new(size, size, cropped.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.to_u8()).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}
