//! 8-bit lossless PNG input/output.

use crate::error::{Error, Result};
use crate::types::{BinaryMask, GrayscaleImage};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png(format!("{}: {e}", path.display()))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit single-channel grayscale"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn write_image(path: &Path, image: &GrayscaleImage) -> Result<()> {
    let data: Vec<u8> = image.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    write_png(path, image.width(), image.height(), png::ColorType::Grayscale, &data)
}

pub fn read_image(path: &Path, id: impl Into<String>) -> Result<GrayscaleImage> {
    let (h, w, data) = read_gray_png(path)?;
    GrayscaleImage::new(id, h, w, data.iter().map(|v| f64::from(*v) / 255.0).collect())
}

/// Masks are stored as 0/255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.pixels().iter().map(|v| v * 255).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

pub fn read_mask(path: &Path, id: impl Into<String>) -> Result<BinaryMask> {
    let (h, w, data) = read_gray_png(path)?;
    BinaryMask::new(id, h, w, data.iter().map(|v| u8::from(*v >= 128)).collect())
}

/// Red ground truth, green prediction, yellow where both agree on foreground.
pub fn write_overlay(path: &Path, image: &GrayscaleImage, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    crate::types::ensure_same_shape(image.shape(), pred.shape())?;
    crate::types::ensure_same_shape(image.shape(), gt.shape())?;
    let mut data = Vec::with_capacity(image.pixels().len() * 3);
    for ((v, p), g) in image.pixels().iter().zip(pred.pixels()).zip(gt.pixels()) {
        let base = (v * 255.0).round() as u8;
        let rgb = match (*p == 1, *g == 1) {
            (true, true) => [255, 255, 0],
            (true, false) => [0, 255, 0],
            (false, true) => [255, 0, 0],
            (false, false) => [base, base, base],
        };
        data.extend_from_slice(&rgb);
    }
    write_png(path, image.width(), image.height(), png::ColorType::Rgb, &data)
}
