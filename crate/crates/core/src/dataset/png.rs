//! 8-bit RGB, 8-bit gray, and 16-bit gray PNG files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

fn encode(path: &Path, bytes: &[u8], width: u32, height: u32, color: ExtendedColorType) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Fast, FilterType::Adaptive);
    encoder
        .write_image(bytes, width, height, color)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_rgb8(path: &Path, rgb: &[u8], width: u32, height: u32) -> Result<()> {
    encode(path, rgb, width, height, ExtendedColorType::Rgb8)
}

pub fn write_gray8(path: &Path, data: &[u8], width: u32, height: u32) -> Result<()> {
    encode(path, data, width, height, ExtendedColorType::L8)
}

pub fn write_gray16(path: &Path, data: &[u16], width: u32, height: u32) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_ne_bytes()).collect();
    encode(path, &bytes, width, height, ExtendedColorType::L16)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::format(path, "file is missing"));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_rgb8(path: &Path) -> Result<(Vec<u8>, u32, u32)> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w, h))
}

pub fn read_gray8(path: &Path) -> Result<(Vec<u8>, u32, u32)> {
    let img = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, format!("expected 8-bit gray, found {:?}", img.color())));
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w, h))
}

pub fn read_gray16(path: &Path) -> Result<(Vec<u16>, u32, u32)> {
    let img = open(path)?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::format(path, format!("expected 16-bit gray, found {:?}", img.color())));
    }
    let img = img.into_luma16();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w, h))
}
