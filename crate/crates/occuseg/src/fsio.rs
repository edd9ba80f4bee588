//! Atomic file writes and PNG helpers shared by the dataset layer and the
//! CLI. Files are written to a temporary sibling and renamed into place so
//! interrupted runs never leave partial artifacts under final names.

use std::io::Write;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{GrayImage, ImageEncoder, RgbImage};

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::other(format!("{} has no file name", path.display())))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(&format!(".{}.", file_name.to_string_lossy()))
        .suffix(".tmp")
        .tempfile_in(dir.unwrap_or_else(|| Path::new(".")))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Deterministic PNG encoding of a grayscale image.
pub fn png_bytes_gray(img: &GrayImage) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::L8,
        )
        .map_err(std::io::Error::other)?;
    Ok(buf)
}

/// Deterministic PNG encoding of an RGB image.
pub fn png_bytes_rgb(img: &RgbImage) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(std::io::Error::other)?;
    Ok(buf)
}

pub fn write_png_gray(path: &Path, img: &GrayImage) -> std::io::Result<()> {
    write_atomic(path, &png_bytes_gray(img)?)
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> std::io::Result<()> {
    write_atomic(path, &png_bytes_rgb(img)?)
}

pub fn read_png_gray(path: &Path) -> Result<GrayImage, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => Ok(gray),
        other => Ok(other.to_luma8()),
    }
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    Ok(img.to_rgb8())
}
