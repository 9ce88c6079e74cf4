//! PNG decoding and encoding at the file and wire boundary.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use hairmap_core::Image;

use crate::error::{AppError, AppResult};

/// Decodes a PNG and resizes it to `height x width` if needed.
pub fn decode(bytes: &[u8], height: usize, width: usize) -> AppResult<Image> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| AppError::Input(format!("not a readable PNG: {e}")))?
        .to_rgb8();
    let rgb = if decoded.dimensions() == (width as u32, height as u32) {
        decoded
    } else {
        image::imageops::resize(&decoded, width as u32, height as u32, FilterType::Triangle)
    };
    Ok(Image::from_rgb8(height, width, rgb.as_raw())?)
}

pub fn encode(img: &Image) -> AppResult<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            &img.to_rgb8(),
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| AppError::Core(hairmap_core::Error::Numeric(format!("PNG encoding failed: {e}"))))?;
    Ok(out)
}

pub fn read_file(path: &Path) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::Input(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path, height: usize, width: usize) -> AppResult<Image> {
    decode(&read_file(path)?, height, width).map_err(|e| match e {
        AppError::Input(m) => AppError::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Sorted `*.png` files of a directory.
pub fn list_dir(dir: &Path) -> AppResult<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| AppError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}
