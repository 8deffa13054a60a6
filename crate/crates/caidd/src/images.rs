//! PNG input and output with the pixel mapping `p = round((x + 1) * 127.5)`.

use std::path::{Path, PathBuf};

use caidd_core::{ImageTensor, Tensor};
use image::imageops::FilterType;
use image::{ImageFormat, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// `[1, 3, H, W]` (or `[3, H, W]`) in `[-1, 1]` to an 8-bit RGB image.
pub fn to_rgb8(img: &ImageTensor) -> Result<RgbImage> {
    let s = img.shape();
    let (h, w) = match s {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        _ => return Err(caidd_core::Error::dim(format!("expected one RGB image, got {:?}", s)).into()),
    };
    let plane = h * w;
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            ((d[c * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

/// 8-bit RGB to `[1, 3, H, W]` in `[-1, 1]`.
pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * plane + y as usize * w + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("sizes agree")
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    to_rgb8(img)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes a PNG and bilinearly resizes it to `size x size` when needed.
pub fn load_png(path: &Path, size: usize) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = decoded.to_rgb8();
    if rgb.width() as usize == size && rgb.height() as usize == size {
        return Ok(from_rgb8(&rgb));
    }
    let float: Rgb32FImage = image::DynamicImage::ImageRgb8(rgb).to_rgb32f();
    let resized = image::imageops::resize(&float, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[c * plane + y as usize * size + x as usize] = (p[c] as f64).clamp(0.0, 1.0) * 2.0 - 1.0;
        }
    }
    Ok(Tensor::new(&[1, 3, size, size], data)?)
}

/// Result of [`load_image_folder`]: decoded images and per-file failures,
/// both in lexicographic file order.
#[derive(Debug, Default)]
pub struct FolderLoad {
    pub images: Vec<(PathBuf, ImageTensor)>,
    pub errors: Vec<(PathBuf, String)>,
}

impl FolderLoad {
    pub fn tensors(&self) -> Vec<ImageTensor> {
        self.images.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} loaded, {} failed", self.images.len(), self.errors.len());
        for (p, e) in &self.errors {
            s.push_str(&format!("\n  {}: {}", p.display(), e));
        }
        s
    }
}

/// PNG files of `dir` sorted by name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PNG of `dir`; unreadable files are reported, not fatal.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<FolderLoad> {
    let mut out = FolderLoad::default();
    for p in png_files(dir)? {
        match load_png(&p, size) {
            Ok(t) => out.images.push((p, t)),
            Err(e) => out.errors.push((p, e.to_string())),
        }
    }
    Ok(out)
}
