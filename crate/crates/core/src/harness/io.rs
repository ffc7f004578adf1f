//! 8-bit RGB PNG I/O and small JSON helpers.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `[3, H, W]` image with values in `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("PNG output needs 3 channels, got {c}")));
    }
    let d = img.data();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|k| (d[k * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    buf.save(path)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}

/// Reads an 8-bit PNG as a `[3, H, W]` image in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * h * w + p] = px.0[k] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Rounds an image to the values an 8-bit PNG can hold.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
