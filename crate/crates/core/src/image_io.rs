//! 8-bit PNG and PPM images as `(3, H, W)` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// `round(v * 255)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `(3, H, W)` tensor; the format follows the extension
/// (`.png`, `.ppm`).
pub fn write_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("write_image needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let buf: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |ch| (ch, i)))
        .map(|(ch, i)| quantize(img.data()[ch * plane + i]))
        .collect();
    let rgb = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    let format = ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
    rgb.save_with_format(path, format).map_err(|e| image_err(path, e))
}

/// Reads a mask image as `(1, H, W)`: a pixel is a hole when its mean
/// channel value is above one half.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = read_image(path)?;
    let (_, h, w) = img.dims3()?;
    let plane = h * w;
    let data = (0..plane)
        .map(|i| {
            let m = (img.data()[i] + img.data()[plane + i] + img.data()[2 * plane + i]) / 3.0;
            if m > 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Writes a `(1, H, W)` mask as a white-on-black image.
pub fn write_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let (_, h, w) = mask.dims3()?;
    let mut rgb = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        rgb.extend_from_slice(mask.data());
    }
    write_image(path, &Tensor::new(&[3, h, w], rgb)?)
}

/// Image paths listed in a JSON manifest (`["a.png", "b.ppm"]`). Relative
/// entries resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<PathBuf> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries.into_iter().map(|p| if p.is_absolute() { p } else { base.join(p) }).collect())
}

/// Every `.png` mask in `dir`, in file-name order.
pub fn read_mask_dir(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(read_mask).collect()
}
