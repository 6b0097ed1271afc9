//! PNG reading and writing for `[-1, 1]` image tensors.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use sfe_tensor::{Scalar, Tensor};

use crate::error::{invalid, CoreError, Result};

fn to_u8(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` tensor to an RGB image.
pub fn to_rgb<T: Scalar>(img: &Tensor<T>) -> Result<RgbImage> {
    if img.ndim() != 3 || img.dim(0) != 3 {
        return invalid(format!("expected a [3, H, W] image, got {:?}", img.shape()));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let d = img.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_u8(d[c * h * w + y as usize * w + x as usize].as_f64());
        Rgb([at(0), at(1), at(2)])
    }))
}

pub fn save_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    to_rgb(img)?
        .save(path)
        .map_err(|e| CoreError::Format(format!("writing {}: {e}", path.display())))
}

pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| CoreError::Format(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = T::lit(f64::from(p[c]) / 127.5 - 1.0);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| CoreError::Format(format!("reading {}: {e}", path.display())))?
        .to_luma8())
}

/// Tiles `rows × cols` images of shape `[3, H, W]` into one picture with a
/// one-pixel white gutter.
pub fn grid<T: Scalar>(cells: &[Vec<Tensor<T>>]) -> Result<RgbImage> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| CoreError::Invalid("empty image grid".into()))?;
    let (h, w) = (first.dim(1) as u32, first.dim(2) as u32);
    let rows = cells.len() as u32;
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut out = RgbImage::from_pixel(cols * (w + 1) + 1, rows * (h + 1) + 1, Rgb([255, 255, 255]));
    for (ri, row) in cells.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            let tile = to_rgb(cell)?;
            image::imageops::replace(
                &mut out,
                &tile,
                i64::from(ci as u32 * (w + 1) + 1),
                i64::from(ri as u32 * (h + 1) + 1),
            );
        }
    }
    Ok(out)
}
