//! Image values and PNG persistence.
//!
//! Images are `H×W×C` arrays in `[0, 1]`. Rendered and generated images are
//! snapped to the 8-bit grid (`k/255`) so the in-memory value and its PNG
//! round-trip are bit-identical.

use crate::error::{Error, Result};
use crate::num::{c, Real};
use ndarray::Array3;
use std::path::Path;

/// H×W×C image in `[0, 1]`.
pub type Image<T> = Array3<T>;

/// Clamp every element into `[0, 1]`.
pub fn clamp_unit<T: Real>(img: &mut Image<T>) {
    img.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
}

/// Snap values onto the 8-bit grid `k/255`, clamping into `[0, 1]` first.
pub fn quantize_unit<T: Real>(img: &mut Image<T>) {
    let scale = c::<T>(255.0);
    img.mapv_inplace(|v| {
        let v = v.max(T::zero()).min(T::one());
        (v * scale).round() / scale
    });
}

/// Mean squared error between two same-shape images.
pub fn mse<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = c::<T>(a.len() as f64);
    let sum = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>();
    Ok(sum / n)
}

/// Write an image as an 8-bit RGB PNG.
pub fn save_png<T: Real>(img: &Image<T>, path: &Path) -> Result<()> {
    let (h, w, ch) = img.dim();
    if ch != 3 {
        return Err(Error::shape(format!("save_png expects 3 channels, got {ch}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let v = img[[y, x, k]].to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("png buffer size mismatch".to_string()))?;
    out.save(path)
        .map_err(|e| Error::Container(format!("png write {}: {e}", path.display())))?;
    Ok(())
}

/// Read an 8-bit RGB PNG into an image on the `k/255` grid.
pub fn load_png<T: Real>(path: &Path) -> Result<Image<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Container(format!("png read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for k in 0..3 {
                out[[y, x, k]] = c::<T>(p.0[k] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Write a boolean mask as an 8-bit grayscale PNG (255 = true).
pub fn save_mask(mask: &ndarray::Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let out = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("mask buffer size mismatch".to_string()))?;
    out.save(path)
        .map_err(|e| Error::Container(format!("mask write {}: {e}", path.display())))?;
    Ok(())
}

/// Read a boolean mask from an 8-bit grayscale PNG.
pub fn load_mask(path: &Path) -> Result<ndarray::Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Container(format!("mask read {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] >= 128
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn quantized_image_round_trips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img: Image<f64> =
            Array3::from_shape_fn((8, 8, 3), |(y, x, k)| (y * 31 + x * 7 + k * 3) as f64 / 200.0);
        quantize_unit(&mut img);
        save_png(&img, &path).unwrap();
        let back: Image<f64> = load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a: Image<f64> = Array3::zeros((4, 4, 3));
        let b: Image<f64> = Array3::zeros((5, 4, 3));
        assert!(mse(&a, &b).is_err());
    }
}
