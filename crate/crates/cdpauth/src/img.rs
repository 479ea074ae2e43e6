//! Grayscale image buffers and PNG I/O.
//!
//! All image math in this crate runs on `Array2<f64>` with values in `[0, 1]`
//! (0 = ink/dark, 1 = paper/light). On disk images are 8-bit grayscale PNG
//! with `value = round(255 * pixel)`; [`quantize`] snaps an in-memory image
//! onto that 8-bit grid so that the in-memory and on-disk pipelines see
//! bit-identical data.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub type Pixels = Array2<f64>;

/// Snaps every pixel onto the 8-bit grid `k/255`.
pub fn quantize(img: &Pixels) -> Pixels {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Writes an image as 8-bit grayscale PNG, creating parent directories.
pub fn write_png(path: &Path, img: &Pixels) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), v) in img.indexed_iter() {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.put_pixel(c as u32, r as u32, image::Luma([byte]));
    }
    buf.save(path)
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))
}

/// Reads an 8-bit grayscale PNG back into `[0, 1]` pixels.
pub fn read_png(path: &Path) -> Result<Pixels> {
    let img = image::open(path)
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for (c, r, px) in img.enumerate_pixels() {
        out[[r as usize, c as usize]] = px.0[0] as f64 / 255.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn png_round_trip_is_exact_on_quantized_pixels() {
        let dir = std::env::temp_dir().join("cdpauth_img_test");
        let img = quantize(&array![[0.0, 0.5, 1.0], [0.25, 0.75, 0.1]]);
        let path = dir.join("t.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn quantize_is_idempotent() {
        let img = array![[0.123456, 0.999, 0.0001]];
        let q = quantize(&img);
        assert_eq!(q, quantize(&q));
    }
}
