//! 8-bit PNG / PPM reading and writing as `[0, 1]` feature maps.

use std::path::Path;

use crate::error::{DcicError, Result};
use crate::tensor::FeatureMap;

pub fn load_image(path: &Path) -> Result<FeatureMap<f64>> {
    let img = image::open(path).map_err(|e| DcicError::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    FeatureMap::new(3, h, w, data)
}

/// Quantizes to 8 bits (round, clamp) and writes PNG or PPM by extension.
pub fn save_image(path: &Path, x: &FeatureMap<f64>) -> Result<()> {
    let (c, h, w) = x.dims();
    if c != 3 {
        return Err(DcicError::Image(format!("expected 3 channels, got {c}")));
    }
    if h > u32::MAX as usize || w > u32::MAX as usize {
        return Err(DcicError::Image("image too large".into()));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (px_x, px_y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = to_u8(x.get(ch, px_y as usize, px_x as usize));
        }
    }
    let format = match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => image::ImageFormat::Png,
        Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
        other => return Err(DcicError::Image(format!("unsupported output extension {other:?}"))),
    };
    img.save_with_format(path, format).map_err(|e| DcicError::Image(format!("{}: {e}", path.display())))
}

pub fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Snaps values to the 8-bit grid, as a save/load cycle would.
pub fn quantize_8bit(x: &FeatureMap<f64>) -> FeatureMap<f64> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = to_u8(*v) as f64 / 255.0);
    y
}

/// Image files (`png`, `ppm`, `pnm`) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "ppm" | "pnm")
                )
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 5 * 7).map(|i| (i * 37 % 256) as f64 / 255.0).collect();
        let x = FeatureMap::new(3, 5, 7, data).unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &x).unwrap();
            assert_eq!(load_image(&p).unwrap(), x);
        }
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
        assert!(save_image(&dir.path().join("a.bmp"), &x).is_err());
    }
}
