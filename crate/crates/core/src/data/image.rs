//! 8-bit grayscale image I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Loads an 8-bit grayscale PNG or PGM as a `1 x size x size` tensor of
/// `v / 255`, area-averaging when the file is not already `size` pixels on a
/// side.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| bad(e.to_string()))?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(bad(format!(
                "expected 8-bit grayscale, found {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    if w != h {
        return Err(bad(format!("image is {w}x{h}, expected a square")));
    }
    let values: Vec<f64> = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let side = w as usize;
    let data = if side == size {
        values
    } else {
        area_resize(&values, side, size)
    };
    Tensor::new(vec![1, size, size], data)
}

/// Box-filter resampling of a square image: each output pixel is the mean of
/// the source area it covers, with fractional overlap at the edges.
pub fn area_resize(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    assert_eq!(src.len(), from * from);
    let scale = from as f64 / to as f64;
    // per output index: (source index, overlap weight) pairs
    let spans: Vec<Vec<(usize, f64)>> = (0..to)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            (a.floor() as usize..(b.ceil() as usize).min(from))
                .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)) / scale))
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect();
    let mut out = vec![0.0; to * to];
    for (oy, ys) in spans.iter().enumerate() {
        for (ox, xs) in spans.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, wy) in ys {
                for &(x, wx) in xs {
                    acc += wy * wx * src[y * from + x];
                }
            }
            out[oy * to + ox] = acc;
        }
    }
    out
}

/// Converts `[0, 1]` values back to 8-bit levels, rounding and clamping.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn save_gray(path: &Path, side: usize, pixels: Vec<u8>) -> Result<()> {
    let img =
        GrayImage::from_raw(side as u32, side as u32, pixels).ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            reason: "pixel buffer does not match dimensions".into(),
        })?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    img.save_with_format(path, format)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_and_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        save_gray(&p, 4, vec![0; 16]).unwrap();
        assert!(load_image(&p, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let mut px = vec![0; 16];
        px[5] = 255;
        save_gray(&p, 4, px).unwrap();
        assert_eq!(load_image(&p, 4).unwrap().data()[5], 1.0);
    }

    #[test]
    fn downscale_averages_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.pgm");
        let px: Vec<u8> = (0..128 * 128)
            .map(|i| ((i * 31 + i / 128 * 7) % 256) as u8)
            .collect();
        save_gray(&p, 128, px.clone()).unwrap();
        let t = load_image(&p, 64).unwrap();
        assert_eq!(t.shape(), &[1, 64, 64]);
        for oy in 0..64 {
            for ox in 0..64 {
                let block: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| px[(2 * oy + dy) * 128 + 2 * ox + dx] as f64 / 255.0)
                    .sum::<f64>()
                    / 4.0;
                assert!((t.data()[oy * 64 + ox] - block).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fractional_resize_preserves_mean() {
        let src: Vec<f64> = (0..49).map(|v| v as f64 / 49.0).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for to in [3, 5, 10] {
            assert!((mean(&area_resize(&src, 7, to)) - mean(&src)).abs() < 1e-12);
        }
    }

    #[test]
    fn color_and_non_square_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::new(4, 4).save(&p).unwrap();
        assert!(matches!(load_image(&p, 4), Err(Error::Image { .. })));
        let p = dir.path().join("wide.png");
        GrayImage::new(4, 2).save(&p).unwrap();
        assert!(matches!(load_image(&p, 4), Err(Error::Image { .. })));
        assert!(matches!(
            load_image(&dir.path().join("missing.png"), 4),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn quantize_round_trips_levels() {
        let levels: Vec<f64> = (0..=255).map(|v| v as f64 / 255.0).collect();
        assert_eq!(quantize(&levels), (0..=255).collect::<Vec<u8>>());
    }
}
