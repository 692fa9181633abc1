use std::path::Path;

use crate::error::{Error, Result};

/// Side length of the pooled grid; embeddings have `POOLED_SIDE²` values.
pub const POOLED_SIDE: usize = 8;

/// Row-major grayscale raster with intensities in `[0, max_value]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub max_value: f64,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, max_value: f64, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "GrayImage pixels",
                format!("{width}x{height}"),
                pixels.len(),
            ));
        }
        if !(max_value > 0.0) {
            return Err(Error::Argument(format!(
                "max_value must be positive, got {max_value}"
            )));
        }
        Ok(Self {
            width,
            height,
            max_value,
            pixels,
        })
    }
}

/// Reads a grayscale PGM (binary or ASCII).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::new(
        w as usize,
        h as usize,
        255.0,
        img.into_raw().into_iter().map(f64::from).collect(),
    )
}

/// Mean-pools the image onto an 8×8 grid and scales intensities to `[0, 1]`.
/// Cell `(r, c)` covers rows `[r·H/8, (r+1)·H/8)` and the analogous columns.
pub fn pixel_encode(image: &GrayImage) -> Result<Vec<f64>> {
    if image.width < POOLED_SIDE || image.height < POOLED_SIDE {
        return Err(Error::Argument(format!(
            "image is {}x{}, at least {POOLED_SIDE}x{POOLED_SIDE} required",
            image.width, image.height
        )));
    }
    let bounds = |n: usize, k: usize| (k * n / POOLED_SIDE, (k + 1) * n / POOLED_SIDE);
    let mut out = Vec::with_capacity(POOLED_SIDE * POOLED_SIDE);
    for r in 0..POOLED_SIDE {
        let (r0, r1) = bounds(image.height, r);
        for c in 0..POOLED_SIDE {
            let (c0, c1) = bounds(image.width, c);
            let mut sum = 0.0;
            for y in r0..r1 {
                sum += image.pixels[y * image.width + c0..y * image.width + c1]
                    .iter()
                    .sum::<f64>();
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            out.push((sum / count / image.max_value).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_constant_vector() {
        let img = GrayImage::new(13, 9, 255.0, vec![51.0; 13 * 9]).unwrap();
        let v = pixel_encode(&img).unwrap();
        assert_eq!(v.len(), 64);
        assert!(v.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn block_image_pools_to_block_means() {
        // 16x16 made of 2x2 blocks; block (r, c) holds values {a, a+1, a+2, a+3}
        // with a = 4*(8r + c), so its mean is a + 1.5.
        let mut px = vec![0.0; 256];
        for r in 0..8 {
            for c in 0..8 {
                let a = 4.0 * (8 * r + c) as f64;
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    px[(2 * r + dy) * 16 + 2 * c + dx] = a + k as f64;
                }
            }
        }
        let img = GrayImage::new(16, 16, 255.0, px).unwrap();
        let v = pixel_encode(&img).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expected = (4.0 * (8 * r + c) as f64 + 1.5) / 255.0;
                assert!((v[r * 8 + c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn output_is_always_64_long() {
        for (w, h) in [(8, 8), (9, 17), (64, 10)] {
            let img = GrayImage::new(w, h, 255.0, (0..w * h).map(|i| (i % 256) as f64).collect())
                .unwrap();
            assert_eq!(pixel_encode(&img).unwrap().len(), 64);
        }
    }

    #[test]
    fn small_image_is_rejected() {
        let img = GrayImage::new(7, 8, 255.0, vec![0.0; 56]).unwrap();
        assert!(matches!(pixel_encode(&img), Err(Error::Argument(_))));
    }

    #[test]
    fn reads_ascii_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let mut body = String::from("P2\n8 8\n255\n");
        for i in 0..64 {
            body.push_str(&format!("{} ", i * 4));
        }
        std::fs::write(&path, body).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (8, 8));
        let v = pixel_encode(&img).unwrap();
        assert!((v[63] - 252.0 / 255.0).abs() < 1e-15);
    }
}
