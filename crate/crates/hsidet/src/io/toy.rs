//! Synthetic toy dataset: dark noisy backgrounds with bright axis-aligned
//! rectangles standing in for ships, plus exact box annotations. Used for
//! desk-scale overfit experiments and the acceptance suite.

use std::path::Path;

use rand::Rng;

use super::annotations::AnnotationRecord;
use super::image::RgbImage;
use crate::error::{Error, Result};
use crate::nn::test_rng;

/// Generated images plus their annotations (paths relative to a dataset dir).
pub struct ToyDataset {
    pub images: Vec<RgbImage>,
    pub annotations: Vec<AnnotationRecord>,
    pub image_size: usize,
}

/// Deterministically generate `count` images of `image_size`² pixels with
/// 1–3 bright rectangles of 4–20 px per side, fully inside the image.
pub fn make_toy_dataset(count: usize, image_size: usize, seed: u64) -> Result<ToyDataset> {
    if image_size % 32 != 0 || image_size == 0 {
        return Err(Error::InvalidSpec(format!(
            "toy image size must be a positive multiple of 32, got {image_size}"
        )));
    }
    let mut rng = test_rng(seed);
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    for index in 0..count {
        let mut pixels = vec![0u8; image_size * image_size * 3];
        // Dark sea-noise background.
        for chunk in pixels.chunks_exact_mut(3) {
            let base = rng.gen_range(8u8..40);
            chunk[0] = base.saturating_sub(rng.gen_range(0..6));
            chunk[1] = base;
            chunk[2] = base.saturating_add(rng.gen_range(0..12));
        }
        let path = format!("toy_{index:04}.ppm");
        let ships = rng.gen_range(1..=3usize);
        for _ in 0..ships {
            let w = rng.gen_range(4..=20usize);
            let h = rng.gen_range(4..=20usize);
            let x0 = rng.gen_range(0..=image_size - w);
            let y0 = rng.gen_range(0..=image_size - h);
            let brightness = rng.gen_range(200u8..=255);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let i = (y * image_size + x) * 3;
                    pixels[i] = brightness;
                    pixels[i + 1] = brightness;
                    pixels[i + 2] = brightness.saturating_sub(rng.gen_range(0..20));
                }
            }
            annotations.push(AnnotationRecord {
                path: path.clone(),
                class: 0,
                cx: (x0 as f64 + w as f64 / 2.0) / image_size as f64,
                cy: (y0 as f64 + h as f64 / 2.0) / image_size as f64,
                w: w as f64 / image_size as f64,
                h: h as f64 / image_size as f64,
            });
        }
        images.push(RgbImage::new(image_size, image_size, pixels)?);
    }
    Ok(ToyDataset {
        images,
        annotations,
        image_size,
    })
}

impl ToyDataset {
    /// Write images as PPM plus `annotations.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, image) in self.images.iter().enumerate() {
            let path = dir.join(format!("toy_{i:04}.ppm"));
            std::fs::write(path, super::image::encode_ppm(image))?;
        }
        super::annotations::write_annotations(&dir.join("annotations.csv"), &self.annotations)
    }

    /// Ground-truth boxes of one image, in pixels.
    pub fn gt_boxes(&self, index: usize) -> Vec<crate::detect::GtBox> {
        let name = format!("toy_{index:04}.ppm");
        let s = self.image_size as f64;
        self.annotations
            .iter()
            .filter(|a| a.path == name)
            .map(|a| crate::detect::GtBox {
                image: index,
                class: a.class,
                cx: a.cx * s,
                cy: a.cy * s,
                w: a.w * s,
                h: a.h * s,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::annotations::{format_annotations, parse_annotations};

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = make_toy_dataset(4, 96, 42).unwrap();
        let b = make_toy_dataset(4, 96, 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.annotations, b.annotations);
        let c = make_toy_dataset(4, 96, 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn boxes_stay_inside_and_round_trip_annotations() {
        let ds = make_toy_dataset(8, 128, 7).unwrap();
        assert!(ds.annotations.len() >= 8);
        for a in &ds.annotations {
            assert!(a.cx - a.w / 2.0 >= -1e-9);
            assert!(a.cx + a.w / 2.0 <= 1.0 + 1e-9);
            assert!(a.cy - a.h / 2.0 >= -1e-9);
            assert!(a.cy + a.h / 2.0 <= 1.0 + 1e-9);
        }
        let text = format_annotations(&ds.annotations);
        let back = parse_annotations(&text).unwrap();
        assert_eq!(back, ds.annotations);
    }

    #[test]
    fn rejects_bad_image_size() {
        assert!(make_toy_dataset(2, 100, 1).is_err());
    }
}
