//! Synthetic labelled shapes, corpus folders and training-time augmentation.
//!
//! A corpus directory holds image files plus `manifest.tsv`, one
//! `file<TAB>label` line per image.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng as _, SeedableRng};

use crate::error::{Result, StarError};
use crate::image::Image;
use crate::params::Rng;

pub const MANIFEST: &str = "manifest.tsv";
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub file: String,
    pub image: Image,
    pub label: usize,
}

fn inside(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.6 * (dy + r),
        _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One shape image of class `class`. Pixel values are multiples of 1/255
/// so 8-bit files store them exactly.
pub fn shape_image(class: usize, size: usize, channels: usize, rng: &mut Rng) -> Result<Image> {
    let s = size as f32;
    let cx = rng.random_range(0.35 * s..0.65 * s);
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let r = rng.random_range(0.22 * s..0.34 * s);
    let fg: Vec<f32> = (0..channels).map(|_| rng.random_range(0.55..1.0)).collect();
    let bg: Vec<f32> = (0..channels).map(|_| rng.random_range(0.0..0.35)).collect();
    let noise: Vec<f32> = (0..size * size * channels)
        .map(|_| rng.random_range(-0.04..0.04))
        .collect();
    Image::from_fn(size, size, channels, |row, col, k| {
        // 2x2 supersampling for soft edges
        let mut cover = 0.0;
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            if inside(class, col as f32 + ox - cx, row as f32 + oy - cy, r) {
                cover += 0.25;
            }
        }
        let v = fg[k] * cover + bg[k] * (1.0 - cover) + noise[(row * size + col) * channels + k];
        quantize(v)
    })
}

/// `count` images with labels cycling through `classes`, so every class
/// gets `count / classes` images (the first `count % classes` one more).
pub fn synthesize(
    count: usize,
    size: usize,
    channels: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if classes == 0 || classes > SHAPES.len() {
        return Err(StarError::InvalidArgument(format!(
            "classes must be 1..=4, got {classes}"
        )));
    }
    let ext = if channels == 3 { "ppm" } else { "raw" };
    let mut rng = Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = i % classes;
            Ok(Sample {
                file: format!("img_{i:05}_{}.{ext}", SHAPES[label]),
                image: shape_image(label, size, channels, &mut rng)?,
                label,
            })
        })
        .collect()
}

pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in samples {
        s.image.save(&dir.join(&s.file))?;
        writeln!(manifest, "{}\t{}", s.file, s.label).expect("string write");
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| StarError::InvalidArgument(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            let (file, label) = l.split_once('\t').ok_or_else(|| {
                StarError::InvalidArgument(format!(
                    "{MANIFEST} line {}: expected file<TAB>label",
                    n + 1
                ))
            })?;
            let label = label.trim().parse().map_err(|_| {
                StarError::InvalidArgument(format!("{MANIFEST} line {}: bad label", n + 1))
            })?;
            Ok((file.to_string(), label))
        })
        .collect()
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|(file, label)| {
            let image = Image::load(&dir.join(&file))?;
            Ok(Sample { file, image, label })
        })
        .collect()
}

/// Random resized crop (area fraction in `[min_scale, 1]`, aspect ratio in
/// `[3/4, 4/3]`) back to the input size, then a horizontal flip with
/// probability ½.
pub fn augment(image: &Image, min_scale: f64, rng: &mut Rng) -> Image {
    let (h, w) = (image.height() as f64, image.width() as f64);
    let area = h * w;
    let mut window = (0.0, 0.0, h, w);
    for _ in 0..10 {
        let target = area * rng.random_range(min_scale..=1.0);
        let ratio = rng
            .random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln())
            .exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h {
            let top = rng.random_range(0.0..=h - ch);
            let left = rng.random_range(0.0..=w - cw);
            window = (top, left, ch, cw);
            break;
        }
    }
    let out = image.crop_resize(
        window.0 as f32,
        window.1 as f32,
        window.2 as f32,
        window.3 as f32,
        image.height(),
        image.width(),
    );
    if rng.random_bool(0.5) {
        out.flip_horizontal()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_images() {
        let a = synthesize(8, 16, 3, 4, 7).unwrap();
        let b = synthesize(8, 16, 3, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize(8, 16, 3, 4, 8).unwrap());
    }

    #[test]
    fn classes_are_balanced() {
        let s = synthesize(400, 8, 1, 4, 0).unwrap();
        for c in 0..4 {
            assert_eq!(s.iter().filter(|x| x.label == c).count(), 100);
        }
    }

    #[test]
    fn corpus_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthesize(6, 16, 3, 4, 1).unwrap();
        write_corpus(dir.path(), &s).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), s);
        let g = synthesize(3, 8, 1, 2, 1).unwrap();
        write_corpus(dir.path(), &g).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), g);
    }

    #[test]
    fn empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap(),
            ""
        );
        assert!(read_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn augmentation_keeps_geometry_and_range() {
        let img = synthesize(1, 16, 3, 4, 3).unwrap().remove(0).image;
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..20 {
            let out = augment(&img, 0.2, &mut rng);
            assert_eq!((out.height(), out.width(), out.channels()), (16, 16, 3));
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // full-scale window without flip reproduces the image
        let same = img.crop_resize(0.0, 0.0, 16.0, 16.0, 16, 16);
        assert!(same
            .pixels()
            .iter()
            .zip(img.pixels())
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
