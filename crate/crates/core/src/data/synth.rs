//! Synthetic colored-shape images for desk-scale runs.
//!
//! Class 0 is a red disk, class 1 a green square, class 2 a blue triangle,
//! each at a random position and size on a noisy gray background. The
//! dominant color alone separates the classes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::ImageSet;
use super::image::RawImage;
use crate::error::{Error, Result};

pub const SHAPE_CLASSES: [&str; 3] = ["disk", "square", "triangle"];

const COLORS: [[f64; 3]; 3] = [[0.85, 0.15, 0.1], [0.1, 0.8, 0.2], [0.15, 0.2, 0.9]];

fn inside(class: usize, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match class {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        // Upward triangle: apex at top, base at cy + r.
        _ => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// One `size×size` image of `class`.
pub fn shape_image<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Result<RawImage> {
    if class >= SHAPE_CLASSES.len() || size < 8 {
        return Err(Error::Dataset(format!("bad synthetic request: class {class}, size {size}")));
    }
    let s = size as f64;
    let r = s * rng.random_range(0.22..0.32);
    let cy = rng.random_range(r..s - r);
    let cx = rng.random_range(r..s - r);
    let bg = rng.random_range(0.35..0.65);
    let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-0.08..0.08)).collect();
    let plane = size * size;
    let mut data = vec![0u8; 3 * plane];
    for i in 0..size {
        for j in 0..size {
            let hit = inside(class, i as f64 + 0.5, j as f64 + 0.5, cy, cx, r);
            for c in 0..3 {
                let noise = rng.random_range(-0.05..0.05);
                let v = if hit { COLORS[class][c] + jitter[c] } else { bg } + noise;
                data[c * plane + i * size + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    RawImage::new(size, size, data)
}

/// `n` images, labels cycling 0,1,2,… so classes stay balanced.
pub fn synthetic_shapes(n: usize, size: usize, seed: u64) -> Result<ImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SHAPE_CLASSES.len();
        images.push(shape_image(label, size, &mut rng)?);
        labels.push(label);
    }
    ImageSet::new(SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(), images, labels)
}

/// Writes a set as `root/<class>/<index>.png`, the layout `load_manifest` reads.
pub fn write_image_tree(set: &ImageSet, root: &Path) -> Result<()> {
    for name in &set.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for (i, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
        img.save_png(&root.join(&set.class_names[label]).join(format!("{i:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synthetic_shapes(30, 16, 3).unwrap();
        let b = synthetic_shapes(30, 16, 3).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
    }

    #[test]
    fn dominant_color_matches_class() {
        let set = synthetic_shapes(30, 32, 11).unwrap();
        for (img, &label) in set.images.iter().zip(&set.labels) {
            let plane = 32 * 32;
            // Channel with the largest total deviation above the background.
            let score: Vec<i64> = (0..3)
                .map(|c| img.data[c * plane..(c + 1) * plane].iter().map(|&v| v as i64).sum::<i64>())
                .collect();
            let others: Vec<i64> = (0..3).filter(|&c| c != label).map(|c| score[c]).collect();
            assert!(others.iter().all(|&o| score[label] > o), "label {label}: {score:?}");
        }
    }
}
