//! In-memory image sets and the per-sample preprocessing pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply, AugmentationPolicy};
use super::image::{resize, short_side_size, resize_and_crop, CropMode, RawImage};
use super::manifest::DatasetManifest;
use super::stats::{compute_stats, standardize, Split, StandardizationStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded images with labels. Images from disk are cached as 8-bit after the
/// short-side resize so a whole dataset fits comfortably in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub class_names: Vec<String>,
    pub images: Vec<RawImage>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(class_names: Vec<String>, images: Vec<RawImage>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_names.len(),
            });
        }
        Ok(ImageSet {
            class_names,
            images,
            labels,
        })
    }

    /// Decodes every manifest entry, resizing so the short side is `short_side`.
    pub fn load(manifest: &DatasetManifest, short_side: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for s in &manifest.samples {
            let raw = RawImage::open(&s.path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", s.path.display())))?;
            images.push(resize_short_side(&raw, short_side)?);
        }
        ImageSet::new(manifest.class_names.clone(), images, manifest.labels())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Standardization statistics over the images at `indices`, which must
    /// be training samples.
    pub fn stats(&self, indices: &[usize], split: Split) -> Result<StandardizationStats> {
        let tensors = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .map(RawImage::to_tensor)
                    .ok_or_else(|| Error::Dataset(format!("sample {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        compute_stats(&tensors, split)
    }
}

pub fn resize_short_side(img: &RawImage, short: usize) -> Result<RawImage> {
    let (h, w) = short_side_size(img.height, img.width, short);
    if (h, w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    RawImage::from_tensor(&resize(&img.to_tensor(), h, w)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Random crop, augmentation, standardization.
    Train,
    /// Center crop and standardization only.
    Validation,
}

/// Turns cached images into standardized model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    mode: PipelineMode,
    resize: usize,
    crop: usize,
    policy: AugmentationPolicy,
    stats: StandardizationStats,
}

/// Independent rng stream for one sample in one epoch, so results do not
/// depend on batch composition or processing order.
pub fn sample_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x1_0000_0000).wrapping_add(index as u64));
    rng
}

impl Pipeline {
    pub fn new(
        mode: PipelineMode,
        resize: usize,
        crop: usize,
        policy: AugmentationPolicy,
        stats: StandardizationStats,
    ) -> Result<Self> {
        policy.validate()?;
        if crop == 0 || crop > resize {
            return Err(Error::Config(format!("crop {crop} must be in 1..={resize}")));
        }
        Ok(Pipeline {
            mode,
            resize,
            crop,
            policy,
            stats,
        })
    }

    pub fn validation(resize: usize, crop: usize, stats: StandardizationStats) -> Result<Self> {
        Self::new(PipelineMode::Validation, resize, crop, AugmentationPolicy::disabled(), stats)
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn stats(&self) -> &StandardizationStats {
        &self.stats
    }

    pub fn crop_mode(&self) -> CropMode {
        match self.mode {
            PipelineMode::Train => CropMode::Random,
            PipelineMode::Validation => CropMode::Center,
        }
    }

    pub fn augments(&self) -> bool {
        self.mode == PipelineMode::Train
    }

    /// `[3,crop,crop]` standardized tensor for one image.
    pub fn prepare(&self, img: &RawImage, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let x = resize_and_crop(&img.to_tensor(), self.resize, self.crop, self.crop_mode(), rng)?;
        let x = if self.augments() {
            apply(&x, &self.policy.sample(rng))?
        } else {
            x
        };
        standardize(&x, &self.stats)
    }

    /// `[N,3,crop,crop]` batch plus labels for the samples at `indices`.
    pub fn batch(&self, set: &ImageSet, indices: &[usize], seed: u64, epoch: u64) -> Result<(Tensor, Vec<usize>)> {
        let mut items = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = set
                .images
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("sample {i} out of range")))?;
            items.push(self.prepare(img, &mut sample_rng(seed, epoch, i))?);
            labels.push(set.labels[i]);
        }
        Ok((Tensor::stack(&items)?, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synthetic_shapes;

    #[test]
    fn validation_pipeline_is_center_crop_and_standardize_only() {
        let set = synthetic_shapes(6, 20, 0).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let stats = set.stats(&all, Split::Train).unwrap();
        let p = Pipeline::validation(20, 16, stats.clone()).unwrap();
        assert!(!p.augments());
        assert_eq!(p.crop_mode(), CropMode::Center);
        let (a, _) = p.batch(&set, &all, 1, 0).unwrap();
        let (b, _) = p.batch(&set, &all, 99, 7).unwrap();
        assert_eq!(a, b);
        let mut rng = sample_rng(0, 0, 0);
        let manual = resize_and_crop(&set.images[0].to_tensor(), 20, 16, CropMode::Center, &mut rng).unwrap();
        let manual = standardize(&manual, &stats).unwrap();
        assert_eq!(&a.data()[..manual.numel()], manual.data());
    }

    #[test]
    fn training_batches_are_seeded_per_sample() {
        let set = synthetic_shapes(6, 20, 0).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let stats = set.stats(&all, Split::Train).unwrap();
        let p = Pipeline::new(PipelineMode::Train, 20, 16, AugmentationPolicy::default(), stats).unwrap();
        let (a, la) = p.batch(&set, &[0, 1, 2], 5, 1).unwrap();
        let (b, _) = p.batch(&set, &[2, 1, 0], 5, 1).unwrap();
        let per = 3 * 16 * 16;
        assert_eq!(&a.data()[..per], &b.data()[2 * per..]);
        assert_eq!(la, vec![0, 1, 2]);
        let (c, _) = p.batch(&set, &[0, 1, 2], 5, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stats_reject_validation() {
        let set = synthetic_shapes(3, 16, 0).unwrap();
        assert!(set.stats(&[0, 1], Split::Validation).is_err());
        assert!(set.stats(&[5], Split::Train).is_err());
    }
}
