//! Paired-digit dataset composition.
//!
//! Each training sample is two distinct-class digits placed side by side on
//! a double-width canvas, with the multi-hot condition naming the two
//! classes. Pixels are normalized from bytes to [-1, 1] to match the
//! generator's tanh output range.

use crate::condition::{ConditionSchema, ConditionVector};
use crate::idx::{IdxError, IdxImages};
use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("class {0} has no exemplars; every class needs at least one")]
    EmptyPool(usize),
    #[error("pair ({0}, {1}) must name two distinct classes under the schema")]
    BadPair(usize, usize),
}

/// Maps a stored byte to the network's pixel range: 0 -> -1.0, 255 -> 1.0.
pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Uniform draw over ordered distinct class pairs. The draw order (left
/// class, then right over the remaining classes) is pinned: composition and
/// the training loop's fake conditions must consume the RNG identically.
pub fn sample_distinct_pair(num_classes: usize, rng: &mut impl Rng) -> (usize, usize) {
    assert!(num_classes >= 2);
    let left = rng.random_range(0..num_classes);
    let mut right = rng.random_range(0..num_classes - 1);
    if right >= left {
        right += 1;
    }
    (left, right)
}

/// Inverse of [`normalize_pixel`], rounding to the nearest byte.
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// One composed training sample: a two-digit canvas plus its condition.
#[derive(Debug, Clone)]
pub struct ComposedSample {
    /// Shape (1, rows, 2*cols), values in [-1, 1].
    pub image: Array3<f32>,
    pub condition: ConditionVector,
    pub left_class: usize,
    pub right_class: usize,
}

/// Source pool of labeled single digits, indexed by class.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    schema: ConditionSchema,
    images: IdxImages,
    labels: Vec<u8>,
    pools: Vec<Vec<usize>>,
}

impl PairedDataset {
    pub fn new(
        images: IdxImages,
        labels: Vec<u8>,
        schema: ConditionSchema,
    ) -> Result<Self, DatasetError> {
        if images.count != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.count,
                labels: labels.len(),
            });
        }
        let c = schema.num_classes();
        let mut pools = vec![Vec::new(); c];
        for (index, &label) in labels.iter().enumerate() {
            if (label as usize) >= c {
                return Err(DatasetError::LabelOutOfRange {
                    index,
                    label,
                    num_classes: c,
                });
            }
            pools[label as usize].push(index);
        }
        if let Some(class) = pools.iter().position(|p| p.is_empty()) {
            return Err(DatasetError::EmptyPool(class));
        }
        Ok(Self {
            schema,
            images,
            labels,
            pools,
        })
    }

    pub fn from_files(
        image_path: &Path,
        label_path: &Path,
        schema: ConditionSchema,
    ) -> Result<Self, DatasetError> {
        let images = crate::idx::read_images(image_path)?;
        let labels = crate::idx::read_labels(label_path)?;
        Self::new(images, labels, schema)
    }

    pub fn schema(&self) -> &ConditionSchema {
        &self.schema
    }

    pub fn exemplar_count(&self) -> usize {
        self.images.count
    }

    pub fn digit_rows(&self) -> usize {
        self.images.rows
    }

    pub fn digit_cols(&self) -> usize {
        self.images.cols
    }

    /// Height and width of a composed canvas.
    pub fn canvas_shape(&self) -> (usize, usize) {
        (self.images.rows, self.images.cols * 2)
    }

    pub fn digit_label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// A single normalized digit, shape (rows, cols).
    pub fn digit_image(&self, i: usize) -> Array2<f32> {
        let raw = self.images.image(i);
        Array2::from_shape_fn((self.images.rows, self.images.cols), |(r, c)| {
            normalize_pixel(raw[r * self.images.cols + c])
        })
    }

    /// Composes `n` samples. Per sample the draw order is fixed: left class,
    /// right class (uniform over the remaining classes), left exemplar,
    /// right exemplar. Callers get reproducibility by seeding `rng`.
    pub fn compose(&self, n: usize, rng: &mut impl Rng) -> Vec<ComposedSample> {
        let c = self.schema.num_classes();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (left_class, right_class) = sample_distinct_pair(c, rng);
            out.push(self.compose_one(left_class, right_class, rng));
        }
        out
    }

    /// Composes `n` samples that all carry the same unordered class pair;
    /// left/right placement is drawn per sample. Builds real reference
    /// batches matched to a single evaluation condition.
    pub fn compose_pair(
        &self,
        a: usize,
        b: usize,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<ComposedSample>, DatasetError> {
        let c = self.schema.num_classes();
        if a == b || a >= c || b >= c {
            return Err(DatasetError::BadPair(a, b));
        }
        Ok((0..n)
            .map(|_| {
                let (left, right) = if rng.random::<bool>() { (a, b) } else { (b, a) };
                self.compose_one(left, right, rng)
            })
            .collect())
    }

    /// Draw order per sample: left exemplar, then right exemplar.
    fn compose_one(
        &self,
        left_class: usize,
        right_class: usize,
        rng: &mut impl Rng,
    ) -> ComposedSample {
        let (rows, cols) = (self.images.rows, self.images.cols);
        let left_pool = &self.pools[left_class];
        let right_pool = &self.pools[right_class];
        let left = left_pool[rng.random_range(0..left_pool.len())];
        let right = right_pool[rng.random_range(0..right_pool.len())];

        let mut image = Array3::zeros((1, rows, cols * 2));
        let left_raw = self.images.image(left);
        let right_raw = self.images.image(right);
        for r in 0..rows {
            for k in 0..cols {
                image[[0, r, k]] = normalize_pixel(left_raw[r * cols + k]);
                image[[0, r, cols + k]] = normalize_pixel(right_raw[r * cols + k]);
            }
        }
        let condition = ConditionVector::from_classes([left_class, right_class], &self.schema)
            .expect("classes drawn in range");
        ComposedSample {
            image,
            condition,
            left_class,
            right_class,
        }
    }
}

/// A minibatch ready for the networks: stacked images plus conditions.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// Shape (batch, 1, rows, cols).
    pub images: Array4<f32>,
    pub conditions: Vec<ConditionVector>,
}

impl LabeledBatch {
    pub fn from_samples(samples: &[ComposedSample]) -> Self {
        assert!(!samples.is_empty(), "batch must be non-empty");
        let shape = samples[0].image.dim();
        let mut images = Array4::zeros((samples.len(), shape.0, shape.1, shape.2));
        let mut conditions = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            images.slice_mut(s![i, .., .., ..]).assign(&sample.image);
            conditions.push(sample.condition.clone());
        }
        Self { images, conditions }
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// Conditions stacked as a (batch, classes) matrix of 0.0/1.0.
    pub fn condition_matrix(&self) -> Array2<f32> {
        crate::condition::condition_matrix(&self.conditions)
    }
}
