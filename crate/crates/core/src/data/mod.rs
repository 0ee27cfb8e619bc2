//! Datasets: synthetic generators, binary image-batch ingestion, splits,
//! augmentation, and checkpointing.

mod checkpoint;
mod image;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use image::load_image_batches;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MatError, Result};
use crate::model::InputShape;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// A labelled dataset with inputs in `[0, 1]^d`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub shape: InputShape,
    pub split: SplitTag,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        shape: InputShape,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(MatError::shape(
                "dataset",
                format!("{} labels", inputs.nrows()),
                format!("{}", labels.len()),
            ));
        }
        if inputs.ncols() != shape.dim() {
            return Err(MatError::shape(
                "dataset",
                format!("{} features", shape.dim()),
                format!("{}", inputs.ncols()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MatError::LabelOutOfRange { label: bad, classes: num_classes });
        }
        if !inputs.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(MatError::Numeric("dataset inputs escape [0, 1]".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            shape,
            split: SplitTag::Train,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        let inputs = Array2::from_shape_fn((indices.len(), self.inputs.ncols()), |(i, j)| {
            self.inputs[[indices[i], j]]
        });
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            shape: self.shape,
            split,
            provenance: self.provenance.clone(),
        }
    }

    /// Split into disjoint parts covering the whole dataset, by seeded
    /// shuffle. Fractions must sum to 1; parts are tagged train/val/test in
    /// order.
    pub fn split_fractions(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
        if fractions.is_empty() || fractions.len() > 3 {
            return Err(MatError::Config("split needs 1 to 3 fractions".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return Err(MatError::Config(format!(
                "split fractions must be non-negative and sum to 1, got {fractions:?}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = substream(seed, Stream::Split, &[self.len() as u64]);
        shuffle(&mut order, &mut rng);

        let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        for (i, &f) in fractions.iter().enumerate() {
            let count = if i + 1 == fractions.len() {
                self.len() - start
            } else {
                (f * self.len() as f64).round() as usize
            };
            out.push(self.subset(&order[start..start + count], tags[i]));
            start += count;
        }
        Ok(out)
    }

    /// Euclidean distance between the two class-mean inputs; the natural
    /// scale for perturbation budgets on synthetic two-class data.
    pub fn class_gap(&self) -> Result<f64> {
        if self.num_classes != 2 {
            return Err(MatError::Config(format!(
                "class gap is defined for 2 classes, dataset has {}",
                self.num_classes
            )));
        }
        let d = self.inputs.ncols();
        let mut means = [vec![0.0f64; d], vec![0.0f64; d]];
        let mut counts = [0usize; 2];
        for (row, &label) in self.inputs.rows().into_iter().zip(&self.labels) {
            counts[label] += 1;
            for (m, &v) in means[label].iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        if counts[0] == 0 || counts[1] == 0 {
            return Err(MatError::Config("class gap needs both classes present".into()));
        }
        let mut gap = 0.0;
        for j in 0..d {
            let diff = means[0][j] / counts[0] as f64 - means[1][j] / counts[1] as f64;
            gap += diff * diff;
        }
        Ok(gap.sqrt())
    }
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    TwoGaussians,
    Spirals,
}

/// Geometry of the two-Gaussians generator.
///
/// The class centers sit at `0.5 +- delta/2` with
/// `delta = (strong_gap, weak_gap, ..., weak_gap)`: one strongly separated
/// coordinate plus `dim - 1` weakly separated ones. Weak coordinates carry
/// real signal for clean accuracy but are indefensible once the perturbation
/// budget exceeds their separation, so adversarial and natural training pull
/// toward visibly different solutions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TwoGaussians {
    pub dim: usize,
    pub strong_gap: f64,
    pub weak_gap: f64,
    pub sigma: f64,
}

impl Default for TwoGaussians {
    fn default() -> Self {
        TwoGaussians {
            dim: 32,
            strong_gap: 0.3,
            weak_gap: 0.05,
            sigma: 0.05,
        }
    }
}

/// Deterministic synthetic dataset with default geometry; class-balanced
/// within one example.
pub fn make_synthetic(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    match kind {
        SynthKind::TwoGaussians => two_gaussians(n, seed, TwoGaussians::default()),
        SynthKind::Spirals => spirals(n, seed),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random_range(0.0..1.0f64);
    let u2: f64 = rng.random_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Two isotropic Gaussian blobs clipped into the unit cube, labels
/// alternating for exact balance.
pub fn two_gaussians(n: usize, seed: u64, geom: TwoGaussians) -> Result<Dataset> {
    if n < 2 {
        return Err(MatError::Config(format!("synthetic dataset needs n >= 2, got {n}")));
    }
    if geom.dim == 0 {
        return Err(MatError::Config("two-gaussians needs at least one dimension".into()));
    }
    let mut rng = substream(seed, Stream::Data, &[0]);
    let mut inputs = Array2::<f64>::zeros((n, geom.dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let side = if label == 0 { -0.5 } else { 0.5 };
        for j in 0..geom.dim {
            let gap = if j == 0 { geom.strong_gap } else { geom.weak_gap };
            let center = 0.5 + side * gap;
            inputs[[i, j]] = (center + geom.sigma * gaussian(&mut rng)).clamp(0.0, 1.0);
        }
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2, InputShape::flat(geom.dim), "two-gaussians")
}

/// Two interleaved spirals in the unit square with mild radial noise.
pub fn spirals(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(MatError::Config(format!("synthetic dataset needs n >= 2, got {n}")));
    }
    let mut rng = substream(seed, Stream::Data, &[1]);
    let mut inputs = Array2::<f64>::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t: f64 = rng.random_range(0.25..1.0f64) * 2.5 * std::f64::consts::PI;
        let r = 0.42 * t / (2.5 * std::f64::consts::PI) + 0.01 * gaussian(&mut rng);
        let phase = t + label as f64 * std::f64::consts::PI;
        inputs[[i, 0]] = (0.5 + r * phase.cos()).clamp(0.0, 1.0);
        inputs[[i, 1]] = (0.5 + r * phase.sin()).clamp(0.0, 1.0);
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2, InputShape::flat(2), "spirals")
}

/// Augmentation settings: horizontal flip plus pad-and-random-crop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentOps {
    pub flip_prob: f64,
    pub pad: usize,
}

impl Default for AugmentOps {
    fn default() -> Self {
        AugmentOps { flip_prob: 0.5, pad: 4 }
    }
}

/// Apply flip/crop augmentation to an image-shaped batch. Output shape equals
/// input shape and values stay in `[0, 1]`; deterministic given the generator
/// state. Flat-shaped data is rejected when a crop is requested.
pub fn augment(
    batch: &Array2<f64>,
    shape: InputShape,
    ops: AugmentOps,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let (c, h, w) = match shape {
        InputShape::Image { channels, height, width } => (channels, height, width),
        InputShape::Flat { .. } => {
            if ops.pad > 0 {
                return Err(MatError::Config(
                    "crop augmentation requires image-shaped inputs".into(),
                ));
            }
            (1, 1, batch.ncols())
        }
    };
    if batch.ncols() != c * h * w {
        return Err(MatError::shape(
            "augment",
            format!("{} features", c * h * w),
            format!("{}", batch.ncols()),
        ));
    }
    let mut out = batch.clone();
    let at = |row: &ndarray::ArrayView1<f64>, ch: usize, y: usize, x: usize| row[(ch * h + y) * w + x];
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let flip = rng.random_range(0.0..1.0f64) < ops.flip_prob;
        let (dy, dx) = if ops.pad > 0 {
            (
                rng.random_range(0..=2 * ops.pad),
                rng.random_range(0..=2 * ops.pad),
            )
        } else {
            (ops.pad, ops.pad)
        };
        let src = batch.row(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    // Position in the edge-replicated padded image.
                    let py = (y as isize + dy as isize - ops.pad as isize).clamp(0, h as isize - 1);
                    let px = (sx as isize + dx as isize - ops.pad as isize).clamp(0, w as isize - 1);
                    row[(ch * h + y) * w + x] = at(&src, ch, py as usize, px as usize);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
