//! Synthetic domain-shifted detection data and its on-disk format.

mod io;
mod render;

pub use io::{load_dataset, save_dataset};
pub use render::{
    apply_fog, depth_ramp, gen_gaussian_pair, gen_shapes_dataset, make_domain_pair, quantize, render_sample, DomainParams,
    Scenario, Shape, ShapeKind,
};


use crate::detector::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// One image `[C, H, W]` in `[0, 1]` with its boxes and class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl DetectionSample {
    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth {
            boxes: &self.boxes,
            labels: &self.labels,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<DetectionSample>,
}

impl Dataset {
    pub fn new(samples: Vec<DetectionSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[C, H, W]` of the first image.
    pub fn image_shape(&self) -> Result<[usize; 3]> {
        let s = self.samples.first().ok_or(Error::EmptyDataset)?.image.shape();
        Ok([s[0], s[1], s[2]])
    }

    /// Stacks the images at `idx` into `[N, C, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.image_shape()?;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            let s = self.samples.get(i).ok_or_else(|| Error::InvalidArgument(format!("sample {i} out of range")))?;
            if s.image.shape() != [c, h, w] {
                return Err(Error::shape("batch", format!("sample {i} has shape {:?}", s.image.shape())));
            }
            data.extend_from_slice(s.image.data());
        }
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    pub fn ground_truths(&self, idx: &[usize]) -> Vec<GroundTruth<'_>> {
        idx.iter().map(|&i| self.samples[i].ground_truth()).collect()
    }

    /// A new dataset of the first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        Self::new(self.samples.iter().take(n).cloned().collect())
    }
}
