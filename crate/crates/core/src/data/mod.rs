//! Synthetic shapes task, the PMSEG1 dataset format and a PNG importer.

mod convert;
mod format;
mod synthetic;

pub use convert::convert_png_dir;
pub use format::{
    encode_sample, read_dataset, sample_digest, write_dataset, DatasetReader, DatasetWriter, Header, HEADER_LEN, MAGIC,
};
pub use synthetic::{
    generate_sample, generate_samples, generate_scene, render, sample_rng, Scene, Shape, ShapeKind,
    SyntheticTaskConfig,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// One image (`H·W·3` values in `[0, 1]`, row-major, channel last) and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let px = self.height * self.width;
        if self.image.len() != px * 3 || self.labels.len() != px {
            return Err(Error::Dimension {
                op: "sample",
                lhs: vec![self.height, self.width, 3],
                rhs: vec![self.image.len(), self.labels.len()],
            });
        }
        if let Some(&label) = self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::InvalidLabel {
                label: label as usize,
                num_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn synthetic(task: &SyntheticTaskConfig, seed: u64, count: usize) -> Result<Self> {
        task.validate()?;
        Ok(Self {
            height: task.height,
            width: task.width,
            num_classes: task.num_classes,
            samples: generate_samples(task, seed, 0, count),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stacks samples into a `[B, H, W, 3]` image tensor and flat labels.
pub fn collate<'a>(samples: impl IntoIterator<Item = &'a SegSample>) -> Result<(Tensor, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut dims = None;
    let mut batch = 0;
    for s in samples {
        if *dims.get_or_insert((s.height, s.width)) != (s.height, s.width) {
            return Err(Error::contract("samples in a batch must share a size"));
        }
        images.extend(s.image.iter().map(|&v| v as f64));
        labels.extend(s.labels.iter().map(|&l| l as usize));
        batch += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::contract("empty batch"))?;
    Ok((Tensor::new(vec![batch, h, w, 3], images)?, labels))
}
