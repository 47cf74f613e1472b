//! The toy two-domain world: shape images, their edge sketches, and the
//! feature extractors that compare them.

mod classifier;
mod converter;
mod dataset;
mod features;
pub mod pgm;

pub use classifier::{train_classifier, ClassifierTrainConfig, NoisyClassifier, FEATURE_DIM};
pub use converter::{to_sketch, to_sketch_var, SketchConverter};
pub use dataset::{class_name, gen_dataset, render_shape};
pub use features::{FeaturePyramid, SketchFeatureExtractor};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of every raster.
pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["ellipse", "rectangle", "triangle", "annulus"];

/// Per-sample raster shape `[1, 32, 32]`.
pub fn raster_shape() -> Vec<usize> {
    vec![1, IMAGE_SIZE, IMAGE_SIZE]
}

/// A labelled image with pixels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub raster: Tensor,
    pub label: usize,
}

impl ToyImage {
    pub fn new(raster: Tensor, label: usize) -> Result<Self> {
        check_raster(&raster, "image")?;
        if label >= NUM_CLASSES {
            return Err(Error::InvalidLabel {
                label,
                classes: NUM_CLASSES,
            });
        }
        let raster = raster.reshape(raster_shape())?.map(|v| v.clamp(-1.0, 1.0));
        Ok(Self { raster, label })
    }
}

/// A stroke raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    pub raster: Tensor,
}

impl Sketch {
    /// Validates shape and range; values are not silently clamped.
    pub fn new(raster: Tensor) -> Result<Self> {
        check_raster(&raster, "sketch")?;
        if let Some(v) = raster.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Raster(format!("sketch value {v} outside [0, 1]")));
        }
        Ok(Self {
            raster: raster.reshape(raster_shape())?,
        })
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(Error::Raster(format!(
                "expected {} values, got {}",
                IMAGE_SIZE * IMAGE_SIZE,
                values.len()
            )));
        }
        Self::new(Tensor::from_parts(raster_shape(), values))
    }

    pub fn of_image(image: &ToyImage) -> Self {
        Self {
            raster: to_sketch(&image.raster.reshape([1, 1, IMAGE_SIZE, IMAGE_SIZE]).expect("raster"))
                .reshape(raster_shape())
                .expect("raster"),
        }
    }
}

fn check_raster(raster: &Tensor, what: &str) -> Result<()> {
    if raster.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::Raster(format!(
            "{what} must be {IMAGE_SIZE}x{IMAGE_SIZE}, got shape {:?}",
            raster.shape()
        )));
    }
    if !raster.is_finite() {
        return Err(Error::Raster(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Stacks images into a `[N, 1, 32, 32]` batch.
pub fn image_batch(images: &[ToyImage]) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * IMAGE_SIZE * IMAGE_SIZE);
    for im in images {
        data.extend_from_slice(im.raster.data());
    }
    Tensor::new(vec![images.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data).expect("nonempty image batch")
}

pub fn labels_of(images: &[ToyImage]) -> Vec<usize> {
    images.iter().map(|im| im.label).collect()
}
