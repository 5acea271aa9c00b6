//! Dataset ingestion and seeded batching.
//!
//! Every sample keeps its original RGB pixels for evaluation alongside the
//! normalized `(L', ab')` planes the networks consume. The grayscale
//! condition is the L\* channel of the color image itself.

mod batch;
mod cifar;
mod imagedir;
pub mod synth;

pub use batch::{Batch, BatchPlan};
pub use cifar::{load_cifar10, parse_cifar_records, write_cifar_records, CifarSplit, CIFAR_RECORD, CIFAR_SIDE};
pub use imagedir::{center_crop, fit_square, load_image_dir, read_rgb, resize_bilinear, write_png};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::colorspace::{normalize, rgb_to_lab, NormalizedSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub norm: NormalizedSample,
    pub rgb: RgbImage,
}

impl Sample {
    pub fn from_rgb(rgb: RgbImage) -> Self {
        Self {
            norm: normalize(&rgb_to_lab(&rgb)),
            rgb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Dir,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "dir" => Ok(DatasetKind::Dir),
            other => Err(format!("unknown dataset kind `{other}` (expected cifar10 or dir)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: String,
    pub image_size: usize,
    pub samples: Vec<Sample>,
    /// `SKIP <path> <reason>` lines for files that could not be used.
    pub report: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from square images of one size.
    pub fn from_images(source: impl Into<String>, images: Vec<RgbImage>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let size = first.width() as usize;
        if let Some(bad) = images.iter().find(|im| im.width() as usize != size || im.height() as usize != size) {
            return Err(Error::Config(format!(
                "all samples must be {size}x{size}, found {}x{}",
                bad.width(),
                bad.height()
            )));
        }
        Ok(Self {
            source: source.into(),
            image_size: size,
            samples: images.into_iter().map(Sample::from_rgb).collect(),
            report: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
    }

    /// Mean |ab'| over every pixel of every sample.
    pub fn mean_abs_ab(&self) -> f64 {
        let (sum, count) = self.samples.iter().fold((0.0f64, 0usize), |(s, c), x| {
            (s + x.norm.ab.iter().map(|v| v.abs() as f64).sum::<f64>(), c + x.norm.ab.len())
        });
        sum / count.max(1) as f64
    }
}

/// Loads a dataset of the given kind; `limit` keeps the first samples.
pub fn load(kind: DatasetKind, dir: &std::path::Path, image_size: usize, split: CifarSplit, limit: Option<usize>) -> Result<Dataset> {
    let mut ds = match kind {
        DatasetKind::Cifar10 => load_cifar10(dir, split, limit)?,
        DatasetKind::Dir => load_image_dir(dir, image_size)?,
    };
    if let Some(n) = limit {
        ds.truncate(n);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}
