//! CIFAR-10 binary batches: 3073-byte records of one label byte followed
//! by 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
const PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + 3 * PLANE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarSplit {
    #[default]
    Train,
    Test,
}

impl std::str::FromStr for CifarSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(CifarSplit::Train),
            "test" => Ok(CifarSplit::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

/// Decodes every record of a batch file. Labels are ignored.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Vec<RgbImage>> {
    let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: whole as u64,
            reason: format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    let take = limit.unwrap_or(usize::MAX);
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .take(take)
        .map(|rec| {
            let px = &rec[1..];
            RgbImage::from_fn(CIFAR_SIDE as u32, CIFAR_SIDE as u32, |c, r| {
                let at = r as usize * CIFAR_SIDE + c as usize;
                image::Rgb([px[at], px[PLANE + at], px[2 * PLANE + at]])
            })
        })
        .collect())
}

/// Encodes 32×32 images as CIFAR-10 records with the given labels.
pub fn write_cifar_records(images: &[RgbImage], labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD);
    for (i, im) in images.iter().enumerate() {
        assert_eq!((im.width() as usize, im.height() as usize), (CIFAR_SIDE, CIFAR_SIDE));
        out.push(labels.get(i).copied().unwrap_or(0));
        for ch in 0..3 {
            out.extend(im.pixels().map(|p| p.0[ch]));
        }
    }
    out
}

/// Loads the training (`data_batch_1..5.bin`) or test (`test_batch.bin`)
/// files present in `dir`, in file order. Reading stops once `limit`
/// samples are decoded.
pub fn load_cifar10(dir: &Path, split: CifarSplit, limit: Option<usize>) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found")));
    }
    let names: &[&str] = match split {
        CifarSplit::Train => &TRAIN_FILES,
        CifarSplit::Test => &[TEST_FILE],
    };
    let files: Vec<_> = names.iter().map(|n| dir.join(n)).filter(|p| p.is_file()).collect();
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("no CIFAR-10 batch files ({})", names.join(", "))),
        ));
    }
    let mut samples = Vec::new();
    for path in files {
        let remaining = limit.map(|l| l.saturating_sub(samples.len()));
        if remaining == Some(0) {
            break;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        samples.extend(parse_cifar_records(&bytes, &path, remaining)?.into_iter().map(Sample::from_rgb));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        source: format!("cifar10:{}", dir.display()),
        image_size: CIFAR_SIDE,
        samples,
        report: Vec::new(),
    })
}
