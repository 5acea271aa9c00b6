//! Colorizing with a trained generator, error reports and montages.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{compose_rgb, NormalizedSample};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::networks::Network;
use crate::tensor::Tensor;

pub const MONTAGE_GAP: u32 = 2;
pub const EVAL_HEADER: &str = "image,count,ab_mae,psnr_db";

/// Predicted normalized `ab'` planes (a then b) for each lightness plane,
/// from eval-mode forward passes in chunks of `chunk` images. With a
/// full-color generator the predicted lightness channel is discarded.
pub fn predict_ab(net: &Network, l_planes: &[&[f32]], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let s = net.spec.image_size;
    let plane = s * s;
    let mut out = Vec::with_capacity(l_planes.len());
    for group in l_planes.chunks(chunk.max(1)) {
        let mut data = Vec::with_capacity(group.len() * plane);
        for l in group {
            if l.len() != plane {
                return Err(Error::Config(format!("input has {} pixels, the model requires {s}x{s}", l.len())));
            }
            data.extend_from_slice(l);
        }
        let pred = net.predict(&Tensor::new(&[group.len(), 1, s, s], data)?)?;
        let channels = pred.shape()[1];
        for img in pred.data().chunks(channels * plane) {
            out.push(img[(channels - 2) * plane..].to_vec());
        }
    }
    Ok(out)
}

/// Colorized RGB images: each input lightness plane paired with its
/// predicted chroma.
pub fn colorize(net: &Network, samples: &[&NormalizedSample], chunk: usize) -> Result<Vec<RgbImage>> {
    let ls: Vec<&[f32]> = samples.iter().map(|s| s.l.as_slice()).collect();
    let ab = predict_ab(net, &ls, chunk)?;
    Ok(samples
        .iter()
        .zip(&ab)
        .map(|(s, ab)| compose_rgb(s.width, s.height, &s.l, ab))
        .collect())
}

/// PSNR in dB over 8-bit RGB with peak 255; infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions(), "psnr needs equal sizes");
    let n = a.as_raw().len() as f64;
    let se: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    if se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64 * 255.0 / (se / n)).log10()
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: usize,
    pub ab_mae: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub ab_mae: f64,
    pub psnr_db: f64,
}

impl EvalReport {
    /// Scores predicted `ab'` planes against the dataset. The reference
    /// image is the true `L'a'b'` converted back to RGB, so a perfect
    /// prediction scores exactly zero error and infinite PSNR.
    pub fn from_predictions(ds: &Dataset, predictions: &[Vec<f32>]) -> Result<Self> {
        if predictions.len() != ds.len() {
            return Err(Error::Config(format!("{} predictions for {} samples", predictions.len(), ds.len())));
        }
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rows: Vec<EvalRow> = ds
            .samples
            .iter()
            .zip(predictions)
            .enumerate()
            .map(|(image, (s, ab))| {
                let n = &s.norm;
                let mae = n.ab.iter().zip(ab).map(|(&t, &p)| (t as f64 - p as f64).abs()).sum::<f64>() / n.ab.len() as f64;
                let truth = compose_rgb(n.width, n.height, &n.l, &n.ab);
                let pred = compose_rgb(n.width, n.height, &n.l, ab);
                EvalRow { image, ab_mae: mae, psnr_db: psnr(&truth, &pred) }
            })
            .collect();
        let count = rows.len() as f64;
        Ok(Self {
            ab_mae: rows.iter().map(|r| r.ab_mae).sum::<f64>() / count,
            psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / count,
            rows,
        })
    }

    pub fn evaluate(net: &Network, ds: &Dataset, chunk: usize) -> Result<Self> {
        let ls: Vec<&[f32]> = ds.samples.iter().map(|s| s.norm.l.as_slice()).collect();
        Self::from_predictions(ds, &predict_ab(net, &ls, chunk)?)
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// Per-image rows followed by one `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},1,{:.6},{}", r.image, r.ab_mae, fmt_psnr(r.psnr_db));
        }
        let _ = writeln!(s, "mean,{},{:.6},{}", self.count(), self.ab_mae, fmt_psnr(self.psnr_db));
        s
    }

    pub fn summary(&self) -> String {
        format!("images {}  ab_mae {:.6}  psnr_db {}", self.count(), self.ab_mae, fmt_psnr(self.psnr_db))
    }
}

/// `n` distinct sample indices chosen by `seed`.
pub fn select_samples(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::Config(format!("montage needs 1..={len} samples, got {n}")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(idx)
}

/// Lightness only, shown as a gray image.
pub fn grayscale(s: &NormalizedSample) -> RgbImage {
    compose_rgb(s.width, s.height, &s.l, &vec![0.0; s.ab.len()])
}

/// Grid of equal-size tiles separated by white gaps. `rows[r][c]` is the
/// tile at row `r`, column `c`.
pub fn montage(rows: &[Vec<RgbImage>]) -> Result<RgbImage> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Config("empty montage".into()))?;
    let (w, h) = first.dimensions();
    let cols = rows[0].len() as u32;
    if rows.iter().any(|r| r.len() as u32 != cols || r.iter().any(|t| t.dimensions() != (w, h))) {
        return Err(Error::Config("montage tiles must form a full grid of equal sizes".into()));
    }
    let n = rows.len() as u32;
    let mut out = RgbImage::from_pixel(cols * w + (cols - 1) * MONTAGE_GAP, n * h + (n - 1) * MONTAGE_GAP, Rgb([255; 3]));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (x0, y0) = (c as u32 * (w + MONTAGE_GAP), r as u32 * (h + MONTAGE_GAP));
            for (x, y, p) in tile.enumerate_pixels() {
                out.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    Ok(out)
}
