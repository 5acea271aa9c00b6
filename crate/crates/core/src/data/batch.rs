use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Horizontal-flip draws use a stream disjoint from the shuffle streams.
const FLIP_STREAM: u64 = 1 << 63;

/// Sample order for one epoch, reproducible from `(seed, epoch)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub epoch: u64,
    pub batch_size: usize,
    pub permutation: Vec<usize>,
    /// Per-sample horizontal flip, indexed by sample (not position).
    pub flips: Vec<bool>,
}

impl BatchPlan {
    pub fn new(seed: u64, epoch: u64, len: usize, batch_size: usize, flip: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 || batch_size > len {
            return Err(Error::Config(format!("batch size {batch_size} must be in 1..={len} (dataset size)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut permutation: Vec<usize> = (0..len).collect();
        permutation.shuffle(&mut rng);
        let flips = if flip {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(FLIP_STREAM | epoch);
            (0..len).map(|_| rng.random_bool(0.5)).collect()
        } else {
            vec![false; len]
        };
        Ok(Self {
            seed,
            epoch,
            batch_size,
            permutation,
            flips,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }

    /// Index slices of each batch; the last may be short.
    pub fn index_batches(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks(self.batch_size)
    }

    pub fn batches<'a>(&'a self, ds: &'a Dataset, predict_ab: bool) -> impl Iterator<Item = Batch> + 'a {
        self.index_batches().map(move |idx| Batch::assemble(ds, idx, predict_ab, &self.flips))
    }
}

/// NCHW network inputs for a set of samples: the `L'` condition and the
/// color target (`ab'`, or `L'a'b'` when predicting full color).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub l: Tensor,
    pub target: Tensor,
}

impl Batch {
    pub fn assemble(ds: &Dataset, indices: &[usize], predict_ab: bool, flips: &[bool]) -> Self {
        let s = ds.image_size;
        let plane = s * s;
        let channels = if predict_ab { 2 } else { 3 };
        let mut l = Vec::with_capacity(indices.len() * plane);
        let mut target = Vec::with_capacity(indices.len() * channels * plane);
        let flip_plane = |src: &[f32], out: &mut Vec<f32>, flip: bool| {
            if flip {
                for row in src.chunks(s) {
                    out.extend(row.iter().rev());
                }
            } else {
                out.extend_from_slice(src);
            }
        };
        for &i in indices {
            let n = &ds.samples[i].norm;
            let flip = flips.get(i).copied().unwrap_or(false);
            flip_plane(&n.l, &mut l, flip);
            if !predict_ab {
                flip_plane(&n.l, &mut target, flip);
            }
            flip_plane(n.a(), &mut target, flip);
            flip_plane(n.b(), &mut target, flip);
        }
        let n = indices.len();
        Self {
            indices: indices.to_vec(),
            l: Tensor::new(&[n, 1, s, s], l).expect("batch shape"),
            target: Tensor::new(&[n, channels, s, s], target).expect("batch shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
