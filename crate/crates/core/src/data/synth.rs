//! Procedural outdoor-like scenes written in the CIFAR-10 binary layout.
//! Used as stand-in data where the real batches are not available: a sky
//! gradient over textured ground with a few colored objects, so chroma is
//! partly predictable from luminance and position.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cifar::{write_cifar_records, CIFAR_SIDE};
use crate::error::{Error, Result};

const GROUNDS: [[f32; 3]; 4] = [[70.0, 120.0, 50.0], [120.0, 95.0, 60.0], [200.0, 180.0, 130.0], [90.0, 90.0, 95.0]];

fn hue_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// One `size × size` scene.
pub fn scene(rng: &mut impl Rng, size: u32) -> RgbImage {
    let s = size as f32;
    let horizon = s * rng.random_range(0.35..0.7);
    let sky_top = [rng.random_range(40.0..110.0), rng.random_range(90.0..160.0), rng.random_range(170.0..250.0)];
    let sky_bottom = [rng.random_range(170.0..230.0), rng.random_range(190.0..235.0), rng.random_range(220.0..255.0)];
    let ground = GROUNDS[rng.random_range(0..GROUNDS.len())];
    let objects: Vec<([f32; 3], f32, f32, f32, f32)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let color = hue_to_rgb(rng.random(), rng.random_range(0.5..1.0), rng.random_range(0.4..1.0));
            let cx = rng.random_range(0.0..s);
            let cy = rng.random_range(horizon * 0.6..s);
            let rx = rng.random_range(s * 0.08..s * 0.3);
            let ry = rng.random_range(s * 0.08..s * 0.3);
            (color, cx, cy, rx, ry)
        })
        .collect();
    let mut noise = || rng.random_range(-8.0f32..8.0);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut c = if fy < horizon {
                let t = fy / horizon;
                [0, 1, 2].map(|i| sky_top[i] * (1.0 - t) + sky_bottom[i] * t)
            } else {
                let shade = 0.75 + 0.25 * (fy - horizon) / (s - horizon).max(1.0);
                ground.map(|v| v * shade)
            };
            for (color, cx, cy, rx, ry) in &objects {
                let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                if d <= 1.0 {
                    let shade = 1.0 - 0.35 * d;
                    c = color.map(|v| v * shade);
                }
            }
            let n = noise();
            img.put_pixel(x, y, Rgb(c.map(|v| (v + n).round().clamp(0.0, 255.0) as u8)));
        }
    }
    img
}

pub fn scenes(count: usize, size: u32, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| scene(&mut rng, size)).collect()
}

/// Writes `count` scenes as a CIFAR-10 batch file (labels zero).
pub fn write_cifar_file(path: &Path, count: usize, seed: u64) -> Result<()> {
    let images = scenes(count, CIFAR_SIDE as u32, seed);
    std::fs::write(path, write_cifar_records(&images, &[])).map_err(|e| Error::io(path, e))
}
