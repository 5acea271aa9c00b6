//! sRGB ⇄ CIE L\*a\*b\* (D65) conversion and the affine maps between Lab
//! and the `[-1, 1]` ranges the networks work in.

use image::RgbImage;

/// D65 reference white in XYZ, Y normalized to 1.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const DELTA: f64 = 6.0 / 29.0;

/// Scale mapping a\*/b\* onto [-1, 1].
pub const AB_SCALE: f32 = 110.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub fn rgb_to_lab_pixel(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / WHITE[i]));
    [
        (116.0 * fy - 16.0).clamp(0.0, 100.0),
        500.0 * (fx - fy),
        200.0 * (fy - fz),
    ]
}

/// Inverse conversion. Out-of-gamut colors are clamped per channel after
/// rounding; zero lightness is black whatever the chroma.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [u8; 3] {
    let l = lab[0].clamp(0.0, 100.0);
    if l <= 0.0 {
        return [0, 0, 0];
    }
    let fy = (l + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz = [0, 1, 2].map(|i| lab_f_inv(f[i]) * WHITE[i]);
    mat_vec(&XYZ_TO_RGB, xyz).map(|c| {
        let v = linear_to_srgb(c.max(0.0)) * 255.0;
        (v + 0.5).floor().clamp(0.0, 255.0) as u8
    })
}

/// An image as three L\*, a\*, b\* planes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl LabImage {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

pub fn rgb_to_lab(rgb: &RgbImage) -> LabImage {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = LabImage {
        width: w,
        height: h,
        l: Vec::with_capacity(w * h),
        a: Vec::with_capacity(w * h),
        b: Vec::with_capacity(w * h),
    };
    for p in rgb.pixels() {
        let [l, a, b] = rgb_to_lab_pixel(p.0);
        out.l.push(l as f32);
        out.a.push(a as f32);
        out.b.push(b as f32);
    }
    out
}

pub fn lab_to_rgb(lab: &LabImage) -> RgbImage {
    let mut out = RgbImage::new(lab.width as u32, lab.height as u32);
    for (i, p) in out.pixels_mut().enumerate() {
        p.0 = lab_to_rgb_pixel([lab.l[i] as f64, lab.a[i] as f64, lab.b[i] as f64]);
    }
    out
}

/// Network-range view of a [`LabImage`]: `L' = L/50 - 1`, `ab' = ab/110`,
/// both clamped to [-1, 1]. `ab` holds the a' plane followed by the b' plane.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f32>,
    pub ab: Vec<f32>,
}

impl NormalizedSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn a(&self) -> &[f32] {
        &self.ab[..self.pixels()]
    }

    pub fn b(&self) -> &[f32] {
        &self.ab[self.pixels()..]
    }
}

pub fn normalize_l(l: f32) -> f32 {
    (l / 50.0 - 1.0).clamp(-1.0, 1.0)
}

pub fn denormalize_l(l: f32) -> f32 {
    (l + 1.0) * 50.0
}

pub fn normalize_ab(v: f32) -> f32 {
    (v / AB_SCALE).clamp(-1.0, 1.0)
}

pub fn denormalize_ab(v: f32) -> f32 {
    v * AB_SCALE
}

pub fn normalize(lab: &LabImage) -> NormalizedSample {
    NormalizedSample {
        width: lab.width,
        height: lab.height,
        l: lab.l.iter().map(|&v| normalize_l(v)).collect(),
        ab: lab.a.iter().chain(&lab.b).map(|&v| normalize_ab(v)).collect(),
    }
}

pub fn denormalize(s: &NormalizedSample) -> LabImage {
    LabImage {
        width: s.width,
        height: s.height,
        l: s.l.iter().map(|&v| denormalize_l(v)).collect(),
        a: s.a().iter().map(|&v| denormalize_ab(v)).collect(),
        b: s.b().iter().map(|&v| denormalize_ab(v)).collect(),
    }
}

/// Displayable image from a normalized lightness plane and predicted
/// normalized chroma planes.
pub fn compose_rgb(width: usize, height: usize, l: &[f32], ab: &[f32]) -> RgbImage {
    let sample = NormalizedSample {
        width,
        height,
        l: l.to_vec(),
        ab: ab.to_vec(),
    };
    lab_to_rgb(&denormalize(&sample))
}
