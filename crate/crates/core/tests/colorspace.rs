use chroma_core::colorspace::*;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

/// 0, 16, …, 240, 255: seventeen levels per channel.
fn lattice() -> Vec<u8> {
    (0..17).map(|i| (i * 16).min(255) as u8).collect()
}

#[test]
fn round_trip_over_stepped_lattice() {
    let levels = lattice();
    let mut worst = 0i32;
    for &r in &levels {
        for &g in &levels {
            for &b in &levels {
                let back = lab_to_rgb_pixel(rgb_to_lab_pixel([r, g, b]));
                for (x, y) in [r, g, b].iter().zip(back) {
                    worst = worst.max((*x as i32 - y as i32).abs());
                }
            }
        }
    }
    assert!(worst <= 1, "max channel error {worst}");
}

#[test]
fn round_trip_through_f32_planes() {
    let levels = lattice();
    let mut img = RgbImage::new(17, 17 * 17);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = Rgb([levels[i % 17], levels[(i / 17) % 17], levels[i / 289]]);
    }
    let back = lab_to_rgb(&rgb_to_lab(&img));
    for (p, q) in img.pixels().zip(back.pixels()) {
        for c in 0..3 {
            assert!((p.0[c] as i32 - q.0[c] as i32).abs() <= 1);
        }
    }
}

#[test]
fn grays_are_neutral_and_monotone() {
    let mut prev = -1.0;
    for v in 0..=255u8 {
        let [l, a, b] = rgb_to_lab_pixel([v, v, v]);
        assert!(a.abs() <= 0.01 && b.abs() <= 0.01, "gray {v}: a={a} b={b}");
        assert!(l > prev, "L not increasing at {v}");
        prev = l;
    }
}

#[test]
fn normalized_sample_of_white_image() {
    let img = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
    let s = normalize(&rgb_to_lab(&img));
    assert!(s.l.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    assert!(s.ab.iter().all(|&v| v.abs() <= 1e-3));
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(l in -1.0f32..=1.0, a in -1.0f32..=1.0, b in -1.0f32..=1.0) {
        let s = NormalizedSample { width: 1, height: 1, l: vec![l], ab: vec![a, b] };
        let back = normalize(&denormalize(&s));
        prop_assert!((back.l[0] - l).abs() <= 1e-6);
        prop_assert!((back.ab[0] - a).abs() <= 1e-6);
        prop_assert!((back.ab[1] - b).abs() <= 1e-6);
    }

    #[test]
    fn any_pixel_round_trips(r: u8, g: u8, b: u8) {
        let back = lab_to_rgb_pixel(rgb_to_lab_pixel([r, g, b]));
        for (x, y) in [r, g, b].iter().zip(back) {
            prop_assert!((*x as i32 - y as i32).abs() <= 1);
        }
    }

    #[test]
    fn lightness_in_range(r: u8, g: u8, b: u8) {
        let [l, _, _] = rgb_to_lab_pixel([r, g, b]);
        prop_assert!((0.0..=100.0).contains(&l));
    }
}
