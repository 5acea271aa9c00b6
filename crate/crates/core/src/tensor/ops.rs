//! Elementwise and reduction kernels shared by forward and backward passes.

use super::Tensor;

pub(crate) fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[t·ln σ(z) + (1-t)·ln(1-σ(z))]` in the overflow-free logit form.
pub(crate) fn bce_logit_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `(outer, channels, inner)` view of a tensor whose axis 1 is the channel axis.
pub(crate) fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let channels = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (outer, channels, inner)
}

/// Per-channel sums over every axis except 1, accumulated in f64.
pub(crate) fn channel_sums(x: &Tensor, f: impl Fn(usize, f32) -> f64) -> Vec<f64> {
    let (outer, c, inner) = channel_view(&x.shape);
    let mut sums = vec![0.0f64; c];
    for n in 0..outer {
        for (ch, s) in sums.iter_mut().enumerate() {
            let off = (n * c + ch) * inner;
            for (i, &v) in x.data[off..off + inner].iter().enumerate() {
                *s += f(off + i, v);
            }
        }
    }
    sums
}

/// Applies `f(channel, flat index, value)` to every element.
pub(crate) fn map_channels(x: &Tensor, f: impl Fn(usize, usize, f32) -> f32) -> Tensor {
    let (outer, c, inner) = channel_view(&x.shape);
    let mut data = Vec::with_capacity(x.data.len());
    for n in 0..outer {
        for ch in 0..c {
            let off = (n * c + ch) * inner;
            data.extend(x.data[off..off + inner].iter().enumerate().map(|(i, &v)| f(ch, off + i, v)));
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bce_term_matches_naive_form() {
        for &(z, t) in &[(0.3f64, 1.0f64), (-1.2, 0.0), (2.0, 0.9), (-0.5, 0.25)] {
            let s = 1.0 / (1.0 + (-z).exp());
            let naive = -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
            assert!((bce_logit_term(z, t) - naive).abs() < 1e-12);
        }
        assert!(bce_logit_term(1e4, 1.0).is_finite());
        assert!(bce_logit_term(-1e4, 0.0).is_finite());
    }
}
