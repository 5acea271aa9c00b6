//! im2col/col2im convolution kernels.
//!
//! Work is split into fixed chunks of samples whose boundaries depend only
//! on the batch size. Threads only decide who computes a chunk, and partial
//! weight gradients are reduced in chunk order, so results are bit-identical
//! for every thread count.

use std::ops::Range;
use std::sync::OnceLock;

use super::Tensor;
use crate::error::{Error, Result};

const CHUNK: usize = 8;

/// Worker threads for convolution kernels: `CHROMA_THREADS` if set
/// (0 means serial), otherwise the available parallelism.
pub fn worker_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| match std::env::var("CHROMA_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    (full > 2 * pad).then(|| full - 2 * pad)
}

/// Geometry of a forward convolution from a `c × h × w` image to
/// `oh × ow` output positions.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn image(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn im2col(x: &[f32], g: &Geom, cols: &mut [f32]) {
    let n = g.cols();
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the image; `x` must be zeroed by the caller.
fn col2im(cols: &[f32], g: &Geom, x: &mut [f32]) {
    let n = g.cols();
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand: `trans` reads the stored `cols × rows` matrix
/// as its transpose.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, trans: false }
    }

    /// The transpose of a stored `rows × cols` matrix.
    fn t(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows: cols, cols: rows, trans: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` for a row-major `c`.
fn gemm(a: Mat, b: Mat, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert!(c.len() >= a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: operand extents and strides describe in-bounds slices, checked above.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Runs `f` over fixed sample chunks, possibly on several threads, and
/// returns results in chunk order.
fn map_chunks<R: Send>(n: usize, f: impl Fn(Range<usize>) -> R + Sync) -> Vec<R> {
    let ranges: Vec<Range<usize>> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let threads = worker_threads().min(ranges.len());
    if threads <= 1 {
        return ranges.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let ranges = &ranges;
                let f = &f;
                scope.spawn(move || {
                    (t..ranges.len())
                        .step_by(threads)
                        .map(|i| (i, f(ranges[i].clone())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("convolution worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("chunk computed")).collect()
}

fn sum_in_order(parts: Vec<Vec<f32>>) -> Vec<f32> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        for (a, b) in acc.iter_mut().zip(&p) {
            *a += b;
        }
    }
    acc
}

fn bias_grad(dy: &Tensor) -> Vec<f32> {
    let [n, o, h, w] = dy.dims4("bias grad").expect("validated in forward");
    let plane = h * w;
    (0..o)
        .map(|ch| {
            let mut s = 0.0f64;
            for b in 0..n {
                let off = (b * o + ch) * plane;
                s += dy.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            s as f32
        })
        .collect()
}

/// Shapes resolved for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    n: usize,
    geom: Geom,
    /// Channels on the non-image side of the kernel: conv2d output
    /// channels, or conv_transpose2d input channels.
    other: usize,
}

fn check_common(op: &'static str, input: &Tensor, kernel: &Tensor, stride: usize) -> Result<([usize; 4], [usize; 4])> {
    let x = input.dims4(op)?;
    let k = kernel.dims4(op)?;
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if k[2] != k[3] {
        return Err(Error::shape(op, input.shape(), kernel.shape(), "kernel must be square"));
    }
    Ok((x, k))
}

fn check_bias(op: &'static str, kernel: &Tensor, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(
            op,
            kernel.shape(),
            bias.shape(),
            format!("bias must have shape [{channels}]"),
        ));
    }
    Ok(())
}

pub(crate) fn conv2d_shape(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<ConvShape> {
    const OP: &str = "conv2d";
    let ([n, c, h, w], [o, i, k, _]) = check_common(OP, input, kernel, stride)?;
    if c != i {
        return Err(Error::shape(
            OP,
            input.shape(),
            kernel.shape(),
            format!("input has {c} channels but kernel expects {i}"),
        ));
    }
    check_bias(OP, kernel, bias, o)?;
    let (oh, ow) = match (
        conv2d_output_extent(h, k, stride, pad),
        conv2d_output_extent(w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                OP,
                input.shape(),
                kernel.shape(),
                format!("padded input ({}x{}) smaller than kernel {k}", h + 2 * pad, w + 2 * pad),
            ))
        }
    };
    Ok(ConvShape {
        n,
        geom: Geom { c, h, w, k, stride, pad, oh, ow },
        other: o,
    })
}

pub(crate) fn conv_transpose2d_shape(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvShape> {
    const OP: &str = "conv_transpose2d";
    let ([n, c, h, w], [i, o, k, _]) = check_common(OP, input, kernel, stride)?;
    if c != i {
        return Err(Error::shape(
            OP,
            input.shape(),
            kernel.shape(),
            format!("input has {c} channels but kernel expects {i}"),
        ));
    }
    check_bias(OP, kernel, bias, o)?;
    let (oh, ow) = match (
        conv_transpose2d_output_extent(h, k, stride, pad),
        conv_transpose2d_output_extent(w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                OP,
                input.shape(),
                kernel.shape(),
                format!("padding {pad} leaves an empty output"),
            ))
        }
    };
    // The image side of the geometry is the transposed convolution's output.
    Ok(ConvShape {
        n,
        geom: Geom { c: o, h: oh, w: ow, k, stride, pad, oh: h, ow: w },
        other: i,
    })
}

fn add_bias(y: &mut [f32], bias: &[f32], plane: usize) {
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut y[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

pub(crate) fn conv2d_forward(s: &ConvShape, input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let g = s.geom;
    let (rows, cols, o) = (g.rows(), g.cols(), s.other);
    let out = o * cols;
    let parts = map_chunks(s.n, |range| {
        let mut col = vec![0.0; rows * cols];
        let mut y = vec![0.0; range.len() * out];
        for (j, b) in range.enumerate() {
            im2col(&input.data()[b * g.image()..(b + 1) * g.image()], &g, &mut col);
            let yb = &mut y[j * out..(j + 1) * out];
            gemm(Mat::new(kernel.data(), o, rows), Mat::new(&col, rows, cols), 0.0, yb);
            add_bias(yb, bias.data(), cols);
        }
        y
    });
    Tensor {
        shape: vec![s.n, o, g.oh, g.ow],
        data: parts.concat(),
    }
}

/// Gradients of conv2d with respect to its input and kernel; either can be
/// skipped.
pub(crate) fn conv2d_backward(
    s: &ConvShape,
    input: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let g = s.geom;
    let (rows, cols, o) = (g.rows(), g.cols(), s.other);
    let out = o * cols;
    let parts = map_chunks(s.n, |range| {
        let mut col = vec![0.0; rows * cols];
        let mut dx = if need_input { vec![0.0; range.len() * g.image()] } else { Vec::new() };
        let mut dk = if need_kernel { vec![0.0; o * rows] } else { Vec::new() };
        for (j, b) in range.enumerate() {
            let dyb = &dy.data()[b * out..(b + 1) * out];
            if need_kernel {
                im2col(&input.data()[b * g.image()..(b + 1) * g.image()], &g, &mut col);
                gemm(Mat::new(dyb, o, cols), Mat::t(&col, rows, cols), 1.0, &mut dk);
            }
            if need_input {
                gemm(Mat::t(kernel.data(), o, rows), Mat::new(dyb, o, cols), 0.0, &mut col);
                col2im(&col, &g, &mut dx[j * g.image()..(j + 1) * g.image()]);
            }
        }
        (dx, dk)
    });
    let (dxs, dks): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dx = need_input.then(|| Tensor {
        shape: input.shape().to_vec(),
        data: dxs.concat(),
    });
    let dk = need_kernel.then(|| Tensor {
        shape: kernel.shape().to_vec(),
        data: sum_in_order(dks),
    });
    let db = Tensor {
        shape: vec![o],
        data: bias_grad(dy),
    };
    (dx, dk, db)
}

pub(crate) fn conv_transpose2d_forward(s: &ConvShape, input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let g = s.geom;
    let (rows, cols, i) = (g.rows(), g.cols(), s.other);
    let inp = i * cols;
    let parts = map_chunks(s.n, |range| {
        let mut col = vec![0.0; rows * cols];
        let mut y = vec![0.0; range.len() * g.image()];
        for (j, b) in range.enumerate() {
            let xb = &input.data()[b * inp..(b + 1) * inp];
            gemm(Mat::t(kernel.data(), i, rows), Mat::new(xb, i, cols), 0.0, &mut col);
            let yb = &mut y[j * g.image()..(j + 1) * g.image()];
            col2im(&col, &g, yb);
            add_bias(yb, bias.data(), g.h * g.w);
        }
        y
    });
    Tensor {
        shape: vec![s.n, g.c, g.h, g.w],
        data: parts.concat(),
    }
}

pub(crate) fn conv_transpose2d_backward(
    s: &ConvShape,
    input: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let g = s.geom;
    let (rows, cols, i) = (g.rows(), g.cols(), s.other);
    let inp = i * cols;
    let parts = map_chunks(s.n, |range| {
        let mut col = vec![0.0; rows * cols];
        let mut dx = if need_input { vec![0.0; range.len() * inp] } else { Vec::new() };
        let mut dk = if need_kernel { vec![0.0; i * rows] } else { Vec::new() };
        for (j, b) in range.enumerate() {
            im2col(&dy.data()[b * g.image()..(b + 1) * g.image()], &g, &mut col);
            if need_input {
                gemm(Mat::new(kernel.data(), i, rows), Mat::new(&col, rows, cols), 0.0, &mut dx[j * inp..(j + 1) * inp]);
            }
            if need_kernel {
                let xb = &input.data()[b * inp..(b + 1) * inp];
                gemm(Mat::new(xb, i, cols), Mat::t(&col, rows, cols), 1.0, &mut dk);
            }
        }
        (dx, dk)
    });
    let (dxs, dks): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dx = need_input.then(|| Tensor {
        shape: input.shape().to_vec(),
        data: dxs.concat(),
    });
    let dk = need_kernel.then(|| Tensor {
        shape: kernel.shape().to_vec(),
        data: sum_in_order(dks),
    });
    let db = Tensor {
        shape: vec![g.c],
        data: bias_grad(dy),
    };
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents() {
        assert_eq!(conv2d_output_extent(32, 4, 2, 1), Some(16));
        assert_eq!(conv2d_output_extent(3, 3, 1, 0), Some(1));
        assert_eq!(conv2d_output_extent(2, 3, 1, 0), None);
        assert_eq!(conv_transpose2d_output_extent(16, 4, 2, 1), Some(32));
        assert_eq!(conv_transpose2d_output_extent(1, 2, 2, 0), Some(2));
        assert_eq!(conv_transpose2d_output_extent(1, 2, 1, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geom { c: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1, oh: 3, ow: 2 };
        let x: Vec<f32> = (0..g.image()).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.rows() * g.cols()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(Mat::t(&a, 2, 2), Mat::new(&b, 2, 2), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(Mat::new(&a, 2, 2), Mat::t(&b, 2, 2), 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
