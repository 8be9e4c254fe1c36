//! Forward kernels, generic over the float type so the same code serves
//! 32-bit training and 64-bit finite-difference replays.

use num_traits::Float;

use super::{ConvGeometry, Op};
use crate::error::{Error, Result};

/// Borrowed row-major view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [T],
}

/// Owned row-major buffer.
#[derive(Clone, Debug)]
pub(crate) struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Dense<T> {
    pub fn view(&self) -> View<'_, T> {
        View {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }
}

fn c<T: Float>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

pub(crate) fn forward<T: Float>(op: &Op, inputs: &[View<'_, T>]) -> Result<Dense<T>> {
    match op {
        Op::Leaf { .. } => unreachable!("leaves carry their own value"),
        Op::MatMul(..) => matmul(inputs[0], inputs[1]),
        Op::Add(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(a, b, "add")?;
            Ok(Dense {
                rows: a.rows,
                cols: a.cols,
                data: a.data.iter().zip(b.data).map(|(&x, &y)| x + y).collect(),
            })
        }
        Op::Scale(_, s) => {
            let a = inputs[0];
            let s: T = c(*s as f64);
            Ok(map(a, |x| x * s))
        }
        Op::Transpose(_) => Ok(transpose(inputs[0])),
        Op::DiagEmbed(_) => {
            let a = inputs[0];
            if a.rows != 1 && a.cols != 1 {
                return Err(Error::shape(format!(
                    "diag_embed needs a vector, got {}x{}",
                    a.rows, a.cols
                )));
            }
            let r = a.data.len();
            let mut data = vec![T::zero(); r * r];
            for (i, &x) in a.data.iter().enumerate() {
                data[i * r + i] = x;
            }
            Ok(Dense {
                rows: r,
                cols: r,
                data,
            })
        }
        Op::Relu(_) => Ok(map(
            inputs[0],
            |x| if x > T::zero() { x } else { T::zero() },
        )),
        Op::Conv2d { geom, .. } => conv2d(inputs[0], inputs[1], geom),
        Op::Linear { .. } => linear(inputs[0], inputs[1], inputs[2]),
        Op::SoftmaxCrossEntropy { labels, .. } => {
            let probs = softmax_rows(inputs[0]);
            let b = inputs[0].rows;
            let k = inputs[0].cols;
            let mut total = T::zero();
            for (i, &y) in labels.iter().enumerate() {
                total = total - probs[i * k + y].ln();
            }
            Ok(scalar(total / c(b as f64)))
        }
        Op::Frobenius(_) | Op::L2(_) => {
            let s = inputs[0].data.iter().fold(T::zero(), |acc, &x| acc + x * x);
            Ok(scalar(s.sqrt()))
        }
        Op::L1(_) => Ok(scalar(
            inputs[0]
                .data
                .iter()
                .fold(T::zero(), |acc, &x| acc + x.abs()),
        )),
        Op::Div(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.data.len() != 1 || b.data.len() != 1 {
                return Err(Error::shape("div expects scalars"));
            }
            Ok(scalar(a.data[0] / b.data[0]))
        }
        Op::Dropout { mask, .. } => {
            let a = inputs[0];
            Ok(Dense {
                rows: a.rows,
                cols: a.cols,
                data: a
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| x * c(m as f64))
                    .collect(),
            })
        }
    }
}

fn scalar<T>(x: T) -> Dense<T> {
    Dense {
        rows: 1,
        cols: 1,
        data: vec![x],
    }
}

fn same_shape<T>(a: View<'_, T>, b: View<'_, T>, what: &str) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

fn map<T: Float>(a: View<'_, T>, f: impl Fn(T) -> T) -> Dense<T> {
    Dense {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub(crate) fn transpose<T: Float>(a: View<'_, T>) -> Dense<T> {
    let mut data = vec![T::zero(); a.data.len()];
    for r in 0..a.rows {
        for col in 0..a.cols {
            data[col * a.rows + r] = a.data[r * a.cols + col];
        }
    }
    Dense {
        rows: a.cols,
        cols: a.rows,
        data,
    }
}

/// `out += a · b`.
pub(crate) fn gemm_acc<T: Float>(a: View<'_, T>, b: View<'_, T>, out: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub(crate) fn matmul<T: Float>(a: View<'_, T>, b: View<'_, T>) -> Result<Dense<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "mat_mul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = vec![T::zero(); a.rows * b.cols];
    gemm_acc(a, b, &mut data);
    Ok(Dense {
        rows: a.rows,
        cols: b.cols,
        data,
    })
}

fn linear<T: Float>(x: View<'_, T>, w: View<'_, T>, bias: View<'_, T>) -> Result<Dense<T>> {
    if x.cols != w.rows || bias.data.len() != w.cols {
        return Err(Error::shape(format!(
            "linear: features {}x{}, weight {}x{}, bias {}",
            x.rows,
            x.cols,
            w.rows,
            w.cols,
            bias.data.len()
        )));
    }
    let mut out = matmul(x, w)?;
    for row in out.data.chunks_mut(w.cols) {
        for (o, &b) in row.iter_mut().zip(bias.data) {
            *o = *o + b;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_rows<T: Float>(logits: View<'_, T>) -> Vec<T> {
    let k = logits.cols;
    let mut out = vec![T::zero(); logits.data.len()];
    for (row, dst) in logits.data.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            sum = sum + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / sum);
    }
    out
}

/// Unfolds one sample `(n, H, W)` into a `(n·kh·kw) × (H'·W')` patch matrix.
/// Row order `(ni, ki, kj)` matches the weight's flattened inner index.
pub(crate) fn im2col<T: Float>(sample: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = g.output_hw();
    let p = oh * ow;
    for ni in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ni * g.kernel_h + ki) * g.kernel_w + kj;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width;
                        out[row * p + oy * ow + ox] = if inside {
                            sample[(ni * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry, sample_grad: &mut [f32]) {
    let (oh, ow) = g.output_hw();
    let p = oh * ow;
    for ni in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ni * g.kernel_h + ki) * g.kernel_w + kj;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        sample_grad[(ni * g.height + iy as usize) * g.width + ix as usize] +=
                            cols[row * p + oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn conv2d<T: Float>(w: View<'_, T>, x: View<'_, T>, g: &ConvGeometry) -> Result<Dense<T>> {
    g.check(w.rows, w.cols, x.cols)?;
    let (oh, ow) = g.output_hw();
    let p = oh * ow;
    let k = g.patch_len();
    let out_len = w.rows * p;
    let mut cols = vec![T::zero(); k * p];
    let mut data = vec![T::zero(); x.rows * out_len];
    for b in 0..x.rows {
        im2col(&x.data[b * x.cols..(b + 1) * x.cols], g, &mut cols);
        let patches = View {
            rows: k,
            cols: p,
            data: &cols,
        };
        gemm_acc(w, patches, &mut data[b * out_len..(b + 1) * out_len]);
    }
    Ok(Dense {
        rows: x.rows,
        cols: out_len,
        data,
    })
}
