//! Forward and backward kernels for the supported layer kinds.
//!
//! All tensors are NCHW. Convolution is cross-correlation lowered to GEMM via
//! im2col, one image at a time so the reduction order never depends on the
//! batch composition.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "conv2d input",
                dimension: "rank",
                expected: 4,
                found: input.rank(),
            });
        }
        if weights.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "conv2d weights",
                dimension: "rank",
                expected: 4,
                found: weights.rank(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = dims4(input.shape());
        let (cout, wcin, kh, kw) = dims4(weights.shape());
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                dimension: "in_channels",
                expected: wcin,
                found: cin,
            });
        }
        let hout = output_extent(h, kh, stride, padding).ok_or(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "height",
            expected: kh,
            found: h + 2 * padding,
        })?;
        let wout = output_extent(w, kw, stride, padding).ok_or(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "width",
            expected: kw,
            found: w + 2 * padding,
        })?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            hout,
            wout,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.hout * self.wout
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

/// Output length along one spatial axis, `None` when the window does not fit.
pub fn output_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.cin {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.wout..(oh + 1) * g.wout];
                    if ih < 0 || ih as usize >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw as usize >= g.w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.cin {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wout {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.wout + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `[N,Cin,H,W] * [Cout,Cin,Kh,Kw] + bias -> [N,Cout,Hout,Wout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    if bias.len() != g.cout {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias",
            dimension: "out_channels",
            expected: g.cout,
            found: bias.len(),
        });
    }
    let area = g.out_area();
    let plen = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.hout, g.wout]);
    let mut cols = vec![T::zero(); plen * area];
    for (img, dst) in input
        .data()
        .chunks_exact(in_len)
        .zip(out.data_mut().chunks_exact_mut(g.cout * area))
    {
        for (c, plane) in dst.chunks_exact_mut(area).enumerate() {
            plane.fill(bias.data()[c]);
        }
        im2col(&g, img, &mut cols);
        T::gemm(
            g.cout,
            plen,
            area,
            T::one(),
            weights.data(),
            plen as isize,
            1,
            &cols,
            area as isize,
            1,
            T::one(),
            dst,
            area as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    grad_out.expect_shape("conv2d backward", &[g.n, g.cout, g.hout, g.wout])?;
    let area = g.out_area();
    let plen = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[g.cout]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); plen * area];
    let mut dcols = vec![T::zero(); plen * area];
    for n in 0..g.n {
        let img = &input.data()[n * in_len..(n + 1) * in_len];
        let dy = &grad_out.data()[n * g.cout * area..(n + 1) * g.cout * area];
        let dbd = db.data_mut();
        for (c, plane) in dy.chunks_exact(area).enumerate() {
            dbd[c] = plane.iter().fold(dbd[c], |acc, &v| acc + v);
        }
        im2col(&g, img, &mut cols);
        // dW += dY[Cout, A] * cols^T[A, P]
        T::gemm(
            g.cout,
            area,
            plen,
            T::one(),
            dy,
            area as isize,
            1,
            &cols,
            1,
            area as isize,
            T::one(),
            dw.data_mut(),
            plen as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols[P, A] = W^T[P, Cout] * dY[Cout, A]
            T::gemm(
                plen,
                g.cout,
                area,
                T::one(),
                weights.data(),
                1,
                plen as isize,
                dy,
                area as isize,
                1,
                T::zero(),
                &mut dcols,
                area as isize,
                1,
            );
            col2im(&g, &dcols, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok(Conv2dGrads {
        input: dx,
        weights: dw,
        bias: db,
    })
}

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// input index that won. Ties go to the first window position in row-major order.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if input.rank() != 4 {
        return Err(Error::ShapeMismatch {
            context: "maxpool2d input",
            dimension: "rank",
            expected: 4,
            found: input.rank(),
        });
    }
    let (n, c, h, w) = dims4(input.shape());
    let hout = output_extent(h, window, stride, 0).ok_or(Error::ShapeMismatch {
        context: "maxpool2d",
        dimension: "height",
        expected: window,
        found: h,
    })?;
    let wout = output_extent(w, window, stride, 0).ok_or(Error::ShapeMismatch {
        context: "maxpool2d",
        dimension: "width",
        expected: window,
        found: w,
    })?;
    let mut out = Tensor::zeros(&[n, c, hout, wout]);
    let mut argmax = vec![0u32; n * c * hout * wout];
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oh in 0..hout {
            for ow in 0..wout {
                let mut best_idx = base + oh * stride * w + ow * stride;
                let mut best = src[best_idx];
                for i in 0..window {
                    let row = base + (oh * stride + i) * w + ow * stride;
                    for j in 0..window {
                        let v = src[row + j];
                        if v > best {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                let o = (p * hout + oh) * wout + ow;
                dst[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient to the input position that won the max.
pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch {
            context: "maxpool2d backward",
            dimension: "elements",
            expected: argmax.len(),
            found: grad_out.len(),
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx as usize] = d[idx as usize] + g;
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the forward input (pre-activation).
pub fn relu_backward<T: Scalar>(pre_activation: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("relu backward", pre_activation.shape())?;
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(pre_activation.shape().to_vec(), data)
}

/// Guided-ReLU gradient: passes only where the forward input and the
/// incoming gradient are both positive.
pub fn guided_relu_backward<T: Scalar>(
    pre_activation: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    grad_out.expect_shape("guided relu backward", pre_activation.shape())?;
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            if x > T::zero() && g > T::zero() {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(pre_activation.shape().to_vec(), data)
}

/// `[N, In] x [Out, In]^T + bias -> [N, Out]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin, fout) = linear_dims(input, weights)?;
    if bias.len() != fout {
        return Err(Error::ShapeMismatch {
            context: "linear bias",
            dimension: "out_features",
            expected: fout,
            found: bias.len(),
        });
    }
    let mut out = Tensor::zeros(&[n, fout]);
    for row in out.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        input.data(),
        fin as isize,
        1,
        weights.data(),
        1,
        fin as isize,
        T::one(),
        out.data_mut(),
        fout as isize,
        1,
    );
    Ok(out)
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "linear input",
            dimension: "rank",
            expected: 2,
            found: input.rank(),
        });
    }
    if weights.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "linear weights",
            dimension: "rank",
            expected: 2,
            found: weights.rank(),
        });
    }
    let (n, fin) = (input.shape()[0], input.shape()[1]);
    let (fout, win) = (weights.shape()[0], weights.shape()[1]);
    if win != fin {
        return Err(Error::ShapeMismatch {
            context: "linear",
            dimension: "in_features",
            expected: win,
            found: fin,
        });
    }
    Ok((n, fin, fout))
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, fin, fout) = linear_dims(input, weights)?;
    grad_out.expect_shape("linear backward", &[n, fout])?;
    let mut dx = Tensor::zeros(&[n, fin]);
    T::gemm(
        n,
        fout,
        fin,
        T::one(),
        grad_out.data(),
        fout as isize,
        1,
        weights.data(),
        fin as isize,
        1,
        T::zero(),
        dx.data_mut(),
        fin as isize,
        1,
    );
    let mut dw = Tensor::zeros(&[fout, fin]);
    T::gemm(
        fout,
        n,
        fin,
        T::one(),
        grad_out.data(),
        1,
        fout as isize,
        input.data(),
        fin as isize,
        1,
        T::zero(),
        dw.data_mut(),
        fin as isize,
        1,
    );
    let mut db = Tensor::zeros(&[fout]);
    for row in grad_out.data().chunks_exact(fout) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    Ok(LinearGrads {
        input: dx,
        weights: dw,
        bias: db,
    })
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "softmax cross-entropy logits",
            dimension: "rank",
            expected: 2,
            found: logits.rank(),
        });
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "softmax cross-entropy",
            dimension: "labels",
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for ((row, drow), &label) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &z) in drow.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum = sum + *d;
        }
        total += (sum.ln() + max - row[label]).as_f64();
        for d in drow.iter_mut() {
            *d = *d / sum * inv_n;
        }
        drow[label] = drow[label] - inv_n;
    }
    Ok((T::from_f64(total / n as f64), grad))
}

/// Index of the largest logit per row; the lowest index wins ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
