//! Dense tensors and the small layer set used by the gaze network.
//!
//! Every layer comes as a pair of slice kernels (used on the hot path by
//! [`crate::model`]) and an allocating [`Tensor`] wrapper that validates
//! shapes. Convolutions are valid (no padding), stride 1, cross-correlation.
//! ReLU has subgradient 0 at 0 and the L1 loss uses `sign(0) = 0`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point precision the network runs in: `f32` for experiments,
/// `f64` for gradient verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fails with the first non-finite element, labelled with `location`.
    pub fn check_finite(&self, location: &str) -> Result<()> {
        check_finite(&self.data, location)
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected a 3-d tensor, got shape {:?}", self.shape),
            )),
        }
    }
}

pub fn check_finite<T: Real>(values: &[T], location: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            location: location.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Gradients of one layer: w.r.t. its input, its weights and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Spatial geometry of a valid stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height - self.kernel_h + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kernel_w + 1
    }

    pub fn out_len(&self) -> usize {
        self.kernels * self.out_h() * self.out_w()
    }

    /// Size of the im2col patch matrix.
    pub fn cols_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.kernels * self.in_channels * self.kernel_h * self.kernel_w
    }
}

pub mod kernels {
    //! Unchecked slice kernels. Callers guarantee buffer sizes.

    use super::{ConvGeometry, Real};

    /// Dot product with eight independent partial sums so the loop vectorizes.
    #[inline]
    pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut lanes = [T::zero(); 8];
        let mut ca = a.chunks_exact(8);
        let mut cb = b.chunks_exact(8);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for l in 0..8 {
                lanes[l] += x[l] * y[l];
            }
        }
        let mut tail = T::zero();
        for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
            tail += x * y;
        }
        let half = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
        (half[0] + half[2]) + (half[1] + half[3]) + tail
    }

    /// Patch matrix of `input`: row `(c, i, j)` holds, for every output
    /// pixel, the input value under kernel tap `(i, j)` of channel `c`.
    pub fn im2col<T: Real>(geo: &ConvGeometry, input: &[T], cols: &mut [T]) {
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let plane = oh * ow;
        let mut row = 0;
        for c in 0..geo.in_channels {
            let in_c = &input[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
            for i in 0..geo.kernel_h {
                for j in 0..geo.kernel_w {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for y in 0..oh {
                        dst[y * ow..(y + 1) * ow].copy_from_slice(&in_c[(y + i) * geo.width + j..][..ow]);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto the input (overwriting).
    pub fn col2im<T: Real>(geo: &ConvGeometry, grad_cols: &[T], grad_input: &mut [T]) {
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let plane = oh * ow;
        grad_input.fill(T::zero());
        let mut row = 0;
        for c in 0..geo.in_channels {
            let gi_c = &mut grad_input[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
            for i in 0..geo.kernel_h {
                for j in 0..geo.kernel_w {
                    let src = &grad_cols[row * plane..(row + 1) * plane];
                    for y in 0..oh {
                        let dst = &mut gi_c[(y + i) * geo.width + j..][..ow];
                        for (d, &g) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                            *d += g;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn conv2d_forward_cols<T: Real>(geo: &ConvGeometry, cols: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
        let plane = geo.out_len() / geo.kernels;
        let taps = geo.weight_len() / geo.kernels;
        for k in 0..geo.kernels {
            let out_k = &mut out[k * plane..(k + 1) * plane];
            out_k.fill(bias[k]);
            for (r, &w) in weights[k * taps..(k + 1) * taps].iter().enumerate() {
                for (d, &x) in out_k.iter_mut().zip(&cols[r * plane..(r + 1) * plane]) {
                    *d += w * x;
                }
            }
        }
    }

    /// Accumulates weight and bias gradients; writes the patch-matrix
    /// gradient (overwriting) when `grad_cols` is given.
    pub fn conv2d_backward_cols<T: Real>(
        geo: &ConvGeometry,
        cols: &[T],
        weights: &[T],
        grad_out: &[T],
        grad_weights: &mut [T],
        grad_bias: &mut [T],
        grad_cols: Option<&mut [T]>,
    ) {
        let plane = geo.out_len() / geo.kernels;
        let taps = geo.weight_len() / geo.kernels;
        for k in 0..geo.kernels {
            let g_k = &grad_out[k * plane..(k + 1) * plane];
            grad_bias[k] += g_k.iter().copied().sum::<T>();
            for (r, gw) in grad_weights[k * taps..(k + 1) * taps].iter_mut().enumerate() {
                let x = &cols[r * plane..(r + 1) * plane];
                *gw += dot(x, g_k);
            }
        }
        if let Some(gc) = grad_cols {
            gc.fill(T::zero());
            for k in 0..geo.kernels {
                let g_k = &grad_out[k * plane..(k + 1) * plane];
                for (r, &w) in weights[k * taps..(k + 1) * taps].iter().enumerate() {
                    for (d, &g) in gc[r * plane..(r + 1) * plane].iter_mut().zip(g_k) {
                        *d += w * g;
                    }
                }
            }
        }
    }

    pub fn conv2d_forward<T: Real>(
        geo: &ConvGeometry,
        input: &[T],
        weights: &[T],
        bias: &[T],
        out: &mut [T],
    ) {
        let mut cols = vec![T::zero(); geo.cols_len()];
        im2col(geo, input, &mut cols);
        conv2d_forward_cols(geo, &cols, weights, bias, out);
    }

    /// Accumulates weight and bias gradients; writes the input gradient
    /// (overwriting) when `grad_input` is given.
    pub fn conv2d_backward<T: Real>(
        geo: &ConvGeometry,
        input: &[T],
        weights: &[T],
        grad_out: &[T],
        grad_weights: &mut [T],
        grad_bias: &mut [T],
        grad_input: Option<&mut [T]>,
    ) {
        let mut cols = vec![T::zero(); geo.cols_len()];
        im2col(geo, input, &mut cols);
        match grad_input {
            Some(gi) => {
                let mut grad_cols = vec![T::zero(); geo.cols_len()];
                conv2d_backward_cols(geo, &cols, weights, grad_out, grad_weights, grad_bias, Some(&mut grad_cols));
                col2im(geo, &grad_cols, gi);
            }
            None => conv2d_backward_cols(geo, &cols, weights, grad_out, grad_weights, grad_bias, None),
        }
    }

    /// 2×2 max pooling. `argmax[o]` receives the flat input index of the
    /// window maximum (first in scan order on ties).
    pub fn maxpool2_forward<T: Real>(
        channels: usize,
        height: usize,
        width: usize,
        input: &[T],
        out: &mut [T],
        argmax: &mut [usize],
    ) {
        let (oh, ow) = (height / 2, width / 2);
        for c in 0..channels {
            for y in 0..oh {
                for x in 0..ow {
                    let top = c * height * width + 2 * y * width + 2 * x;
                    let mut best = top;
                    for cand in [top + 1, top + width, top + width + 1] {
                        if input[cand] > input[best] {
                            best = cand;
                        }
                    }
                    let o = (c * oh + y) * ow + x;
                    out[o] = input[best];
                    argmax[o] = best;
                }
            }
        }
    }

    pub fn maxpool2_backward<T: Real>(argmax: &[usize], grad_out: &[T], grad_input: &mut [T]) {
        grad_input.fill(T::zero());
        for (&idx, &g) in argmax.iter().zip(grad_out) {
            grad_input[idx] += g;
        }
    }

    /// `out = W·x + b` with `W` stored row-major as `out.len() × x.len()`.
    pub fn dense_forward<T: Real>(x: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
        let n = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            *o = bias[r] + dot(&weights[r * n..(r + 1) * n], x);
        }
    }

    pub fn dense_backward<T: Real>(
        x: &[T],
        weights: &[T],
        grad_out: &[T],
        grad_weights: &mut [T],
        grad_bias: &mut [T],
        grad_input: Option<&mut [T]>,
    ) {
        let n = x.len();
        for (r, &g) in grad_out.iter().enumerate() {
            grad_bias[r] += g;
            if g == T::zero() {
                continue;
            }
            let gw = &mut grad_weights[r * n..(r + 1) * n];
            for (d, &v) in gw.iter_mut().zip(x) {
                *d += g * v;
            }
        }
        if let Some(gi) = grad_input {
            gi.fill(T::zero());
            for (r, &g) in grad_out.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = &weights[r * n..(r + 1) * n];
                for (d, &w) in gi.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn relu_inplace<T: Real>(values: &mut [T]) {
        for v in values {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    /// Zeroes `grad` wherever the pre-activation was `<= 0`.
    pub fn relu_backward_inplace<T: Real>(pre_activation: &[T], grad: &mut [T]) {
        for (g, &p) in grad.iter_mut().zip(pre_activation) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
    }
}

fn conv_geometry<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<ConvGeometry> {
    let (c, h, w) = input.dims3("conv2d")?;
    let [k, kc, kh, kw] = *kernels.shape() else {
        return Err(Error::invalid(
            "conv2d",
            format!("kernels must be 4-d, got {:?}", kernels.shape()),
        ));
    };
    if kc != c || kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::Shape {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernels.shape().to_vec(),
        });
    }
    Ok(ConvGeometry {
        in_channels: c,
        height: h,
        width: w,
        kernels: k,
        kernel_h: kh,
        kernel_w: kw,
    })
}

/// Valid stride-1 cross-correlation of a `C×H×W` input with `K×C×kh×kw`
/// kernels.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let geo = conv_geometry(input, kernels)?;
    if bias.len() != geo.kernels {
        return Err(Error::Shape {
            op: "conv2d bias",
            left: kernels.shape().to_vec(),
            right: vec![bias.len()],
        });
    }
    let mut out = Tensor::zeros(vec![geo.kernels, geo.out_h(), geo.out_w()]);
    kernels::conv2d_forward(&geo, input.data(), kernels.data(), bias, out.data_mut());
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let geo = conv_geometry(input, kernels)?;
    let expected = [geo.kernels, geo.out_h(), geo.out_w()];
    if grad_out.shape() != expected {
        return Err(Error::Shape {
            op: "conv2d_backward",
            left: expected.to_vec(),
            right: grad_out.shape().to_vec(),
        });
    }
    let mut grads = LayerGrads {
        input: Tensor::zeros(input.shape().to_vec()),
        weights: Tensor::zeros(kernels.shape().to_vec()),
        bias: vec![T::zero(); geo.kernels],
    };
    kernels::conv2d_backward(
        &geo,
        input.data(),
        kernels.data(),
        grad_out.data(),
        grads.weights.data_mut(),
        &mut grads.bias,
        Some(grads.input.data_mut()),
    );
    Ok(grads)
}

/// Non-overlapping 2×2 max pooling; returns the pooled tensor and the flat
/// input index of each window's maximum.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("spatial dims must be even, got {h}×{w}"),
        ));
    }
    let mut out = Tensor::zeros(vec![c, h / 2, w / 2]);
    let mut argmax = vec![0; out.len()];
    kernels::maxpool2_forward(c, h, w, input.data(), out.data_mut(), &mut argmax);
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape {
            op: "maxpool2_backward",
            left: vec![argmax.len()],
            right: grad_out.shape().to_vec(),
        });
    }
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    if let Some(&bad) = argmax.iter().find(|&&i| i >= grad_in.len()) {
        return Err(Error::invalid(
            "maxpool2_backward",
            format!("argmax index {bad} outside input of shape {input_shape:?}"),
        ));
    }
    kernels::maxpool2_backward(argmax, grad_out.data(), grad_in.data_mut());
    Ok(grad_in)
}

fn dense_dims<T: Real>(x: &[T], weights: &Tensor<T>, bias: &[T]) -> Result<(usize, usize)> {
    match *weights.shape() {
        [m, n] if n == x.len() && m == bias.len() => Ok((m, n)),
        _ => Err(Error::Shape {
            op: "dense",
            left: weights.shape().to_vec(),
            right: vec![bias.len(), x.len()],
        }),
    }
}

/// `W·x + b` for `W` of shape `m×n`.
pub fn dense<T: Real>(x: &[T], weights: &Tensor<T>, bias: &[T]) -> Result<Vec<T>> {
    let (m, _) = dense_dims(x, weights, bias)?;
    let mut out = vec![T::zero(); m];
    kernels::dense_forward(x, weights.data(), bias, &mut out);
    Ok(out)
}

pub fn dense_backward<T: Real>(
    x: &[T],
    weights: &Tensor<T>,
    grad_out: &[T],
) -> Result<LayerGrads<T>> {
    let (m, n) = dense_dims(x, weights, grad_out)?;
    let mut grads = LayerGrads {
        input: Tensor::zeros(vec![n]),
        weights: Tensor::zeros(vec![m, n]),
        bias: vec![T::zero(); m],
    };
    kernels::dense_backward(
        x,
        weights.data(),
        grad_out,
        grads.weights.data_mut(),
        &mut grads.bias,
        Some(grads.input.data_mut()),
    );
    Ok(grads)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    kernels::relu_inplace(out.data_mut());
    out
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "relu_backward",
            left: input.shape().to_vec(),
            right: grad_out.shape().to_vec(),
        });
    }
    let mut grad = grad_out.clone();
    kernels::relu_backward_inplace(input.data(), grad.data_mut());
    Ok(grad)
}

/// Mean over the batch of `|Δyaw| + |Δpitch|`, with its gradient
/// `sign(pred − target) / B`.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let b = match *pred.shape() {
        [b, 2] if b >= 1 => b,
        _ => {
            return Err(Error::invalid(
                "l1_loss",
                format!("prediction must be B×2 with B ≥ 1, got {:?}", pred.shape()),
            ))
        }
    };
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "l1_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut grad = Tensor::zeros(vec![b, 2]);
    let mut total = T::zero();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.abs();
        *g = sign(d) * inv_b;
    }
    Ok((total * inv_b, grad))
}

#[inline]
pub(crate) fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Central-difference gradient `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
