//! Layer math: forward passes and analytic gradients.
//!
//! All functions are pure and generic over the element type so the same code
//! runs in 32-bit for training and 64-bit for gradient checking. Convolution
//! accumulates in `dy -> dx -> c` order per output element, which is exactly
//! the global flatten ordering; the dense layer accumulates over its input
//! index in the same order. That shared ordering is what lets the converted
//! head reproduce the dense head bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

/// Convolution parameters. Kernels are `[kh, kw, cin, filters]`, channels-last.
#[derive(Clone, Debug)]
pub struct Conv2dParams<T: Real = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: Padding,
    pub stride: (usize, usize),
    pub frozen: bool,
}

impl<T: Real> Conv2dParams<T> {
    pub fn kh(&self) -> usize {
        self.kernels.shape()[0]
    }
    pub fn kw(&self) -> usize {
        self.kernels.shape()[1]
    }
    pub fn cin(&self) -> usize {
        self.kernels.shape()[2]
    }
    pub fn filters(&self) -> usize {
        self.kernels.shape()[3]
    }

    /// Output spatial dims for an input of `[h, w, cin]`.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        match self.padding {
            Padding::Valid => {
                if h < self.kh() || w < self.kw() {
                    return Err(Error::Shape(format!(
                        "input {h}x{w} smaller than kernel {}x{}",
                        self.kh(),
                        self.kw()
                    )));
                }
                Ok(((h - self.kh()) / sh + 1, (w - self.kw()) / sw + 1))
            }
            Padding::Same => Ok((h.div_ceil(sh), w.div_ceil(sw))),
        }
    }
}

/// Dense layer parameters. Weights are `[in, out]`, row-major.
#[derive(Clone, Debug)]
pub struct DenseParams<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
    pub frozen: bool,
}

impl<T: Real> DenseParams<T> {
    pub fn input_len(&self) -> usize {
        self.weights.shape()[0]
    }
    pub fn output_len(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Parameter gradients plus (optionally) the gradient w.r.t. the layer input.
#[derive(Clone, Debug)]
pub struct LayerGrad<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

fn check_image_shape<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("expected [h, w, c] tensor, got {s:?}"))),
    }
}

/// Direct convolution: `out[y, x, f] = bias[f] + sum input[y*sh+dy, x*sw+dx, c] * k[dy, dx, c, f]`.
///
/// Same-padding taps outside the input contribute zero.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let (h, w, cin) = check_image_shape(input)?;
    if cin != p.cin() {
        return Err(Error::Shape(format!(
            "input channels {cin} do not match kernel channels {}",
            p.cin()
        )));
    }
    let (oh, ow) = p.output_dims(h, w)?;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!(
            "convolution output collapsed to {oh}x{ow}"
        )));
    }
    let (kh, kw, f) = (p.kh(), p.kw(), p.filters());
    let (sh, sw) = p.stride;
    let (pad_top, pad_left) = match p.padding {
        Padding::Valid => (0isize, 0isize),
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };

    let x = input.data();
    let k = p.kernels.data();
    let b = p.bias.data();
    let mut out = vec![T::zero(); oh * ow * f];

    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * f;
            out[o_base..o_base + f].copy_from_slice(b);
            for dy in 0..kh {
                let iy = (oy * sh + dy) as isize - pad_top;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * sw + dx) as isize - pad_left;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let i_base = (iy as usize * w + ix as usize) * cin;
                    let k_row = ((dy * kw + dx) * cin) * f;
                    for c in 0..cin {
                        let v = x[i_base + c];
                        let k_base = k_row + c * f;
                        let (ks, os) = (&k[k_base..k_base + f], &mut out[o_base..o_base + f]);
                        for j in 0..f {
                            os[j] = os[j] + v * ks[j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, f], out)
}

/// Gradients of [`conv2d_forward`] w.r.t. kernels, bias, and (if requested)
/// the input.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &Conv2dParams<T>,
    upstream: &Tensor<T>,
    need_input_grad: bool,
) -> Result<LayerGrad<T>> {
    let (h, w, cin) = check_image_shape(input)?;
    let (oh, ow) = p.output_dims(h, w)?;
    let f = p.filters();
    if upstream.shape() != [oh, ow, f] {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match conv output [{oh}, {ow}, {f}]",
            upstream.shape()
        )));
    }
    let (kh, kw) = (p.kh(), p.kw());
    let (sh, sw) = p.stride;
    let (pad_top, pad_left) = match p.padding {
        Padding::Valid => (0isize, 0isize),
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };

    let x = input.data();
    let k = p.kernels.data();
    let u = upstream.data();
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); f];
    let mut dx = if need_input_grad {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };

    for oy in 0..oh {
        for ox in 0..ow {
            let u_base = (oy * ow + ox) * f;
            let us = &u[u_base..u_base + f];
            for j in 0..f {
                db[j] = db[j] + us[j];
            }
            for dy in 0..kh {
                let iy = (oy * sh + dy) as isize - pad_top;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx_ in 0..kw {
                    let ix = (ox * sw + dx_) as isize - pad_left;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let i_base = (iy as usize * w + ix as usize) * cin;
                    let k_row = ((dy * kw + dx_) * cin) * f;
                    for c in 0..cin {
                        let v = x[i_base + c];
                        let k_base = k_row + c * f;
                        let dks = &mut dk[k_base..k_base + f];
                        for j in 0..f {
                            dks[j] = dks[j] + v * us[j];
                        }
                        if need_input_grad {
                            let ks = &k[k_base..k_base + f];
                            let mut acc = T::zero();
                            for j in 0..f {
                                acc = acc + ks[j] * us[j];
                            }
                            dx[i_base + c] = dx[i_base + c] + acc;
                        }
                    }
                }
            }
        }
    }

    Ok(LayerGrad {
        weights: Tensor::from_vec(p.kernels.shape(), dk)?,
        bias: Tensor::from_vec(&[f], db)?,
        input: if need_input_grad {
            Some(Tensor::from_vec(&[h, w, cin], dx)?)
        } else {
            None
        },
    })
}

/// Argmax positions recorded by the pooling forward pass, flat input indices.
#[derive(Clone, Debug)]
pub struct PoolRecord {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2; a trailing odd row/column is dropped.
/// Ties go to the first element in row-major window scan order.
pub fn maxpool2d_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolRecord)> {
    let (h, w, c) = check_image_shape(input)?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "maxpool2d requires spatial dims >= 2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![T::zero(); oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];

    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = (2 * oy * w + 2 * ox) * c + ch;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + (2 * ox + dx)) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[oh, ow, c], out)?,
        PoolRecord {
            input_shape: vec![h, w, c],
            argmax,
        },
    ))
}

/// Routes each upstream gradient to its recorded argmax position.
pub fn maxpool2d_backward<T: Real>(record: &PoolRecord, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.len() != record.argmax.len() {
        return Err(Error::Shape(format!(
            "upstream length {} does not match pool record {}",
            upstream.len(),
            record.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&record.input_shape);
    for (o, &src) in record.argmax.iter().enumerate() {
        dx[src] = dx[src] + upstream[o];
    }
    Ok(dx)
}

/// Linear part of the dense layer: `pre[j] = bias[j] + sum_i x[i] * w[i, j]`.
pub fn dense_forward_linear<T: Real>(input: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let n_in = p.input_len();
    let n_out = p.output_len();
    if input.len() != n_in {
        return Err(Error::Shape(format!(
            "dense input length {} does not match weights [{n_in}, {n_out}]",
            input.len()
        )));
    }
    let x = input.data();
    let w = p.weights.data();
    let mut pre = p.bias.data().to_vec();
    for i in 0..n_in {
        let v = x[i];
        let ws = &w[i * n_out..(i + 1) * n_out];
        for j in 0..n_out {
            pre[j] = pre[j] + v * ws[j];
        }
    }
    Tensor::from_vec(&[n_out], pre)
}

/// Dense layer including its activation.
pub fn dense_forward<T: Real>(input: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    Ok(apply_activation(p.activation, dense_forward_linear(input, p)?))
}

/// Gradients of the linear dense map given an upstream gradient w.r.t. the
/// pre-activation output.
pub fn dense_backward_linear<T: Real>(
    input: &Tensor<T>,
    p: &DenseParams<T>,
    upstream_pre: &Tensor<T>,
    need_input_grad: bool,
) -> Result<LayerGrad<T>> {
    let n_in = p.input_len();
    let n_out = p.output_len();
    if input.len() != n_in || upstream_pre.len() != n_out {
        return Err(Error::Shape(format!(
            "dense backward shapes: input {}, upstream {}, weights [{n_in}, {n_out}]",
            input.len(),
            upstream_pre.len()
        )));
    }
    let x = input.data();
    let w = p.weights.data();
    let u = upstream_pre.data();
    let mut dw = vec![T::zero(); n_in * n_out];
    for i in 0..n_in {
        let v = x[i];
        let dws = &mut dw[i * n_out..(i + 1) * n_out];
        for j in 0..n_out {
            dws[j] = v * u[j];
        }
    }
    let input_grad = if need_input_grad {
        let mut dx = vec![T::zero(); n_in];
        for i in 0..n_in {
            let ws = &w[i * n_out..(i + 1) * n_out];
            let mut acc = T::zero();
            for j in 0..n_out {
                acc = acc + ws[j] * u[j];
            }
            dx[i] = acc;
        }
        Some(Tensor::from_vec(&[n_in], dx)?)
    } else {
        None
    };
    Ok(LayerGrad {
        weights: Tensor::from_vec(&[n_in, n_out], dw)?,
        bias: Tensor::from_vec(&[n_out], u.to_vec())?,
        input: input_grad,
    })
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU input gradient; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(post: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    assert_eq!(post.shape(), upstream.shape(), "relu_backward shape mismatch");
    let mut out = upstream.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(post.data()) {
        if p <= T::zero() {
            *o = T::zero();
        }
    }
    out
}

/// Numerically stable softmax over a flat tensor.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    assert!(!x.is_empty(), "softmax of empty tensor");
    let max = x.data().iter().copied().fold(x[0], |a, b| if b > a { b } else { a });
    let mut out = x.clone();
    let mut sum = T::zero();
    for v in out.data_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in out.data_mut() {
        *v = *v / sum;
    }
    out
}

/// Softmax Jacobian-vector product: `dx = p * (g - <g, p>)`.
pub fn softmax_backward<T: Real>(post: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    assert_eq!(post.shape(), upstream.shape(), "softmax_backward shape mismatch");
    let mut dot = T::zero();
    for (&p, &g) in post.data().iter().zip(upstream.data()) {
        dot = dot + p * g;
    }
    let mut out = post.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(upstream.data()) {
        *o = *o * (g - dot);
    }
    out
}

pub fn apply_activation<T: Real>(act: Activation, pre: Tensor<T>) -> Tensor<T> {
    match act {
        Activation::Linear => pre,
        Activation::Relu => relu(&pre),
        Activation::Softmax => softmax(&pre),
    }
}

/// Chains an upstream gradient w.r.t. the post-activation output back to the
/// pre-activation value.
pub fn activation_backward<T: Real>(
    act: Activation,
    post: &Tensor<T>,
    upstream_post: &Tensor<T>,
) -> Tensor<T> {
    match act {
        Activation::Linear => upstream_post.clone(),
        Activation::Relu => relu_backward(post, upstream_post),
        Activation::Softmax => softmax_backward(post, upstream_post),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Mask recorded by a training-mode dropout pass.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

/// Inverted dropout: in training mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; inference is the
/// identity.
pub fn dropout_forward<T: Real>(
    input: &Tensor<T>,
    rate: f64,
    mode: DropoutMode,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == DropoutMode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let scale_t = T::from_f64(scale);
    let mut out = input.clone();
    let mut keep = Vec::with_capacity(input.len());
    for v in out.data_mut() {
        let k = rng.next_f64() >= rate;
        keep.push(k);
        *v = if k { *v * scale_t } else { T::zero() };
    }
    Ok((out, Some(DropoutMask { keep, scale })))
}

/// Routes gradients through a recorded dropout mask.
pub fn dropout_backward<T: Real>(mask: &DropoutMask, upstream: &Tensor<T>) -> Tensor<T> {
    assert_eq!(mask.keep.len(), upstream.len(), "dropout mask length mismatch");
    let scale = T::from_f64(mask.scale);
    let mut out = upstream.clone();
    for (o, &k) in out.data_mut().iter_mut().zip(&mask.keep) {
        *o = if k { *o * scale } else { T::zero() };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(kernels: Tensor<f64>, bias: Tensor<f64>) -> Conv2dParams<f64> {
        Conv2dParams {
            kernels,
            bias,
            padding: Padding::Valid,
            stride: (1, 1),
            frozen: false,
        }
    }

    /// Naive quadruple-loop convolution used as the direct-summation oracle.
    fn conv2d_oracle(input: &Tensor<f64>, p: &Conv2dParams<f64>) -> Tensor<f64> {
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, f) = (p.kh(), p.kw(), p.filters());
        let (sh, sw) = p.stride;
        let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let mut out = Tensor::zeros(&[oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for j in 0..f {
                    let mut acc = p.bias[j];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for c in 0..cin {
                                let xv = input[((oy * sh + dy) * w + (ox * sw + dx)) * cin + c];
                                let kv = p.kernels[((dy * kw + dx) * cin + c) * f + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[(oy * ow + ox) * f + j] = acc;
                }
            }
        }
        out
    }

    fn fill_random(t: &mut Tensor<f64>, rng: &mut RngStream) {
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }

    #[test]
    fn conv_output_shape_mnist_chain() {
        // 28x28x1 with 10 3x3 valid filters -> 26x26x10.
        let p = Conv2dParams::<f32> {
            kernels: Tensor::zeros(&[3, 3, 1, 10]),
            bias: Tensor::zeros(&[10]),
            padding: Padding::Valid,
            stride: (1, 1),
            frozen: false,
        };
        let out = conv2d_forward(&Tensor::zeros(&[28, 28, 1]), &p).unwrap();
        assert_eq!(out.shape(), &[26, 26, 10]);
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut input = Tensor::<f64>::zeros(&[4, 4, 1]);
        fill_random(&mut input, &mut RngStream::new(1, "test/conv-id"));
        let p = conv_params(
            Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        );
        let out = conv2d_forward(&input, &p).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let input = Tensor::<f64>::filled(&[2, 2, 1], 1.0);
        let p = conv_params(Tensor::filled(&[2, 2, 1, 1], 1.0), Tensor::zeros(&[1]));
        let out = conv2d_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn conv_matches_direct_summation_oracle_exactly() {
        // Same arithmetic order means bit-equality, not just closeness.
        let mut rng = RngStream::new(5, "test/conv-oracle");
        for (h, w, cin, f, kh) in [(8, 8, 3, 4, 3), (5, 7, 2, 3, 2), (6, 6, 1, 4, 3)] {
            let mut input = Tensor::<f64>::zeros(&[h, w, cin]);
            fill_random(&mut input, &mut rng);
            let mut kernels = Tensor::<f64>::zeros(&[kh, kh, cin, f]);
            fill_random(&mut kernels, &mut rng);
            let mut bias = Tensor::<f64>::zeros(&[f]);
            fill_random(&mut bias, &mut rng);
            let p = conv_params(kernels, bias);
            let fast = conv2d_forward(&input, &p).unwrap();
            let slow = conv2d_oracle(&input, &p);
            assert_eq!(fast.data(), slow.data());
        }
    }

    #[test]
    fn conv_stride_two_shape_and_values() {
        let mut rng = RngStream::new(9, "test/conv-stride");
        let mut input = Tensor::<f64>::zeros(&[7, 7, 2]);
        fill_random(&mut input, &mut rng);
        let mut kernels = Tensor::<f64>::zeros(&[3, 3, 2, 2]);
        fill_random(&mut kernels, &mut rng);
        let mut p = conv_params(kernels, Tensor::zeros(&[2]));
        p.stride = (2, 2);
        let fast = conv2d_forward(&input, &p).unwrap();
        assert_eq!(fast.shape(), &[3, 3, 2]);
        assert_eq!(fast.data(), conv2d_oracle(&input, &p).data());
    }

    #[test]
    fn conv_same_padding_keeps_dims() {
        let input = Tensor::<f32>::filled(&[5, 5, 2], 0.5);
        let p = Conv2dParams::<f32> {
            kernels: Tensor::filled(&[3, 3, 2, 4], 0.1),
            bias: Tensor::zeros(&[4]),
            padding: Padding::Same,
            stride: (1, 1),
            frozen: false,
        };
        let out = conv2d_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), &[5, 5, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let p = Conv2dParams::<f32> {
            kernels: Tensor::zeros(&[3, 3, 2, 4]),
            bias: Tensor::zeros(&[4]),
            padding: Padding::Valid,
            stride: (1, 1),
            frozen: false,
        };
        assert!(conv2d_forward(&Tensor::zeros(&[6, 6, 3]), &p).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream_gives_zero_grads() {
        let mut rng = RngStream::new(2, "test/conv-zero");
        let mut input = Tensor::<f64>::zeros(&[4, 4, 2]);
        fill_random(&mut input, &mut rng);
        let mut kernels = Tensor::<f64>::zeros(&[3, 3, 2, 2]);
        fill_random(&mut kernels, &mut rng);
        let p = conv_params(kernels, Tensor::zeros(&[2]));
        let up = Tensor::<f64>::zeros(&[2, 2, 2]);
        let g = conv2d_backward(&input, &p, &up, true).unwrap();
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_chain_rule() {
        // 1x1 input, 1x1 kernel w: dL/dw = g * x, dL/dx = g * w.
        let input = Tensor::from_vec(&[1, 1, 1], vec![3.0f64]).unwrap();
        let p = conv_params(
            Tensor::from_vec(&[1, 1, 1, 1], vec![0.5]).unwrap(),
            Tensor::zeros(&[1]),
        );
        let up = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let g = conv2d_backward(&input, &p, &up, true).unwrap();
        assert_eq!(g.weights[0], 6.0);
        assert_eq!(g.bias[0], 2.0);
        assert_eq!(g.input.unwrap()[0], 1.0);
    }

    #[test]
    fn maxpool_shapes_follow_floor_semantics() {
        let (out, _) = maxpool2d_forward(&Tensor::<f32>::zeros(&[26, 26, 10])).unwrap();
        assert_eq!(out.shape(), &[13, 13, 10]);
        let (out, _) = maxpool2d_forward(&Tensor::<f32>::zeros(&[11, 11, 20])).unwrap();
        assert_eq!(out.shape(), &[5, 5, 20]);
        let (out, _) = maxpool2d_forward(&Tensor::<f32>::zeros(&[13, 13, 20])).unwrap();
        assert_eq!(out.shape(), &[6, 6, 20]);
    }

    #[test]
    fn maxpool_rejects_tiny_inputs() {
        assert!(maxpool2d_forward(&Tensor::<f32>::zeros(&[1, 4, 1])).is_err());
        assert!(maxpool2d_forward(&Tensor::<f32>::zeros(&[4, 1, 1])).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_in_scan_order() {
        let input = Tensor::<f32>::filled(&[2, 2, 1], 1.0);
        let (out, rec) = maxpool2d_forward(&input).unwrap();
        assert_eq!(out[0], 1.0);
        assert_eq!(rec.argmax[0], 0);
        let up = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let dx = maxpool2d_backward(&rec, &up).unwrap();
        assert_eq!(dx.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass() {
        let mut rng = RngStream::new(8, "test/pool-mass");
        let mut input = Tensor::<f64>::zeros(&[7, 9, 3]);
        fill_random(&mut input, &mut rng);
        let (_, rec) = maxpool2d_forward(&input).unwrap();
        let mut up = Tensor::<f64>::zeros(&[3, 4, 3]);
        fill_random(&mut up, &mut rng);
        let dx = maxpool2d_backward(&rec, &up).unwrap();
        let up_sum: f64 = up.data().iter().sum();
        let dx_sum: f64 = dx.data().iter().sum();
        assert!((up_sum - dx_sum).abs() < 1e-12);
    }

    #[test]
    fn dense_identity_weights_pass_through() {
        let n = 4;
        let mut w = Tensor::<f64>::zeros(&[n, n]);
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let p = DenseParams {
            weights: w,
            bias: Tensor::zeros(&[n]),
            activation: Activation::Linear,
            frozen: false,
        };
        let x = Tensor::from_vec(&[n], vec![0.1, -0.2, 0.3, 0.7]).unwrap();
        let y = dense_forward(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dense_parameter_count_mnist_head() {
        // in=500, out=10 gives 5,010 parameters.
        let p = DenseParams::<f32> {
            weights: Tensor::zeros(&[500, 10]),
            bias: Tensor::zeros(&[10]),
            activation: Activation::Softmax,
            frozen: false,
        };
        assert_eq!(p.weights.len() + p.bias.len(), 5_010);
    }

    #[test]
    fn dense_rejects_wrong_input_length() {
        let p = DenseParams::<f32> {
            weights: Tensor::zeros(&[4, 2]),
            bias: Tensor::zeros(&[2]),
            activation: Activation::Linear,
            frozen: false,
        };
        assert!(dense_forward(&Tensor::zeros(&[5]), &p).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        let neg = Tensor::from_vec(&[3], vec![-1.0f32, -5.0, -0.1]).unwrap();
        let post = relu(&neg);
        assert!(post.data().iter().all(|&v| v == 0.0));
        let up = Tensor::filled(&[3], 1.0);
        assert!(relu_backward(&post, &up).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let x = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        let p = softmax(&x);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let a = Tensor::from_vec(&[3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let b = a.map(|v| v + 42.0);
        assert!(softmax(&a).max_abs_diff(&softmax(&b)) < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::from_vec(&[3], vec![1.0f64.ln(), 2.0f64.ln(), 7.0f64.ln()]).unwrap();
        let p = softmax(&x);
        assert!((p[0] - 0.1).abs() < 1e-12);
        assert!((p[1] - 0.2).abs() < 1e-12);
        assert!((p[2] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = RngStream::new(17, "test/softmax-sum");
        for _ in 0..50 {
            let mut x = Tensor::<f32>::zeros(&[10]);
            for v in x.data_mut() {
                *v = rng.uniform(-30.0, 30.0) as f32;
            }
            let p = softmax(&x);
            let sum: f32 = p.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn dropout_infer_is_identity() {
        let x = Tensor::from_vec(&[4], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = RngStream::new(1, "dropout/test");
        let (y, mask) = dropout_forward(&x, 0.5, DropoutMode::Infer, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(mask.is_none());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = Tensor::from_vec(&[4], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = RngStream::new(1, "dropout/test");
        let (y, _) = dropout_forward(&x, 0.0, DropoutMode::Train, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::<f32>::zeros(&[4]);
        let mut rng = RngStream::new(1, "dropout/test");
        assert!(dropout_forward(&x, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Mean of many masked all-ones passes stays within 2% of 1.
        let n = 100_000;
        let x = Tensor::<f64>::filled(&[n], 1.0);
        let mut rng = RngStream::new(99, "dropout/expectation");
        let (y, _) = dropout_forward(&x, 0.5, DropoutMode::Train, &mut rng).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
