//! Layers of the cascade: forward, cached forward, and backward passes.
//!
//! Each layer implements three things: shape inference (`out_shape`),
//! a pure forward pass, and a backward pass that consumes the cache
//! recorded during the forward. Parameter gradients are returned in the
//! same order as [`Layer::param_views`], which is the canonical order used
//! by the optimizers and the checkpoint format.

use crate::{NnError, Real, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2, Ix4};

/// Normalization-statistics mode for a taped forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Use batch statistics and update running statistics (training).
    Batch,
    /// Use frozen running statistics (evaluation, frozen fine-tuning).
    Frozen,
}

/// One layer of the cascade.
#[derive(Debug, Clone)]
pub enum Layer<T: Real> {
    /// Fixed per-channel affine input normalization: `(x - mean) / std`.
    InputNorm { mean: Array1<T>, std: Array1<T> },
    Conv2d {
        weight: Array4<T>,
        bias: Array1<T>,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        gamma: Array1<T>,
        beta: Array1<T>,
        running_mean: Array1<T>,
        running_var: Array1<T>,
        momentum: T,
        eps: T,
    },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Linear { weight: Array2<T>, bias: Array1<T> },
    Residual(ResidualBlock<T>),
}

/// Basic residual block: `relu(main(x) + shortcut(x))`.
///
/// An empty shortcut is the identity connection.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Real> {
    pub main: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
}

/// Per-layer state recorded by a cached forward pass.
#[derive(Debug)]
pub enum LayerCache<T: Real> {
    None,
    Conv {
        cols: Array2<T>,
        in_dim: (usize, usize, usize, usize),
        out_hw: (usize, usize),
    },
    BatchNorm {
        xhat: ArrayD<T>,
        inv_std: Array1<T>,
        mode: NormMode,
        batch_mean: Array1<T>,
        batch_var: Array1<T>,
    },
    Relu { active: ArrayD<bool> },
    MaxPool {
        argmax: ArrayD<usize>,
        in_hw: (usize, usize),
    },
    GlobalAvgPool { in_hw: (usize, usize) },
    Flatten { in_shape: Vec<usize> },
    Linear { input: Array2<T> },
    Residual {
        main: Vec<LayerCache<T>>,
        shortcut: Vec<LayerCache<T>>,
        active: ArrayD<bool>,
    },
}

fn as4<T: Real>(x: &ArrayD<T>) -> Array4<T> {
    x.view()
        .into_dimensionality::<Ix4>()
        .expect("rank-4 activation")
        .as_standard_layout()
        .to_owned()
}

fn as2<T: Real>(x: &ArrayD<T>) -> Array2<T> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 activation")
        .as_standard_layout()
        .to_owned()
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(NnError::Shape(format!(
            "kernel {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfold a batch into convolution columns of shape `(B*OH*OW, IC*KH*KW)`.
fn im2col<T: Real>(
    x: &Array4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (b, ic, h, w) = x.dim();
    let k = ic * kh * kw;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((b * oh * ow, k));
    let cs = cols.as_slice_mut().unwrap();
    for bi in 0..b {
        let xb = &xs[bi * ic * h * w..(bi + 1) * ic * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                for c in 0..ic {
                    let xc = &xb[c * h * w..(c + 1) * h * w];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = row + (c * kh + ky) * kw;
                        let rowoff = iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[base + kx] = xc[rowoff + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input (scatter-add), the adjoint of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcols: &Array2<T>,
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<T> {
    let (b, ic, h, w) = dims;
    let k = ic * kh * kw;
    let ds = dcols.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((b, ic, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                for c in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = row + (c * kh + ky) * kw;
                        let out_base = ((bi * ic + c) * h + iy as usize) * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dxs[out_base + ix as usize] += ds[base + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel sums over the batch and spatial axes of a rank-4 array.
fn channel_sums<T: Real>(x: &Array4<T>) -> Array1<T> {
    let (b, c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let hw = h * w;
    let mut out = Array1::<T>::zeros(c);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let mut acc = T::zero();
            for v in &xs[base..base + hw] {
                acc += *v;
            }
            out[ci] += acc;
        }
    }
    out
}

impl<T: Real> Layer<T> {
    /// Output shape for a per-sample input shape (no batch axis).
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::InputNorm { mean, .. } => {
                if in_shape.len() != 3 || in_shape[0] != mean.len() {
                    return Err(NnError::Shape(format!(
                        "input-norm expects {} channels, got {:?}",
                        mean.len(),
                        in_shape
                    )));
                }
                Ok(in_shape.to_vec())
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let (oc, ic, kh, kw) = weight.dim();
                if in_shape.len() != 3 || in_shape[0] != ic {
                    return Err(NnError::Shape(format!(
                        "conv expects {ic} input channels, got {in_shape:?}"
                    )));
                }
                let oh = conv_out(in_shape[1], kh, *stride, *padding)?;
                let ow = conv_out(in_shape[2], kw, *stride, *padding)?;
                Ok(vec![oc, oh, ow])
            }
            Layer::BatchNorm2d { gamma, .. } => {
                if in_shape.len() != 3 || in_shape[0] != gamma.len() {
                    return Err(NnError::Shape(format!(
                        "batchnorm expects {} channels, got {:?}",
                        gamma.len(),
                        in_shape
                    )));
                }
                Ok(in_shape.to_vec())
            }
            Layer::Relu => Ok(in_shape.to_vec()),
            Layer::MaxPool2d { kernel, stride } => {
                if in_shape.len() != 3 {
                    return Err(NnError::Shape("maxpool expects a rank-3 input".into()));
                }
                let oh = conv_out(in_shape[1], *kernel, *stride, 0)?;
                let ow = conv_out(in_shape[2], *kernel, *stride, 0)?;
                Ok(vec![in_shape[0], oh, ow])
            }
            Layer::GlobalAvgPool => {
                if in_shape.len() != 3 {
                    return Err(NnError::Shape("global pool expects a rank-3 input".into()));
                }
                Ok(vec![in_shape[0]])
            }
            Layer::Flatten => Ok(vec![in_shape.iter().product()]),
            Layer::Linear { weight, .. } => {
                let (out, inp) = weight.dim();
                if in_shape != [inp] {
                    return Err(NnError::Shape(format!(
                        "linear expects a flat input of {inp}, got {in_shape:?}"
                    )));
                }
                Ok(vec![out])
            }
            Layer::Residual(block) => {
                let mut main_shape = in_shape.to_vec();
                for l in &block.main {
                    main_shape = l.out_shape(&main_shape)?;
                }
                let mut short_shape = in_shape.to_vec();
                for l in &block.shortcut {
                    short_shape = l.out_shape(&short_shape)?;
                }
                if main_shape != short_shape {
                    return Err(NnError::Shape(format!(
                        "residual branch shapes differ: {main_shape:?} vs {short_shape:?}"
                    )));
                }
                Ok(main_shape)
            }
        }
    }

    /// Forward pass. `cache` selects whether backward state is recorded.
    pub fn forward(&self, x: &ArrayD<T>, mode: NormMode, cache: bool) -> (ArrayD<T>, LayerCache<T>) {
        match self {
            Layer::InputNorm { mean, std } => {
                let x4 = as4(x);
                let (b, c, h, w) = x4.dim();
                let mut y = x4;
                let ys = y.as_slice_mut().unwrap();
                let hw = h * w;
                for bi in 0..b {
                    for ci in 0..c {
                        let (m, s) = (mean[ci], std[ci]);
                        let base = (bi * c + ci) * hw;
                        for v in &mut ys[base..base + hw] {
                            *v = (*v - m) / s;
                        }
                    }
                }
                (y.into_dyn(), LayerCache::None)
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let x4 = as4(x);
                let (b, _ic, h, w) = x4.dim();
                let (oc, ic2, kh, kw) = weight.dim();
                let oh = conv_out(h, kh, *stride, *padding).expect("validated shape");
                let ow = conv_out(w, kw, *stride, *padding).expect("validated shape");
                let cols = im2col(&x4, kh, kw, *stride, *padding, oh, ow);
                let k = ic2 * kh * kw;
                let wmat = weight
                    .view()
                    .into_shape_with_order((oc, k))
                    .expect("contiguous weight");
                let mut y2 = cols.dot(&wmat.t());
                for mut row in y2.rows_mut() {
                    row += &bias.view();
                }
                let y = y2
                    .into_shape_with_order((b, oh, ow, oc))
                    .unwrap()
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned();
                let cache = if cache {
                    LayerCache::Conv {
                        cols,
                        in_dim: x4.dim(),
                        out_hw: (oh, ow),
                    }
                } else {
                    LayerCache::None
                };
                (y.into_dyn(), cache)
            }
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                ..
            } => {
                let x4 = as4(x);
                let (b, c, h, w) = x4.dim();
                let m = T::of((b * h * w) as f64);
                let (mean, var) = match mode {
                    NormMode::Batch => {
                        let mean = channel_sums(&x4).mapv(|v| v / m);
                        let mut centered = x4.clone();
                        for (ci, mu) in mean.iter().enumerate() {
                            centered
                                .index_axis_mut(Axis(1), ci)
                                .mapv_inplace(|v| v - *mu);
                        }
                        let var = channel_sums(&centered.mapv(|v| v * v)).mapv(|v| v / m);
                        (mean, var)
                    }
                    NormMode::Frozen => (running_mean.clone(), running_var.clone()),
                };
                let inv_std = var.mapv(|v| T::one() / (v + *eps).sqrt());
                let mut xhat = x4;
                for ci in 0..c {
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    xhat.index_axis_mut(Axis(1), ci)
                        .mapv_inplace(|v| (v - mu) * is);
                }
                let mut y = xhat.clone();
                for ci in 0..c {
                    let (g, bta) = (gamma[ci], beta[ci]);
                    y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + bta);
                }
                let cache = if cache {
                    LayerCache::BatchNorm {
                        xhat: xhat.into_dyn(),
                        inv_std,
                        mode,
                        batch_mean: mean,
                        batch_var: var,
                    }
                } else {
                    LayerCache::None
                };
                (y.into_dyn(), cache)
            }
            Layer::Relu => {
                let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
                let cache = if cache {
                    LayerCache::Relu {
                        active: x.mapv(|v| v > T::zero()),
                    }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            Layer::MaxPool2d { kernel, stride } => {
                let x4 = as4(x);
                let (b, c, h, w) = x4.dim();
                let oh = conv_out(h, *kernel, *stride, 0).expect("validated shape");
                let ow = conv_out(w, *kernel, *stride, 0).expect("validated shape");
                let xs = x4.as_slice().unwrap();
                let mut y = Array4::<T>::zeros((b, c, oh, ow));
                let mut argmax = Array4::<usize>::zeros((b, c, oh, ow));
                {
                    let ys = y.as_slice_mut().unwrap();
                    let ams = argmax.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let in_base = (bi * c + ci) * h * w;
                            let out_base = (bi * c + ci) * oh * ow;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = T::neg_infinity();
                                    let mut best_idx = 0usize;
                                    for ky in 0..*kernel {
                                        let iy = oy * stride + ky;
                                        for kx in 0..*kernel {
                                            let ix = ox * stride + kx;
                                            let v = xs[in_base + iy * w + ix];
                                            if v > best {
                                                best = v;
                                                best_idx = iy * w + ix;
                                            }
                                        }
                                    }
                                    ys[out_base + oy * ow + ox] = best;
                                    ams[out_base + oy * ow + ox] = best_idx;
                                }
                            }
                        }
                    }
                }
                let cache = if cache {
                    LayerCache::MaxPool {
                        argmax: argmax.into_dyn(),
                        in_hw: (h, w),
                    }
                } else {
                    LayerCache::None
                };
                (y.into_dyn(), cache)
            }
            Layer::GlobalAvgPool => {
                let x4 = as4(x);
                let (_, _, h, w) = x4.dim();
                let scale = T::one() / T::of((h * w) as f64);
                let y = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * scale);
                let cache = if cache {
                    LayerCache::GlobalAvgPool { in_hw: (h, w) }
                } else {
                    LayerCache::None
                };
                (y.into_dyn(), cache)
            }
            Layer::Flatten => {
                let in_shape = x.shape().to_vec();
                let b = in_shape[0];
                let flat: usize = in_shape[1..].iter().product();
                let y = x
                    .to_owned()
                    .into_shape_with_order((b, flat))
                    .expect("contiguous activation");
                let cache = if cache {
                    LayerCache::Flatten { in_shape }
                } else {
                    LayerCache::None
                };
                (y.into_dyn(), cache)
            }
            Layer::Linear { weight, bias } => {
                let x2 = as2(x);
                let mut y = x2.dot(&weight.t());
                for mut row in y.rows_mut() {
                    row += &bias.view();
                }
                let cache = if cache {
                    LayerCache::Linear { input: x2 }
                } else {
                    LayerCache::None
                };
                (y.into_dyn(), cache)
            }
            Layer::Residual(block) => {
                let (main_out, main_caches) = run_chain(&block.main, x, mode, cache);
                let (short_out, short_caches) = if block.shortcut.is_empty() {
                    (x.clone(), Vec::new())
                } else {
                    run_chain(&block.shortcut, x, mode, cache)
                };
                let pre = &main_out + &short_out;
                let y = pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
                let cache = if cache {
                    LayerCache::Residual {
                        main: main_caches,
                        shortcut: short_caches,
                        active: pre.mapv(|v| v > T::zero()),
                    }
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
        }
    }

    /// Backward pass: input gradient plus parameter gradients in
    /// [`Layer::param_views`] order.
    pub fn backward(&self, cache: &LayerCache<T>, dy: &ArrayD<T>) -> (ArrayD<T>, Vec<ArrayD<T>>) {
        match (self, cache) {
            (Layer::InputNorm { std, .. }, LayerCache::None) => {
                let mut dx = as4(dy);
                let (b, c, h, w) = dx.dim();
                let dxs = dx.as_slice_mut().unwrap();
                let hw = h * w;
                for bi in 0..b {
                    for ci in 0..c {
                        let s = std[ci];
                        let base = (bi * c + ci) * hw;
                        for v in &mut dxs[base..base + hw] {
                            *v = *v / s;
                        }
                    }
                }
                (dx.into_dyn(), vec![])
            }
            (
                Layer::Conv2d {
                    weight,
                    stride,
                    padding,
                    ..
                },
                LayerCache::Conv {
                    cols,
                    in_dim,
                    out_hw,
                },
            ) => {
                let (oc, ic, kh, kw) = weight.dim();
                let (oh, ow) = *out_hw;
                let b = in_dim.0;
                let dy4 = as4(dy);
                let dy2 = dy4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((b * oh * ow, oc))
                    .unwrap();
                let k = ic * kh * kw;
                let dw = dy2
                    .t()
                    .dot(cols)
                    .into_shape_with_order((oc, ic, kh, kw))
                    .unwrap();
                let db = dy2.sum_axis(Axis(0));
                let wmat = weight
                    .view()
                    .into_shape_with_order((oc, k))
                    .expect("contiguous weight");
                let dcols = dy2.dot(&wmat);
                let dx = col2im(&dcols, *in_dim, kh, kw, *stride, *padding, oh, ow);
                (dx.into_dyn(), vec![dw.into_dyn(), db.into_dyn()])
            }
            (
                Layer::BatchNorm2d { gamma, .. },
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    mode,
                    ..
                },
            ) => {
                let dy4 = as4(dy);
                let xhat4 = as4(xhat);
                let (b, c, h, w) = dy4.dim();
                let m = T::of((b * h * w) as f64);
                let sum_dy = channel_sums(&dy4);
                let sum_dy_xhat = channel_sums(&(&dy4 * &xhat4));
                let dgamma = sum_dy_xhat.clone();
                let dbeta = sum_dy.clone();
                let mut dx = dy4;
                match mode {
                    NormMode::Batch => {
                        for ci in 0..c {
                            let g = gamma[ci] * inv_std[ci];
                            let mean_dy = sum_dy[ci] / m;
                            let mean_dy_xhat = sum_dy_xhat[ci] / m;
                            let mut dxc = dx.index_axis_mut(Axis(1), ci);
                            let xhc = xhat4.index_axis(Axis(1), ci);
                            ndarray::Zip::from(&mut dxc).and(&xhc).for_each(|d, &xh| {
                                *d = g * (*d - mean_dy - xh * mean_dy_xhat);
                            });
                        }
                    }
                    NormMode::Frozen => {
                        for ci in 0..c {
                            let g = gamma[ci] * inv_std[ci];
                            dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g);
                        }
                    }
                }
                (dx.into_dyn(), vec![dgamma.into_dyn(), dbeta.into_dyn()])
            }
            (Layer::Relu, LayerCache::Relu { active }) => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(active).for_each(|d, &a| {
                    if !a {
                        *d = T::zero();
                    }
                });
                (dx, vec![])
            }
            (Layer::MaxPool2d { .. }, LayerCache::MaxPool { argmax, in_hw }) => {
                let dy4 = as4(dy);
                let (b, c, oh, ow) = dy4.dim();
                let (h, w) = *in_hw;
                let mut dx = Array4::<T>::zeros((b, c, h, w));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dys = dy4.as_slice().unwrap();
                    let ams = argmax.as_slice().unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let out_base = (bi * c + ci) * oh * ow;
                            let in_base = (bi * c + ci) * h * w;
                            for o in 0..oh * ow {
                                dxs[in_base + ams[out_base + o]] += dys[out_base + o];
                            }
                        }
                    }
                }
                (dx.into_dyn(), vec![])
            }
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool { in_hw }) => {
                let dy2 = as2(dy);
                let (b, c) = dy2.dim();
                let (h, w) = *in_hw;
                let scale = T::one() / T::of((h * w) as f64);
                let mut dx = Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let g = dy2[[bi, ci]] * scale;
                        dx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(g);
                    }
                }
                (dx.into_dyn(), vec![])
            }
            (Layer::Flatten, LayerCache::Flatten { in_shape }) => {
                let dx = dy
                    .to_owned()
                    .into_shape_with_order(in_shape.as_slice())
                    .expect("contiguous gradient");
                (dx, vec![])
            }
            (Layer::Linear { weight, .. }, LayerCache::Linear { input }) => {
                let dy2 = as2(dy);
                let dw = dy2.t().dot(input);
                let db = dy2.sum_axis(Axis(0));
                let dx = dy2.dot(weight);
                (dx.into_dyn(), vec![dw.into_dyn(), db.into_dyn()])
            }
            (
                Layer::Residual(block),
                LayerCache::Residual {
                    main,
                    shortcut,
                    active,
                },
            ) => {
                let mut dpre = dy.clone();
                ndarray::Zip::from(&mut dpre).and(active).for_each(|d, &a| {
                    if !a {
                        *d = T::zero();
                    }
                });
                let (dx_main, main_grads) = chain_backward(&block.main, main, &dpre);
                let (dx_short, short_grads) = if block.shortcut.is_empty() {
                    (dpre, Vec::new())
                } else {
                    chain_backward(&block.shortcut, shortcut, &dpre)
                };
                let dx = &dx_main + &dx_short;
                let mut grads = main_grads;
                grads.extend(short_grads);
                (dx, grads)
            }
            _ => panic!("layer/cache variant mismatch"),
        }
    }

    /// Trainable parameters, canonical order.
    pub fn param_views(&self) -> Vec<ArrayViewD<'_, T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } => {
                vec![weight.view().into_dyn(), bias.view().into_dyn()]
            }
            Layer::BatchNorm2d { gamma, beta, .. } => {
                vec![gamma.view().into_dyn(), beta.view().into_dyn()]
            }
            Layer::Linear { weight, bias } => {
                vec![weight.view().into_dyn(), bias.view().into_dyn()]
            }
            Layer::Residual(block) => {
                let mut v: Vec<ArrayViewD<'_, T>> =
                    block.main.iter().flat_map(|l| l.param_views()).collect();
                v.extend(block.shortcut.iter().flat_map(|l| l.param_views()));
                v
            }
            _ => vec![],
        }
    }

    pub fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } => {
                vec![weight.view_mut().into_dyn(), bias.view_mut().into_dyn()]
            }
            Layer::BatchNorm2d { gamma, beta, .. } => {
                vec![gamma.view_mut().into_dyn(), beta.view_mut().into_dyn()]
            }
            Layer::Linear { weight, bias } => {
                vec![weight.view_mut().into_dyn(), bias.view_mut().into_dyn()]
            }
            Layer::Residual(block) => {
                let mut v: Vec<ArrayViewMutD<'_, T>> = Vec::new();
                for l in &mut block.main {
                    v.extend(l.param_views_mut());
                }
                for l in &mut block.shortcut {
                    v.extend(l.param_views_mut());
                }
                v
            }
            _ => vec![],
        }
    }

    /// Non-trainable state (input-norm constants, batchnorm running stats).
    pub fn buffer_views(&self) -> Vec<ArrayViewD<'_, T>> {
        match self {
            Layer::InputNorm { mean, std } => {
                vec![mean.view().into_dyn(), std.view().into_dyn()]
            }
            Layer::BatchNorm2d {
                running_mean,
                running_var,
                ..
            } => vec![running_mean.view().into_dyn(), running_var.view().into_dyn()],
            Layer::Residual(block) => {
                let mut v: Vec<ArrayViewD<'_, T>> =
                    block.main.iter().flat_map(|l| l.buffer_views()).collect();
                v.extend(block.shortcut.iter().flat_map(|l| l.buffer_views()));
                v
            }
            _ => vec![],
        }
    }

    pub fn buffer_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        match self {
            Layer::InputNorm { mean, std } => {
                vec![mean.view_mut().into_dyn(), std.view_mut().into_dyn()]
            }
            Layer::BatchNorm2d {
                running_mean,
                running_var,
                ..
            } => vec![
                running_mean.view_mut().into_dyn(),
                running_var.view_mut().into_dyn(),
            ],
            Layer::Residual(block) => {
                let mut v: Vec<ArrayViewMutD<'_, T>> = Vec::new();
                for l in &mut block.main {
                    v.extend(l.buffer_views_mut());
                }
                for l in &mut block.shortcut {
                    v.extend(l.buffer_views_mut());
                }
                v
            }
            _ => vec![],
        }
    }

    /// Names aligned with [`Layer::param_views`].
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        match self {
            Layer::Conv2d { .. } | Layer::Linear { .. } => {
                vec![format!("{prefix}.weight"), format!("{prefix}.bias")]
            }
            Layer::BatchNorm2d { .. } => {
                vec![format!("{prefix}.gamma"), format!("{prefix}.beta")]
            }
            Layer::Residual(block) => {
                let mut v = Vec::new();
                for (i, l) in block.main.iter().enumerate() {
                    v.extend(l.param_names(&format!("{prefix}.main.{i}")));
                }
                for (i, l) in block.shortcut.iter().enumerate() {
                    v.extend(l.param_names(&format!("{prefix}.shortcut.{i}")));
                }
                v
            }
            _ => vec![],
        }
    }

    /// Names aligned with [`Layer::buffer_views`].
    pub fn buffer_names(&self, prefix: &str) -> Vec<String> {
        match self {
            Layer::InputNorm { .. } => {
                vec![format!("{prefix}.mean"), format!("{prefix}.std")]
            }
            Layer::BatchNorm2d { .. } => vec![
                format!("{prefix}.running_mean"),
                format!("{prefix}.running_var"),
            ],
            Layer::Residual(block) => {
                let mut v = Vec::new();
                for (i, l) in block.main.iter().enumerate() {
                    v.extend(l.buffer_names(&format!("{prefix}.main.{i}")));
                }
                for (i, l) in block.shortcut.iter().enumerate() {
                    v.extend(l.buffer_names(&format!("{prefix}.shortcut.{i}")));
                }
                v
            }
            _ => vec![],
        }
    }

    /// Fold freshly observed batch statistics into the running statistics.
    pub fn absorb_batch_stats(&mut self, cache: &LayerCache<T>) {
        match (self, cache) {
            (
                Layer::BatchNorm2d {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                },
                LayerCache::BatchNorm {
                    mode: NormMode::Batch,
                    batch_mean,
                    batch_var,
                    xhat,
                    ..
                },
            ) => {
                let shape = xhat.shape();
                let m = (shape[0] * shape[2] * shape[3]) as f64;
                // Running variance uses the unbiased estimate.
                let unbias = if m > 1.0 { T::of(m / (m - 1.0)) } else { T::one() };
                let mom = *momentum;
                let keep = T::one() - mom;
                ndarray::Zip::from(running_mean)
                    .and(batch_mean)
                    .for_each(|r, &bm| *r = keep * *r + mom * bm);
                ndarray::Zip::from(running_var)
                    .and(batch_var)
                    .for_each(|r, &bv| *r = keep * *r + mom * bv * unbias);
            }
            (Layer::Residual(block), LayerCache::Residual { main, shortcut, .. }) => {
                for (l, c) in block.main.iter_mut().zip(main) {
                    l.absorb_batch_stats(c);
                }
                for (l, c) in block.shortcut.iter_mut().zip(shortcut) {
                    l.absorb_batch_stats(c);
                }
            }
            _ => {}
        }
    }
}

/// Run a sub-chain of layers, collecting caches when requested.
pub(crate) fn run_chain<T: Real>(
    layers: &[Layer<T>],
    x: &ArrayD<T>,
    mode: NormMode,
    cache: bool,
) -> (ArrayD<T>, Vec<LayerCache<T>>) {
    let mut caches = Vec::with_capacity(if cache { layers.len() } else { 0 });
    let mut cur = x.clone();
    for layer in layers {
        let (y, c) = layer.forward(&cur, mode, cache);
        cur = y;
        if cache {
            caches.push(c);
        }
    }
    (cur, caches)
}

/// Backward through a sub-chain; parameter gradients in forward order.
pub(crate) fn chain_backward<T: Real>(
    layers: &[Layer<T>],
    caches: &[LayerCache<T>],
    dy: &ArrayD<T>,
) -> (ArrayD<T>, Vec<ArrayD<T>>) {
    let mut per_layer: Vec<Vec<ArrayD<T>>> = Vec::with_capacity(layers.len());
    per_layer.resize_with(layers.len(), Vec::new);
    let mut grad = dy.clone();
    for i in (0..layers.len()).rev() {
        let (dx, grads) = layers[i].backward(&caches[i], &grad);
        per_layer[i] = grads;
        grad = dx;
    }
    (grad, per_layer.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    #[test]
    fn conv_shape_inference() {
        let layer = Layer::<f64>::Conv2d {
            weight: Array4::zeros((8, 3, 3, 3)),
            bias: Array1::zeros(8),
            stride: 1,
            padding: 1,
        };
        assert_eq!(layer.out_shape(&[3, 32, 32]).unwrap(), vec![8, 32, 32]);
        assert!(layer.out_shape(&[4, 32, 32]).is_err());
    }

    #[test]
    fn maxpool_picks_maximum_and_routes_gradient() {
        let layer = Layer::<f64>::MaxPool2d { kernel: 2, stride: 2 };
        let x = Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 4.0, 2.0, 3.0])
            .unwrap()
            .into_dyn();
        let (y, cache) = layer.forward(&x, NormMode::Frozen, true);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dy = Array::from_elem((1, 1, 1, 1), 5.0).into_dyn();
        let (dx, _) = layer.backward(&cache, &dy);
        assert_eq!(dx[[0, 0, 0, 1]], 5.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn conv_matches_direct_computation() {
        // 1x1 input channel, 2x2 input, 2x2 kernel, no padding.
        let weight =
            Array4::from_shape_vec((1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let layer = Layer::Conv2d {
            weight,
            bias: array![0.5],
            stride: 1,
            padding: 0,
        };
        let x = Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 1.0, 1.0, 1.0])
            .unwrap()
            .into_dyn();
        let (y, _) = layer.forward(&x, NormMode::Frozen, false);
        assert_eq!(y[[0, 0, 0, 0]], 1.0 + 2.0 + 3.0 + 4.0 + 0.5);
    }

    #[test]
    fn residual_identity_shortcut_adds_input() {
        let block = Layer::<f64>::Residual(ResidualBlock {
            main: vec![Layer::Relu],
            shortcut: vec![],
        });
        let x = Array::from_shape_vec((1, 1, 1, 2), vec![2.0, -3.0])
            .unwrap()
            .into_dyn();
        let (y, _) = block.forward(&x, NormMode::Frozen, false);
        // relu(relu(x) + x): [relu(2+2), relu(0-3)]
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 0.0);
    }
}
