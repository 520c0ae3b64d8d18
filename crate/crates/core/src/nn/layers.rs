//! Layer primitives with explicit forward/backward passes.
//!
//! Forward functions return the output plus whatever the backward pass
//! needs. Convolution uses im2col and a single GEMM per batch.

use crate::error::{DfqError, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, ArrayView4, Axis, Ix2, Ix4};
use serde::{Deserialize, Serialize};

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold a NCHW batch into a `(Cin*k*k, N*OH*OW)` matrix.
pub fn im2col_batch<F: Scalar>(
    x: &ArrayView4<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kernel * kernel, n * oh * ow));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let row = ci * kernel * kernel + ki * kernel + kj;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, ni * oh * ow + oy * ow + ox]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input, accumulating overlaps.
pub fn col2im_batch<F: Scalar>(
    dcols: &Array2<F>,
    input_dim: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (n, c, h, w) = input_dim;
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let row = ci * kernel * kernel + ki * kernel + kj;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                dcols[[row, ni * oh * ow + oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

pub struct ConvCache<F: Scalar> {
    pub cols: Array2<F>,
    pub input_dim: (usize, usize, usize, usize),
}

/// `w`: (Cout, Cin, k, k), `x`: (N, Cin, H, W).
pub fn conv2d_forward<F: Scalar>(
    w: &ArrayD<F>,
    b: &Array1<F>,
    x: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> Result<(ArrayD<F>, ConvCache<F>)> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| DfqError::ShapeMismatch("conv input must be 4-D".into()))?;
    let w4 = w
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| DfqError::ShapeMismatch("conv weight must be 4-D".into()))?;
    let (n, cin, h, wdim) = x4.dim();
    let (cout, wcin, k, _) = w4.dim();
    if cin != wcin {
        return Err(DfqError::ShapeMismatch(format!(
            "conv expects {wcin} input channels, got {cin}"
        )));
    }
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wdim, k, stride, pad);
    let cols = im2col_batch(&x4, k, stride, pad);
    let w2 = w4.into_shape((cout, cin * k * k)).unwrap();
    let mut out2 = w2.dot(&cols); // (Cout, N*OH*OW)
    for (mut row, bi) in out2.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row += *bi;
    }
    // (Cout, N*OH*OW) -> (N, Cout, OH, OW)
    let mut y = ndarray::Array4::<F>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    y[[ni, co, oy, ox]] = out2[[co, ni * oh * ow + oy * ow + ox]];
                }
            }
        }
    }
    Ok((
        y.into_dyn(),
        ConvCache {
            cols,
            input_dim: (n, cin, h, wdim),
        },
    ))
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<F: Scalar>(
    w: &ArrayD<F>,
    cache: &ConvCache<F>,
    dy: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> (ArrayD<F>, ArrayD<F>, Array1<F>) {
    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cout, oh, ow) = dy4.dim();
    let (_, cin, k, _) = w4.dim();
    let mut dy2 = Array2::<F>::zeros((cout, n * oh * ow));
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    dy2[[co, ni * oh * ow + oy * ow + ox]] = dy4[[ni, co, oy, ox]];
                }
            }
        }
    }
    let dw2 = dy2.dot(&cache.cols.t());
    let dw = dw2.into_shape((cout, cin, k, k)).unwrap().into_dyn();
    let db = dy2.sum_axis(Axis(1));
    let w2 = w4.into_shape((cout, cin * k * k)).unwrap();
    let dcols = w2.t().dot(&dy2);
    let dx = col2im_batch(&dcols, cache.input_dim, k, stride, pad);
    (dx, dw, db)
}

/// `w`: (Out, In), `x`: (N, In).
pub fn linear_forward<F: Scalar>(
    w: &ArrayD<F>,
    b: &Array1<F>,
    x: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    let x2 = x
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| DfqError::ShapeMismatch("linear input must be 2-D".into()))?;
    let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
    if x2.ncols() != w2.ncols() {
        return Err(DfqError::ShapeMismatch(format!(
            "linear expects {} features, got {}",
            w2.ncols(),
            x2.ncols()
        )));
    }
    let mut y = x2.dot(&w2.t());
    for (mut row, _) in y.axis_iter_mut(Axis(0)).zip(0..) {
        row += &b.view();
    }
    Ok(y.into_dyn())
}

pub fn linear_backward<F: Scalar>(
    w: &ArrayD<F>,
    x: &ArrayD<F>,
    dy: &ArrayD<F>,
) -> (ArrayD<F>, ArrayD<F>, Array1<F>) {
    let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
    let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
    let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
    let dw = dy2.t().dot(&x2).into_dyn();
    let db = dy2.sum_axis(Axis(0));
    let dx = dy2.dot(&w2).into_dyn();
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and update running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// View a (N, C) or (N, C, H, W) tensor as (N, C, S).
pub fn as_ncs<F: Scalar>(x: &ArrayD<F>) -> Result<ndarray::Array3<F>> {
    match x.ndim() {
        2 => {
            let (n, c) = (x.shape()[0], x.shape()[1]);
            Ok(x.clone().into_shape((n, c, 1)).unwrap())
        }
        4 => {
            let s = x.shape()[2] * x.shape()[3];
            let (n, c) = (x.shape()[0], x.shape()[1]);
            Ok(x.clone().into_shape((n, c, s)).unwrap())
        }
        d => Err(DfqError::ShapeMismatch(format!(
            "batch norm expects 2-D or 4-D input, got {d}-D"
        ))),
    }
}

/// Per-channel mean and biased std over batch and spatial dims.
pub fn channel_stats<F: Scalar>(x: &ArrayD<F>) -> Result<(Array1<F>, Array1<F>)> {
    let v = as_ncs(x)?;
    let (n, c, s) = v.dim();
    let count = F::from_count(n * s);
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut acc = F::zero();
        for ni in 0..n {
            for si in 0..s {
                acc += v[[ni, ci, si]];
            }
        }
        mean[ci] = acc / count;
        let mut vacc = F::zero();
        for ni in 0..n {
            for si in 0..s {
                let d = v[[ni, ci, si]] - mean[ci];
                vacc += d * d;
            }
        }
        var[ci] = vacc / count;
    }
    let std = var.mapv(F::sqrt);
    Ok((mean, std))
}

pub struct BnCache<F: Scalar> {
    pub input: ArrayD<F>,
    pub xhat: ArrayD<F>,
    pub inv_std: Array1<F>,
    pub mode: BnMode,
    pub batch_mean: Array1<F>,
    pub batch_std: Array1<F>,
}

pub struct BnParams<'a, F: Scalar> {
    pub gamma: &'a Array1<F>,
    pub beta: &'a Array1<F>,
    pub running_mu: &'a Array1<F>,
    pub running_sigma: &'a Array1<F>,
    pub eps: F,
}

pub fn bn_forward<F: Scalar>(
    x: &ArrayD<F>,
    p: &BnParams<F>,
    mode: BnMode,
) -> Result<(ArrayD<F>, BnCache<F>)> {
    let v = as_ncs(x)?;
    let (n, c, s) = v.dim();
    if c != p.gamma.len() {
        return Err(DfqError::ShapeMismatch(format!(
            "batch norm expects {} channels, got {c}",
            p.gamma.len()
        )));
    }
    if mode == BnMode::Train && n < 2 {
        return Err(DfqError::DegenerateBatch(n));
    }
    let (mean, std) = match mode {
        BnMode::Train => channel_stats(x)?,
        BnMode::Eval => (p.running_mu.clone(), p.running_sigma.clone()),
    };
    let inv_std = std.mapv(|sd| F::one() / (sd * sd + p.eps).sqrt());
    let mut xhat = ndarray::Array3::<F>::zeros((n, c, s));
    let mut y = ndarray::Array3::<F>::zeros((n, c, s));
    for ci in 0..c {
        let (m, is, g, b) = (mean[ci], inv_std[ci], p.gamma[ci], p.beta[ci]);
        for ni in 0..n {
            for si in 0..s {
                let xh = (v[[ni, ci, si]] - m) * is;
                xhat[[ni, ci, si]] = xh;
                y[[ni, ci, si]] = g * xh + b;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        y.into_shape(shape.clone()).unwrap().into_dyn(),
        BnCache {
            input: x.clone(),
            xhat: xhat.into_shape(shape).unwrap().into_dyn(),
            inv_std,
            mode,
            batch_mean: mean,
            batch_std: std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward<F: Scalar>(
    cache: &BnCache<F>,
    gamma: &Array1<F>,
    dy: &ArrayD<F>,
) -> (ArrayD<F>, Array1<F>, Array1<F>) {
    let xhat = as_ncs(&cache.xhat).unwrap();
    let dyv = as_ncs(dy).unwrap();
    let (n, c, s) = xhat.dim();
    let count = F::from_count(n * s);
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    let mut dx = ndarray::Array3::<F>::zeros((n, c, s));
    for ci in 0..c {
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for ni in 0..n {
            for si in 0..s {
                sum_dy += dyv[[ni, ci, si]];
                sum_dy_xhat += dyv[[ni, ci, si]] * xhat[[ni, ci, si]];
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let g = gamma[ci];
        let is = cache.inv_std[ci];
        match cache.mode {
            BnMode::Train => {
                for ni in 0..n {
                    for si in 0..s {
                        let dxhat = dyv[[ni, ci, si]] * g;
                        dx[[ni, ci, si]] = is
                            * (dxhat
                                - (g * sum_dy + xhat[[ni, ci, si]] * g * sum_dy_xhat) / count);
                    }
                }
            }
            BnMode::Eval => {
                for ni in 0..n {
                    for si in 0..s {
                        dx[[ni, ci, si]] = dyv[[ni, ci, si]] * g * is;
                    }
                }
            }
        }
    }
    let shape = dy.shape().to_vec();
    (
        dx.into_shape(shape).unwrap().into_dyn(),
        dgamma,
        dbeta,
    )
}

pub fn relu_forward<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(x: &ArrayD<F>, dy: &ArrayD<F>) -> ArrayD<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xi| {
        if xi <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn leaky_relu_forward<F: Scalar>(x: &ArrayD<F>, slope: F) -> ArrayD<F> {
    x.mapv(|v| if v > F::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<F: Scalar>(x: &ArrayD<F>, dy: &ArrayD<F>, slope: F) -> ArrayD<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xi| {
        if xi <= F::zero() {
            *d *= slope;
        }
    });
    dx
}

pub fn tanh_forward<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    x.mapv(|v| v.tanh())
}

pub fn tanh_backward<F: Scalar>(y: &ArrayD<F>, dy: &ArrayD<F>) -> ArrayD<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yi| {
        *d *= F::one() - yi * yi;
    });
    dx
}

/// (N, C, H, W) -> (N, C) by spatial mean.
pub fn global_avg_pool_forward<F: Scalar>(x: &ArrayD<F>) -> Result<ArrayD<F>> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| DfqError::ShapeMismatch("pool input must be 4-D".into()))?;
    let (n, c, h, w) = x4.dim();
    let denom = F::from_count(h * w);
    let mut y = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = F::zero();
            for yy in 0..h {
                for xx in 0..w {
                    acc += x4[[ni, ci, yy, xx]];
                }
            }
            y[[ni, ci]] = acc / denom;
        }
    }
    Ok(y.into_dyn())
}

pub fn global_avg_pool_backward<F: Scalar>(
    input_shape: &[usize],
    dy: &ArrayD<F>,
) -> ArrayD<F> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
    let denom = F::from_count(h * w);
    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy2[[ni, ci]] / denom;
            for yy in 0..h {
                for xx in 0..w {
                    dx[[ni, ci, yy, xx]] = g;
                }
            }
        }
    }
    dx.into_dyn()
}

pub fn upsample_nearest_forward<F: Scalar>(x: &ArrayD<F>, factor: usize) -> Result<ArrayD<F>> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| DfqError::ShapeMismatch("upsample input must be 4-D".into()))?;
    let (n, c, h, w) = x4.dim();
    let mut y = ndarray::Array4::<F>::zeros((n, c, h * factor, w * factor));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h * factor {
                for xx in 0..w * factor {
                    y[[ni, ci, yy, xx]] = x4[[ni, ci, yy / factor, xx / factor]];
                }
            }
        }
    }
    Ok(y.into_dyn())
}

pub fn upsample_nearest_backward<F: Scalar>(
    input_shape: &[usize],
    dy: &ArrayD<F>,
    factor: usize,
) -> ArrayD<F> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
    let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h * factor {
                for xx in 0..w * factor {
                    dx[[ni, ci, yy / factor, xx / factor]] += dy4[[ni, ci, yy, xx]];
                }
            }
        }
    }
    dx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};

    #[test]
    fn conv_identity_kernel() {
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64).into_dyn();
        let (y, _) = conv2d_forward(&w.into_dyn(), &arr1(&[0.0]), &x, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bn_train_constant_batch_is_zero() {
        let x = ArrayD::from_elem(ndarray::IxDyn(&[4, 2]), 3.0);
        let gamma = arr1(&[1.0, 1.0]);
        let beta = arr1(&[0.0, 0.0]);
        let mu = arr1(&[0.0, 0.0]);
        let sigma = arr1(&[1.0, 1.0]);
        let p = BnParams {
            gamma: &gamma,
            beta: &beta,
            running_mu: &mu,
            running_sigma: &sigma,
            eps: 1e-5,
        };
        let (y, _): (ArrayD<f64>, _) = bn_forward(&x, &p, BnMode::Train).unwrap();
        for v in y.iter() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn bn_train_hand_example() {
        // batch {0, 2}, gamma=2, beta=1, eps tiny -> {-1, 3}
        let x = arr2(&[[0.0], [2.0]]).into_dyn();
        let gamma = arr1(&[2.0]);
        let beta = arr1(&[1.0]);
        let mu = arr1(&[0.0]);
        let sigma = arr1(&[1.0]);
        let eps = 1e-12;
        let p = BnParams {
            gamma: &gamma,
            beta: &beta,
            running_mu: &mu,
            running_sigma: &sigma,
            eps,
        };
        let (y, _) = bn_forward(&x, &p, BnMode::Train).unwrap();
        // eps-corrected oracle: inv_std = 1/sqrt(1 + eps)
        let is = 1.0 / (1.0f64 + eps).sqrt();
        assert!((y[[0, 0]] - (1.0 - 2.0 * is)).abs() < 1e-12);
        assert!((y[[1, 0]] - (1.0 + 2.0 * is)).abs() < 1e-12);
    }

    #[test]
    fn bn_eval_at_running_mean_returns_beta() {
        let x = arr2(&[[1.5, -0.5]]).into_dyn();
        let gamma = arr1(&[3.0, 4.0]);
        let beta = arr1(&[0.25, -0.75]);
        let mu = arr1(&[1.5, -0.5]);
        let sigma = arr1(&[2.0, 0.5]);
        let p = BnParams {
            gamma: &gamma,
            beta: &beta,
            running_mu: &mu,
            running_sigma: &sigma,
            eps: 1e-9,
        };
        let (y, _): (ArrayD<f64>, _) = bn_forward(&x, &p, BnMode::Eval).unwrap();
        assert!((y[[0, 0]] - 0.25).abs() < 1e-9);
        assert!((y[[0, 1]] + 0.75).abs() < 1e-9);
    }

    #[test]
    fn bn_train_rejects_single_sample() {
        let x = arr2(&[[1.0]]).into_dyn();
        let gamma = arr1(&[1.0]);
        let beta = arr1(&[0.0]);
        let mu = arr1(&[0.0]);
        let sigma = arr1(&[1.0]);
        let p = BnParams {
            gamma: &gamma,
            beta: &beta,
            running_mu: &mu,
            running_sigma: &sigma,
            eps: 1e-5,
        };
        assert!(matches!(
            bn_forward(&x, &p, BnMode::Train),
            Err(DfqError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn upsample_roundtrip_grad_sums() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64).into_dyn();
        let y = upsample_nearest_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let dy = ArrayD::from_elem(y.raw_dim(), 1.0);
        let dx = upsample_nearest_backward(x.shape(), &dy, 2);
        for v in dx.iter() {
            assert_eq!(*v, 4.0);
        }
    }
}
