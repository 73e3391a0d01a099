//! Forward and backward kernels for the supported layers. All tensors are
//! row-major; spatial tensors are NHWC and conv kernels are `[kh, kw, cin, cout]`.

use super::GraphError;
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Resolved geometry of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn dim_err(layer: &str, detail: String) -> GraphError {
    GraphError::Dimension {
        layer: layer.to_string(),
        detail,
    }
}

/// Output extent and leading pad along one spatial axis.
pub fn conv_extent(n: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || k == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (n >= k).then(|| ((n - k) / stride + 1, 0)),
        Padding::Same => {
            let out = n.div_ceil(stride);
            let needed = ((out - 1) * stride + k).saturating_sub(n);
            // padded extent must still hold the kernel
            (n + needed >= k).then_some((out, needed / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        layer: &str,
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, GraphError> {
        let &[batch, in_h, in_w, cin] = input_shape else {
            return Err(dim_err(layer, format!("expected NHWC input, got shape {input_shape:?}")));
        };
        let &[kh, kw, kcin, cout] = kernel_shape else {
            return Err(dim_err(layer, format!("expected [kh, kw, cin, cout] kernel, got {kernel_shape:?}")));
        };
        if kcin != cin {
            return Err(dim_err(
                layer,
                format!("kernel expects {kcin} input channels but input has {cin}"),
            ));
        }
        let (out_h, pad_top) = conv_extent(in_h, kh, stride, padding)
            .ok_or_else(|| dim_err(layer, format!("kernel height {kh} does not fit input height {in_h}")))?;
        let (out_w, pad_left) = conv_extent(in_w, kw, stride, padding)
            .ok_or_else(|| dim_err(layer, format!("kernel width {kw} does not fit input width {in_w}")))?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            cin,
            kh,
            kw,
            cout,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// 2-D convolution (cross-correlation) over an NHWC batch.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>, GraphError> {
    let g = ConvGeometry::new("conv2d", input.shape(), kernel.shape(), stride, padding)?;
    Ok(conv2d_apply(input.data(), kernel.data(), None, &g))
}

pub(crate) fn conv2d_apply<T: Real>(x: &[T], k: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Tensor<T> {
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * g.cout];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_base = ((n * g.out_h + oy) * g.out_w + ox) * g.cout;
                let acc = &mut out[o_base..o_base + g.cout];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else { continue };
                        let i_base = ((n * g.in_h + iy) * g.in_w + ix) * g.cin;
                        let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = x[i_base + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let krow = &k[k_base + ci * g.cout..k_base + (ci + 1) * g.cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_h, g.out_w, g.cout], out).expect("conv output shape")
}

/// Gradients of a conv2d with respect to its input (optional), kernel and bias.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeometry,
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = want_input_grad.then(|| vec![T::zero(); x.len()]);
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_base = ((n * g.out_h + oy) * g.out_w + ox) * g.cout;
                let dout = &dy[o_base..o_base + g.cout];
                for (b, &d) in db.iter_mut().zip(dout) {
                    *b += d;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else { continue };
                        let i_base = ((n * g.in_h + iy) * g.in_w + ix) * g.cin;
                        let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = x[i_base + ci];
                            let r = k_base + ci * g.cout..k_base + (ci + 1) * g.cout;
                            let dkrow = &mut dk[r.clone()];
                            for (a, &d) in dkrow.iter_mut().zip(dout) {
                                *a += xv * d;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let s: T = k[r].iter().zip(dout).map(|(&kv, &d)| kv * d).sum();
                                dx[i_base + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// `x [n, in] · k [in, out] + b`.
pub(crate) fn dense_apply<T: Real>(x: &[T], k: &[T], b: &[T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * d_out);
    for row in x.chunks_exact(d_in).take(n) {
        let start = out.len();
        out.extend_from_slice(b);
        let acc = &mut out[start..];
        for (i, &xv) in row.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            for (a, &kv) in acc.iter_mut().zip(&k[i * d_out..(i + 1) * d_out]) {
                *a += xv * kv;
            }
        }
    }
    out
}

pub(crate) fn dense_backward<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    d_in: usize,
    d_out: usize,
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); d_out];
    let mut dx = want_input_grad.then(|| vec![T::zero(); x.len()]);
    for (r, (row, drow)) in x.chunks_exact(d_in).zip(dy.chunks_exact(d_out)).enumerate() {
        for (b, &d) in db.iter_mut().zip(drow) {
            *b += d;
        }
        for (i, &xv) in row.iter().enumerate() {
            let krow = &k[i * d_out..(i + 1) * d_out];
            for (a, &d) in dk[i * d_out..(i + 1) * d_out].iter_mut().zip(drow) {
                *a += xv * d;
            }
            if let Some(dx) = dx.as_mut() {
                dx[r * d_in + i] = krow.iter().zip(drow).map(|(&kv, &d)| kv * d).sum();
            }
        }
    }
    (dx, dk, db)
}

/// Batch statistics (mean, biased variance) per channel over the last axis.
pub(crate) fn channel_stats<T: Real>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / channels;
    let mut mean = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = T::one() / T::of_usize(rows);
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv);
    (mean, var)
}

/// Normalizes with the supplied statistics: `gamma (x - mean) / sqrt(var + eps) + beta`.
/// Returns the output together with `x̂` and the per-channel inverse std.
pub(crate) fn batch_norm_apply<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for j in 0..c {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            out.push(gamma[j] * h + beta[j]);
        }
    }
    (out, xhat, inv_std)
}

/// Batch-norm layer applied to any tensor whose last axis is the channel axis.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    training: bool,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>, GraphError> {
    let c = *input.shape().last().unwrap_or(&0);
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(dim_err(
            "batch_norm",
            format!("parameters do not match {c} channels"),
        ));
    }
    let out = if training {
        let (mean, var) = channel_stats(input.data(), c);
        update_running(running_mean, running_var, &mean, &var, momentum);
        batch_norm_apply(input.data(), gamma, beta, &mean, &var, eps).0
    } else {
        batch_norm_apply(input.data(), gamma, beta, running_mean, running_var, eps).0
    };
    Ok(Tensor::new(input.shape().to_vec(), out).expect("same shape"))
}

pub(crate) fn update_running<T: Real>(rm: &mut [T], rv: &mut [T], mean: &[T], var: &[T], momentum: T) {
    let keep = momentum;
    let take = T::one() - momentum;
    for (r, &m) in rm.iter_mut().zip(mean) {
        *r = keep * *r + take * m;
    }
    for (r, &v) in rv.iter_mut().zip(var) {
        *r = keep * *r + take * v;
    }
}

/// Backward pass of train-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = dy.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] += drow[j] * hrow[j];
            dbeta[j] += drow[j];
        }
    }
    // dxhat = dy * gamma; dx = inv_std / m * (m dxhat - sum(dxhat) - xhat sum(dxhat xhat))
    let m = T::of_usize(rows);
    let mut dx = Vec::with_capacity(dy.len());
    for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            let sum_dxhat = gamma[j] * dbeta[j];
            let sum_dxhat_xhat = gamma[j] * dgamma[j];
            let dxhat = drow[j] * gamma[j];
            dx.push(inv_std[j] / m * (m * dxhat - sum_dxhat - hrow[j] * sum_dxhat_xhat));
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax and mean cross-entropy against class indices.
/// Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> (T, Vec<T>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0f64;
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let log_sum = sum.ln();
        total -= (row[y] - max - log_sum).as_f64();
        probs.extend(exps.iter().map(|&e| e / sum));
    }
    (T::of(total / labels.len() as f64), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(conv_extent(3, 2, 1, Padding::Valid), Some((2, 0)));
        assert_eq!(conv_extent(16, 3, 2, Padding::Valid), Some((7, 0)));
        assert_eq!(conv_extent(16, 3, 1, Padding::Same), Some((16, 1)));
        assert_eq!(conv_extent(16, 3, 2, Padding::Same), Some((8, 0)));
        assert_eq!(conv_extent(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 3, 1], |i| i as f32 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = Tensor::<f32>::from_fn(&[2, 4, 4, 3], |i| (i as f32).sin());
        let k = Tensor::zeros(&[3, 3, 3, 2]);
        let y = conv2d_forward(&x, &k, 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_valid_sliding_window() {
        // 3x3 input 1..9, all-ones 2x2 kernel: window sums.
        let x = Tensor::<f64>::from_fn(&[1, 3, 3, 1], |i| (i + 1) as f64);
        let k = Tensor::full(&[2, 2, 1, 1], 1.0);
        let y = conv2d_forward(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        let err = conv2d_forward(&x, &k, 1, Padding::Same).unwrap_err();
        assert!(matches!(err, GraphError::Dimension { .. }), "{err}");
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, probs) = softmax_cross_entropy(&[0.3f64; 4], 4, &[2]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_normalized_input_is_unchanged() {
        // per channel zero mean, unit (biased) variance
        let x = Tensor::<f64>::new(vec![4, 2], vec![1.0, 2.0, -1.0, -2.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let (_, var) = channel_stats(x.data(), 2);
        // rescale channel 1 to unit variance
        let s = 1.0 / var[1].sqrt();
        let x = Tensor::new(
            vec![4, 2],
            x.data().chunks(2).flat_map(|r| [r[0], r[1] * s]).collect(),
        )
        .unwrap();
        let y = batch_norm(&x, &[1.0; 2], &[0.0; 2], &mut rm, &mut rv, true, 0.9, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        // running stats moved 10% toward the batch stats
        assert!((rv[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_matches_scalar_formula() {
        let x = Tensor::<f64>::new(vec![3, 2], vec![0.5, -1.0, 2.0, 3.0, -0.25, 0.0]).unwrap();
        let gamma = [1.5, -0.5];
        let beta = [0.1, 2.0];
        let mut mean = vec![0.2, -0.3];
        let mut var = vec![0.8, 2.5];
        let y = batch_norm(&x, &gamma, &beta, &mut mean, &mut var, false, 0.9, 1e-5).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let j = i % 2;
            let oracle = gamma[j] * (x.data()[i] - mean[j]) / (var[j] + 1e-5).sqrt() + beta[j];
            assert!((v - oracle).abs() < 1e-12);
        }
        // beta shift moves every output of that channel by the same amount
        let shifted = [beta[0] + 3.0, beta[1]];
        let y2 = batch_norm(&x, &gamma, &shifted, &mut mean, &mut var, false, 0.9, 1e-5).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(y2.data()).enumerate() {
            let expect = if i % 2 == 0 { 3.0 } else { 0.0 };
            assert!((b - a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_channel_stays_finite() {
        let x = Tensor::<f32>::full(&[5, 1], 2.0);
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = batch_norm(&x, &[1.0], &[0.0], &mut rm, &mut rv, true, 0.9, 1e-5).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
