//! Forward/backward kernels. Convolutions lower to im2col + sgemm; all ops
//! accept either an unbatched `[C, H, W]` / `[N]` input or a batched
//! `[B, C, H, W]` / `[B, N]` one.

use super::{Result, Tensor, TensorError};

/// Every convolution in the model uses 3x3 kernels.
pub const KERNEL: usize = 3;
const KK: usize = KERNEL * KERNEL;

/// Spatial bookkeeping of a 3x3 cross-correlation from `(in_h, in_w)` to
/// `(out_h, out_w)`. A transposed convolution uses the same geometry with
/// the roles of input and output swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn forward(in_h: usize, in_w: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || in_h + 2 * pad < KERNEL || in_w + 2 * pad < KERNEL {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - KERNEL) / stride + 1,
            out_w: (in_w + 2 * pad - KERNEL) / stride + 1,
            stride,
            pad,
        })
    }

    /// Geometry of the convolution whose adjoint maps `(h, w)` up to
    /// `(h-1)*stride - 2*pad + 3 + (stride-1)`. The `stride - 1` output
    /// adjustment makes stride-2, pad-1 layers exactly double the extent.
    pub fn transposed(h: usize, w: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 {
            return None;
        }
        let up = |x: usize| ((x - 1) * stride + KERNEL + stride - 1).checked_sub(2 * pad);
        let (oh, ow) = (up(h)?, up(w)?);
        if oh == 0 || ow == 0 {
            return None;
        }
        let g = Self::forward(oh, ow, stride, pad)?;
        (g.out_h == h && g.out_w == w).then_some(g)
    }

    #[inline]
    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    #[inline]
    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the operand lengths are checked above against the dimensions
    // and strides describe in-bounds row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `[batch, channels, in_h, in_w]` into `[channels*9, batch*out_plane]`.
pub(crate) fn im2col(x: &[f32], batch: usize, channels: usize, g: &ConvGeometry) -> Vec<f32> {
    let plane = g.out_plane();
    let cols_n = batch * plane;
    let mut cols = vec![0.0f32; channels * KK * cols_n];
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KK + ky * KERNEL + kx) * cols_n;
                for b in 0..batch {
                    let src = &x[(b * channels + c) * g.in_plane()..][..g.in_plane()];
                    let dst = &mut cols[row + b * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        let dst_row = &mut dst[oy * g.out_w..][..g.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[batch, channels, in_h, in_w]`.
pub(crate) fn col2im(cols: &[f32], batch: usize, channels: usize, g: &ConvGeometry) -> Vec<f32> {
    let plane = g.out_plane();
    let cols_n = batch * plane;
    let mut x = vec![0.0f32; batch * channels * g.in_plane()];
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KK + ky * KERNEL + kx) * cols_n;
                for b in 0..batch {
                    let dst = &mut x[(b * channels + c) * g.in_plane()..][..g.in_plane()];
                    let src = &cols[row + b * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        let src_row = &src[oy * g.out_w..][..g.out_w];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[batch, channels, plane]` -> `[channels, batch*plane]`.
pub(crate) fn batch_to_channel_major(x: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    if batch == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(c * batch + b) * plane..][..plane]
                .copy_from_slice(&x[(b * channels + c) * plane..][..plane]);
        }
    }
    out
}

/// `[channels, batch*plane]` -> `[batch, channels, plane]`.
pub(crate) fn channel_to_batch_major(x: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    if batch == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * plane..][..plane]
                .copy_from_slice(&x[(c * batch + b) * plane..][..plane]);
        }
    }
    out
}

fn add_channel_bias(y: &mut [f32], bias: &[f32], batch: usize, plane: usize) {
    let channels = bias.len();
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            for v in &mut y[(b * channels + c) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

fn channel_sums(dy: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut sums = vec![0.0f32; channels];
    for b in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += dy[(b * channels + c) * plane..][..plane].iter().sum::<f32>();
        }
    }
    sums
}

/// Batched 4-d view of an image-like tensor: `(batch, channels, h, w)`.
pub(crate) fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected [C,H,W] or [B,C,H,W] input, got {s:?}"),
        }),
    }
}

fn kernel_dims(op: &'static str, k: &Tensor) -> Result<(usize, usize)> {
    match *k.shape() {
        [a, b, KERNEL, KERNEL] => Ok((a, b)),
        ref s => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("kernels must be [*, *, 3, 3], got {s:?}"),
        }),
    }
}

fn check_bias(op: &'static str, bias: &Tensor, expected: usize) -> Result<()> {
    if bias.shape() != [expected] {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("bias must be [{expected}], got {:?}", bias.shape()),
        });
    }
    Ok(())
}

fn output_shape(batched: bool, batch: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![batch, c, h, w]
    } else {
        vec![c, h, w]
    }
}

/// Saved state of a convolution forward pass, consumed by its backward.
pub(crate) struct Conv2dPlan {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeometry,
    pub batched: bool,
}

pub(crate) fn conv2d_plan(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Conv2dPlan> {
    const OP: &str = "conv2d";
    let (batch, c_in, h, w) = image_dims(OP, input)?;
    let (c_out, k_in) = kernel_dims(OP, kernels)?;
    if k_in != c_in {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "input has {c_in} channels but kernels {:?} expect {k_in}",
                kernels.shape()
            ),
        });
    }
    check_bias(OP, bias, c_out)?;
    let geom = ConvGeometry::forward(h, w, stride, padding).ok_or_else(|| {
        TensorError::InvalidArgument {
            op: OP,
            detail: format!("stride {stride}, padding {padding} invalid for {h}x{w} input"),
        }
    })?;
    Ok(Conv2dPlan {
        batch,
        c_in,
        c_out,
        geom,
        batched: input.rank() == 4,
    })
}

/// Returns the output and the unfolded input columns.
pub(crate) fn conv2d_forward(
    plan: &Conv2dPlan,
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
) -> (Tensor, Vec<f32>) {
    let Conv2dPlan { batch, c_in, c_out, geom: g, batched } = *plan;
    let cols = im2col(input.data(), batch, c_in, &g);
    let n = batch * g.out_plane();
    let mut ym = vec![0.0f32; c_out * n];
    gemm(c_out, c_in * KK, n, kernels.data(), false, &cols, false, 0.0, &mut ym);
    let mut y = channel_to_batch_major(&ym, batch, c_out, g.out_plane());
    add_channel_bias(&mut y, bias.data(), batch, g.out_plane());
    let out = Tensor {
        shape: output_shape(batched, batch, c_out, g.out_h, g.out_w),
        data: y,
    };
    (out, cols)
}

/// Gradients w.r.t. (input, kernels, bias).
pub(crate) fn conv2d_backward(
    plan: &Conv2dPlan,
    cols: &[f32],
    kernels: &Tensor,
    grad_out: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let Conv2dPlan { batch, c_in, c_out, geom: g, .. } = *plan;
    let n = batch * g.out_plane();
    let k = c_in * KK;
    let dym = batch_to_channel_major(grad_out, batch, c_out, g.out_plane());
    let mut dw = vec![0.0f32; c_out * k];
    gemm(c_out, n, k, &dym, false, cols, true, 0.0, &mut dw);
    let db = channel_sums(grad_out, batch, c_out, g.out_plane());
    let mut dcols = vec![0.0f32; k * n];
    gemm(k, c_out, n, kernels.data(), true, &dym, false, 0.0, &mut dcols);
    let dx = col2im(&dcols, batch, c_in, &g);
    (dx, dw, db)
}

/// 3x3 cross-correlation of a `[C_in,H,W]` (or batched) input with
/// `[C_out,C_in,3,3]` kernels plus a per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let plan = conv2d_plan(input, kernels, bias, stride, padding)?;
    Ok(conv2d_forward(&plan, input, kernels, bias).0)
}

pub(crate) struct ConvTransposePlan {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Geometry of the adjoint convolution (`out` = this op's input).
    pub geom: ConvGeometry,
    pub batched: bool,
}

pub(crate) fn conv2d_transpose_plan(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvTransposePlan> {
    const OP: &str = "conv2d_transpose";
    let (batch, c_in, h, w) = image_dims(OP, input)?;
    let (k_in, c_out) = kernel_dims(OP, kernels)?;
    if k_in != c_in {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!(
                "input has {c_in} channels but kernels {:?} expect {k_in}",
                kernels.shape()
            ),
        });
    }
    check_bias(OP, bias, c_out)?;
    let geom = ConvGeometry::transposed(h, w, stride, padding).ok_or_else(|| {
        TensorError::InvalidArgument {
            op: OP,
            detail: format!("stride {stride}, padding {padding} invalid for {h}x{w} input"),
        }
    })?;
    Ok(ConvTransposePlan {
        batch,
        c_in,
        c_out,
        geom,
        batched: input.rank() == 4,
    })
}

/// Returns the output and the channel-major copy of the input.
pub(crate) fn conv2d_transpose_forward(
    plan: &ConvTransposePlan,
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
) -> (Tensor, Vec<f32>) {
    let ConvTransposePlan { batch, c_in, c_out, geom: g, batched } = *plan;
    let n = batch * g.out_plane();
    let xm = batch_to_channel_major(input.data(), batch, c_in, g.out_plane());
    let mut cols = vec![0.0f32; c_out * KK * n];
    gemm(c_out * KK, c_in, n, kernels.data(), true, &xm, false, 0.0, &mut cols);
    let mut y = col2im(&cols, batch, c_out, &g);
    add_channel_bias(&mut y, bias.data(), batch, g.in_plane());
    let out = Tensor {
        shape: output_shape(batched, batch, c_out, g.in_h, g.in_w),
        data: y,
    };
    (out, xm)
}

pub(crate) fn conv2d_transpose_backward(
    plan: &ConvTransposePlan,
    xm: &[f32],
    kernels: &Tensor,
    grad_out: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let ConvTransposePlan { batch, c_in, c_out, geom: g, .. } = *plan;
    let n = batch * g.out_plane();
    let dcols = im2col(grad_out, batch, c_out, &g);
    let mut dxm = vec![0.0f32; c_in * n];
    gemm(c_in, c_out * KK, n, kernels.data(), false, &dcols, false, 0.0, &mut dxm);
    let dx = channel_to_batch_major(&dxm, batch, c_in, g.out_plane());
    let mut dw = vec![0.0f32; c_in * c_out * KK];
    gemm(c_in, n, c_out * KK, xm, false, &dcols, true, 0.0, &mut dw);
    let db = channel_sums(grad_out, batch, c_out, g.in_plane());
    (dx, dw, db)
}

/// Transposed 3x3 convolution with `[C_in,C_out,3,3]` kernels. Output extent
/// is `(H-1)*stride - 2*padding + 3 + (stride-1)`, so with `padding = 1` it
/// is exactly `stride * H`. It is the adjoint of [`conv2d`] with the same
/// kernels (up to bias).
pub fn conv2d_transpose(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let plan = conv2d_transpose_plan(input, kernels, bias, stride, padding)?;
    Ok(conv2d_transpose_forward(&plan, input, kernels, bias).0)
}

pub fn leaky_relu(x: &Tensor, negative_slope: f32) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { negative_slope * v })
}

pub(crate) fn dense_dims(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    const OP: &str = "dense";
    let (batch, n_in) = match *x.shape() {
        [n] => (1, n),
        [b, n] => (b, n),
        ref s => {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("expected [N] or [B,N] input, got {s:?}"),
            })
        }
    };
    let n_out = match *weights.shape() {
        [m, n] if n == n_in => m,
        ref s => {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("weights {s:?} do not accept input of length {n_in}"),
            })
        }
    };
    check_bias(OP, bias, n_out)?;
    Ok((batch, n_in, n_out))
}

pub(crate) fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, batch: usize, n_in: usize, n_out: usize) -> Tensor {
    let mut y = vec![0.0f32; batch * n_out];
    for row in y.chunks_exact_mut(n_out) {
        row.copy_from_slice(bias.data());
    }
    gemm(batch, n_in, n_out, x.data(), false, weights.data(), true, 1.0, &mut y);
    let shape = if x.rank() == 1 { vec![n_out] } else { vec![batch, n_out] };
    Tensor { shape, data: y }
}

/// Affine map `W x + b` for `x: [N]` (or `[B, N]` row-wise).
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, n_in, n_out) = dense_dims(x, weights, bias)?;
    Ok(dense_forward(x, weights, bias, batch, n_in, n_out))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Mean squared elementwise difference (the training loss).
pub fn mse_loss(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mse_loss", prediction, target)?;
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / prediction.len() as f64)
}

/// Mean absolute elementwise difference (the patch anomaly score).
pub fn mae(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mae", prediction, target)?;
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sum / prediction.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel() -> Tensor {
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        k
    }

    #[test]
    fn conv_identity_kernel_on_single_pixel() {
        let x = Tensor::new([1, 1, 1], vec![5.0]).unwrap();
        let y = conv2d(&x, &identity_kernel(), &Tensor::zeros([1]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_stride_two_halves_extent() {
        let x = Tensor::zeros([1, 64, 64]);
        let k = Tensor::zeros([4, 1, 3, 3]);
        let y = conv2d(&x, &k, &Tensor::zeros([4]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 32, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros([2, 8, 8]);
        let k = Tensor::zeros([4, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros([4]), 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }), "{err}");
        assert!(err.to_string().contains("2 channels"));
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let x = Tensor::zeros([3, 4, 4]);
        let k = Tensor::zeros([3, 2, 3, 3]);
        let y = conv2d_transpose(&x, &k, &Tensor::zeros([2]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8]);
    }

    #[test]
    fn conv_transpose_identity_kernel_on_single_pixel() {
        let x = Tensor::new([1, 1, 1], vec![3.0]).unwrap();
        let y = conv2d_transpose(&x, &identity_kernel(), &Tensor::zeros([1]), 1, 1).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new([3], vec![2.0, -1.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[2.0, -0.01, 0.0]);
    }

    #[test]
    fn dense_small_cases() {
        let x = Tensor::new([2], vec![2.0, 3.0]).unwrap();
        let w = Tensor::new([1, 2], vec![1.0, 1.0]).unwrap();
        let y = dense(&x, &w, &Tensor::zeros([1])).unwrap();
        assert_eq!(y.data(), &[5.0]);

        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &eye, &Tensor::zeros([2])).unwrap(), x);
        assert!(dense(&x, &Tensor::zeros([2, 3]), &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn losses_small_cases() {
        let zeros = Tensor::zeros([2]);
        let ones = Tensor::full([2], 1.0);
        assert_eq!(mse_loss(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(mse_loss(&ones, &ones).unwrap(), 0.0);
        let p = Tensor::new([2], vec![0.0, 2.0]).unwrap();
        assert_eq!(mae(&p, &ones).unwrap(), 1.0);
        assert_eq!(mae(&p, &p).unwrap(), 0.0);
        assert!(mae(&p, &Tensor::zeros([3])).is_err());
        assert!(mse_loss(&p, &Tensor::zeros([1, 2])).is_err());
    }
}
