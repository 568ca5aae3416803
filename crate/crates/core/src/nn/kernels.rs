//! Forward and backward kernels on raw tensors. The graph in
//! [`super::graph`] strings these together; they are public so that layers
//! can be exercised in isolation.

use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::image::bilinear_taps;

/// `c = alpha·op(a)·op(b) + beta·c` for row-major operands, where `op`
/// optionally transposes. `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
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

thread_local! {
    static COLS: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused per-thread buffer of at least `len` elements. The
/// contents are stale; callers overwrite every element they read.
fn with_cols<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    COLS.with(|c| {
        let mut buf = c.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let out = f(&mut buf[..len]);
        c.replace(buf);
        out
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [_, in_c, in_h, in_w] = x;
        let [out_c, wc, kh, kw] = w;
        if wc != in_c {
            return Err(Error::shape(format!(
                "conv weight {w:?} expects {wc} input channels, input has {in_c}"
            )));
        }
        if kh != kw || kh == 0 || stride == 0 {
            return Err(Error::shape(format!("unsupported conv kernel {w:?} stride {stride}")));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::shape(format!("input {x:?} smaller than kernel {kh}")));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: kh,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.out_len();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                // output columns whose source lies inside the row
                let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.out_w);
                let hi = ((g.in_w + g.pad).saturating_sub(kx)).div_ceil(g.stride).clamp(lo, g.out_w);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.out_len();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.out_w);
                let hi = ((g.in_w + g.pad).saturating_sub(kx)).div_ceil(g.stride).clamp(lo, g.out_w);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Zero-padded 2D cross-correlation. `bias` has shape `[1, C_out, 1, 1]`.
pub fn conv2d_forward(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&Tensor4>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [1, g.out_c, 1, 1] {
            return Err(Error::shape(format!("conv bias {:?}", b.shape())));
        }
    }
    let n = x.shape()[0];
    let (p, kk) = (g.out_len(), g.patch_len());
    let mut out = Tensor4::zeros([n, g.out_c, g.out_h, g.out_w]);
    let in_len = g.in_c * g.in_h * g.in_w;
    with_cols(kk * p, |cols| {
        for b in 0..n {
            im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], cols);
            let dst = &mut out.data_mut()[b * g.out_c * p..(b + 1) * g.out_c * p];
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bias.data()[co]);
                }
            }
            gemm(g.out_c, kk, p, w.data(), false, cols, false, 1.0, dst);
        }
    });
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor4>,
    pub dw: Tensor4,
    pub db: Tensor4,
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient `dy`.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    dy: &Tensor4,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let n = x.shape()[0];
    if dy.shape() != [n, g.out_c, g.out_h, g.out_w] {
        return Err(Error::shape(format!("conv upstream gradient {:?}", dy.shape())));
    }
    let (p, kk) = (g.out_len(), g.patch_len());
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut dw = Tensor4::zeros(w.shape());
    let mut db = Tensor4::zeros([1, g.out_c, 1, 1]);
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    with_cols(kk * p, |cols| {
        for b in 0..n {
            let dyb = &dy.data()[b * g.out_c * p..(b + 1) * g.out_c * p];
            for (co, chunk) in dyb.chunks(p).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f64>();
            }
            im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], cols);
            gemm(g.out_c, p, kk, dyb, false, cols, true, 1.0, dw.data_mut());
            if let Some(dx) = dx.as_mut() {
                gemm(kk, g.out_c, p, w.data(), true, dyb, false, 0.0, cols);
                col2im(&g, cols, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
            }
        }
    });
    Ok(ConvGrads { dx, dw, db })
}

/// Source taps for ×2 upsampling with half-pixel centers.
fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            bilinear_taps(src, n_in)
        })
        .collect()
}

pub fn upsample2x_forward(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]);
    let (ow, plane_in, plane_out) = (2 * w, h * w, 4 * h * w);
    for nc in 0..n * c {
        let src = &x.data()[nc * plane_in..(nc + 1) * plane_in];
        let dst = &mut out.data_mut()[nc * plane_out..(nc + 1) * plane_out];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_forward`].
pub fn upsample2x_backward(dy: &Tensor4, in_shape: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = in_shape;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Tensor4::zeros(in_shape);
    let (ow, plane_in, plane_out) = (2 * w, h * w, 4 * h * w);
    for nc in 0..n * c {
        let g = &dy.data()[nc * plane_out..(nc + 1) * plane_out];
        let dst = &mut dx.data_mut()[nc * plane_in..(nc + 1) * plane_in];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - fx) * (1.0 - fy);
                dst[y0 * w + x1] += v * fx * (1.0 - fy);
                dst[y1 * w + x0] += v * (1.0 - fx) * fy;
                dst[y1 * w + x1] += v * fx * fy;
            }
        }
    }
    dx
}

/// Backward warp of one plane: `out(u) = bilinear(src, u + flow(u))` with the
/// sample position clamped to the plane.
pub fn warp_plane(src: &[f64], dx: &[f64], dy: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (x0, x1, fx) = bilinear_taps(x as f64 + dx[i], w);
            let (y0, y1, fy) = bilinear_taps(y as f64 + dy[i], h);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[i] = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Adjoint of [`warp_plane`] with respect to `src`.
pub fn warp_plane_adjoint(g: &[f64], dx: &[f64], dy: &[f64], w: usize, h: usize, dsrc: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (x0, x1, fx) = bilinear_taps(x as f64 + dx[i], w);
            let (y0, y1, fy) = bilinear_taps(y as f64 + dy[i], h);
            let v = g[i];
            dsrc[y0 * w + x0] += v * (1.0 - fx) * (1.0 - fy);
            dsrc[y0 * w + x1] += v * fx * (1.0 - fy);
            dsrc[y1 * w + x0] += v * (1.0 - fx) * fy;
            dsrc[y1 * w + x1] += v * fx * fy;
        }
    }
}

fn check_flow(x: [usize; 4], flow: [usize; 4]) -> Result<()> {
    if flow != [x[0], 2, x[2], x[3]] {
        return Err(Error::shape(format!("flow {flow:?} for image {x:?}")));
    }
    Ok(())
}

/// Warps every channel of `x` with the per-batch flow `[N, 2, H, W]`.
pub fn warp_forward(x: &Tensor4, flow: &Tensor4) -> Result<Tensor4> {
    check_flow(x.shape(), flow.shape())?;
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor4::zeros(x.shape());
    for b in 0..n {
        let f = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
        let (fdx, fdy) = f.split_at(plane);
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            warp_plane(
                &x.data()[off..off + plane],
                fdx,
                fdy,
                w,
                h,
                &mut out.data_mut()[off..off + plane],
            );
        }
    }
    Ok(out)
}

pub fn warp_backward(dy: &Tensor4, flow: &Tensor4) -> Result<Tensor4> {
    check_flow(dy.shape(), flow.shape())?;
    let [n, c, h, w] = dy.shape();
    let plane = h * w;
    let mut dx = Tensor4::zeros(dy.shape());
    for b in 0..n {
        let f = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
        let (fdx, fdy) = f.split_at(plane);
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            warp_plane_adjoint(
                &dy.data()[off..off + plane],
                fdx,
                fdy,
                w,
                h,
                &mut dx.data_mut()[off..off + plane],
            );
        }
    }
    Ok(dx)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics saved by the batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Unbiased batch variance, used to update the running estimate.
    pub var_unbiased: Vec<f64>,
}

fn channel_indices(shape: [usize; 4]) -> impl Fn(usize) -> Vec<std::ops::Range<usize>> {
    let [n, c, h, w] = shape;
    move |ch| {
        (0..n)
            .map(|b| {
                let off = (b * c + ch) * h * w;
                off..off + h * w
            })
            .collect()
    }
}

fn check_bn(x: [usize; 4], gamma: &Tensor4, beta: &Tensor4) -> Result<()> {
    let want = [1, x[1], 1, 1];
    if gamma.shape() != want || beta.shape() != want {
        return Err(Error::shape(format!(
            "batch norm parameters {:?}/{:?} for input {x:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Batch normalization. With `running = None` the batch statistics are used
/// (training); otherwise the supplied running mean/variance (evaluation).
pub fn batchnorm_forward(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    running: Option<(&Tensor4, &Tensor4)>,
) -> Result<(Tensor4, BnSaved)> {
    let shape = x.shape();
    check_bn(shape, gamma, beta)?;
    let c = shape[1];
    let count = (shape[0] * shape[2] * shape[3]) as f64;
    let ranges = channel_indices(shape);
    let mut saved = BnSaved {
        mean: vec![0.0; c],
        inv_std: vec![0.0; c],
        var_unbiased: vec![0.0; c],
    };
    for ch in 0..c {
        let (mean, var) = match running {
            None => {
                let mut s = 0.0;
                for r in ranges(ch) {
                    s += x.data()[r].iter().sum::<f64>();
                }
                let mean = s / count;
                let mut v = 0.0;
                for r in ranges(ch) {
                    v += x.data()[r].iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
                }
                saved.var_unbiased[ch] = if count > 1.0 { v / (count - 1.0) } else { 0.0 };
                (mean, v / count)
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("running statistics channel mismatch"));
                }
                (rm.data()[ch], rv.data()[ch])
            }
        };
        saved.mean[ch] = mean;
        saved.inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
    }
    let mut out = Tensor4::zeros(shape);
    for ch in 0..c {
        let (m, s) = (saved.mean[ch], saved.inv_std[ch]);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for r in ranges(ch) {
            for (o, &a) in out.data_mut()[r.clone()].iter_mut().zip(&x.data()[r]) {
                *o = g * (a - m) * s + b;
            }
        }
    }
    Ok((out, saved))
}

pub struct BnGrads {
    pub dx: Tensor4,
    pub dgamma: Tensor4,
    pub dbeta: Tensor4,
}

pub fn batchnorm_backward(
    x: &Tensor4,
    gamma: &Tensor4,
    dy: &Tensor4,
    saved: &BnSaved,
    training: bool,
) -> BnGrads {
    let shape = x.shape();
    let c = shape[1];
    let count = (shape[0] * shape[2] * shape[3]) as f64;
    let ranges = channel_indices(shape);
    let mut dx = Tensor4::zeros(shape);
    let mut dgamma = Tensor4::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor4::zeros([1, c, 1, 1]);
    for ch in 0..c {
        let (m, s, g) = (saved.mean[ch], saved.inv_std[ch], gamma.data()[ch]);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for r in ranges(ch) {
            for (&d, &a) in dy.data()[r.clone()].iter().zip(&x.data()[r]) {
                sum_dy += d;
                sum_dy_xhat += d * (a - m) * s;
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        for r in ranges(ch) {
            for ((o, &d), &a) in dx.data_mut()[r.clone()]
                .iter_mut()
                .zip(&dy.data()[r.clone()])
                .zip(&x.data()[r])
            {
                *o = if training {
                    let xhat = (a - m) * s;
                    g * s * (d - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    g * s * d
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_conv() {
        let x = Tensor4::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let w = Tensor4::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor4::zeros([2, 3, 5, 5]);
        let w = Tensor4::filled([4, 3, 3, 3], 0.7);
        let b = Tensor4::from_vec([1, 4, 1, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), [2, 4, 5, 5]);
        for n in 0..2 {
            for c in 0..4 {
                assert_eq!(y.at(n, c, 2, 3), b.data()[c]);
            }
        }
    }

    #[test]
    fn strided_output_is_ceil_half() {
        for size in [63usize, 64, 17] {
            let g = ConvGeometry::new([1, 1, size, size], [1, 1, 5, 5], 2, 2).unwrap();
            assert_eq!(g.out_h, size.div_ceil(2));
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor4::from_vec([1, 2, 4, 5], (0..40).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor4::from_vec([3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        let [_, co, oh, ow] = y.shape();
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 4 && ix >= 0 && ix < 5 {
                                    s += x.at(0, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                }
                            }
                        }
                    }
                    assert!((s - y.at(0, o, oy, ox)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_constant_and_adjoint() {
        let c = Tensor4::filled([1, 2, 3, 4], 0.25);
        assert!(upsample2x_forward(&c).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let x = Tensor4::from_vec([1, 1, 3, 2], vec![0.3, -1.0, 2.0, 0.5, 0.1, 0.9]).unwrap();
        let g = Tensor4::from_vec([1, 1, 6, 4], (0..24).map(|v| (v as f64).sin()).collect()).unwrap();
        let lhs: f64 = upsample2x_forward(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2x_backward(&g, x.shape()).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_identity_and_constant_channel() {
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &Tensor4::filled([1, 1, 1, 1], 1.0), &Tensor4::zeros([1, 1, 1, 1]), None).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let x = Tensor4::filled([2, 1, 2, 2], 3.0);
        let (y, _) = batchnorm_forward(&x, &Tensor4::scalar(2.0), &Tensor4::scalar(0.4), None).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(batchnorm_forward(&x, &Tensor4::zeros([1, 2, 1, 1]), &Tensor4::zeros([1, 2, 1, 1]), None).is_err());
    }
}
