//! Trainable layer primitives. Every layer exposes a forward pass and a
//! hand-written adjoint (reverse-mode) pass; there is no autograd tape.
//!
//! Activations are dense NCHW tensors. Gradient buffers mirror the parameter
//! structs, so a layer's `backward` writes into a second instance of itself.

mod conv;
mod linear;
mod norm;
mod stem;

pub use conv::Conv2d;
pub use linear::ChannelLinear;
pub use norm::{fold_conv_bn, fold_linear_bn, BatchNorm2d, BnCtx, LayerNorm, LnCtx};
pub use stem::{Downsample, DownsampleCtx, Head, HeadCtx, PatchEmbed, PatchEmbedCtx};

use crate::error::{DttnError, Result};
use crate::tensor::{Scalar, Tensor};

/// What a tensor in the parameter list is, which decides weight decay,
/// trainability, and the counting bucket it lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    /// Convolution or linear weight. Trained, weight decay applies.
    Weight,
    /// Convolution or linear bias. Trained, weight decay applies.
    Bias,
    /// Normalization gain or shift. Trained, weight decay applies.
    NormAffine,
    /// Running mean or variance. Persisted but never trained.
    NormStat,
    /// Residual branch gain. Trained without weight decay so it is not
    /// pulled toward zero, which would silence the block.
    Scale,
}

impl ParamClass {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamClass::NormStat)
    }

    pub fn decayed(self) -> bool {
        matches!(
            self,
            ParamClass::Weight | ParamClass::Bias | ParamClass::NormAffine
        )
    }
}

/// Named view of one parameter tensor.
pub type ParamRef<'a, T> = (String, ParamClass, &'a Tensor<T>);
/// Mutable counterpart used by the optimizer and checkpoint loader.
pub type ParamMut<'a, T> = (String, ParamClass, &'a mut Tensor<T>);

/// `y += a * x` over equal-length slices; the exact re-slice lets the
/// compiler drop bounds checks and vectorize.
pub(crate) fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    let n = y.len().min(x.len());
    let (y, x) = (&mut y[..n], &x[..n]);
    for i in 0..n {
        y[i] += a * x[i];
    }
}

/// Dot product with eight independent accumulators so the reduction can
/// use the full vector width despite float addition being order-sensitive.
/// The lane count is fixed, so results are reproducible run to run.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::ZERO; 8];
    let chunks = n / 8;
    for k in 0..chunks {
        let (ca, cb) = (&a[k * 8..][..8], &b[k * 8..][..8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = T::ZERO;
    for l in acc {
        s += l;
    }
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

/// Gathers each channel's plane from every sample into one contiguous row:
/// [n, ch, p] becomes [ch, n*p]. Small per-sample planes are too short to
/// fill the vector units, so batch kernels work on the packed rows instead.
pub(crate) fn pack_channels<T: Scalar>(src: &[T], dst: &mut [T], n: usize, ch: usize, p: usize) {
    for c in 0..ch {
        for b in 0..n {
            dst[c * n * p + b * p..][..p].copy_from_slice(&src[(b * ch + c) * p..][..p]);
        }
    }
}

/// Inverse of `pack_channels`.
pub(crate) fn unpack_channels<T: Scalar>(src: &[T], dst: &mut [T], n: usize, ch: usize, p: usize) {
    for c in 0..ch {
        for b in 0..n {
            dst[(b * ch + c) * p..][..p].copy_from_slice(&src[c * n * p + b * p..][..p]);
        }
    }
}

/// `row += w0*x0 + w1*x1 + w2*x2 + w3*x3` elementwise; unrolling four
/// source rows amortizes the output row's loads and stores.
fn axpy4<T: Scalar>(row: &mut [T], xs: [&[T]; 4], ws: [T; 4]) {
    let p = row.len();
    let (x0, x1, x2, x3) = (&xs[0][..p], &xs[1][..p], &xs[2][..p], &xs[3][..p]);
    for i in 0..p {
        row[i] += ws[0] * x0[i] + ws[1] * x1[i] + ws[2] * x2[i] + ws[3] * x3[i];
    }
}

/// Splits a `[4, m]` buffer into its four rows.
fn four_rows<T>(buf: &mut [T], m: usize) -> (&mut [T], &mut [T], &mut [T], &mut [T]) {
    let (r0, rest) = buf.split_at_mut(m);
    let (r1, rest) = rest.split_at_mut(m);
    let (r2, r3) = rest.split_at_mut(m);
    (r0, r1, r2, r3)
}

/// 4x4 register tile: four output rows gain the weighted sum of four source
/// rows, so each loaded source value feeds four accumulations instead of one.
#[allow(clippy::too_many_arguments)]
fn tile4x4<T: Scalar>(
    y0: &mut [T],
    y1: &mut [T],
    y2: &mut [T],
    y3: &mut [T],
    xs: [&[T]; 4],
    w: &[T; 16],
) {
    let p = y0.len();
    let (x0, x1, x2, x3) = (&xs[0][..p], &xs[1][..p], &xs[2][..p], &xs[3][..p]);
    let (y1, y2, y3) = (&mut y1[..p], &mut y2[..p], &mut y3[..p]);
    for i in 0..p {
        let (a, b, c, d) = (x0[i], x1[i], x2[i], x3[i]);
        y0[i] += w[0] * a + w[1] * b + w[2] * c + w[3] * d;
        y1[i] += w[4] * a + w[5] * b + w[6] * c + w[7] * d;
        y2[i] += w[8] * a + w[9] * b + w[10] * c + w[11] * d;
        y3[i] += w[12] * a + w[13] * b + w[14] * c + w[15] * d;
    }
}

/// Sixteen simultaneous dot products between four `g` rows and four `x`
/// rows; entry `j*4 + l` is `dot(g[j], x[l])`. Eight fixed accumulator
/// lanes per product keep the reduction order reproducible.
fn dot4x4<T: Scalar>(g: [&[T]; 4], x: [&[T]; 4]) -> [T; 16] {
    let n = g[0].len().min(x[0].len());
    let (g0, g1, g2, g3) = (&g[0][..n], &g[1][..n], &g[2][..n], &g[3][..n]);
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    let mut acc = [[T::ZERO; 8]; 16];
    let chunks = n / 8;
    for k in 0..chunks {
        let (cg0, cg1) = (&g0[k * 8..][..8], &g1[k * 8..][..8]);
        let (cg2, cg3) = (&g2[k * 8..][..8], &g3[k * 8..][..8]);
        let (cx0, cx1) = (&x0[k * 8..][..8], &x1[k * 8..][..8]);
        let (cx2, cx3) = (&x2[k * 8..][..8], &x3[k * 8..][..8]);
        for l in 0..8 {
            let (a, b, c, d) = (cx0[l], cx1[l], cx2[l], cx3[l]);
            let (p, q, r, s) = (cg0[l], cg1[l], cg2[l], cg3[l]);
            acc[0][l] += p * a;
            acc[1][l] += p * b;
            acc[2][l] += p * c;
            acc[3][l] += p * d;
            acc[4][l] += q * a;
            acc[5][l] += q * b;
            acc[6][l] += q * c;
            acc[7][l] += q * d;
            acc[8][l] += r * a;
            acc[9][l] += r * b;
            acc[10][l] += r * c;
            acc[11][l] += r * d;
            acc[12][l] += s * a;
            acc[13][l] += s * b;
            acc[14][l] += s * c;
            acc[15][l] += s * d;
        }
    }
    let mut out = [T::ZERO; 16];
    for (o, lanes) in out.iter_mut().zip(&acc) {
        for &v in lanes {
            *o += v;
        }
    }
    let xs = [x0, x1, x2, x3];
    let gs = [g0, g1, g2, g3];
    for i in chunks * 8..n {
        for (j, gr) in gs.iter().enumerate() {
            for (l, xr) in xs.iter().enumerate() {
                out[j * 4 + l] += gr[i] * xr[i];
            }
        }
    }
    out
}

/// `out = W x + bias` over packed rows: `xp` is [ci, m], `yp` is [co, m].
pub(crate) fn gemm_rows<T: Scalar>(
    wt: &[T],
    bias: &[T],
    xp: &[T],
    yp: &mut [T],
    ci: usize,
    co: usize,
    m: usize,
) {
    for o in 0..co {
        yp[o * m..][..m].fill(bias[o]);
    }
    let mut o = 0;
    while o + 4 <= co {
        let (y0, y1, y2, y3) = four_rows(&mut yp[o * m..(o + 4) * m], m);
        let mut c = 0;
        while c + 4 <= ci {
            let mut w = [T::ZERO; 16];
            for j in 0..4 {
                w[j * 4..][..4].copy_from_slice(&wt[(o + j) * ci + c..][..4]);
            }
            tile4x4(
                y0,
                y1,
                y2,
                y3,
                [
                    &xp[c * m..][..m],
                    &xp[(c + 1) * m..][..m],
                    &xp[(c + 2) * m..][..m],
                    &xp[(c + 3) * m..][..m],
                ],
                &w,
            );
            c += 4;
        }
        for c in c..ci {
            axpy(y0, &xp[c * m..][..m], wt[o * ci + c]);
            axpy(y1, &xp[c * m..][..m], wt[(o + 1) * ci + c]);
            axpy(y2, &xp[c * m..][..m], wt[(o + 2) * ci + c]);
            axpy(y3, &xp[c * m..][..m], wt[(o + 3) * ci + c]);
        }
        o += 4;
    }
    for o in o..co {
        let row = &mut yp[o * m..][..m];
        let wrow = &wt[o * ci..][..ci];
        let mut c = 0;
        while c + 4 <= ci {
            axpy4(
                row,
                [
                    &xp[c * m..][..m],
                    &xp[(c + 1) * m..][..m],
                    &xp[(c + 2) * m..][..m],
                    &xp[(c + 3) * m..][..m],
                ],
                [wrow[c], wrow[c + 1], wrow[c + 2], wrow[c + 3]],
            );
            c += 4;
        }
        for c in c..ci {
            axpy(row, &xp[c * m..][..m], wrow[c]);
        }
    }
}

/// Adjoint of `gemm_rows` over the same packed layout: accumulates
/// `dw[o, c] += dot(g[o], x[c])` and `dxp[c] += w[o, c] * g[o]`, walking
/// 4x4 blocks so each loaded row feeds four products.
pub(crate) fn gemm_rows_adjoint<T: Scalar>(
    wt: &[T],
    gp: &[T],
    xp: &[T],
    dw: &mut [T],
    dxp: &mut [T],
    ci: usize,
    co: usize,
    m: usize,
) {
    let mut o = 0;
    while o + 4 <= co {
        let g = [
            &gp[o * m..][..m],
            &gp[(o + 1) * m..][..m],
            &gp[(o + 2) * m..][..m],
            &gp[(o + 3) * m..][..m],
        ];
        let mut c = 0;
        while c + 4 <= ci {
            let x = [
                &xp[c * m..][..m],
                &xp[(c + 1) * m..][..m],
                &xp[(c + 2) * m..][..m],
                &xp[(c + 3) * m..][..m],
            ];
            let d = dot4x4(g, x);
            let mut wtile = [T::ZERO; 16];
            for j in 0..4 {
                for l in 0..4 {
                    dw[(o + j) * ci + c + l] += d[j * 4 + l];
                    // transpose: dx row l collects w[o+j, c+l] * g[o+j]
                    wtile[l * 4 + j] = wt[(o + j) * ci + c + l];
                }
            }
            let (d0, d1, d2, d3) = four_rows(&mut dxp[c * m..(c + 4) * m], m);
            tile4x4(d0, d1, d2, d3, g, &wtile);
            c += 4;
        }
        for c in c..ci {
            for j in 0..4 {
                dw[(o + j) * ci + c] += dot(g[j], &xp[c * m..][..m]);
                axpy(&mut dxp[c * m..][..m], g[j], wt[(o + j) * ci + c]);
            }
        }
        o += 4;
    }
    for o in o..co {
        let grow = &gp[o * m..][..m];
        for c in 0..ci {
            dw[o * ci + c] += dot(grow, &xp[c * m..][..m]);
            axpy(&mut dxp[c * m..][..m], grow, wt[o * ci + c]);
        }
    }
}

pub(crate) fn check_nchw<T: Scalar>(x: &Tensor<T>, channels: usize, who: &str) -> Result<()> {
    if x.rank() != 4 {
        return Err(DttnError::Dim(format!(
            "{who} expects NCHW input, got rank {}",
            x.rank()
        )));
    }
    if x.shape()[1] != channels {
        return Err(DttnError::Dim(format!(
            "{who} expects {channels} channels, got {}",
            x.shape()[1]
        )));
    }
    Ok(())
}

/// Mean over the spatial grid: NCHW in, NC out.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(DttnError::Dim(format!(
            "global_avg_pool expects NCHW input, got rank {}",
            x.rank()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = h * w;
    let inv = T::from_f64(1.0 / p as f64);
    let mut out = Tensor::zeros(&[n, c]);
    let src = x.data();
    for i in 0..n * c {
        let plane = &src[i * p..(i + 1) * p];
        let mut acc = T::ZERO;
        for &v in plane {
            acc += v;
        }
        out.data_mut()[i] = acc * inv;
    }
    Ok(out)
}

/// Adjoint of `global_avg_pool`: spread each channel gradient evenly.
pub fn global_avg_pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    spatial: (usize, usize),
) -> Result<Tensor<T>> {
    if dy.rank() != 2 {
        return Err(DttnError::Dim(format!(
            "pool adjoint expects NC gradient, got rank {}",
            dy.rank()
        )));
    }
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let (h, w) = spatial;
    let p = h * w;
    let inv = T::from_f64(1.0 / p as f64);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n * c {
        let g = dy.data()[i] * inv;
        for v in dx.data_mut()[i * p..(i + 1) * p].iter_mut() {
            *v = g;
        }
    }
    Ok(dx)
}
