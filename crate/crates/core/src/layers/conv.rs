//! Grouped 2D convolution with square kernels. Covers every convolution the
//! model needs: dense patch embeds (groups = 1), depthwise spatial mixers
//! (groups = channels), and grouped channel expanders.

use rand::Rng;

use super::{axpy, check_nchw, dot, gemm_rows, gemm_rows_adjoint, ParamClass, ParamMut, ParamRef};
use crate::error::{DttnError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// [out, in / groups, k, k]
    pub weight: Tensor<T>,
    /// [out]
    pub bias: Tensor<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(DttnError::Dim(format!(
                "groups {groups} must divide in {in_channels} and out {out_channels}"
            )));
        }
        if kernel == 0 || stride == 0 {
            return Err(DttnError::Dim("kernel and stride must be positive".into()));
        }
        Ok(Conv2d {
            weight: Tensor::zeros(&[out_channels, in_channels / groups, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    /// Kaiming-uniform weights with unit gain over fan_in = (in/groups)*k*k,
    /// zero bias; samples in f64 for dtype-independent initialization.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.in_channels / self.groups) * self.kernel * self.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = T::from_f64(rng.gen_range(-bound..bound));
        }
        for b in self.bias.data_mut() {
            *b = T::ZERO;
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |s: usize| -> Result<usize> {
            let padded = s + 2 * self.padding;
            if padded < self.kernel {
                return Err(DttnError::Dim(format!(
                    "input span {s} too small for kernel {} with padding {}",
                    self.kernel, self.padding
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    /// Output rows `oy` whose sampled input row `oy*stride + ky - padding`
    /// lands inside `0..extent`; precomputing this keeps the inner loops
    /// branch-free.
    fn valid_range(&self, ky: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = ky as isize - self.padding as isize;
        // smallest oy with oy*s + shift >= 0
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift + s - 1) / s) as usize
        };
        // largest oy with oy*s + shift <= extent-1
        let hi_num = extent as isize - 1 - shift;
        if hi_num < 0 {
            return (1, 0);
        }
        let hi = ((hi_num / s) as usize).min(out_extent.saturating_sub(1));
        (lo.min(out_extent), hi)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_nchw(x, self.in_channels, "conv2d")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_spatial(h, w)?;
        let (cig, cog) = (self.in_channels / self.groups, self.out_channels / self.groups);
        let k = self.kernel;
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        if self.stride == self.kernel && self.padding == 0 {
            self.forward_tiled(x.data(), out.data_mut(), n, h, w, oh, ow);
            return Ok(out);
        }
        if self.stride == 1 {
            self.forward_unit_stride(x.data(), out.data_mut(), n, h, w, oh, ow);
            return Ok(out);
        }
        let src = x.data();
        let wt = self.weight.data();
        let bias = self.bias.data();
        let dst = out.data_mut();

        for b in 0..n {
            for g in 0..self.groups {
                for ocg in 0..cog {
                    let o = g * cog + ocg;
                    let oplane = &mut dst[(b * self.out_channels + o) * oh * ow..][..oh * ow];
                    let bo = bias[o];
                    for v in oplane.iter_mut() {
                        *v = bo;
                    }
                    for icg in 0..cig {
                        let c = g * cig + icg;
                        let xplane = &src[(b * self.in_channels + c) * h * w..][..h * w];
                        let wbase = ((o * cig) + icg) * k * k;
                        for ky in 0..k {
                            let (ylo, yhi) = self.valid_range(ky, h, oh);
                            if ylo > yhi {
                                continue;
                            }
                            for kx in 0..k {
                                let wv = wt[wbase + ky * k + kx];
                                let (xlo, xhi) = self.valid_range(kx, w, ow);
                                if xlo > xhi {
                                    continue;
                                }
                                for oy in ylo..=yhi {
                                    let iy = oy * self.stride + ky - self.padding;
                                    let xrow = &xplane[iy * w..(iy + 1) * w];
                                    let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                                    for ox in xlo..=xhi {
                                        let ix = ox * self.stride + kx - self.padding;
                                        orow[ox] += wv * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Kernel-sized stride with no padding reads each input pixel at most
    /// once, so the convolution is a dense linear map over k*k phase-shifted
    /// planes. Packing each phase across the whole batch turns it into a
    /// GEMM over long contiguous rows.
    fn forward_tiled(
        &self,
        src: &[T],
        dst: &mut [T],
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let (cig, cog) = (self.in_channels / self.groups, self.out_channels / self.groups);
        let m = n * oh * ow;
        let ck = cig * self.kernel * self.kernel;
        let wt = self.weight.data();
        let bias = self.bias.data();
        let mut xp = vec![T::ZERO; ck * m];
        let mut yp = vec![T::ZERO; cog * m];
        for g in 0..self.groups {
            self.pack_phases(src, &mut xp, g, n, h, w, oh, ow);
            gemm_rows(
                &wt[g * cog * ck..][..cog * ck],
                &bias[g * cog..][..cog],
                &xp,
                &mut yp,
                ck,
                cog,
                m,
            );
            for ocg in 0..cog {
                let o = g * cog + ocg;
                for b in 0..n {
                    dst[(b * self.out_channels + o) * oh * ow..][..oh * ow]
                        .copy_from_slice(&yp[ocg * m + b * oh * ow..][..oh * ow]);
                }
            }
        }
    }

    /// Gathers group `g`'s input into phase rows: row (icg*k + ky)*k + kx
    /// holds x[b, c, oy*k + ky, ox*k + kx] as one [n*oh*ow] run, matching
    /// the weight's (in, ky, kx) layout.
    #[allow(clippy::too_many_arguments)]
    fn pack_phases(
        &self,
        src: &[T],
        xp: &mut [T],
        g: usize,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let cig = self.in_channels / self.groups;
        let k = self.kernel;
        let m = n * oh * ow;
        for icg in 0..cig {
            let c = g * cig + icg;
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut xp[((icg * k + ky) * k + kx) * m..][..m];
                    for b in 0..n {
                        let xplane = &src[(b * self.in_channels + c) * h * w..][..h * w];
                        for oy in 0..oh {
                            let xrow = &xplane[(oy * k + ky) * w..][..w];
                            let drow = &mut row[b * oh * ow + oy * ow..][..ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = xrow[ox * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unit-stride path. Each input channel's planes are packed for the whole
    /// batch into one zero-padded array, so every kernel tap becomes a single
    /// long shifted-slice update. Within a padded plane an output pixel's tap
    /// index (oy+ky, ox+kx) never leaves the plane, so the flat form is exact
    /// and the padded borders absorb what would otherwise be edge cases.
    fn forward_unit_stride(
        &self,
        src: &[T],
        dst: &mut [T],
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let (cig, cog) = (self.in_channels / self.groups, self.out_channels / self.groups);
        let k = self.kernel;
        let pad = self.padding;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let len = n * ph * pw;
        let wt = self.weight.data();
        let bias = self.bias.data();
        let mut pin = vec![T::ZERO; len];
        let mut pout = vec![T::ZERO; cog * len];
        for g in 0..self.groups {
            pout.fill(T::ZERO);
            for icg in 0..cig {
                let c = g * cig + icg;
                pin.fill(T::ZERO);
                for b in 0..n {
                    let xplane = &src[(b * self.in_channels + c) * h * w..][..h * w];
                    let base = b * ph * pw;
                    for y in 0..h {
                        pin[base + (y + pad) * pw + pad..][..w]
                            .copy_from_slice(&xplane[y * w..][..w]);
                    }
                }
                for ocg in 0..cog {
                    let o = g * cog + ocg;
                    let oplane = &mut pout[ocg * len..][..len];
                    let wbase = ((o * cig) + icg) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[wbase + ky * k + kx];
                            let off = ky * pw + kx;
                            let anchor = pad * pw + pad;
                            if off >= anchor {
                                let s = off - anchor;
                                axpy(&mut oplane[..len - s], &pin[s..], wv);
                            } else {
                                let s = anchor - off;
                                axpy(&mut oplane[s..], &pin[..len - s], wv);
                            }
                        }
                    }
                }
            }
            for ocg in 0..cog {
                let o = g * cog + ocg;
                let bo = bias[o];
                let oplane = &pout[ocg * len..][..len];
                for b in 0..n {
                    let drows = &mut dst[(b * self.out_channels + o) * oh * ow..][..oh * ow];
                    let base = b * ph * pw;
                    for oy in 0..oh {
                        let srow = &oplane[base + (oy + pad) * pw + pad..][..ow];
                        for (d, &v) in drows[oy * ow..][..ow].iter_mut().zip(srow) {
                            *d = v + bo;
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns dx.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut Conv2d<T>,
    ) -> Result<Tensor<T>> {
        check_nchw(x, self.in_channels, "conv2d adjoint")?;
        check_nchw(dy, self.out_channels, "conv2d adjoint")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_spatial(h, w)?;
        if dy.shape()[2] != oh || dy.shape()[3] != ow {
            return Err(DttnError::Dim(format!(
                "gradient spatial {:?} does not match conv output {oh}x{ow}",
                &dy.shape()[2..]
            )));
        }
        let (cig, cog) = (self.in_channels / self.groups, self.out_channels / self.groups);
        let k = self.kernel;
        let mut dx = Tensor::zeros(x.shape());
        if self.stride == self.kernel && self.padding == 0 {
            self.backward_tiled(
                x.data(),
                dy.data(),
                dx.data_mut(),
                grad.weight.data_mut(),
                grad.bias.data_mut(),
                n,
                h,
                w,
                oh,
                ow,
            );
            return Ok(dx);
        }
        if self.stride == 1 {
            self.backward_unit_stride(
                x.data(),
                dy.data(),
                dx.data_mut(),
                grad.weight.data_mut(),
                grad.bias.data_mut(),
                n,
                h,
                w,
                oh,
                ow,
            );
            return Ok(dx);
        }
        let xsrc = x.data();
        let gsrc = dy.data();
        let wt = self.weight.data();
        let dw = grad.weight.data_mut();
        let db = grad.bias.data_mut();
        let dxd = dx.data_mut();

        for b in 0..n {
            for g in 0..self.groups {
                for ocg in 0..cog {
                    let o = g * cog + ocg;
                    let gplane = &gsrc[(b * self.out_channels + o) * oh * ow..][..oh * ow];
                    let mut acc = T::ZERO;
                    for &gv in gplane {
                        acc += gv;
                    }
                    db[o] += acc;
                    for icg in 0..cig {
                        let c = g * cig + icg;
                        let xplane = &xsrc[(b * self.in_channels + c) * h * w..][..h * w];
                        let dxplane = &mut dxd[(b * self.in_channels + c) * h * w..][..h * w];
                        let wbase = ((o * cig) + icg) * k * k;
                        for ky in 0..k {
                            let (ylo, yhi) = self.valid_range(ky, h, oh);
                            if ylo > yhi {
                                continue;
                            }
                            for kx in 0..k {
                                let (xlo, xhi) = self.valid_range(kx, w, ow);
                                if xlo > xhi {
                                    continue;
                                }
                                let wv = wt[wbase + ky * k + kx];
                                let mut wacc = T::ZERO;
                                for oy in ylo..=yhi {
                                    let iy = oy * self.stride + ky - self.padding;
                                    let xrow = &xplane[iy * w..(iy + 1) * w];
                                    let dxrow = &mut dxplane[iy * w..(iy + 1) * w];
                                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                                    for ox in xlo..=xhi {
                                        let ix = ox * self.stride + kx - self.padding;
                                        let gv = grow[ox];
                                        wacc += gv * xrow[ix];
                                        dxrow[ix] += wv * gv;
                                    }
                                }
                                dw[wbase + ky * k + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    /// Adjoint of the tiled path. Over the same phase rows each weight
    /// gradient is one long dot product and each input gradient one long
    /// update, scattered back to its unique source pixel afterwards (phases
    /// are disjoint, so nothing overlaps).
    #[allow(clippy::too_many_arguments)]
    fn backward_tiled(
        &self,
        xsrc: &[T],
        gsrc: &[T],
        dxd: &mut [T],
        dw: &mut [T],
        db: &mut [T],
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let (cig, cog) = (self.in_channels / self.groups, self.out_channels / self.groups);
        let k = self.kernel;
        let m = n * oh * ow;
        let ck = cig * k * k;
        let wt = self.weight.data();
        for b in 0..n {
            for (o, dbv) in db.iter_mut().enumerate() {
                let gplane = &gsrc[(b * self.out_channels + o) * oh * ow..][..oh * ow];
                let mut acc = T::ZERO;
                for &gv in gplane {
                    acc += gv;
                }
                *dbv += acc;
            }
        }
        let mut xp = vec![T::ZERO; ck * m];
        let mut gp = vec![T::ZERO; cog * m];
        let mut dxp = vec![T::ZERO; ck * m];
        for g in 0..self.groups {
            self.pack_phases(xsrc, &mut xp, g, n, h, w, oh, ow);
            for ocg in 0..cog {
                let o = g * cog + ocg;
                for b in 0..n {
                    gp[ocg * m + b * oh * ow..][..oh * ow]
                        .copy_from_slice(&gsrc[(b * self.out_channels + o) * oh * ow..][..oh * ow]);
                }
            }
            dxp.fill(T::ZERO);
            gemm_rows_adjoint(
                &wt[g * cog * ck..][..cog * ck],
                &gp,
                &xp,
                &mut dw[g * cog * ck..][..cog * ck],
                &mut dxp,
                ck,
                cog,
                m,
            );
            for icg in 0..cig {
                let c = g * cig + icg;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = &dxp[((icg * k + ky) * k + kx) * m..][..m];
                        for b in 0..n {
                            let dxplane = &mut dxd[(b * self.in_channels + c) * h * w..][..h * w];
                            for oy in 0..oh {
                                let srow = &row[b * oh * ow + oy * ow..][..ow];
                                let drow = &mut dxplane[(oy * k + ky) * w..][..w];
                                for (ox, &v) in srow.iter().enumerate() {
                                    drow[ox * k + kx] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unit-stride adjoint using the same packed padded-plane layout as the
    /// forward pass. Output gradients are embedded at their padded positions
    /// (borders zero), so each weight gradient is one long shifted dot and
    /// each input gradient one long shifted update; the contribution to
    /// padding pixels lands on the scratch border and is dropped.
    #[allow(clippy::too_many_arguments)]
    fn backward_unit_stride(
        &self,
        xsrc: &[T],
        gsrc: &[T],
        dxd: &mut [T],
        dw: &mut [T],
        db: &mut [T],
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let (cig, cog) = (self.in_channels / self.groups, self.out_channels / self.groups);
        let k = self.kernel;
        let pad = self.padding;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let len = n * ph * pw;
        let anchor = pad * pw + pad;
        let wt = self.weight.data();
        for b in 0..n {
            for (o, dbv) in db.iter_mut().enumerate() {
                let gplane = &gsrc[(b * self.out_channels + o) * oh * ow..][..oh * ow];
                let mut acc = T::ZERO;
                for &g in gplane {
                    acc += g;
                }
                *dbv += acc;
            }
        }
        let mut pg = vec![T::ZERO; cog * len];
        let mut pin = vec![T::ZERO; len];
        let mut pdx = vec![T::ZERO; len];
        for g in 0..self.groups {
            pg.fill(T::ZERO);
            for ocg in 0..cog {
                let o = g * cog + ocg;
                let gplane = &mut pg[ocg * len..][..len];
                for b in 0..n {
                    let grows = &gsrc[(b * self.out_channels + o) * oh * ow..][..oh * ow];
                    let base = b * ph * pw;
                    for oy in 0..oh {
                        gplane[base + (oy + pad) * pw + pad..][..ow]
                            .copy_from_slice(&grows[oy * ow..][..ow]);
                    }
                }
            }
            for icg in 0..cig {
                let c = g * cig + icg;
                pin.fill(T::ZERO);
                for b in 0..n {
                    let xplane = &xsrc[(b * self.in_channels + c) * h * w..][..h * w];
                    let base = b * ph * pw;
                    for y in 0..h {
                        pin[base + (y + pad) * pw + pad..][..w]
                            .copy_from_slice(&xplane[y * w..][..w]);
                    }
                }
                pdx.fill(T::ZERO);
                for ocg in 0..cog {
                    let o = g * cog + ocg;
                    let gplane = &pg[ocg * len..][..len];
                    let wbase = ((o * cig) + icg) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[wbase + ky * k + kx];
                            let off = ky * pw + kx;
                            let (wacc, s);
                            if off >= anchor {
                                s = off - anchor;
                                wacc = dot(&gplane[..len - s], &pin[s..]);
                                axpy(&mut pdx[s..], &gplane[..len - s], wv);
                            } else {
                                s = anchor - off;
                                wacc = dot(&gplane[s..], &pin[..len - s]);
                                axpy(&mut pdx[..len - s], &gplane[s..], wv);
                            }
                            dw[wbase + ky * k + kx] += wacc;
                        }
                    }
                }
                for b in 0..n {
                    let dxplane = &mut dxd[(b * self.in_channels + c) * h * w..][..h * w];
                    let base = b * ph * pw;
                    for y in 0..h {
                        let prow = &pdx[base + (y + pad) * pw + pad..][..w];
                        for (d, &v) in dxplane[y * w..][..w].iter_mut().zip(prow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push((format!("{prefix}.weight"), ParamClass::Weight, &self.weight));
        out.push((format!("{prefix}.bias"), ParamClass::Bias, &self.bias));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push((
            format!("{prefix}.weight"),
            ParamClass::Weight,
            &mut self.weight,
        ));
        out.push((format!("{prefix}.bias"), ParamClass::Bias, &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line reference with explicit bounds checks, kept deliberately
    /// different in structure from the production kernel.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = conv.out_spatial(h, w).unwrap();
        let (cig, cog) = (conv.in_channels / conv.groups, conv.out_channels / conv.groups);
        let mut out = Tensor::zeros(&[n, conv.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..conv.out_channels {
                let g = o / cog;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.data()[o];
                        for icg in 0..cig {
                            let c = g * cig + icg;
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize
                                        - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize
                                        - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += conv.weight.at(&[o, icg, ky, kx])
                                        * x.at(&[b, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                        *out.at_mut(&[b, o, oy, ox]) = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo_fill(t: &mut Tensor<f64>, mul: usize, add: usize, modulo: usize) {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * mul + add) % modulo) as f64 * 0.25 - 1.0;
        }
    }

    #[test]
    fn patch_conv_hand_example() {
        // 1 channel, k=2 s=2: each output pixel is the weighted sum of a
        // disjoint 2x2 patch.
        let mut conv = Conv2d::<f64>::zeros(1, 1, 2, 2, 0, 1).unwrap();
        conv.weight
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        conv.bias.data_mut()[0] = 0.5;
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // patch at (0,0): 0,1,4,5 -> 0+2+12+20+0.5
        assert_eq!(y.at(&[0, 0, 0, 0]), 34.5);
        // patch at (1,1): 10,11,14,15 -> 10+22+42+60+0.5
        assert_eq!(y.at(&[0, 0, 1, 1]), 134.5);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        // 3x3 depthwise kernel with 1 at the center and same padding.
        let mut conv = Conv2d::<f64>::zeros(4, 4, 3, 1, 1, 4).unwrap();
        for o in 0..4 {
            *conv.weight.at_mut(&[o, 0, 1, 1]) = 1.0;
        }
        let x = Tensor::from_fn(&[2, 4, 5, 5], |i| (i as f64 * 0.3).sin());
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn matches_naive_reference_on_all_configs() {
        let cases = [
            // (in, out, k, stride, pad, groups, h, w)
            (3, 8, 2, 2, 0, 1, 8, 8),  // patch embed
            (8, 8, 2, 2, 0, 1, 6, 6),  // second embed / downsample
            (6, 6, 3, 1, 1, 6, 5, 5),  // depthwise mixer
            (2, 6, 3, 1, 1, 2, 5, 4),  // grouped expander
            (4, 2, 1, 1, 0, 1, 3, 3),  // pointwise fuse
            (4, 4, 3, 2, 1, 2, 7, 7),  // strided with padding
        ];
        for (ci, co, k, s, p, g, h, w) in cases {
            let mut conv = Conv2d::<f64>::zeros(ci, co, k, s, p, g).unwrap();
            pseudo_fill(&mut conv.weight, 13, 5, 23);
            pseudo_fill(&mut conv.bias, 7, 3, 11);
            let mut x = Tensor::zeros(&[2, ci, h, w]);
            pseudo_fill(&mut x, 17, 1, 29);
            let got = conv.forward(&x).unwrap();
            let want = conv_naive(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "cfg {ci},{co},{k},{s},{p},{g}");
            }
        }
    }

    #[test]
    fn backward_dot_product_identity() {
        for (ci, co, k, s, p, g, h, w) in [
            (2, 4, 3, 1, 1, 2, 5, 5),
            (3, 6, 2, 2, 0, 1, 6, 6),
            (4, 4, 3, 1, 1, 4, 4, 4),
        ] {
            let mut conv = Conv2d::<f64>::zeros(ci, co, k, s, p, g).unwrap();
            pseudo_fill(&mut conv.weight, 19, 2, 31);
            let mut x = Tensor::zeros(&[2, ci, h, w]);
            pseudo_fill(&mut x, 11, 6, 37);
            let (oh, ow) = conv.out_spatial(h, w).unwrap();
            let mut dy = Tensor::zeros(&[2, co, oh, ow]);
            pseudo_fill(&mut dy, 23, 4, 41);
            let mut grad = Conv2d::<f64>::zeros(ci, co, k, s, p, g).unwrap();
            let dx = conv.backward(&x, &dy, &mut grad).unwrap();
            let y = conv.forward(&x).unwrap();
            // bias contributes a term independent of x on the left side
            let ybias = conv.forward(&Tensor::zeros(x.shape())).unwrap();
            let lhs: f64 = y
                .data()
                .iter()
                .zip(ybias.data())
                .zip(dy.data())
                .map(|((a, b), gv)| (a - b) * gv)
                .sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "cfg {ci},{co},{k},{s},{p},{g}");
        }
    }

    #[test]
    fn weight_gradient_matches_finite_difference_probe() {
        let mut conv = Conv2d::<f64>::zeros(2, 2, 3, 1, 1, 1).unwrap();
        pseudo_fill(&mut conv.weight, 29, 3, 43);
        let mut x = Tensor::zeros(&[1, 2, 4, 4]);
        pseudo_fill(&mut x, 13, 9, 27);
        let dy = Tensor::ones(&[1, 2, 4, 4]);
        let mut grad = Conv2d::<f64>::zeros(2, 2, 3, 1, 1, 1).unwrap();
        conv.backward(&x, &dy, &mut grad).unwrap();
        let eps = 1e-6;
        for idx in [0usize, 5, 9, 17] {
            let mut plus = conv.clone();
            plus.weight.data_mut()[idx] += eps;
            let mut minus = conv.clone();
            minus.weight.data_mut()[idx] -= eps;
            let fp: f64 = plus.forward(&x).unwrap().data().iter().sum();
            let fm: f64 = minus.forward(&x).unwrap().data().iter().sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - grad.weight.data()[idx]).abs() < 1e-6,
                "weight {idx}: fd {fd} vs adjoint {}",
                grad.weight.data()[idx]
            );
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Conv2d::<f64>::zeros(3, 4, 3, 1, 1, 2).is_err());
        let conv = Conv2d::<f64>::zeros(1, 1, 5, 1, 0, 1).unwrap();
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        assert!(conv.forward(&x).is_err());
    }
}
