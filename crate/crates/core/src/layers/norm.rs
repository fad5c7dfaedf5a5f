//! Batch and layer normalization, plus the folding helpers that absorb an
//! eval-mode batch norm into the convolution or linear map feeding it.

use super::{check_nchw, ChannelLinear, Conv2d, ParamClass, ParamMut, ParamRef};
use crate::error::{DttnError, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch normalization over (batch, height, width).
///
/// Training normalizes with the biased batch variance and updates running
/// statistics with the unbiased one; evaluation normalizes with the running
/// statistics. Both follow the common deep learning convention.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved forward intermediates for the training-mode adjoint.
pub struct BnCtx<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCtx<T>)> {
        let c = self.channels();
        check_nchw(x, c, "batch norm")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let m = n * p;
        if m < 2 {
            return Err(DttnError::Dim(
                "batch norm needs at least 2 samples per channel".into(),
            ));
        }
        let src = x.data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::ZERO; c];
        let inv_m = T::from_f64(1.0 / m as f64);
        let bessel = T::from_f64(m as f64 / (m as f64 - 1.0));
        let mom = T::from_f64(self.momentum);
        let keep = T::from_f64(1.0 - self.momentum);
        let eps = T::from_f64(self.eps);
        let mut out = Tensor::zeros(x.shape());

        for ch in 0..c {
            let mut mean = T::ZERO;
            for b in 0..n {
                let plane = &src[(b * c + ch) * p..][..p];
                for &v in plane {
                    mean += v;
                }
            }
            mean *= inv_m;
            let mut var = T::ZERO;
            for b in 0..n {
                let plane = &src[(b * c + ch) * p..][..p];
                for &v in plane {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var *= inv_m;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[ch] = inv;
            self.running_mean.data_mut()[ch] =
                keep * self.running_mean.data()[ch] + mom * mean;
            self.running_var.data_mut()[ch] =
                keep * self.running_var.data()[ch] + mom * var * bessel;
            let g = self.gamma.data()[ch];
            let bt = self.beta.data()[ch];
            for b in 0..n {
                let plane = &src[(b * c + ch) * p..][..p];
                let hplane = &mut xhat.data_mut()[(b * c + ch) * p..][..p];
                for (hh, &v) in hplane.iter_mut().zip(plane) {
                    *hh = (v - mean) * inv;
                }
            }
            for b in 0..n {
                let hplane = &xhat.data()[(b * c + ch) * p..][..p];
                let oplane = &mut out.data_mut()[(b * c + ch) * p..][..p];
                for (o, &hh) in oplane.iter_mut().zip(hplane) {
                    *o = g * hh + bt;
                }
            }
        }
        Ok((out, BnCtx { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        check_nchw(x, c, "batch norm")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let eps = T::from_f64(self.eps);
        let mut out = Tensor::zeros(x.shape());
        for ch in 0..c {
            let inv = T::ONE / (self.running_var.data()[ch] + eps).sqrt();
            let g = self.gamma.data()[ch] * inv;
            let shift = self.beta.data()[ch] - self.running_mean.data()[ch] * g;
            for b in 0..n {
                let plane = &x.data()[(b * c + ch) * p..][..p];
                let oplane = &mut out.data_mut()[(b * c + ch) * p..][..p];
                for (o, &v) in oplane.iter_mut().zip(plane) {
                    *o = g * v + shift;
                }
            }
        }
        Ok(out)
    }

    /// Training-mode adjoint. With m elements per channel and s = 1/std:
    /// dx = (s/m) * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
    pub fn backward(
        &self,
        ctx: &BnCtx<T>,
        dy: &Tensor<T>,
        grad: &mut BatchNorm2d<T>,
    ) -> Result<Tensor<T>> {
        let c = self.channels();
        check_nchw(dy, c, "batch norm adjoint")?;
        let (n, h, w) = (dy.shape()[0], dy.shape()[2], dy.shape()[3]);
        let p = h * w;
        let m = n * p;
        let mf = T::from_f64(m as f64);
        let inv_m = T::from_f64(1.0 / m as f64);
        let mut dx = Tensor::zeros(dy.shape());

        for ch in 0..c {
            let g = self.gamma.data()[ch];
            let inv = ctx.inv_std[ch];
            let mut sum_dxhat = T::ZERO;
            let mut sum_dxhat_xhat = T::ZERO;
            let mut dbeta = T::ZERO;
            for b in 0..n {
                let gplane = &dy.data()[(b * c + ch) * p..][..p];
                let hplane = &ctx.xhat.data()[(b * c + ch) * p..][..p];
                for (&gv, &hh) in gplane.iter().zip(hplane) {
                    let dxh = gv * g;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * hh;
                    dbeta += gv;
                }
            }
            grad.beta.data_mut()[ch] += dbeta;
            // dgamma = sum(dy * xhat) = sum_dxhat_xhat / gamma, but computing
            // it directly avoids dividing by a possibly zero gain.
            let mut dgamma = T::ZERO;
            for b in 0..n {
                let gplane = &dy.data()[(b * c + ch) * p..][..p];
                let hplane = &ctx.xhat.data()[(b * c + ch) * p..][..p];
                for (&gv, &hh) in gplane.iter().zip(hplane) {
                    dgamma += gv * hh;
                }
            }
            grad.gamma.data_mut()[ch] += dgamma;
            let coeff = inv * inv_m;
            for b in 0..n {
                let gplane = &dy.data()[(b * c + ch) * p..][..p];
                let hplane = &ctx.xhat.data()[(b * c + ch) * p..][..p];
                let dplane = &mut dx.data_mut()[(b * c + ch) * p..][..p];
                for ((d, &gv), &hh) in dplane.iter_mut().zip(gplane).zip(hplane) {
                    let dxh = gv * g;
                    *d = coeff * (mf * dxh - sum_dxhat - hh * sum_dxhat_xhat);
                }
            }
        }
        Ok(dx)
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push((format!("{prefix}.gamma"), ParamClass::NormAffine, &self.gamma));
        out.push((format!("{prefix}.beta"), ParamClass::NormAffine, &self.beta));
        out.push((
            format!("{prefix}.running_mean"),
            ParamClass::NormStat,
            &self.running_mean,
        ));
        out.push((
            format!("{prefix}.running_var"),
            ParamClass::NormStat,
            &self.running_var,
        ));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push((
            format!("{prefix}.gamma"),
            ParamClass::NormAffine,
            &mut self.gamma,
        ));
        out.push((
            format!("{prefix}.beta"),
            ParamClass::NormAffine,
            &mut self.beta,
        ));
        out.push((
            format!("{prefix}.running_mean"),
            ParamClass::NormStat,
            &mut self.running_mean,
        ));
        out.push((
            format!("{prefix}.running_var"),
            ParamClass::NormStat,
            &mut self.running_var,
        ));
    }
}

/// Layer normalization across the channel dimension at each spatial
/// position, with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

pub struct LnCtx<T> {
    pub xhat: Tensor<T>,
    /// one entry per (batch, y, x) position
    pub inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LnCtx<T>)> {
        let c = self.channels();
        check_nchw(x, c, "layer norm")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let inv_c = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(self.eps);
        let src = x.data();
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::ZERO; n * p];
        let xh = xhat.data_mut();
        let od = out.data_mut();
        // Channel values for one position sit a full plane apart in NCHW, so
        // the stats walk channel-major with all positions advancing at once;
        // every inner loop then runs over a contiguous row.
        let mut mean = vec![T::ZERO; p];
        let mut var = vec![T::ZERO; p];
        for b in 0..n {
            let xb = &src[b * c * p..][..c * p];
            mean.fill(T::ZERO);
            for ch in 0..c {
                let row = &xb[ch * p..][..p];
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_c;
            }
            var.fill(T::ZERO);
            for ch in 0..c {
                let row = &xb[ch * p..][..p];
                for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&*mean) {
                    let d = v - m;
                    *vv += d * d;
                }
            }
            let inv = &mut inv_std[b * p..][..p];
            for (iv, &vv) in inv.iter_mut().zip(&*var) {
                *iv = T::ONE / (vv * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let row = &xb[ch * p..][..p];
                let hrow = &mut xh[(b * c + ch) * p..][..p];
                let orow = &mut od[(b * c + ch) * p..][..p];
                let (gc, bc) = (gamma[ch], beta[ch]);
                for i in 0..p {
                    let hh = (row[i] - mean[i]) * inv[i];
                    hrow[i] = hh;
                    orow[i] = gc * hh + bc;
                }
            }
        }
        Ok((out, LnCtx { xhat, inv_std }))
    }

    /// Same normalization as `forward` without saving intermediates.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(
        &self,
        ctx: &LnCtx<T>,
        dy: &Tensor<T>,
        grad: &mut LayerNorm<T>,
    ) -> Result<Tensor<T>> {
        let c = self.channels();
        check_nchw(dy, c, "layer norm adjoint")?;
        let (n, h, w) = (dy.shape()[0], dy.shape()[2], dy.shape()[3]);
        let p = h * w;
        let cf = T::from_f64(c as f64);
        let inv_c = T::from_f64(1.0 / c as f64);
        let gamma = self.gamma.data();
        let gsrc = dy.data();
        let hsrc = ctx.xhat.data();
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        let ggam = grad.gamma.data_mut();
        let gbet = grad.beta.data_mut();
        // Same channel-major layout trick as the forward pass: the two
        // per-position reductions advance every position together.
        let mut s_dxhat = vec![T::ZERO; p];
        let mut s_dxhat_xhat = vec![T::ZERO; p];
        for b in 0..n {
            let gb = &gsrc[b * c * p..][..c * p];
            let hb = &hsrc[b * c * p..][..c * p];
            s_dxhat.fill(T::ZERO);
            s_dxhat_xhat.fill(T::ZERO);
            for ch in 0..c {
                let grow = &gb[ch * p..][..p];
                let hrow = &hb[ch * p..][..p];
                let gc = gamma[ch];
                let (mut sg, mut sb) = (T::ZERO, T::ZERO);
                for i in 0..p {
                    let dxh = grow[i] * gc;
                    s_dxhat[i] += dxh;
                    s_dxhat_xhat[i] += dxh * hrow[i];
                    sg += grow[i] * hrow[i];
                    sb += grow[i];
                }
                ggam[ch] += sg;
                gbet[ch] += sb;
            }
            let inv = &ctx.inv_std[b * p..][..p];
            for ch in 0..c {
                let grow = &gb[ch * p..][..p];
                let hrow = &hb[ch * p..][..p];
                let drow = &mut dxd[(b * c + ch) * p..][..p];
                let gc = gamma[ch];
                for i in 0..p {
                    let coeff = inv[i] * inv_c;
                    drow[i] = coeff * (cf * grow[i] * gc - s_dxhat[i] - hrow[i] * s_dxhat_xhat[i]);
                }
            }
        }
        Ok(dx)
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push((format!("{prefix}.gamma"), ParamClass::NormAffine, &self.gamma));
        out.push((format!("{prefix}.beta"), ParamClass::NormAffine, &self.beta));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push((
            format!("{prefix}.gamma"),
            ParamClass::NormAffine,
            &mut self.gamma,
        ));
        out.push((
            format!("{prefix}.beta"),
            ParamClass::NormAffine,
            &mut self.beta,
        ));
    }
}

/// Absorbs an eval-mode batch norm that follows a convolution into the
/// convolution itself, optionally multiplying the whole result by `gain`:
///   gain * bn(conv(x)) == folded(x)  for every x.
pub fn fold_conv_bn<T: Scalar>(conv: &Conv2d<T>, bn: &BatchNorm2d<T>, gain: T) -> Result<Conv2d<T>> {
    if bn.channels() != conv.out_channels {
        return Err(DttnError::Dim(format!(
            "cannot fold {}-channel norm into {}-channel conv",
            bn.channels(),
            conv.out_channels
        )));
    }
    let mut folded = conv.clone();
    let eps = T::from_f64(bn.eps);
    let per_out = conv.weight.len() / conv.out_channels;
    for o in 0..conv.out_channels {
        let inv = T::ONE / (bn.running_var.data()[o] + eps).sqrt();
        let a = gain * bn.gamma.data()[o] * inv;
        for w in folded.weight.data_mut()[o * per_out..(o + 1) * per_out].iter_mut() {
            *w *= a;
        }
        folded.bias.data_mut()[o] = a * (conv.bias.data()[o] - bn.running_mean.data()[o])
            + gain * bn.beta.data()[o];
    }
    Ok(folded)
}

/// Same folding for a channel-wise linear map followed by a batch norm.
pub fn fold_linear_bn<T: Scalar>(
    lin: &ChannelLinear<T>,
    bn: &BatchNorm2d<T>,
    gain: T,
) -> Result<ChannelLinear<T>> {
    if bn.channels() != lin.out_channels() {
        return Err(DttnError::Dim(format!(
            "cannot fold {}-channel norm into {}-channel linear",
            bn.channels(),
            lin.out_channels()
        )));
    }
    let mut folded = lin.clone();
    let eps = T::from_f64(bn.eps);
    let ci = lin.in_channels();
    for o in 0..lin.out_channels() {
        let inv = T::ONE / (bn.running_var.data()[o] + eps).sqrt();
        let a = gain * bn.gamma.data()[o] * inv;
        for w in folded.weight.data_mut()[o * ci..(o + 1) * ci].iter_mut() {
            *w *= a;
        }
        folded.bias.data_mut()[o] =
            a * (lin.bias.data()[o] - bn.running_mean.data()[o]) + gain * bn.beta.data()[o];
    }
    Ok(folded)
}
