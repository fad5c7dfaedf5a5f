//! Composite modules around the core block stack: the patch embedding that
//! maps images to feature grids, the between-stage downsamplers, and the
//! pooled linear classifier head.

use rand::Rng;

use super::{
    fold_conv_bn, global_avg_pool, global_avg_pool_backward, BatchNorm2d, BnCtx, ChannelLinear,
    Conv2d, ParamMut, ParamRef,
};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Two stride-2 convolutions with 2x2 kernels: images in, a 4x smaller
/// feature grid out. No normalization and no nonlinearity.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

pub struct PatchEmbedCtx<T> {
    pub x1: Tensor<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn zeros(img_channels: usize, dim: usize) -> Result<Self> {
        Ok(PatchEmbed {
            conv1: Conv2d::zeros(img_channels, dim, 2, 2, 0, 1)?,
            conv2: Conv2d::zeros(dim, dim, 2, 2, 0, 1)?,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.conv1.init(rng);
        self.conv2.init(rng);
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv2.forward(&self.conv1.forward(x)?)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PatchEmbedCtx<T>)> {
        let x1 = self.conv1.forward(x)?;
        let y = self.conv2.forward(&x1)?;
        Ok((y, PatchEmbedCtx { x1 }))
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        ctx: &PatchEmbedCtx<T>,
        dy: &Tensor<T>,
        grad: &mut PatchEmbed<T>,
    ) -> Result<Tensor<T>> {
        let dx1 = self.conv2.backward(&ctx.x1, dy, &mut grad.conv2)?;
        self.conv1.backward(x, &dx1, &mut grad.conv1)
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv1.visit(&format!("{prefix}.conv1"), out);
        self.conv2.visit(&format!("{prefix}.conv2"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), out);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), out);
    }
}

/// Stride-2 2x2 convolution plus batch norm, placed between stages to halve
/// the grid and change the channel width.
#[derive(Debug, Clone)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub struct DownsampleCtx<T> {
    pub xc: Tensor<T>,
    pub bn: BnCtx<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Downsample {
            conv: Conv2d::zeros(c_in, c_out, 2, 2, 0, 1)?,
            bn: BatchNorm2d::new(c_out),
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.conv.init(rng);
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DownsampleCtx<T>)> {
        let xc = self.conv.forward(x)?;
        let (y, bnctx) = self.bn.forward_train(&xc)?;
        Ok((y, DownsampleCtx { xc, bn: bnctx }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.forward_eval(&self.conv.forward(x)?)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        ctx: &DownsampleCtx<T>,
        dy: &Tensor<T>,
        grad: &mut Downsample<T>,
    ) -> Result<Tensor<T>> {
        let dxc = self.bn.backward(&ctx.bn, dy, &mut grad.bn)?;
        self.conv.backward(x, &dxc, &mut grad.conv)
    }

    /// Single convolution equal to the eval-mode conv + norm pair.
    pub fn fold(&self) -> Result<Conv2d<T>> {
        fold_conv_bn(&self.conv, &self.bn, T::ONE)
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.visit(&format!("{prefix}.conv"), out);
        self.bn.visit(&format!("{prefix}.bn"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.visit_mut(&format!("{prefix}.conv"), out);
        self.bn.visit_mut(&format!("{prefix}.bn"), out);
    }
}

/// Global average pool followed by a dense class projection.
#[derive(Debug, Clone)]
pub struct Head<T> {
    pub linear: ChannelLinear<T>,
}

pub struct HeadCtx<T> {
    pub pooled: Tensor<T>,
    pub spatial: (usize, usize),
}

impl<T: Scalar> Head<T> {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Head {
            linear: ChannelLinear::zeros(dim, classes),
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.linear.init(rng);
    }

    /// NCHW features in, [batch, classes] logits out.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCtx<T>)> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let spatial = (x.shape()[2], x.shape()[3]);
        let pooled = global_avg_pool(x)?.reshape(&[n, c, 1, 1])?;
        let logits = self.linear.forward(&pooled)?;
        let m = self.linear.out_channels();
        Ok((logits.reshape(&[n, m])?, HeadCtx { pooled, spatial }))
    }

    pub fn backward(
        &self,
        ctx: &HeadCtx<T>,
        dy: &Tensor<T>,
        grad: &mut Head<T>,
    ) -> Result<Tensor<T>> {
        let (n, m) = (dy.shape()[0], dy.shape()[1]);
        let dy4 = dy.reshape(&[n, m, 1, 1])?;
        let dpooled = self.linear.backward(&ctx.pooled, &dy4, &mut grad.linear)?;
        let c = self.linear.in_channels();
        global_avg_pool_backward(&dpooled.reshape(&[n, c])?, ctx.spatial)
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.linear.visit(&format!("{prefix}.linear"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.linear.visit_mut(&format!("{prefix}.linear"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(t: &mut Tensor<f64>, mul: usize, add: usize, modulo: usize) {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * mul + add) % modulo) as f64 * 0.21 - 0.9;
        }
    }

    #[test]
    fn embed_quarters_each_spatial_side() {
        let embed = PatchEmbed::<f64>::zeros(1, 8).unwrap();
        let x = Tensor::ones(&[2, 1, 28, 28]);
        let y = embed.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 7, 7]);

        let rgb = PatchEmbed::<f64>::zeros(3, 4).unwrap();
        let x32 = Tensor::ones(&[1, 3, 32, 32]);
        assert_eq!(rgb.forward(&x32).unwrap().shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn embed_backward_matches_finite_differences() {
        let mut embed = PatchEmbed::<f64>::zeros(1, 2).unwrap();
        fill(&mut embed.conv1.weight, 7, 2, 19);
        fill(&mut embed.conv2.weight, 11, 5, 23);
        let mut x = Tensor::zeros(&[1, 1, 8, 8]);
        fill(&mut x, 13, 1, 61);
        let mut wts = Tensor::zeros(&[1, 2, 2, 2]);
        fill(&mut wts, 3, 4, 17);

        let (_, ctx) = embed.forward_train(&x).unwrap();
        let mut grad = PatchEmbed::<f64>::zeros(1, 2).unwrap();
        let dx = embed.backward(&x, &ctx, &wts, &mut grad).unwrap();

        let loss = |xin: &Tensor<f64>| -> f64 {
            embed
                .forward(xin)
                .unwrap()
                .data()
                .iter()
                .zip(wts.data())
                .map(|(a, w)| a * w)
                .sum()
        };
        let eps = 1e-5;
        for idx in [0usize, 17, 35, 63] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(crate::gradcheck::rel_err(dx.data()[idx], fd) < 1e-6);
        }
    }

    #[test]
    fn downsample_fold_equals_eval_path() {
        let mut ds = Downsample::<f64>::zeros(3, 5).unwrap();
        fill(&mut ds.conv.weight, 29, 3, 47);
        fill(&mut ds.conv.bias, 5, 1, 13);
        fill(&mut ds.bn.gamma, 7, 2, 11);
        fill(&mut ds.bn.beta, 3, 6, 17);
        fill(&mut ds.bn.running_mean, 11, 4, 19);
        fill(&mut ds.bn.running_var, 13, 2, 23);
        for v in ds.bn.running_var.data_mut().iter_mut() {
            *v = v.abs() + 0.15;
        }
        let mut x = Tensor::zeros(&[2, 3, 6, 6]);
        fill(&mut x, 17, 9, 73);
        let eval = ds.forward_eval(&x).unwrap();
        let folded = ds.fold().unwrap().forward(&x).unwrap();
        for (a, b) in folded.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_pools_then_projects() {
        let mut head = Head::<f64>::zeros(2, 3);
        head.linear
            .weight
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        head.linear.bias.data_mut().copy_from_slice(&[0.0, 0.5, 0.0]);
        // channel means: 1.5 and 5.5
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = head.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.data(), &[1.5, 6.0, 7.0]);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut head = Head::<f64>::zeros(3, 2);
        fill(&mut head.linear.weight, 7, 3, 29);
        let mut x = Tensor::zeros(&[2, 3, 2, 2]);
        fill(&mut x, 19, 5, 43);
        let mut wts = Tensor::zeros(&[2, 2]);
        fill(&mut wts, 3, 1, 7);

        let (_, ctx) = head.forward_train(&x).unwrap();
        let mut grad = Head::<f64>::zeros(3, 2);
        let dx = head.backward(&ctx, &wts, &mut grad).unwrap();

        let loss = |xin: &Tensor<f64>| -> f64 {
            head.forward(xin)
                .unwrap()
                .data()
                .iter()
                .zip(wts.data())
                .map(|(a, w)| a * w)
                .sum()
        };
        let eps = 1e-6;
        for idx in [0usize, 7, 13, 23] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - dx.data()[idx]).abs() < 1e-8);
        }
    }
}
