//! Channel-wise linear map: the same dense matrix applied at every spatial
//! position of an NCHW tensor. Equivalent to a 1x1 convolution.

use rand::Rng;

use super::{
    check_nchw, gemm_rows, gemm_rows_adjoint, pack_channels, unpack_channels, ParamClass,
    ParamMut, ParamRef,
};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ChannelLinear<T> {
    /// [out, in]
    pub weight: Tensor<T>,
    /// [out]
    pub bias: Tensor<T>,
}

impl<T: Scalar> ChannelLinear<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ChannelLinear {
            weight: Tensor::zeros(&[c_out, c_in]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Kaiming-uniform weights with unit gain, bound sqrt(6 / fan_in); zero
    /// bias. Sampling happens in f64 regardless of T so f32 and f64 builds
    /// see the same values.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let bound = (6.0 / self.in_channels() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = T::from_f64(rng.gen_range(-bound..bound));
        }
        for b in self.bias.data_mut() {
            *b = T::ZERO;
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ci, co) = (self.in_channels(), self.out_channels());
        check_nchw(x, ci, "channel linear")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let mut out = Tensor::zeros(&[n, co, h, w]);
        let src = x.data();
        let wt = self.weight.data();
        let bias = self.bias.data();
        let dst = out.data_mut();
        if n == 1 {
            gemm_rows(wt, bias, src, dst, ci, co, p);
            return Ok(out);
        }
        // pack the whole batch so each channel is one long row
        let m = n * p;
        let mut xp = vec![T::ZERO; ci * m];
        let mut yp = vec![T::ZERO; co * m];
        pack_channels(src, &mut xp, n, ci, p);
        gemm_rows(wt, bias, &xp, &mut yp, ci, co, m);
        unpack_channels(&yp, dst, n, co, p);
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns dx.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut ChannelLinear<T>,
    ) -> Result<Tensor<T>> {
        let (ci, co) = (self.in_channels(), self.out_channels());
        check_nchw(x, ci, "channel linear adjoint")?;
        check_nchw(dy, co, "channel linear adjoint")?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let mut dx = Tensor::zeros(x.shape());
        let wt = self.weight.data();
        let gsrc = dy.data();
        let xsrc = x.data();
        let dw = grad.weight.data_mut();
        let db = grad.bias.data_mut();
        let dxd = dx.data_mut();
        for b in 0..n {
            let gb = &gsrc[b * co * p..(b + 1) * co * p];
            for o in 0..co {
                let grow = &gb[o * p..][..p];
                let mut acc = T::ZERO;
                for &g in grow {
                    acc += g;
                }
                db[o] += acc;
            }
        }
        if n == 1 {
            gemm_rows_adjoint(wt, gsrc, xsrc, dw, dxd, ci, co, p);
            return Ok(dx);
        }
        let m = n * p;
        let mut xp = vec![T::ZERO; ci * m];
        let mut gp = vec![T::ZERO; co * m];
        let mut dxp = vec![T::ZERO; ci * m];
        pack_channels(xsrc, &mut xp, n, ci, p);
        pack_channels(gsrc, &mut gp, n, co, p);
        gemm_rows_adjoint(wt, &gp, &xp, dw, &mut dxp, ci, co, m);
        unpack_channels(&dxp, dxd, n, ci, p);
        Ok(dx)
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

    #[test]
    fn forward_matches_hand_computed_values() {
        // weight [[1,2],[3,4],[5,6]], bias [0.5, -0.5, 0]; x has two pixels
        let mut layer = ChannelLinear::<f64>::zeros(2, 3);
        layer
            .weight
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        layer.bias.data_mut().copy_from_slice(&[0.5, -0.5, 0.0]);
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 2]);
        // pixel 0: channels (1,3); pixel 1: channels (2,4)
        assert_eq!(
            y.data(),
            &[
                1.0 * 1.0 + 2.0 * 3.0 + 0.5,
                1.0 * 2.0 + 2.0 * 4.0 + 0.5,
                3.0 * 1.0 + 4.0 * 3.0 - 0.5,
                3.0 * 2.0 + 4.0 * 4.0 - 0.5,
                5.0 * 1.0 + 6.0 * 3.0,
                5.0 * 2.0 + 6.0 * 4.0
            ]
        );
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut layer = ChannelLinear::<f64>::zeros(3, 3);
        for i in 0..3 {
            *layer.weight.at_mut(&[i, i]) = 1.0;
        }
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 10.0);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn backward_dot_product_identity() {
        let mut layer = ChannelLinear::<f64>::zeros(3, 4);
        for (i, w) in layer.weight.data_mut().iter_mut().enumerate() {
            *w = ((i * 31 + 7) % 17) as f64 * 0.1 - 0.8;
        }
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.713).sin());
        let dy = Tensor::from_fn(&[2, 4, 2, 2], |i| (i as f64 * 0.391).cos());
        let mut grad = ChannelLinear::<f64>::zeros(3, 4);
        let dx = layer.backward(&x, &dy, &mut grad).unwrap();
        // <W x, dy> == <x, W^T dy> because bias does not depend on x
        let y = layer.forward(&x).unwrap();
        let y0 = {
            let zero_in = Tensor::zeros(x.shape());
            layer.forward(&zero_in).unwrap()
        };
        let lhs: f64 = y
            .data()
            .iter()
            .zip(y0.data())
            .zip(dy.data())
            .map(|((a, b), g)| (a - b) * g)
            .sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn bias_gradient_sums_output_gradient() {
        let layer = ChannelLinear::<f64>::zeros(2, 2);
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let dy = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let mut grad = ChannelLinear::<f64>::zeros(2, 2);
        layer.backward(&x, &dy, &mut grad).unwrap();
        assert_eq!(grad.bias.data(), &[0.0 + 1.0 + 2.0 + 3.0, 4.0 + 5.0 + 6.0 + 7.0]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let layer = ChannelLinear::<f64>::zeros(3, 4);
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        assert!(layer.forward(&x).is_err());
    }

    #[test]
    fn init_is_dtype_agnostic() {
        use rand::SeedableRng;
        let mut a = ChannelLinear::<f32>::zeros(8, 8);
        let mut b = ChannelLinear::<f64>::zeros(8, 8);
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        a.init(&mut r1);
        b.init(&mut r2);
        for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
            assert_eq!(*x, *y as f32);
        }
        let bound = (6.0 / 8.0f64).sqrt();
        assert!(b.weight.data().iter().all(|v| v.abs() < bound));
    }
}
