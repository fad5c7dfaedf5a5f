//! The core residual block: two branches apply a channel map and a depthwise
//! spatial map in opposite orders, meet in a Hadamard product, and the result
//! is projected back and added to the input. With norms disabled the block is
//! an exact degree-2 polynomial in its input, which is what the verifier
//! exploits.

use rand::Rng;

use crate::error::{DttnError, Result};
use crate::layers::{
    fold_conv_bn, fold_linear_bn, BatchNorm2d, BnCtx, ChannelLinear, Conv2d, LayerNorm, LnCtx,
    ParamClass, ParamMut, ParamRef,
};
use crate::tensor::{khatri_rao, Scalar, Tensor};

/// Which normalization scheme a block carries.
///
/// `None` exists for the verifier: without norms the block is exactly
/// multilinear and can be rewritten as one tensor contraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Layer,
    None,
}

#[derive(Debug, Clone)]
pub enum AimNorms<T> {
    /// Norm each branch, then one more after the projection.
    Batch {
        l: BatchNorm2d<T>,
        r: BatchNorm2d<T>,
        res: BatchNorm2d<T>,
    },
    /// Norm the Hadamard product, then once more after the projection.
    Layer { ln: LayerNorm<T>, res: BatchNorm2d<T> },
    /// Post-fold remnant of `Layer`: the data-dependent layer norm cannot be
    /// absorbed into a weight matrix.
    LayerFolded { ln: LayerNorm<T> },
    None,
}

/// Forward phase selector. `Inference` requires `fold_batchnorm` first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AimMode {
    Train,
    Eval,
    Inference,
}

#[derive(Debug, Clone)]
pub struct Aim<T> {
    /// channels -> channels * expand, applied per pixel
    pub proj_l: ChannelLinear<T>,
    /// depthwise 3x3 on the expanded channels
    pub conv_l: Conv2d<T>,
    /// grouped 3x3 expanding channels -> channels * expand
    pub conv_r: Conv2d<T>,
    /// expanded -> expanded, applied per pixel
    pub proj_r: ChannelLinear<T>,
    /// expanded -> channels fusion (a 1x1 convolution)
    pub proj: ChannelLinear<T>,
    pub norms: AimNorms<T>,
    /// residual branch gain, shape [1], initialized to 1
    pub scale: Tensor<T>,
    pub shortcut: bool,
    pub folded: bool,
}

/// Saved forward intermediates for the training-mode adjoint. The block
/// input itself is not stored; the caller passes it to `backward`.
pub struct AimCtx<T> {
    pl: Tensor<T>,
    cr: Tensor<T>,
    nl: Tensor<T>,
    nr: Tensor<T>,
    proj_in: Tensor<T>,
    out: Tensor<T>,
    bn_l: Option<BnCtx<T>>,
    bn_r: Option<BnCtx<T>>,
    ln: Option<LnCtx<T>>,
    bn_res: Option<BnCtx<T>>,
}

impl<T: Scalar> Aim<T> {
    pub fn zeros(channels: usize, expand: usize, mode: NormMode) -> Result<Self> {
        if channels == 0 || expand == 0 {
            return Err(DttnError::Dim(
                "channels and expansion ratio must be positive".into(),
            ));
        }
        let ce = channels * expand;
        let norms = match mode {
            NormMode::Batch => AimNorms::Batch {
                l: BatchNorm2d::new(ce),
                r: BatchNorm2d::new(ce),
                res: BatchNorm2d::new(channels),
            },
            NormMode::Layer => AimNorms::Layer {
                ln: LayerNorm::new(ce),
                res: BatchNorm2d::new(channels),
            },
            NormMode::None => AimNorms::None,
        };
        Ok(Aim {
            proj_l: ChannelLinear::zeros(channels, ce),
            conv_l: Conv2d::zeros(ce, ce, 3, 1, 1, ce)?,
            conv_r: Conv2d::zeros(channels, ce, 3, 1, 1, channels)?,
            proj_r: ChannelLinear::zeros(ce, ce),
            proj: ChannelLinear::zeros(ce, channels),
            norms,
            scale: Tensor::ones(&[1]),
            shortcut: true,
            folded: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_l.in_channels()
    }

    pub fn expanded(&self) -> usize {
        self.proj_l.out_channels()
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.proj_l.init(rng);
        self.conv_l.init(rng);
        self.conv_r.init(rng);
        self.proj_r.init(rng);
        self.proj.init(rng);
    }

    /// Homogeneous mode for the algebra checks: every layer bias to zero.
    pub fn zero_biases(&mut self) {
        for b in self
            .proj_l
            .bias
            .data_mut()
            .iter_mut()
            .chain(self.conv_l.bias.data_mut())
            .chain(self.conv_r.bias.data_mut())
            .chain(self.proj_r.bias.data_mut())
            .chain(self.proj.bias.data_mut())
        {
            *b = T::ZERO;
        }
    }

    fn branches(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let pl = self.proj_l.forward(x)?;
        let xl = self.conv_l.forward(&pl)?;
        let cr = self.conv_r.forward(x)?;
        let xr = self.proj_r.forward(&cr)?;
        Ok((pl, xl, cr, xr))
    }

    fn scale_value(&self) -> T {
        self.scale.data()[0]
    }

    fn combine(&self, x: &Tensor<T>, out: &Tensor<T>) -> Result<Tensor<T>> {
        let scaled = out.scale(self.scale_value());
        if self.shortcut {
            x.add(&scaled)
        } else {
            Ok(scaled)
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, AimCtx<T>)> {
        if self.folded {
            return Err(DttnError::State(
                "training a folded block; fold only before inference".into(),
            ));
        }
        let (pl, xl, cr, xr) = self.branches(x)?;
        let (nl, nr, prod, proj_in, bn_l_ctx, bn_r_ctx, ln_ctx);
        match &mut self.norms {
            AimNorms::Batch { l, r, .. } => {
                let (a, actx) = l.forward_train(&xl)?;
                let (b, bctx) = r.forward_train(&xr)?;
                prod = a.hadamard(&b)?;
                nl = a;
                nr = b;
                bn_l_ctx = Some(actx);
                bn_r_ctx = Some(bctx);
                ln_ctx = None;
                proj_in = prod.clone();
            }
            AimNorms::Layer { ln, .. } => {
                prod = xl.hadamard(&xr)?;
                let (p, lctx) = ln.forward(&prod)?;
                nl = xl;
                nr = xr;
                bn_l_ctx = None;
                bn_r_ctx = None;
                ln_ctx = Some(lctx);
                proj_in = p;
            }
            AimNorms::None => {
                prod = xl.hadamard(&xr)?;
                nl = xl;
                nr = xr;
                bn_l_ctx = None;
                bn_r_ctx = None;
                ln_ctx = None;
                proj_in = prod.clone();
            }
            AimNorms::LayerFolded { .. } => unreachable!("folded flag checked above"),
        }
        let proj_out = self.proj.forward(&proj_in)?;
        let (out, bn_res_ctx) = match &mut self.norms {
            AimNorms::Batch { res, .. } | AimNorms::Layer { res, .. } => {
                let (o, c) = res.forward_train(&proj_out)?;
                (o, Some(c))
            }
            _ => (proj_out.clone(), None),
        };
        let y = self.combine(x, &out)?;
        Ok((
            y,
            AimCtx {
                pl,
                cr,
                nl,
                nr,
                proj_in,
                out,
                bn_l: bn_l_ctx,
                bn_r: bn_r_ctx,
                ln: ln_ctx,
                bn_res: bn_res_ctx,
            },
        ))
    }

    /// Unfolded forward with running statistics; also valid on a folded
    /// block, where the absorbed norms have become identity.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, xl, _, xr) = self.branches(x)?;
        let fused = match &self.norms {
            AimNorms::Batch { l, r, .. } => l.forward_eval(&xl)?.hadamard(&r.forward_eval(&xr)?)?,
            AimNorms::Layer { ln, .. } | AimNorms::LayerFolded { ln } => {
                ln.forward_eval(&xl.hadamard(&xr)?)?
            }
            AimNorms::None => xl.hadamard(&xr)?,
        };
        let proj_out = self.proj.forward(&fused)?;
        let out = match &self.norms {
            AimNorms::Batch { res, .. } | AimNorms::Layer { res, .. } => {
                res.forward_eval(&proj_out)?
            }
            _ => proj_out,
        };
        self.combine(x, &out)
    }

    /// Post-fold fast path: norms and the residual gain are already inside
    /// the weights.
    pub fn forward_inference(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.folded {
            return Err(DttnError::State(
                "inference path requires fold_batchnorm first".into(),
            ));
        }
        let (_, xl, _, xr) = self.branches(x)?;
        let mut fused = xl.hadamard(&xr)?;
        if let AimNorms::LayerFolded { ln } = &self.norms {
            fused = ln.forward_eval(&fused)?;
        }
        let out = self.proj.forward(&fused)?;
        if self.shortcut {
            x.add(&out)
        } else {
            Ok(out)
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: AimMode) -> Result<Tensor<T>> {
        match mode {
            AimMode::Train => Ok(self.forward_train(x)?.0),
            AimMode::Eval => self.forward_eval(x),
            AimMode::Inference => self.forward_inference(x),
        }
    }

    /// Training-mode adjoint; accumulates into `grad` and returns dx.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        ctx: &AimCtx<T>,
        dy: &Tensor<T>,
        grad: &mut Aim<T>,
    ) -> Result<Tensor<T>> {
        let s = self.scale_value();
        // y = x + s*out: gain gradient first, then push s into the branch.
        let mut dscale = T::ZERO;
        for (&g, &o) in dy.data().iter().zip(ctx.out.data()) {
            dscale += g * o;
        }
        grad.scale.data_mut()[0] += dscale;
        let dout = dy.scale(s);

        let dproj_out = match (&self.norms, &ctx.bn_res) {
            (AimNorms::Batch { res, .. }, Some(c)) | (AimNorms::Layer { res, .. }, Some(c)) => {
                let gres = match &mut grad.norms {
                    AimNorms::Batch { res: gr, .. } | AimNorms::Layer { res: gr, .. } => gr,
                    _ => {
                        return Err(DttnError::State(
                            "gradient block norm layout differs from the model".into(),
                        ))
                    }
                };
                res.backward(c, &dout, gres)?
            }
            _ => dout,
        };
        let dproj_in = self.proj.backward(&ctx.proj_in, &dproj_out, &mut grad.proj)?;

        let dprod = match (&self.norms, &ctx.ln) {
            (AimNorms::Layer { ln, .. }, Some(c)) => {
                let gln = match &mut grad.norms {
                    AimNorms::Layer { ln: g, .. } => g,
                    _ => {
                        return Err(DttnError::State(
                            "gradient block norm layout differs from the model".into(),
                        ))
                    }
                };
                ln.backward(c, &dproj_in, gln)?
            }
            _ => dproj_in,
        };

        // product rule through the Hadamard interaction
        let dnl = dprod.hadamard(&ctx.nr)?;
        let dnr = dprod.hadamard(&ctx.nl)?;

        let (dxl, dxr) = match (&self.norms, &ctx.bn_l, &ctx.bn_r) {
            (AimNorms::Batch { l, r, .. }, Some(cl), Some(crx)) => {
                let (gl, gr) = match &mut grad.norms {
                    AimNorms::Batch { l: gl, r: gr, .. } => (gl, gr),
                    _ => {
                        return Err(DttnError::State(
                            "gradient block norm layout differs from the model".into(),
                        ))
                    }
                };
                (l.backward(cl, &dnl, gl)?, r.backward(crx, &dnr, gr)?)
            }
            _ => (dnl, dnr),
        };

        let dpl = self.conv_l.backward(&ctx.pl, &dxl, &mut grad.conv_l)?;
        let dx1 = self.proj_l.backward(x, &dpl, &mut grad.proj_l)?;
        let dcr = self.proj_r.backward(&ctx.cr, &dxr, &mut grad.proj_r)?;
        let dx2 = self.conv_r.backward(x, &dcr, &mut grad.conv_r)?;

        let mut dx = dx1.add(&dx2)?;
        if self.shortcut {
            dx = dx.add(dy)?;
        }
        Ok(dx)
    }

    /// Absorbs every batch norm (and the residual gain) into the adjacent
    /// weight layers: the branch norms into their producing conv/linear, the
    /// post-projection norm and the gain into the projection.
    pub fn fold_batchnorm(&self) -> Result<Aim<T>> {
        if self.folded {
            return Err(DttnError::State("block is already folded".into()));
        }
        let s = self.scale_value();
        let mut folded = self.clone();
        match &self.norms {
            AimNorms::Batch { l, r, res } => {
                folded.conv_l = fold_conv_bn(&self.conv_l, l, T::ONE)?;
                folded.proj_r = fold_linear_bn(&self.proj_r, r, T::ONE)?;
                folded.proj = fold_linear_bn(&self.proj, res, s)?;
                folded.norms = AimNorms::None;
            }
            AimNorms::Layer { ln, res } => {
                folded.proj = fold_linear_bn(&self.proj, res, s)?;
                folded.norms = AimNorms::LayerFolded { ln: ln.clone() };
            }
            AimNorms::None => {
                for v in folded
                    .proj
                    .weight
                    .data_mut()
                    .iter_mut()
                    .chain(folded.proj.bias.data_mut())
                {
                    *v *= s;
                }
            }
            AimNorms::LayerFolded { .. } => {
                return Err(DttnError::State("block is already folded".into()));
            }
        }
        folded.scale = Tensor::ones(&[1]);
        folded.folded = true;
        Ok(folded)
    }

    fn no_norms(&self) -> bool {
        matches!(self.norms, AimNorms::None)
    }

    fn biases_zero(&self) -> bool {
        [
            &self.proj_l.bias,
            &self.conv_l.bias,
            &self.conv_r.bias,
            &self.proj_r.bias,
            &self.proj.bias,
        ]
        .iter()
        .all(|b| b.data().iter().all(|v| v.to_f64() == 0.0))
    }

    /// The two branch maps and the projection as explicit matrices over the
    /// flattened (channel, row, column) input space, recovered by probing
    /// with basis vectors. The residual gain is absorbed into the projection.
    ///
    /// Returns (A1, A2, B) where A1, A2 map the D-dim input to the D'-dim
    /// branch space and B maps branch space back: D = C·H·W, D' = C·r·H·W.
    pub fn branch_matrices(&self, h: usize, w: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if !self.no_norms() {
            return Err(DttnError::State(
                "branch matrices exist only for norm-free blocks; fold or build without norms"
                    .into(),
            ));
        }
        if !self.biases_zero() {
            return Err(DttnError::State(
                "branch matrices require zeroed biases (homogeneous mode)".into(),
            ));
        }
        let (c, ce) = (self.channels(), self.expanded());
        let d = c * h * w;
        let dp = ce * h * w;
        if dp > 4096 {
            return Err(DttnError::Capacity(format!(
                "branch space {dp} exceeds the probing guard of 4096"
            )));
        }
        let s = self.scale_value();
        let mut a1 = Tensor::zeros(&[dp, d]);
        let mut a2 = Tensor::zeros(&[dp, d]);
        for j in 0..d {
            let mut e = Tensor::zeros(&[1, c, h, w]);
            e.data_mut()[j] = T::ONE;
            let b1 = self.conv_l.forward(&self.proj_l.forward(&e)?)?;
            let b2 = self.proj_r.forward(&self.conv_r.forward(&e)?)?;
            for i in 0..dp {
                a1.data_mut()[i * d + j] = b1.data()[i];
                a2.data_mut()[i * d + j] = b2.data()[i];
            }
        }
        let mut bmat = Tensor::zeros(&[d, dp]);
        for j in 0..dp {
            let mut e = Tensor::zeros(&[1, ce, h, w]);
            e.data_mut()[j] = T::ONE;
            let pj = self.proj.forward(&e)?;
            for i in 0..d {
                bmat.data_mut()[i * dp + j] = pj.data()[i] * s;
            }
        }
        Ok((a1, a2, bmat))
    }

    /// The block minus its shortcut as one explicit second-order tensor,
    /// returned as a (D², D) matrix S with S[w·D+ρ, τ] = coefficient of
    /// x_w·x_ρ in output τ, i.e. Reshape(B(A1ᵀ⊙A2ᵀ)ᵀ) with the output mode
    /// last. For every x: (forward(x) - shortcut) [τ] = Σ_{w,ρ} S[wD+ρ,τ]·x_w·x_ρ.
    pub fn structured_tensor(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let d = self.channels() * h * w;
        if d > 64 {
            return Err(DttnError::Capacity(format!(
                "flattened input dimension {d} exceeds the dense-tensor guard of 64"
            )));
        }
        let (a1, a2, b) = self.branch_matrices(h, w)?;
        // column j of the transposes is row j of A1/A2
        let kr = khatri_rao(&a1.permute(&[1, 0])?, &a2.permute(&[1, 0])?)?; // (D·D) × D'
        let m = crate::tensor::contract(&b, &kr.permute(&[1, 0])?, &[1], &[0])?; // D × D²
        debug_assert_eq!(m.shape(), &[d, d * d]);
        m.permute(&[1, 0]) // (D², D) with the output index last
    }

    /// Branch cost ratios and block totals for one block of width `c`,
    /// expansion `r`, kernel `k`, on an h×w grid. Parameter total counts
    /// weights and biases of the five weight layers (norms and the residual
    /// gain excluded); MACs count weight multiplies only.
    pub fn cost(c: usize, r: usize, k: usize, h: usize, w: usize) -> AimCost {
        let (cf, rf, kf, sp) = (c as f64, r as f64, k as f64, (h * w) as f64);
        let branch1_w = rf * kf * kf * cf + rf * cf * cf; // depthwise conv + channel proj
        let branch2_w = rf * kf * kf * cf + rf * rf * cf * cf;
        let params_ratio = branch1_w / branch2_w;
        let flops_ratio = (branch1_w * sp) / (branch2_w * sp);
        let weights = 2.0 * rf * kf * kf * cf + (2.0 * rf + rf * rf) * cf * cf;
        let biases = 4.0 * rf * cf + cf;
        let total_params = (weights + biases) as u64;
        let total_macs = (weights * sp) as u64;
        AimCost {
            params_ratio,
            flops_ratio,
            total_params,
            total_macs,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.proj_l.visit(&format!("{prefix}.proj_l"), out);
        self.conv_l.visit(&format!("{prefix}.conv_l"), out);
        self.conv_r.visit(&format!("{prefix}.conv_r"), out);
        self.proj_r.visit(&format!("{prefix}.proj_r"), out);
        self.proj.visit(&format!("{prefix}.proj"), out);
        match &self.norms {
            AimNorms::Batch { l, r, res } => {
                l.visit(&format!("{prefix}.bn_l"), out);
                r.visit(&format!("{prefix}.bn_r"), out);
                res.visit(&format!("{prefix}.bn_res"), out);
            }
            AimNorms::Layer { ln, res } => {
                ln.visit(&format!("{prefix}.ln"), out);
                res.visit(&format!("{prefix}.bn_res"), out);
            }
            AimNorms::LayerFolded { ln } => ln.visit(&format!("{prefix}.ln"), out),
            AimNorms::None => {}
        }
        if !self.folded {
            out.push((format!("{prefix}.scale"), ParamClass::Scale, &self.scale));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.proj_l.visit_mut(&format!("{prefix}.proj_l"), out);
        self.conv_l.visit_mut(&format!("{prefix}.conv_l"), out);
        self.conv_r.visit_mut(&format!("{prefix}.conv_r"), out);
        self.proj_r.visit_mut(&format!("{prefix}.proj_r"), out);
        self.proj.visit_mut(&format!("{prefix}.proj"), out);
        match &mut self.norms {
            AimNorms::Batch { l, r, res } => {
                l.visit_mut(&format!("{prefix}.bn_l"), out);
                r.visit_mut(&format!("{prefix}.bn_r"), out);
                res.visit_mut(&format!("{prefix}.bn_res"), out);
            }
            AimNorms::Layer { ln, res } => {
                ln.visit_mut(&format!("{prefix}.ln"), out);
                res.visit_mut(&format!("{prefix}.bn_res"), out);
            }
            AimNorms::LayerFolded { ln } => ln.visit_mut(&format!("{prefix}.ln"), out),
            AimNorms::None => {}
        }
        if !self.folded {
            out.push((format!("{prefix}.scale"), ParamClass::Scale, &mut self.scale));
        }
    }
}

/// Output of [`Aim::cost`].
#[derive(Debug, Clone, PartialEq)]
pub struct AimCost {
    pub params_ratio: f64,
    pub flops_ratio: f64,
    pub total_params: u64,
    pub total_macs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_aim(c: usize, r: usize, mode: NormMode, seed: u64) -> Aim<f64> {
        let mut aim = Aim::zeros(c, r, mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        aim.init(&mut rng);
        aim
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn randomize_bn(bn: &mut BatchNorm2d<f64>, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in bn.gamma.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.beta.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in bn.running_mean.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in bn.running_var.data_mut() {
            *v = rng.gen_range(0.2..2.0);
        }
    }

    #[test]
    fn zero_weights_pass_input_through() {
        for mode in [NormMode::Batch, NormMode::Layer, NormMode::None] {
            let mut aim = Aim::<f64>::zeros(2, 2, mode).unwrap();
            let x = random_input(&[3, 2, 4, 4], 1);
            let (y, _) = aim.forward_train(&x).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut aim = random_aim(3, 2, NormMode::Batch, 2);
        let x = random_input(&[4, 3, 5, 5], 3);
        let (y, _) = aim.forward_train(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(aim.forward_eval(&x).unwrap().shape(), x.shape());
    }

    #[test]
    fn second_order_homogeneity_without_norms() {
        let mut aim = random_aim(2, 2, NormMode::None, 5);
        aim.zero_biases();
        aim.shortcut = false;
        let x = random_input(&[2, 2, 3, 3], 7);
        for alpha in [0.5, 2.0] {
            let y1 = aim.forward_eval(&x.scale(alpha)).unwrap();
            let y2 = aim.forward_eval(&x).unwrap().scale(alpha * alpha);
            for (a, b) in y1.data().iter().zip(y2.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-10);
                assert!(rel < 1e-10, "alpha {alpha}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fold_preserves_function_all_modes() {
        for (mode, seed) in [
            (NormMode::Batch, 11u64),
            (NormMode::Layer, 13),
            (NormMode::None, 17),
        ] {
            let mut aim = random_aim(2, 2, mode, seed);
            aim.scale.data_mut()[0] = 0.8;
            match &mut aim.norms {
                AimNorms::Batch { l, r, res } => {
                    randomize_bn(l, seed + 1);
                    randomize_bn(r, seed + 2);
                    randomize_bn(res, seed + 3);
                }
                AimNorms::Layer { res, .. } => randomize_bn(res, seed + 4),
                _ => {}
            }
            let folded = aim.fold_batchnorm().unwrap();
            let x = random_input(&[2, 2, 4, 4], seed + 9);
            let want = aim.forward_eval(&x).unwrap();
            let got = folded.forward_inference(&x).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-10);
                assert!(rel < 1e-10, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn folded_block_has_no_batchnorm_parameters() {
        let aim = random_aim(2, 3, NormMode::Batch, 19);
        let folded = aim.fold_batchnorm().unwrap();
        let mut params = Vec::new();
        folded.visit("b", &mut params);
        assert!(params
            .iter()
            .all(|(_, class, _)| !matches!(class, ParamClass::NormAffine | ParamClass::NormStat)));
        // the unfolded block had them
        let mut before = Vec::new();
        aim.visit("b", &mut before);
        assert!(before
            .iter()
            .any(|(_, class, _)| matches!(class, ParamClass::NormStat)));
    }

    #[test]
    fn fold_twice_is_a_state_error() {
        let aim = random_aim(2, 2, NormMode::Batch, 23);
        let folded = aim.fold_batchnorm().unwrap();
        assert!(matches!(
            folded.fold_batchnorm().unwrap_err(),
            DttnError::State(_)
        ));
    }

    #[test]
    fn inference_before_fold_is_a_state_error() {
        let aim = random_aim(2, 2, NormMode::Batch, 29);
        let x = random_input(&[1, 2, 3, 3], 1);
        assert!(matches!(
            aim.forward_inference(&x).unwrap_err(),
            DttnError::State(_)
        ));
    }

    #[test]
    fn structured_tensor_reproduces_forward() {
        // one pointwise case and one where the 3x3 conv taps are active
        for (c, r, h, w, seed) in [(2usize, 2usize, 1usize, 1usize, 31u64), (1, 1, 2, 2, 37)] {
            let mut aim = random_aim(c, r, NormMode::None, seed);
            aim.zero_biases();
            aim.shortcut = false;
            aim.scale.data_mut()[0] = 1.25;
            let d = c * h * w;
            let s = aim.structured_tensor(h, w).unwrap();
            assert_eq!(s.shape(), &[d * d, d]);
            for trial in 0..20 {
                let x = random_input(&[1, c, h, w], seed * 100 + trial);
                let want = aim.forward_eval(&x).unwrap();
                for tau in 0..d {
                    let mut acc = 0.0;
                    for wi in 0..d {
                        for rho in 0..d {
                            acc += s.data()[(wi * d + rho) * d + tau]
                                * x.data()[wi]
                                * x.data()[rho];
                        }
                    }
                    let truth = want.data()[tau];
                    let rel = (acc - truth).abs() / acc.abs().max(truth.abs()).max(1e-10);
                    assert!(rel < 1e-10, "c={c} r={r} h={h} tau={tau}");
                }
            }
        }
    }

    #[test]
    fn branch_matrices_guard_rails() {
        let mut aim = random_aim(2, 2, NormMode::Batch, 41);
        assert!(matches!(
            aim.branch_matrices(2, 2).unwrap_err(),
            DttnError::State(_)
        ));
        aim = random_aim(2, 2, NormMode::None, 43);
        // nonzero biases from init? init zeroes biases, so force one
        aim.proj.bias.data_mut()[0] = 0.5;
        assert!(matches!(
            aim.branch_matrices(2, 2).unwrap_err(),
            DttnError::State(_)
        ));
        aim.proj.bias.data_mut()[0] = 0.0;
        assert!(aim.branch_matrices(2, 2).is_ok());
        // capacity: D' = 2*2*32*32 = 4096 passes, 2*2*33*33 does not
        let big = random_aim(2, 2, NormMode::None, 47);
        assert!(matches!(
            big.branch_matrices(33, 33).unwrap_err(),
            DttnError::Capacity(_)
        ));
        assert!(matches!(
            big.structured_tensor(17, 17).unwrap_err(),
            DttnError::Capacity(_)
        ));
    }

    #[test]
    fn gradcheck_full_block_all_norm_modes() {
        use crate::gradcheck::check_gradient;
        for mode in [NormMode::Batch, NormMode::Layer, NormMode::None] {
            let base = random_aim(2, 2, mode, 53);
            let x = random_input(&[2, 2, 3, 3], 59);
            let wts = random_input(&[2, 2, 3, 3], 61);

            // pack every trainable parameter plus the input into one vector
            let flatten = |aim: &mut Aim<f64>, xv: &Tensor<f64>| -> Vec<f64> {
                let mut out = Vec::new();
                let mut refs = Vec::new();
                aim.visit_mut("b", &mut refs);
                for (_, class, t) in refs {
                    if class.trainable() {
                        out.extend(t.data().iter().copied());
                    }
                }
                out.extend(xv.data().iter().copied());
                out
            };
            let unflatten = |theta: &[f64]| -> (Aim<f64>, Tensor<f64>) {
                let mut aim = base.clone();
                let mut pos = 0;
                let mut refs = Vec::new();
                aim.visit_mut("b", &mut refs);
                for (_, class, t) in refs {
                    if class.trainable() {
                        let n = t.len();
                        t.data_mut().copy_from_slice(&theta[pos..pos + n]);
                        pos += n;
                    }
                }
                let xv = Tensor::new(x.shape().to_vec(), theta[pos..].to_vec()).unwrap();
                (aim, xv)
            };

            let mut work = base.clone();
            let theta = flatten(&mut work, &x);
            let (y, ctx) = work.forward_train(&x).unwrap();
            let _ = y;
            let mut grad = base.clone();
            let mut grefs = Vec::new();
            grad.visit_mut("b", &mut grefs);
            for (_, _, t) in grefs {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            let dx = work.backward(&x, &ctx, &wts, &mut grad).unwrap();
            let mut analytic = Vec::new();
            let mut arefs = Vec::new();
            grad.visit_mut("b", &mut arefs);
            for (_, class, t) in arefs {
                if class.trainable() {
                    analytic.extend(t.data().iter().copied());
                }
            }
            analytic.extend(dx.data().iter().copied());

            let res = check_gradient(
                &theta,
                &analytic,
                |t| {
                    let (mut aim, xv) = unflatten(t);
                    let (yy, _) = aim.forward_train(&xv).unwrap();
                    yy.data().iter().zip(wts.data()).map(|(a, w)| a * w).sum()
                },
                1e-5,
                1,
            );
            assert!(
                res.passes(1e-6),
                "mode {mode:?}: worst {} at {} ({:?})",
                res.max_rel_err,
                res.worst_index,
                res.worst_pair
            );
        }
    }

    #[test]
    fn cost_matches_published_ratio_and_enumeration() {
        let cost = Aim::<f64>::cost(64, 3, 3, 8, 8);
        assert!((cost.params_ratio - 14016.0 / 38592.0).abs() < 1e-15);
        assert!((cost.flops_ratio - cost.params_ratio).abs() < 1e-15);
        assert_eq!(cost.total_params, 65728);

        // enumeration oracle: weights + biases of a real block of that size
        let aim = Aim::<f32>::zeros(64, 3, NormMode::None).unwrap();
        let mut refs = Vec::new();
        aim.visit("b", &mut refs);
        let core: usize = refs
            .iter()
            .filter(|(_, c, _)| matches!(c, ParamClass::Weight | ParamClass::Bias))
            .map(|(_, _, t)| t.len())
            .sum();
        assert_eq!(core as u64, cost.total_params);

        // MACs: weight multiplies per output position times the grid
        let weights: usize = refs
            .iter()
            .filter(|(_, c, _)| matches!(c, ParamClass::Weight))
            .map(|(_, _, t)| t.len())
            .sum();
        assert_eq!(cost.total_macs, (weights * 64) as u64);
    }
}
