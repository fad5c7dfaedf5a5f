//! Full classifier assembly: patch embed, four stages of interaction blocks
//! joined by downsamplers, pooled linear head. Also the analytic parameter
//! and FLOP accounting and its enumeration cross-check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aim::{Aim, AimMode, NormMode};
use crate::error::{DttnError, Result};
use crate::layers::{
    Conv2d, Downsample, DownsampleCtx, Head, HeadCtx, ParamClass, ParamMut, ParamRef, PatchEmbed,
    PatchEmbedCtx,
};
use crate::tensor::{Dtype, Scalar, Tensor};

/// Architecture description. `stage_blocks` entries may be zero for tiny
/// verification models, but at least one block must exist overall.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_blocks: [usize; 4],
    pub stage_hidden: [usize; 4],
    pub r_exp: usize,
    pub use_ln: bool,
    pub img_channels: usize,
    pub img_size: (usize, usize),
    pub classes: usize,
    pub seed: u64,
    pub dtype: Dtype,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_blocks: [2, 2, 4, 2],
            stage_hidden: [16, 32, 32, 32],
            r_exp: 3,
            use_ln: true,
            img_channels: 1,
            img_size: (32, 32),
            classes: 10,
            seed: 0,
            dtype: Dtype::F32,
        }
    }
}

impl ModelConfig {
    /// Named presets. The three published sizes build at ImageNet geometry;
    /// `desk` is the small config the trainer and tests run end to end.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        match name {
            "desk" => {}
            "tiny" => {
                cfg.stage_blocks = [6, 6, 16, 6];
                cfg.stage_hidden = [64, 128, 160, 192];
                cfg.img_channels = 3;
                cfg.img_size = (224, 224);
                cfg.classes = 1000;
            }
            "small" => {
                cfg.stage_blocks = [6, 6, 24, 8];
                cfg.stage_hidden = [96, 128, 192, 192];
                cfg.img_channels = 3;
                cfg.img_size = (224, 224);
                cfg.classes = 1000;
            }
            "large" => {
                cfg.stage_blocks = [8, 8, 32, 8];
                cfg.stage_hidden = [128, 192, 256, 384];
                cfg.img_channels = 3;
                cfg.img_size = (224, 224);
                cfg.classes = 1000;
            }
            other => {
                return Err(DttnError::Config(format!(
                    "unknown variant '{other}' (expected desk, tiny, small, or large)"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_blocks() == 0 {
            return Err(DttnError::Config("at least one block required".into()));
        }
        if self.stage_hidden.iter().any(|&h| h == 0) {
            return Err(DttnError::Config("stage widths must be positive".into()));
        }
        if self.r_exp == 0 {
            return Err(DttnError::Config("expansion ratio must be positive".into()));
        }
        if self.img_channels == 0 || self.classes == 0 {
            return Err(DttnError::Config(
                "image channels and class count must be positive".into(),
            ));
        }
        let (h, w) = self.img_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(DttnError::Config(format!(
                "image size {h}x{w} must be divisible by 32 \
                 (patch embed quarters it, three stage transitions halve it); \
                 zero-pad the input up to the next multiple"
            )));
        }
        Ok(())
    }

    /// Stage indices that actually hold blocks, in order.
    fn active_stages(&self) -> Vec<usize> {
        (0..4).filter(|&i| self.stage_blocks[i] > 0).collect()
    }

    /// (spatial side pair, width) at the input of each active stage, plus
    /// the final feature geometry. Patch embed quarters the image; every
    /// stage transition after the first active one halves it.
    fn stage_geometry(&self) -> Vec<StageGeom> {
        let mut h = self.img_size.0 / 4;
        let mut w = self.img_size.1 / 4;
        let mut width = self.stage_hidden[0];
        let mut out = Vec::new();
        for (pos, &idx) in self.active_stages().iter().enumerate() {
            let downsampled = pos > 0;
            if downsampled {
                h /= 2;
                w /= 2;
            }
            let prev_width = width;
            width = self.stage_hidden[idx];
            out.push(StageGeom {
                index: idx,
                h,
                w,
                width,
                down_from: if downsampled { Some(prev_width) } else { None },
            });
        }
        out
    }

    /// Feature width seen by the classifier head.
    pub fn head_width(&self) -> usize {
        self.stage_geometry().last().map(|g| g.width).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
struct StageGeom {
    index: usize,
    h: usize,
    w: usize,
    width: usize,
    down_from: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum DownLayer<T> {
    Plain(Downsample<T>),
    Folded(Conv2d<T>),
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub index: usize,
    pub down: Option<DownLayer<T>>,
    pub blocks: Vec<Aim<T>>,
}

#[derive(Debug, Clone)]
pub struct Dttn<T> {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Head<T>,
    pub folded: bool,
}

/// Saved forward intermediates for one training step.
pub struct ModelCtx<T> {
    embed: PatchEmbedCtx<T>,
    stages: Vec<StageCtx<T>>,
    head: HeadCtx<T>,
}

struct StageCtx<T> {
    down_in: Option<Tensor<T>>,
    down: Option<DownsampleCtx<T>>,
    block_ins: Vec<Tensor<T>>,
    block_ctxs: Vec<crate::aim::AimCtx<T>>,
}

impl<T: Scalar> Dttn<T> {
    /// Standard construction: norms chosen by `use_ln`, shortcuts on,
    /// weights drawn from the config seed.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let mode = if cfg.use_ln {
            NormMode::Layer
        } else {
            NormMode::Batch
        };
        Self::build_with(cfg, mode, true)
    }

    /// Construction with explicit norm mode and shortcut switch; the
    /// verifier uses `NormMode::None` and disabled shortcuts.
    pub fn build_with(cfg: &ModelConfig, mode: NormMode, shortcut: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut embed = PatchEmbed::zeros(cfg.img_channels, cfg.stage_hidden[0])?;
        embed.init(&mut rng);
        let mut stages = Vec::new();
        for geom in cfg.stage_geometry() {
            let down = match geom.down_from {
                Some(prev) => {
                    let mut ds = Downsample::zeros(prev, geom.width)?;
                    ds.init(&mut rng);
                    Some(DownLayer::Plain(ds))
                }
                None => None,
            };
            let mut blocks = Vec::new();
            for _ in 0..cfg.stage_blocks[geom.index] {
                let mut aim = Aim::zeros(geom.width, cfg.r_exp, mode)?;
                aim.init(&mut rng);
                aim.shortcut = shortcut;
                blocks.push(aim);
            }
            stages.push(Stage {
                index: geom.index,
                down,
                blocks,
            });
        }
        let mut head = Head::zeros(cfg.head_width(), cfg.classes);
        head.init(&mut rng);
        Ok(Dttn {
            cfg: cfg.clone(),
            embed,
            stages,
            head,
            folded: false,
        })
    }

    /// Homogeneous mode for the algebra checks: zero every conv/linear bias.
    pub fn zero_biases(&mut self) {
        let mut refs = Vec::new();
        self.visit_mut(&mut refs);
        for (_, class, t) in refs {
            if class == ParamClass::Bias {
                for v in t.data_mut() {
                    *v = T::ZERO;
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = [
            x.shape().first().copied().unwrap_or(0),
            self.cfg.img_channels,
            self.cfg.img_size.0,
            self.cfg.img_size.1,
        ];
        if x.rank() != 4 || x.shape()[1..] != want[1..] {
            return Err(DttnError::Dim(format!(
                "input shape {:?} does not match configured {}x{}x{} images",
                x.shape(),
                self.cfg.img_channels,
                self.cfg.img_size.0,
                self.cfg.img_size.1
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ModelCtx<T>)> {
        if self.folded {
            return Err(DttnError::State("cannot train a folded model".into()));
        }
        self.check_input(x)?;
        let (mut act, embed_ctx) = self.embed.forward_train(x)?;
        let mut stage_ctxs = Vec::new();
        for stage in &mut self.stages {
            let (down_in, down_ctx) = match &mut stage.down {
                Some(DownLayer::Plain(ds)) => {
                    let input = act.clone();
                    let (y, c) = ds.forward_train(&act)?;
                    act = y;
                    (Some(input), Some(c))
                }
                Some(DownLayer::Folded(_)) => {
                    return Err(DttnError::State("cannot train a folded model".into()))
                }
                None => (None, None),
            };
            let mut block_ins = Vec::new();
            let mut block_ctxs = Vec::new();
            for block in &mut stage.blocks {
                let input = act.clone();
                let (y, c) = block.forward_train(&act)?;
                act = y;
                block_ins.push(input);
                block_ctxs.push(c);
            }
            stage_ctxs.push(StageCtx {
                down_in,
                down: down_ctx,
                block_ins,
                block_ctxs,
            });
        }
        let (logits, head_ctx) = self.head.forward_train(&act)?;
        Ok((
            logits,
            ModelCtx {
                embed: embed_ctx,
                stages: stage_ctxs,
                head: head_ctx,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut act = self.embed.forward(x)?;
        for stage in &self.stages {
            match &stage.down {
                Some(DownLayer::Plain(ds)) => act = ds.forward_eval(&act)?,
                Some(DownLayer::Folded(conv)) => act = conv.forward(&act)?,
                None => {}
            }
            for block in &stage.blocks {
                act = block.forward_eval(&act)?;
            }
        }
        self.head.forward(&act)
    }

    /// Post-fold fast path.
    pub fn forward_inference(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.folded {
            return Err(DttnError::State(
                "inference path requires fold() first".into(),
            ));
        }
        self.check_input(x)?;
        let mut act = self.embed.forward(x)?;
        for stage in &self.stages {
            match &stage.down {
                Some(DownLayer::Folded(conv)) => act = conv.forward(&act)?,
                Some(DownLayer::Plain(_)) => {
                    return Err(DttnError::State("model flagged folded but is not".into()))
                }
                None => {}
            }
            for block in &stage.blocks {
                act = block.forward_inference(&act)?;
            }
        }
        self.head.forward(&act)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: AimMode) -> Result<Tensor<T>> {
        match mode {
            AimMode::Train => Ok(self.forward_train(x)?.0),
            AimMode::Eval => self.forward_eval(x),
            AimMode::Inference => self.forward_inference(x),
        }
    }

    /// Argmax class per batch row; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward_eval(x)?;
        Ok(argmax_rows(&logits))
    }

    /// Accumulates into `grad` (a zeroed clone) and returns dx.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        ctx: &ModelCtx<T>,
        dlogits: &Tensor<T>,
        grad: &mut Dttn<T>,
    ) -> Result<Tensor<T>> {
        let mut da = self.head.backward(&ctx.head, dlogits, &mut grad.head)?;
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let sctx = &ctx.stages[si];
            let gstage = &mut grad.stages[si];
            for (bi, block) in stage.blocks.iter().enumerate().rev() {
                da = block.backward(
                    &sctx.block_ins[bi],
                    &sctx.block_ctxs[bi],
                    &da,
                    &mut gstage.blocks[bi],
                )?;
            }
            if let (Some(DownLayer::Plain(ds)), Some(din), Some(dctx)) =
                (&stage.down, &sctx.down_in, &sctx.down)
            {
                let gds = match &mut gstage.down {
                    Some(DownLayer::Plain(g)) => g,
                    _ => {
                        return Err(DttnError::State(
                            "gradient model layout differs from the model".into(),
                        ))
                    }
                };
                da = ds.backward(din, dctx, &da, gds)?;
            }
        }
        self.embed.backward(x, &ctx.embed, &da, &mut grad.embed)
    }

    /// Same-shaped model with every tensor zeroed, for gradients and
    /// optimizer state.
    pub fn zeros_like(&self) -> Dttn<T> {
        let mut clone = self.clone();
        let mut refs = Vec::new();
        clone.visit_mut(&mut refs);
        for (_, _, t) in refs {
            for v in t.data_mut() {
                *v = T::ZERO;
            }
        }
        clone
    }

    /// Inference form: every batch norm absorbed into its neighbor layer.
    pub fn fold(&self) -> Result<Dttn<T>> {
        if self.folded {
            return Err(DttnError::State("model is already folded".into()));
        }
        let mut folded = self.clone();
        for stage in &mut folded.stages {
            if let Some(DownLayer::Plain(ds)) = &stage.down {
                stage.down = Some(DownLayer::Folded(ds.fold()?));
            }
            for block in stage.blocks.iter_mut() {
                *block = block.fold_batchnorm()?;
            }
        }
        folded.folded = true;
        Ok(folded)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<ParamRef<'a, T>>) {
        self.embed.visit("embed", out);
        for stage in &self.stages {
            let sp = format!("stage{}", stage.index + 1);
            match &stage.down {
                Some(DownLayer::Plain(ds)) => ds.visit(&format!("{sp}.down"), out),
                Some(DownLayer::Folded(conv)) => conv.visit(&format!("{sp}.down"), out),
                None => {}
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                block.visit(&format!("{sp}.block{bi}"), out);
            }
        }
        self.head.visit("head", out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, T>>) {
        self.embed.visit_mut("embed", out);
        for stage in &mut self.stages {
            let sp = format!("stage{}", stage.index + 1);
            match &mut stage.down {
                Some(DownLayer::Plain(ds)) => ds.visit_mut(&format!("{sp}.down"), out),
                Some(DownLayer::Folded(conv)) => conv.visit_mut(&format!("{sp}.down"), out),
                None => {}
            }
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("{sp}.block{bi}"), out);
            }
        }
        self.head.visit_mut("head", out);
    }

    /// Exact walk of every stored tensor, split by component and role.
    pub fn enumerate_params(&self) -> ParamCensus {
        let mut refs = Vec::new();
        self.visit(&mut refs);
        let mut census = ParamCensus::default();
        for (name, class, t) in refs {
            let n = t.len() as u64;
            let bucket = if name.starts_with("embed") {
                &mut census.embed
            } else if name.starts_with("head") {
                &mut census.head
            } else if name.contains(".down.") {
                &mut census.downsamplers
            } else {
                &mut census.blocks
            };
            match class {
                ParamClass::Weight | ParamClass::Bias => bucket.core += n,
                ParamClass::NormAffine => bucket.norm_affine += n,
                ParamClass::NormStat => bucket.norm_stats += n,
                ParamClass::Scale => bucket.scale += n,
            }
        }
        census.finish();
        census
    }
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let row = &logits.data()[b * m..(b + 1) * m];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Per-role parameter counts for one component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamBucket {
    /// conv / linear weights and biases
    pub core: u64,
    pub norm_affine: u64,
    pub norm_stats: u64,
    pub scale: u64,
}

impl ParamBucket {
    pub fn trainable(&self) -> u64 {
        self.core + self.norm_affine + self.scale
    }

    pub fn stored(&self) -> u64 {
        self.trainable() + self.norm_stats
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub embed: ParamBucket,
    pub blocks: ParamBucket,
    pub downsamplers: ParamBucket,
    pub head: ParamBucket,
    pub total: ParamBucket,
}

impl ParamCensus {
    fn finish(&mut self) {
        for b in [self.embed, self.blocks, self.downsamplers, self.head] {
            self.total.core += b.core;
            self.total.norm_affine += b.norm_affine;
            self.total.norm_stats += b.norm_stats;
            self.total.scale += b.scale;
        }
    }
}

/// Closed-form parameter counts per component.
///
/// The block and head terms follow the published closed forms: per block
/// 22·r·d + (2r+r²)·d² + d at that stage's width, head d·(m+1). The head
/// form differs from the true pooled-linear count m·(d+1); `enumerate_params`
/// reports the truth and the two are printed side by side, not forced equal.
/// Downsamplers are this implementation's own extension and count conv
/// weights and biases, (4·C_in+1)·C_out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AnalyticParams {
    pub embed: u64,
    pub blocks: u64,
    pub downsamplers: u64,
    pub head: u64,
    pub total: u64,
}

pub fn count_params_analytic(cfg: &ModelConfig) -> AnalyticParams {
    let c_img = cfg.img_channels as u64;
    let d1 = cfg.stage_hidden[0] as u64;
    let embed = (4 * c_img + 1) * d1 + (4 * d1 + 1) * d1;
    let r = cfg.r_exp as u64;
    let mut blocks = 0u64;
    let mut downsamplers = 0u64;
    for geom in cfg.stage_geometry() {
        let d = geom.width as u64;
        blocks += cfg.stage_blocks[geom.index] as u64 * (22 * r * d + (2 * r + r * r) * d * d + d);
        if let Some(prev) = geom.down_from {
            downsamplers += (4 * prev as u64 + 1) * d;
        }
    }
    let dh = cfg.head_width() as u64;
    let head = dh * (cfg.classes as u64 + 1);
    AnalyticParams {
        embed,
        blocks,
        downsamplers,
        head,
        total: embed + blocks + downsamplers + head,
    }
}

/// Closed-form multiply-accumulate counts. `macs` are weight multiplies
/// only; bias additions, the pooling sum, and the per-block Hadamard
/// products are itemized separately. `flops_2x` doubles the MACs under the
/// multiply-plus-add convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AnalyticFlops {
    pub embed_macs: u64,
    pub blocks_macs: u64,
    pub downsampler_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    pub bias_adds: u64,
    pub pool_adds: u64,
    pub hadamard_mults: u64,
    pub flops_2x: u64,
}

pub fn count_flops_analytic(cfg: &ModelConfig) -> AnalyticFlops {
    let (h, w) = cfg.img_size;
    let c_img = cfg.img_channels as u64;
    let d1 = cfg.stage_hidden[0] as u64;
    let half = (h / 2 * (w / 2)) as u64;
    let quarter = (h / 4 * (w / 4)) as u64;
    let mut f = AnalyticFlops {
        embed_macs: 4 * c_img * d1 * half + 4 * d1 * d1 * quarter,
        bias_adds: d1 * half + d1 * quarter,
        ..Default::default()
    };
    let r = cfg.r_exp as u64;
    let mut last = (0u64, 0u64); // (width, spatial) at the head
    for geom in cfg.stage_geometry() {
        let d = geom.width as u64;
        let sp = (geom.h * geom.w) as u64;
        let nb = cfg.stage_blocks[geom.index] as u64;
        let weights = 18 * r * d + (2 * r + r * r) * d * d;
        f.blocks_macs += nb * weights * sp;
        f.bias_adds += nb * (4 * r * d + d) * sp;
        f.hadamard_mults += nb * r * d * sp;
        if let Some(prev) = geom.down_from {
            f.downsampler_macs += 4 * prev as u64 * d * sp;
            f.bias_adds += d * sp;
        }
        last = (d, sp);
    }
    let (dh, sp) = last;
    f.pool_adds = dh * sp;
    f.head_macs = dh * cfg.classes as u64;
    f.bias_adds += cfg.classes as u64;
    f.total_macs = f.embed_macs + f.blocks_macs + f.downsampler_macs + f.head_macs;
    f.flops_2x = 2 * f.total_macs;
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            stage_blocks: [1, 1, 0, 0],
            stage_hidden: [4, 6, 6, 6],
            r_exp: 2,
            use_ln: false,
            img_channels: 1,
            img_size: (32, 32),
            classes: 3,
            seed: 9,
            dtype: Dtype::F64,
        }
    }

    fn random_images(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(
            &[n, cfg.img_channels, cfg.img_size.0, cfg.img_size.1],
            |_| rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn presets_have_published_block_counts() {
        assert_eq!(ModelConfig::preset("tiny").unwrap().total_blocks(), 34);
        assert_eq!(ModelConfig::preset("small").unwrap().total_blocks(), 44);
        assert_eq!(ModelConfig::preset("large").unwrap().total_blocks(), 56);
        assert_eq!(ModelConfig::preset("desk").unwrap().total_blocks(), 10);
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn indivisible_image_size_is_rejected_with_padding_hint() {
        let mut cfg = tiny_cfg();
        cfg.img_size = (28, 28);
        let err = Dttn::<f64>::build(&cfg).unwrap_err();
        assert!(matches!(err, DttnError::Config(_)));
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn zero_input_with_zero_head_bias_gives_zero_logits() {
        let cfg = tiny_cfg();
        let model = Dttn::<f64>::build(&cfg).unwrap();
        let x = Tensor::zeros(&[2, 1, 32, 32]);
        let y = model.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|v| v.abs() < 1e-9), "{:?}", y.data());
    }

    #[test]
    fn forward_matches_manual_composition_single_block() {
        // one no-norm block, no downsamplers: model forward must equal
        // embed -> block -> head applied by hand
        let mut cfg = tiny_cfg();
        cfg.stage_blocks = [1, 0, 0, 0];
        let model = Dttn::<f64>::build_with(&cfg, NormMode::None, true).unwrap();
        let x = random_images(&cfg, 2, 5);
        let want = model.forward_eval(&x).unwrap();
        let a = model.embed.forward(&x).unwrap();
        let b = model.stages[0].blocks[0].forward_eval(&a).unwrap();
        let got = model.head.forward(&b).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn stage_transitions_halve_the_grid() {
        let cfg = ModelConfig::default(); // 4 active stages at 32x32
        let geoms = cfg.stage_geometry();
        let sides: Vec<usize> = geoms.iter().map(|g| g.h).collect();
        assert_eq!(sides, vec![8, 4, 2, 1]);
        assert_eq!(cfg.head_width(), 32);
    }

    #[test]
    fn predict_breaks_ties_toward_lower_index() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.3, 0.5, 0.2, 0.5]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![1, 0]);
        let shifted = logits.map(|v| v + 100.0);
        assert_eq!(argmax_rows(&shifted), vec![1, 0]);
    }

    #[test]
    fn dual_precision_forwards_agree() {
        let cfg = tiny_cfg();
        let m64 = Dttn::<f64>::build(&cfg).unwrap();
        let m32 = Dttn::<f32>::build(&cfg).unwrap();
        let x = random_images(&cfg, 2, 8);
        let y64 = m64.forward_eval(&x).unwrap();
        let y32 = m32.forward_eval(&x.cast::<f32>()).unwrap();
        for (a, b) in y64.data().iter().zip(y32.data()) {
            let b = *b as f64;
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
            assert!(rel < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn model_fold_preserves_eval_function() {
        let mut cfg = tiny_cfg();
        cfg.use_ln = false;
        let mut model = Dttn::<f64>::build(&cfg).unwrap();
        // push some batches through so running stats are not at init
        let x = random_images(&cfg, 4, 11);
        model.forward_train(&x).unwrap();
        model.forward_train(&x.scale(0.5)).unwrap();
        let folded = model.fold().unwrap();
        let want = model.forward_eval(&x).unwrap();
        let got = folded.forward_inference(&x).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-10);
            assert!(rel < 1e-10);
        }
        assert!(matches!(
            folded.fold().unwrap_err(),
            DttnError::State(_)
        ));
        let census = folded.enumerate_params();
        assert_eq!(census.total.norm_affine, 0);
        assert_eq!(census.total.norm_stats, 0);
        assert!(census.total.stored() < model.enumerate_params().total.stored());
    }

    #[test]
    fn enumeration_matches_analytic_for_block_stacks() {
        // single active stage: no downsamplers; blocks bucket must agree
        // exactly, as must embed; the head closed form is the published one
        // and differs from the true count unless d == m.
        for (blocks, width, r) in [(3usize, 5usize, 2usize), (1, 4, 3), (2, 7, 1)] {
            let cfg = ModelConfig {
                stage_blocks: [blocks, 0, 0, 0],
                stage_hidden: [width; 4],
                r_exp: r,
                use_ln: false,
                img_channels: 2,
                img_size: (32, 32),
                classes: 4,
                seed: 1,
                dtype: Dtype::F32,
            };
            let model = Dttn::<f32>::build(&cfg).unwrap();
            let census = model.enumerate_params();
            let analytic = count_params_analytic(&cfg);
            assert_eq!(census.blocks.core, analytic.blocks, "width {width} r {r}");
            assert_eq!(census.embed.core, analytic.embed);
            assert_eq!(census.downsamplers.core, 0);
            assert_eq!(analytic.downsamplers, 0);
            // head: published d(m+1) vs true m(d+1)
            assert_eq!(analytic.head, (width * (4 + 1)) as u64);
            assert_eq!(census.head.core, (4 * (width + 1)) as u64);
        }
    }

    #[test]
    fn analytic_examples_from_closed_forms() {
        // embed at d=64, 3 channels
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.stage_hidden[0] = 64;
        assert_eq!(count_params_analytic(&cfg).embed, 17280);
        // one block at d=64, r=3
        let one = ModelConfig {
            stage_blocks: [1, 0, 0, 0],
            stage_hidden: [64; 4],
            r_exp: 3,
            use_ln: false,
            img_channels: 3,
            img_size: (32, 32),
            classes: 10,
            seed: 0,
            dtype: Dtype::F32,
        };
        assert_eq!(count_params_analytic(&one).blocks, 65728);
        // head at d=192, m=1000
        let big = ModelConfig::preset("small").unwrap();
        assert_eq!(big.head_width(), 192);
        assert_eq!(count_params_analytic(&big).head, 192 * 1001);
    }

    #[test]
    fn flop_examples_from_closed_forms() {
        let cfg = ModelConfig {
            stage_blocks: [1, 0, 0, 0],
            stage_hidden: [1; 4],
            r_exp: 1,
            use_ln: false,
            img_channels: 1,
            img_size: (32, 32),
            classes: 10,
            seed: 0,
            dtype: Dtype::F32,
        };
        let f = count_flops_analytic(&cfg);
        assert_eq!(f.embed_macs, 1280); // 4*(32*32/4) + 4*(32*32/16)

        // doubling the image quadruples every MAC bucket
        let mut cfg2 = cfg.clone();
        cfg2.img_size = (64, 64);
        let f2 = count_flops_analytic(&cfg2);
        assert_eq!(f2.embed_macs, 4 * f.embed_macs);
        assert_eq!(f2.blocks_macs, 4 * f.blocks_macs);
        assert_eq!(f2.flops_2x, 2 * f2.total_macs);

        // head structure: pool adds d*spatial, fc MACs d*m
        let desk = ModelConfig::default();
        let fd = count_flops_analytic(&desk);
        assert_eq!(fd.pool_adds, 32); // 32 channels on a 1x1 grid
        assert_eq!(fd.head_macs, 320);
    }

    #[test]
    fn gradients_flow_through_the_whole_model() {
        use crate::gradcheck::check_gradient;
        let cfg = tiny_cfg();
        let base = Dttn::<f64>::build(&cfg).unwrap();
        let x = random_images(&cfg, 2, 21);
        let wts = Tensor::<f64>::from_fn(&[2, 3], |i| (i as f64 * 0.71).sin());

        let mut work = base.clone();
        let (_, ctx) = work.forward_train(&x).unwrap();
        let mut grad = base.zeros_like();
        work.backward(&x, &ctx, &wts, &mut grad).unwrap();

        let mut theta = Vec::new();
        let mut analytic = Vec::new();
        {
            let mut prefs = Vec::new();
            work.visit_mut(&mut prefs);
            let mut grefs = Vec::new();
            grad.visit_mut(&mut grefs);
            for ((_, class, p), (_, _, g)) in prefs.iter().zip(grefs.iter()) {
                if class.trainable() {
                    theta.extend(p.data().iter().map(|v| v.to_f64()));
                    analytic.extend(g.data().iter().map(|v| v.to_f64()));
                }
            }
        }
        let res = check_gradient(
            &theta,
            &analytic,
            |t| {
                let mut m = base.clone();
                let mut refs = Vec::new();
                m.visit_mut(&mut refs);
                let mut pos = 0;
                for (_, class, tens) in refs {
                    if class.trainable() {
                        let n = tens.len();
                        tens.data_mut().copy_from_slice(&t[pos..pos + n]);
                        pos += n;
                    }
                }
                let (y, _) = m.forward_train(&x).unwrap();
                y.data().iter().zip(wts.data()).map(|(a, w)| a * w).sum()
            },
            1e-5,
            97, // sample coordinates; full sweep is covered at layer level
        );
        assert!(
            res.passes(1e-6),
            "worst {} at {} {:?}",
            res.max_rel_err,
            res.worst_index,
            res.worst_pair
        );
    }
}
