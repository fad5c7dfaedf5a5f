//! Run configuration: a `key = value` text format with `#` comments and
//! dotted keys in three sections (`model.`, `trainer.`, `data.`), plus
//! command-line `--set key=value` overrides that win over the file. The
//! resolved configuration serializes back to text for checkpoint blobs,
//! and that text round-trips exactly.

use crate::data::DatasetKind;
use crate::error::{DttnError, Result};
use crate::model::ModelConfig;
use crate::tensor::Dtype;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// epochs already folded into the stored weights; used by resume
    pub completed_epochs: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 10,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            milestones: vec![100, 150],
            gamma: 0.1,
            completed_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    /// 4-pixel crop always; horizontal flips only where the dataset
    /// benefits from them
    Auto,
    None,
    Crop,
    FlipCrop,
}

impl AugmentKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(AugmentKind::Auto),
            "none" => Ok(AugmentKind::None),
            "crop" => Ok(AugmentKind::Crop),
            "flip_crop" => Ok(AugmentKind::FlipCrop),
            other => Err(DttnError::Config(format!(
                "unknown augmentation '{other}' (expected auto, none, crop, or flip_crop)"
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            AugmentKind::Auto => "auto",
            AugmentKind::None => "none",
            AugmentKind::Crop => "crop",
            AugmentKind::FlipCrop => "flip_crop",
        }
    }

    /// Concrete flip/crop switches for one dataset.
    pub fn resolve(&self, kind: DatasetKind, crop_pad: usize) -> crate::data::AugmentCfg {
        match self {
            AugmentKind::Auto => crate::data::AugmentCfg {
                hflip: kind.default_hflip(),
                crop_pad,
            },
            AugmentKind::None => crate::data::AugmentCfg::none(),
            AugmentKind::Crop => crate::data::AugmentCfg {
                hflip: false,
                crop_pad,
            },
            AugmentKind::FlipCrop => crate::data::AugmentCfg {
                hflip: true,
                crop_pad,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub augment: AugmentKind,
    pub crop_pad: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            augment: AugmentKind::Auto,
            crop_pad: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
}

/// Splits config text into (key, value, line number) triples.
fn parse_text(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            DttnError::Config(format!(
                "line {} is not 'key = value': '{}'",
                i + 1,
                raw.trim()
            ))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Resolves a configuration from optional file text and `--set` overrides,
/// applied in that order so overrides win. `model.variant` is expanded
/// first (its last occurrence), then every other key in sequence.
pub fn resolve(file_text: Option<&str>, sets: &[String]) -> Result<Config> {
    let mut entries = match file_text {
        Some(t) => parse_text(t)?,
        None => Vec::new(),
    };
    for (i, s) in sets.iter().enumerate() {
        let (key, value) = s.split_once('=').ok_or_else(|| {
            DttnError::Config(format!("--set argument {} is not key=value: '{s}'", i + 1))
        })?;
        entries.push((key.trim().to_string(), value.trim().to_string(), 0));
    }

    let mut cfg = Config::default();
    if let Some((_, variant, line)) = entries
        .iter()
        .rev()
        .find(|(k, _, _)| k == "model.variant")
    {
        cfg.model = ModelConfig::preset(variant).map_err(|e| at_line(e, *line))?;
    }
    for (key, value, line) in &entries {
        if key == "model.variant" {
            continue;
        }
        apply(&mut cfg, key, value).map_err(|e| at_line(e, *line))?;
    }
    cfg.model.validate()?;
    validate_trainer(&cfg.trainer)?;
    Ok(cfg)
}

fn at_line(e: DttnError, line: usize) -> DttnError {
    match (e, line) {
        (DttnError::Config(msg), l) if l > 0 => {
            DttnError::Config(format!("{msg} (line {l})"))
        }
        (e, _) => e,
    }
}

fn validate_trainer(t: &TrainerConfig) -> Result<()> {
    if t.batch_size == 0 {
        return Err(DttnError::Config("trainer.batch_size must be positive".into()));
    }
    if !(t.lr.is_finite() && t.momentum.is_finite() && t.weight_decay.is_finite()) {
        return Err(DttnError::Config("trainer rates must be finite".into()));
    }
    if !(0.0..1.0).contains(&t.label_smoothing) {
        return Err(DttnError::Config(
            "trainer.label_smoothing must lie in [0, 1)".into(),
        ));
    }
    if t.gamma <= 0.0 {
        return Err(DttnError::Config("trainer.gamma must be positive".into()));
    }
    if t.completed_epochs > t.epochs {
        return Err(DttnError::Config(format!(
            "trainer.completed_epochs {} exceeds trainer.epochs {}",
            t.completed_epochs, t.epochs
        )));
    }
    Ok(())
}

fn apply(cfg: &mut Config, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| {
        DttnError::Config(format!("key '{key}': cannot parse '{value}' as {what}"))
    };
    match key {
        "model.stage_blocks" => cfg.model.stage_blocks = usize4(value).ok_or_else(|| bad("four comma-separated counts"))?,
        "model.stage_hidden" => cfg.model.stage_hidden = usize4(value).ok_or_else(|| bad("four comma-separated widths"))?,
        "model.r_exp" => cfg.model.r_exp = value.parse().map_err(|_| bad("an integer"))?,
        "model.use_ln" => cfg.model.use_ln = parse_bool(value).ok_or_else(|| bad("true or false"))?,
        "model.img_channels" => cfg.model.img_channels = value.parse().map_err(|_| bad("an integer"))?,
        "model.img_size" => cfg.model.img_size = parse_size(value).ok_or_else(|| bad("SIZE or HxW"))?,
        "model.classes" => cfg.model.classes = value.parse().map_err(|_| bad("an integer"))?,
        "model.seed" => cfg.model.seed = value.parse().map_err(|_| bad("an integer"))?,
        "model.dtype" => {
            cfg.model.dtype = match value {
                "f32" => Dtype::F32,
                "f64" => Dtype::F64,
                _ => return Err(bad("f32 or f64")),
            }
        }
        "trainer.epochs" => cfg.trainer.epochs = value.parse().map_err(|_| bad("an integer"))?,
        "trainer.batch_size" => cfg.trainer.batch_size = value.parse().map_err(|_| bad("an integer"))?,
        "trainer.lr" => cfg.trainer.lr = value.parse().map_err(|_| bad("a number"))?,
        "trainer.momentum" => cfg.trainer.momentum = value.parse().map_err(|_| bad("a number"))?,
        "trainer.weight_decay" => cfg.trainer.weight_decay = value.parse().map_err(|_| bad("a number"))?,
        "trainer.label_smoothing" => cfg.trainer.label_smoothing = value.parse().map_err(|_| bad("a number"))?,
        "trainer.milestones" => {
            cfg.trainer.milestones = value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("comma-separated epoch numbers"))?
        }
        "trainer.gamma" => cfg.trainer.gamma = value.parse().map_err(|_| bad("a number"))?,
        "trainer.completed_epochs" => {
            cfg.trainer.completed_epochs = value.parse().map_err(|_| bad("an integer"))?
        }
        "data.dataset" => cfg.data.dataset = DatasetKind::parse(value)?,
        "data.augment" => cfg.data.augment = AugmentKind::parse(value)?,
        "data.crop_pad" => cfg.data.crop_pad = value.parse().map_err(|_| bad("an integer"))?,
        _ => {
            return Err(DttnError::Config(format!("unknown key '{key}'")));
        }
    }
    Ok(())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_size(s: &str) -> Option<(usize, usize)> {
    if let Some((h, w)) = s.split_once('x') {
        return Some((h.trim().parse().ok()?, w.trim().parse().ok()?));
    }
    let side: usize = s.parse().ok()?;
    Some((side, side))
}

fn usize4(s: &str) -> Option<[usize; 4]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    parts.try_into().ok()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Full resolved configuration as config-file text; `resolve` on the
/// output reproduces the same `Config`.
pub fn to_text(cfg: &Config) -> String {
    let m = &cfg.model;
    let t = &cfg.trainer;
    let d = &cfg.data;
    let dataset = match d.dataset {
        DatasetKind::Mnist => "mnist",
        DatasetKind::FashionMnist => "fashion",
        DatasetKind::Cifar10 => "cifar10",
    };
    format!(
        "model.stage_blocks = {}\n\
         model.stage_hidden = {}\n\
         model.r_exp = {}\n\
         model.use_ln = {}\n\
         model.img_channels = {}\n\
         model.img_size = {}x{}\n\
         model.classes = {}\n\
         model.seed = {}\n\
         model.dtype = {}\n\
         trainer.epochs = {}\n\
         trainer.batch_size = {}\n\
         trainer.lr = {}\n\
         trainer.momentum = {}\n\
         trainer.weight_decay = {}\n\
         trainer.label_smoothing = {}\n\
         trainer.milestones = {}\n\
         trainer.gamma = {}\n\
         trainer.completed_epochs = {}\n\
         data.dataset = {}\n\
         data.augment = {}\n\
         data.crop_pad = {}\n",
        join(&m.stage_blocks),
        join(&m.stage_hidden),
        m.r_exp,
        m.use_ln,
        m.img_channels,
        m.img_size.0,
        m.img_size.1,
        m.classes,
        m.seed,
        match m.dtype {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        },
        t.epochs,
        t.batch_size,
        t.lr,
        t.momentum,
        t.weight_decay,
        t.label_smoothing,
        join(&t.milestones),
        t.gamma,
        t.completed_epochs,
        dataset,
        d.augment.name(),
        d.crop_pad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_input() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg.model.stage_blocks, [2, 2, 4, 2]);
        assert_eq!(cfg.trainer.batch_size, 128);
        assert_eq!(cfg.data.dataset, DatasetKind::Mnist);
    }

    #[test]
    fn file_keys_apply_and_comments_are_ignored() {
        let text = "\
# a comment line
model.variant = tiny
trainer.lr = 0.01   # trailing comment

data.dataset = fashion
";
        let cfg = resolve(Some(text), &[]).unwrap();
        assert_eq!(cfg.model.stage_blocks, [6, 6, 16, 6]);
        assert_eq!(cfg.trainer.lr, 0.01);
        assert_eq!(cfg.data.dataset, DatasetKind::FashionMnist);
    }

    #[test]
    fn variant_expands_before_field_overrides_regardless_of_order() {
        let text = "model.seed = 9\nmodel.variant = small\n";
        let cfg = resolve(Some(text), &[]).unwrap();
        assert_eq!(cfg.model.stage_blocks, [6, 6, 24, 8]);
        assert_eq!(cfg.model.seed, 9);
    }

    #[test]
    fn set_overrides_beat_the_file() {
        let text = "trainer.epochs = 10\n";
        let cfg = resolve(
            Some(text),
            &["trainer.epochs=3".into(), "model.use_ln=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.trainer.epochs, 3);
        assert!(!cfg.model.use_ln);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_context() {
        let err = resolve(Some("model.depth = 3\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key 'model.depth'"), "{err}");
        assert!(err.to_string().contains("line 1"), "{err}");

        let err = resolve(Some("trainer.lr = fast\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("cannot parse 'fast'"), "{err}");

        let err = resolve(Some("just words\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");

        let err = resolve(None, &["oops".into()]).unwrap_err();
        assert!(err.to_string().contains("--set"), "{err}");
    }

    #[test]
    fn size_accepts_square_and_explicit_forms() {
        let cfg = resolve(Some("model.img_size = 64\n"), &[]).unwrap();
        assert_eq!(cfg.model.img_size, (64, 64));
        let cfg = resolve(Some("model.img_size = 32x64\n"), &[]).unwrap();
        assert_eq!(cfg.model.img_size, (32, 64));
        assert!(resolve(Some("model.img_size = 33\n"), &[]).is_err());
    }

    #[test]
    fn trainer_bounds_are_checked() {
        assert!(resolve(Some("trainer.batch_size = 0\n"), &[]).is_err());
        assert!(resolve(Some("trainer.label_smoothing = 1.0\n"), &[]).is_err());
        assert!(resolve(
            Some("trainer.completed_epochs = 11\ntrainer.epochs = 10\n"),
            &[]
        )
        .is_err());
    }

    #[test]
    fn text_round_trips_exactly() {
        let cfg = resolve(
            Some("model.variant = desk\ntrainer.lr = 0.035\ndata.augment = flip_crop\n"),
            &["model.dtype=f64".into(), "trainer.milestones=5,8".into()],
        )
        .unwrap();
        let text = to_text(&cfg);
        let again = resolve(Some(&text), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, to_text(&again));
    }

    #[test]
    fn augment_resolution_honors_dataset_defaults() {
        let auto = AugmentKind::Auto;
        assert!(!auto.resolve(DatasetKind::Mnist, 4).hflip);
        assert!(auto.resolve(DatasetKind::Cifar10, 4).hflip);
        assert_eq!(auto.resolve(DatasetKind::Mnist, 4).crop_pad, 4);
        let none = AugmentKind::None;
        assert_eq!(none.resolve(DatasetKind::Cifar10, 4).crop_pad, 0);
        assert!(AugmentKind::FlipCrop.resolve(DatasetKind::Mnist, 4).hflip);
    }
}
