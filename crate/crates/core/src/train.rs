//! SGD training loop: label-smoothed cross-entropy, momentum with weight
//! decay on weights and biases only, stepped learning-rate schedule,
//! per-epoch history rows, and checkpoints that resume bit for bit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::{self, Config};
use crate::data::{augment_rng, build_batch, epoch_permutation, Dataset};
use crate::error::{DttnError, Result};
use crate::model::{Dttn, ModelConfig};
use crate::tensor::{Dtype, Scalar, Tensor};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 1-based epoch number as written to the history file
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub final_top1: f64,
    pub final_checkpoint: PathBuf,
}

/// Mean label-smoothed cross-entropy over the batch. Returns the loss,
/// the logit gradient already scaled by 1/batch, and the number of
/// correct argmax predictions (ties to the lowest class index).
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(f64, Tensor<T>, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(DttnError::Dim(format!(
            "logits {:?} against {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 {
        return Err(DttnError::Dim("empty batch".into()));
    }
    let off = smoothing / m as f64;
    let on = 1.0 - smoothing + off;
    let mut total = 0.0;
    let mut correct = 0;
    let mut dlogits = Tensor::<T>::zeros(&[n, m]);
    for b in 0..n {
        let y = labels[b];
        if y >= m {
            return Err(DttnError::Index(format!(
                "label {y} out of range for {m} classes"
            )));
        }
        let row: Vec<f64> = logits.data()[b * m..(b + 1) * m]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let sum: f64 = row.iter().sum();
        total += lse - on * row[y] - off * (sum - row[y]);
        let mut best = 0;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
            let q = if j == y { on } else { off };
            let p = (z - lse).exp();
            *dlogits.at_mut(&[b, j]) = T::from_f64((p - q) / n as f64);
        }
        if best == y {
            correct += 1;
        }
    }
    Ok((total / n as f64, dlogits, correct))
}

/// Stepped schedule: the base rate decays by `gamma` once per milestone
/// whose epoch index has been reached.
pub fn lr_at(base: f64, gamma: f64, milestones: &[usize], epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| epoch >= m).count();
    base * gamma.powi(hits as i32)
}

/// One SGD step with momentum. Weight decay applies to conv and linear
/// weights and biases and to norm gains and shifts, but not to the
/// residual scale or to running statistics.
pub fn sgd_step<T: Scalar>(
    model: &mut Dttn<T>,
    grads: &Dttn<T>,
    velocity: &mut Dttn<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut prefs = Vec::new();
    model.visit_mut(&mut prefs);
    let mut grefs = Vec::new();
    grads.visit(&mut grefs);
    let mut vrefs = Vec::new();
    velocity.visit_mut(&mut vrefs);
    if prefs.len() != grefs.len() || prefs.len() != vrefs.len() {
        return Err(DttnError::State(
            "model, gradient, and velocity layouts differ".into(),
        ));
    }
    for (((pname, class, p), (gname, _, g)), (_, _, v)) in
        prefs.into_iter().zip(grefs).zip(vrefs)
    {
        if pname != gname {
            return Err(DttnError::State(format!(
                "parameter order mismatch: {pname} vs {gname}"
            )));
        }
        if !class.trainable() {
            continue;
        }
        let wd = if class.decayed() { weight_decay } else { 0.0 };
        for ((pv, gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            let step = momentum * vv.to_f64() + gv.to_f64() + wd * pv.to_f64();
            *vv = T::from_f64(step);
            *pv = T::from_f64(pv.to_f64() - lr * step);
        }
    }
    Ok(())
}

/// Test-set pass in evaluation mode: plain cross-entropy and top-1.
pub fn evaluate<T: Scalar>(model: &Dttn<T>, ds: &Dataset, cfg: &Config) -> Result<(f64, f64)> {
    let stats = cfg.data.dataset.norm_stats();
    let indices: Vec<usize> = (0..ds.n).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = build_batch::<T>(
            ds,
            chunk,
            cfg.model.img_size,
            (&stats.0, &stats.1),
            None,
            0,
        )?;
        let logits = model.forward_eval(&x)?;
        let (loss, _, c) = cross_entropy(&logits, &labels, 0.0)?;
        loss_sum += loss * chunk.len() as f64;
        correct += c;
    }
    Ok((loss_sum / ds.n as f64, correct as f64 / ds.n as f64))
}

/// History file with the exact column set the tooling expects.
pub fn history_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,test_loss,test_acc,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_acc, r.wall_seconds
        ));
    }
    out
}

pub fn write_history(path: &Path, rows: &[EpochRow]) -> Result<()> {
    std::fs::write(path, history_csv(rows)).map_err(|e| {
        DttnError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn config_key(cfg: &Config) -> String {
    // resume compatibility ignores how far the run has progressed and how
    // far it intends to go, but everything else must match
    let mut c = cfg.clone();
    c.trainer.completed_epochs = 0;
    c.trainer.epochs = 0;
    config::to_text(&c)
}

fn save_state<T: Scalar>(
    path: &Path,
    cfg: &Config,
    completed: usize,
    model: &Dttn<T>,
    velocity: &Dttn<T>,
) -> Result<()> {
    let mut blob_cfg = cfg.clone();
    blob_cfg.trainer.completed_epochs = completed;
    let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
    let mut mrefs = Vec::new();
    model.visit(&mut mrefs);
    for (name, _, t) in mrefs {
        tensors.push((format!("model.{name}"), t));
    }
    let mut vrefs = Vec::new();
    velocity.visit(&mut vrefs);
    for (name, class, t) in vrefs {
        if class.trainable() {
            tensors.push((format!("momentum.{name}"), t));
        }
    }
    checkpoint::save(path, &config::to_text(&blob_cfg), &tensors)
}

/// Builds a model and fills its weights from checkpoint tensors named
/// `model.<name>`, ignoring any optimizer state stored alongside them.
pub fn model_from_checkpoint<T: Scalar>(
    ck: &checkpoint::Checkpoint<T>,
    mcfg: &ModelConfig,
) -> Result<Dttn<T>> {
    let mut model = Dttn::<T>::build(mcfg)?;
    let mut refs = Vec::new();
    model.visit_mut(&mut refs);
    for (name, _, t) in refs {
        let stored = ck
            .tensor(&format!("model.{name}"))
            .ok_or_else(|| DttnError::Format(format!("checkpoint is missing tensor model.{name}")))?;
        if stored.shape() != t.shape() {
            return Err(DttnError::Format(format!(
                "checkpoint tensor model.{name} has shape {:?}, expected {:?}",
                stored.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(stored.data());
    }
    Ok(model)
}

/// Rebuilds model and optimizer state from a checkpoint. The stored
/// configuration must match the requested one up to epoch counters.
fn restore_state<T: Scalar>(path: &Path, cfg: &Config) -> Result<(Dttn<T>, Dttn<T>, usize)> {
    let ck = checkpoint::load::<T>(path)?;
    let stored = config::resolve(Some(&ck.config), &[])?;
    if config_key(&stored) != config_key(cfg) {
        return Err(DttnError::Config(format!(
            "checkpoint {} was written under a different configuration; \
             resume with the same model and data settings",
            path.display()
        )));
    }
    let mut model = model_from_checkpoint(&ck, &cfg.model)?;
    let mut velocity = model.zeros_like();
    let mut used = 0usize;
    {
        let mut refs = Vec::new();
        model.visit_mut(&mut refs);
        used += refs.len();
    }
    {
        let mut refs = Vec::new();
        velocity.visit_mut(&mut refs);
        for (name, class, t) in refs {
            if !class.trainable() {
                continue;
            }
            let stored = ck.tensor(&format!("momentum.{name}")).ok_or_else(|| {
                DttnError::Format(format!("checkpoint is missing tensor momentum.{name}"))
            })?;
            t.data_mut().copy_from_slice(stored.data());
            used += 1;
        }
    }
    if used != ck.tensors.len() {
        return Err(DttnError::Format(format!(
            "checkpoint holds {} tensors, restored {used}",
            ck.tensors.len()
        )));
    }
    Ok((model, velocity, stored.trainer.completed_epochs))
}

fn check_data(cfg: &Config, ds: &Dataset, split: &str) -> Result<()> {
    if ds.c != cfg.model.img_channels {
        return Err(DttnError::Config(format!(
            "{split} data has {} channels but model.img_channels = {}; \
             set model.img_channels to match the dataset",
            ds.c, cfg.model.img_channels
        )));
    }
    if ds.h > cfg.model.img_size.0 || ds.w > cfg.model.img_size.1 {
        return Err(DttnError::Config(format!(
            "{split} images are {}x{} but model.img_size = {}x{}",
            ds.h, ds.w, cfg.model.img_size.0, cfg.model.img_size.1
        )));
    }
    if let Some(&l) = ds.labels.iter().max() {
        if l as usize >= cfg.model.classes {
            return Err(DttnError::Config(format!(
                "{split} labels reach {l} but model.classes = {}",
                cfg.model.classes
            )));
        }
    }
    Ok(())
}

/// Full training run; dispatches on the configured dtype.
pub fn run(
    cfg: &Config,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    match cfg.model.dtype {
        Dtype::F32 => run_typed::<f32>(cfg, train_ds, test_ds, out_dir, resume),
        Dtype::F64 => run_typed::<f64>(cfg, train_ds, test_ds, out_dir, resume),
    }
}

fn run_typed<T: Scalar>(
    cfg: &Config,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    check_data(cfg, train_ds, "train")?;
    check_data(cfg, test_ds, "test")?;
    std::fs::create_dir_all(out_dir).map_err(|e| {
        DttnError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", out_dir.display()),
        ))
    })?;

    let (mut model, mut velocity, start_epoch) = match resume {
        Some(path) => restore_state::<T>(path, cfg)?,
        None => {
            let model = Dttn::<T>::build(&cfg.model)?;
            let velocity = model.zeros_like();
            (model, velocity, 0)
        }
    };

    let stats = cfg.data.dataset.norm_stats();
    let aug = cfg.data.augment.resolve(cfg.data.dataset, cfg.data.crop_pad);
    let seed = cfg.model.seed;
    let t = &cfg.trainer;
    let mut history = Vec::new();
    let latest = out_dir.join("ckpt_latest.dttn");

    for epoch in start_epoch..t.epochs {
        let tick = Instant::now();
        let lr = lr_at(t.lr, t.gamma, &t.milestones, epoch);
        let perm = epoch_permutation(train_ds.n, seed, epoch);
        let mut rng = augment_rng(seed, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, chunk) in perm.chunks(t.batch_size).enumerate() {
            let draws: Vec<_> = chunk.iter().map(|_| aug.draw(&mut rng)).collect();
            let (x, labels) = build_batch::<T>(
                train_ds,
                chunk,
                cfg.model.img_size,
                (&stats.0, &stats.1),
                Some(&draws),
                aug.crop_pad,
            )?;
            let (logits, ctx) = model.forward_train(&x)?;
            let (loss, dlogits, c) = cross_entropy(&logits, &labels, t.label_smoothing)?;
            if !loss.is_finite() {
                return Err(DttnError::Numeric(format!(
                    "training loss became {loss} at epoch {} batch {bi}; \
                     lower the learning rate or check the input scaling",
                    epoch + 1
                )));
            }
            let mut grads = model.zeros_like();
            model.backward(&x, &ctx, &dlogits, &mut grads)?;
            sgd_step(&mut model, &grads, &mut velocity, lr, t.momentum, t.weight_decay)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        let (test_loss, test_acc) = evaluate(&model, test_ds, cfg)?;
        let row = EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_ds.n as f64,
            train_acc: correct as f64 / train_ds.n as f64,
            test_loss,
            test_acc,
            wall_seconds: tick.elapsed().as_secs_f64(),
        };
        eprintln!(
            "epoch {:>3}/{} lr {:.4} train_loss {:.4} train_acc {:.4} test_loss {:.4} test_acc {:.4} ({:.1}s)",
            row.epoch, t.epochs, row.lr, row.train_loss, row.train_acc, row.test_loss,
            row.test_acc, row.wall_seconds
        );
        history.push(row);
        write_history(&out_dir.join("history.csv"), &history)?;
        save_state(&latest, cfg, epoch + 1, &model, &velocity)?;
    }

    let final_top1 = match history.last() {
        Some(r) => r.test_acc,
        None => evaluate(&model, test_ds, cfg)?.1,
    };
    let final_path = out_dir.join("ckpt_final.dttn");
    save_state(&final_path, cfg, t.epochs.max(start_epoch), &model, &velocity)?;
    Ok(TrainOutcome {
        history,
        final_top1,
        final_checkpoint: final_path,
    })
}
