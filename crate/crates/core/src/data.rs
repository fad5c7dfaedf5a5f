//! Dataset loading and batch assembly. Images stay as raw bytes in memory;
//! batches are padded, normalized, and optionally augmented on the way into
//! a tensor. All shuffling and augmentation draws derive from (seed, epoch)
//! so an epoch can be replayed bit for bit.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DttnError, Result};
use crate::tensor::{Scalar, Tensor};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" | "fashion-mnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(DttnError::Config(format!(
                "unknown dataset '{other}' (expected mnist, fashion, or cifar10)"
            ))),
        }
    }

    /// Subdirectory under the data root holding this dataset's files.
    pub fn subdir(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DatasetKind::Cifar10 => 3,
            _ => 1,
        }
    }

    pub fn classes(&self) -> usize {
        10
    }

    /// Per-channel normalization constants (mean, std) on the 0..1 scale;
    /// the standard published values for each dataset.
    pub fn norm_stats(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DatasetKind::Mnist => (vec![0.1307], vec![0.3081]),
            DatasetKind::FashionMnist => (vec![0.2860], vec![0.3530]),
            DatasetKind::Cifar10 => (
                vec![0.4914, 0.4822, 0.4465],
                vec![0.2470, 0.2435, 0.2616],
            ),
        }
    }

    /// Horizontal flips help natural images but hurt digit classes, so
    /// they default off for the two grayscale sets.
    pub fn default_hflip(&self) -> bool {
        matches!(self, DatasetKind::Cifar10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Raw byte images plus labels, CHW per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    fn sample(&self, i: usize) -> &[u8] {
        let stride = self.c * self.h * self.w;
        &self.images[i * stride..(i + 1) * stride]
    }
}

/// Loads one split of the named dataset from `<root>/<subdir>/`.
pub fn load(kind: DatasetKind, root: &Path, split: Split) -> Result<Dataset> {
    let dir = root.join(kind.subdir());
    match kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let (images_stem, labels_stem) = match split {
                Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            };
            load_idx_pair(&dir, images_stem, labels_stem)
        }
        DatasetKind::Cifar10 => load_cifar10(&dir, split),
    }
}

/// Accepts the file either raw or gzipped (`<stem>` or `<stem>.gz`).
fn resolve(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DttnError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!(
            "no {stem} or {stem}.gz under {}; run scripts/fetch_data.py to \
             provision the datasets",
            dir.display()
        ),
    )))
}

/// Whole file, transparently gunzipped when it starts with the gzip magic.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| {
            DttnError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DttnError::Format(format!("{}: gzip: {e}", path.display())))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DttnError::Format(format!(
            "{}: file ends at byte {}, needed {} for a 4-byte field at byte {}",
            path.display(),
            bytes.len(),
            end,
            offset
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// IDX image file: big-endian magic 0x00000803, then count, rows, cols,
/// then count*rows*cols bytes.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DttnError::Format(format!(
            "{}: bad magic {magic:#010x} at byte 0 (expected {IDX_IMAGE_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(DttnError::Format(format!(
            "{}: payload is {} bytes from byte 16, header promises {} ({n} x {rows} x {cols})",
            path.display(),
            bytes.len().saturating_sub(16),
            need - 16
        )));
    }
    Ok((bytes[16..].to_vec(), n, rows, cols))
}

/// IDX label file: big-endian magic 0x00000801, count, then count bytes.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DttnError::Format(format!(
            "{}: bad magic {magic:#010x} at byte 0 (expected {IDX_LABEL_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() != need {
        return Err(DttnError::Format(format!(
            "{}: payload is {} bytes from byte 8, header promises {n}",
            path.display(),
            bytes.len().saturating_sub(8)
        )));
    }
    for (i, &l) in bytes[8..].iter().enumerate() {
        if l > 9 {
            return Err(DttnError::Format(format!(
                "{}: label {l} out of range at byte {}",
                path.display(),
                8 + i
            )));
        }
    }
    Ok(bytes[8..].to_vec())
}

fn load_idx_pair(dir: &Path, images_stem: &str, labels_stem: &str) -> Result<Dataset> {
    let (images, n, h, w) = load_idx_images(&resolve(dir, images_stem)?)?;
    let labels = load_idx_labels(&resolve(dir, labels_stem)?)?;
    if labels.len() != n {
        return Err(DttnError::Format(format!(
            "{dir:?}: {n} images but {} labels",
            labels.len()
        )));
    }
    Ok(Dataset {
        images,
        labels,
        n,
        c: 1,
        h,
        w,
    })
}

/// CIFAR-10 binary batches: records of 1 label byte + 3072 image bytes.
fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let stems: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for stem in stems {
        let path = resolve(dir, &stem)?;
        let bytes = read_bytes(&path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DttnError::Format(format!(
                "{}: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(DttnError::Format(format!(
                    "{}: label {} out of range at byte {}",
                    path.display(),
                    rec[0],
                    i * CIFAR_RECORD
                )));
            }
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images,
        labels,
        n,
        c: 3,
        h: 32,
        w: 32,
    })
}

/// Identical (seed, epoch) pairs yield identical shuffles.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0x7065726d));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// RNG stream for one epoch's augmentation draws.
pub fn augment_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0x617567))
}

fn mix(seed: u64, epoch: u64, salt: u64) -> u64 {
    // splitmix-style finalizer over the three inputs
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(salt);
    z ^= z >> 30;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 27;
    z
}

/// One sample's augmentation decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugDraw {
    pub flip: bool,
    /// shift in pixels after zero-padding by `crop_pad`, each in 0..=2*pad
    pub dy: usize,
    pub dx: usize,
}

impl AugDraw {
    pub const IDENTITY: AugDraw = AugDraw {
        flip: false,
        dy: 0,
        dx: 0,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentCfg {
    pub hflip: bool,
    pub crop_pad: usize,
}

impl AugmentCfg {
    pub fn none() -> Self {
        AugmentCfg {
            hflip: false,
            crop_pad: 0,
        }
    }

    /// Draws are consumed in batch order; identity when augmentation is off.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> AugDraw {
        let mut d = AugDraw::IDENTITY;
        if self.hflip {
            d.flip = rng.gen_bool(0.5);
        }
        if self.crop_pad > 0 {
            d.dy = rng.gen_range(0..=2 * self.crop_pad);
            d.dx = rng.gen_range(0..=2 * self.crop_pad);
        }
        d
    }
}

/// Assembles a normalized batch tensor of shape [len, c, out_h, out_w].
/// Samples smaller than the output are centered in zero padding. Each
/// `AugDraw` then reads the output through a window at offset (dy, dx)
/// into a frame padded by `crop_pad` on every side, so dy = dx = pad
/// reproduces the centered image; flips mirror columns first. Padding
/// pixels normalize to (0 - mean) / std, the value a black border takes.
pub fn build_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    out_hw: (usize, usize),
    stats: (&[f64], &[f64]),
    draws: Option<&[AugDraw]>,
    crop_pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (oh, ow) = out_hw;
    let (means, stds) = stats;
    if means.len() != ds.c || stds.len() != ds.c {
        return Err(DttnError::Dim(format!(
            "{} normalization channels for {}-channel data",
            means.len(),
            ds.c
        )));
    }
    if oh < ds.h || ow < ds.w {
        return Err(DttnError::Dim(format!(
            "output {oh}x{ow} smaller than source {}x{}",
            ds.h, ds.w
        )));
    }
    if let Some(d) = draws {
        if d.len() != indices.len() {
            return Err(DttnError::Dim(format!(
                "{} augmentation draws for {} samples",
                d.len(),
                indices.len()
            )));
        }
    }
    let (top, left) = ((oh - ds.h) / 2, (ow - ds.w) / 2);
    let mut out = Tensor::<T>::zeros(&[indices.len(), ds.c, oh, ow]);
    let mut labels = Vec::with_capacity(indices.len());
    let data = out.data_mut();
    for (b, &idx) in indices.iter().enumerate() {
        if idx >= ds.n {
            return Err(DttnError::Index(format!(
                "sample {idx} out of range for {} examples",
                ds.n
            )));
        }
        labels.push(ds.labels[idx] as usize);
        let img = ds.sample(idx);
        let draw = draws.map_or(AugDraw::IDENTITY, |d| d[b]);
        for ch in 0..ds.c {
            let mean = means[ch];
            let inv = 1.0 / stds[ch];
            let pad_value = T::from_f64((0.0 - mean) * inv);
            let plane = &mut data[((b * ds.c + ch) * oh) * ow..((b * ds.c + ch) * oh + oh) * ow];
            for v in plane.iter_mut() {
                *v = pad_value;
            }
            for sy in 0..ds.h {
                // centered placement inside the padded frame, then the window
                let oy = match (top + sy + crop_pad).checked_sub(draw.dy) {
                    Some(v) if v < oh => v,
                    _ => continue,
                };
                let row = &img[(ch * ds.h + sy) * ds.w..(ch * ds.h + sy + 1) * ds.w];
                for sx in 0..ds.w {
                    let src_x = if draw.flip { ds.w - 1 - sx } else { sx };
                    let ox = match (left + sx + crop_pad).checked_sub(draw.dx) {
                        Some(v) if v < ow => v,
                        _ => continue,
                    };
                    let px = row[src_x] as f64 / 255.0;
                    plane[oy * ow + ox] = T::from_f64((px - mean) * inv);
                }
            }
        }
    }
    Ok((out, labels))
}
