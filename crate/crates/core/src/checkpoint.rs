//! Checkpoint container: a small self-describing binary holding a config
//! text blob plus named tensors. Layout, all integers little-endian:
//!
//! ```text
//! "DTTN"  u16 version=1  u8 dtype tag
//! u32 config_len  config bytes (UTF-8)
//! u32 tensor_count
//!   per tensor: u32 name_len, name bytes, u32 rank, u64 extents...,
//!               u64 absolute payload offset
//! payloads in manifest order, scalars little-endian
//! ```
//!
//! Saving the result of a load reproduces the original file byte for byte.

use std::path::Path;

use crate::error::{DttnError, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"DTTN";
const VERSION: u16 = 1;

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    config: &str,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.push(T::DTYPE.tag());
    head.extend_from_slice(&(config.len() as u32).to_le_bytes());
    head.extend_from_slice(config.as_bytes());
    head.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    let manifest_len: usize = tensors
        .iter()
        .map(|(name, t)| 4 + name.len() + 4 + 8 * t.rank() + 8)
        .sum();
    let mut offset = (head.len() + manifest_len) as u64;
    let mut payload = Vec::new();
    for (name, t) in tensors {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            head.extend_from_slice(&(e as u64).to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * T::byte_width()) as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    head.extend_from_slice(&payload);
    std::fs::write(path, head).map_err(|e| {
        DttnError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if end > self.bytes.len() {
            return Err(DttnError::Format(format!(
                "{}: file ends at byte {}, needed {n} bytes for {what} at byte {}",
                self.path.display(),
                self.bytes.len(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Dtype stored in a checkpoint without reading the tensors.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = read_file(path)?;
    parse_header(&bytes, path).map(|(d, _)| d)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        DttnError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn parse_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(Dtype, Cursor<'a>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DttnError::Format(format!(
            "{}: bad magic {magic:02x?} at byte 0 (expected \"DTTN\")",
            path.display()
        )));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(DttnError::Format(format!(
            "{}: unsupported version {version} at byte 4 (expected {VERSION})",
            path.display()
        )));
    }
    let tag = cur.take(1, "dtype tag")?[0];
    let dtype = Dtype::from_tag(tag).map_err(|_| {
        DttnError::Format(format!(
            "{}: unknown dtype tag {tag} at byte 6",
            path.display()
        ))
    })?;
    Ok((dtype, cur))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = read_file(path)?;
    let (dtype, mut cur) = parse_header(&bytes, path)?;
    if dtype != T::DTYPE {
        return Err(DttnError::Format(format!(
            "{}: checkpoint holds {dtype:?} tensors, load requested {:?}; \
             re-run with the matching dtype",
            path.display(),
            T::DTYPE
        )));
    }
    let config_len = cur.u32("config length")? as usize;
    let config = std::str::from_utf8(cur.take(config_len, "config blob")?)
        .map_err(|e| {
            DttnError::Format(format!("{}: config blob is not UTF-8: {e}", path.display()))
        })?
        .to_string();
    let count = cur.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|e| {
                DttnError::Format(format!(
                    "{}: tensor {i} name is not UTF-8: {e}",
                    path.display()
                ))
            })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(DttnError::Format(format!(
                "{}: tensor '{name}' claims rank {rank}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let offset = cur.u64("payload offset")? as usize;
        manifest.push((name, shape, offset));
    }
    let mut expected = cur.pos;
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        if offset != expected {
            return Err(DttnError::Format(format!(
                "{}: tensor '{name}' payload offset {offset} does not match \
                 the running layout position {expected}",
                path.display()
            )));
        }
        let len: usize = shape.iter().product();
        let nbytes = len * T::byte_width();
        let mut payload = Cursor {
            bytes: &bytes,
            pos: offset,
            path,
        };
        let raw = payload.take(nbytes, "tensor payload")?;
        let data: Vec<T> = raw
            .chunks_exact(T::byte_width())
            .map(T::from_le_slice)
            .collect();
        expected = offset + nbytes;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if expected != bytes.len() {
        return Err(DttnError::Format(format!(
            "{}: {} trailing bytes after the last payload at byte {expected}",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok(Checkpoint { config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(dir: &tempfile::TempDir, name: &str) -> std::path::PathBuf {
        dir.path().join(name)
    }

    #[test]
    fn golden_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmpfile(&dir, "g.ckpt");
        let t = Tensor::<f32>::new(vec![2], vec![1.0, 2.0]).unwrap();
        save(&p, "a=1\n", &[("t".to_string(), &t)]).unwrap();
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"DTTN");
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(1); // f32 tag
        want.extend_from_slice(&4u32.to_le_bytes());
        want.extend_from_slice(b"a=1\n");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(b"t");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&44u64.to_le_bytes()); // header 19 + manifest 25
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(std::fs::read(&p).unwrap(), want);
    }

    #[test]
    fn round_trip_preserves_bytes_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = tmpfile(&dir, "a.ckpt");
        let p2 = tmpfile(&dir, "b.ckpt");
        let t1 = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64).sin() * 1e3);
        let t2 = Tensor::<f64>::from_fn(&[5], |i| -(i as f64) / 7.0);
        save(
            &p1,
            "model.variant = desk\ntrainer.completed_epochs = 2\n",
            &[("w".to_string(), &t1), ("b".to_string(), &t2)],
        )
        .unwrap();
        let ck = load::<f64>(&p1).unwrap();
        assert_eq!(ck.tensors.len(), 2);
        assert_eq!(ck.tensor("w").unwrap(), &t1);
        assert_eq!(ck.tensor("b").unwrap(), &t2);
        assert!(ck.config.contains("completed_epochs = 2"));
        let refs: Vec<(String, &Tensor<f64>)> = ck
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        save(&p2, &ck.config, &refs).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn cross_precision_load_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmpfile(&dir, "f32.ckpt");
        let t = Tensor::<f32>::from_fn(&[2, 2], |i| i as f32);
        save(&p, "", &[("t".to_string(), &t)]).unwrap();
        assert_eq!(peek_dtype(&p).unwrap(), Dtype::F32);
        let err = load::<f64>(&p).unwrap_err();
        assert!(matches!(err, DttnError::Format(_)));
        assert!(err.to_string().contains("F32"), "{err}");
        assert!(load::<f32>(&p).is_ok());
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmpfile(&dir, "bad.ckpt");

        std::fs::write(&p, b"NOPE").unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");

        let t = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        save(&p, "x", &[("t".to_string(), &t)]).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 3]).unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(matches!(err, DttnError::Format(_)));
        assert!(err.to_string().contains("payload"), "{err}");

        let mut versioned = full.clone();
        versioned[4] = 9;
        std::fs::write(&p, &versioned).unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");

        let mut trailing = full;
        trailing.push(0);
        std::fs::write(&p, &trailing).unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
