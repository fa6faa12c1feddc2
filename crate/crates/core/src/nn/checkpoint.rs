//! Model checkpoints: magic, version, JSON config, named little-endian f32
//! tensors (parameters then running statistics), CRC32 trailer.

use std::path::Path;

use super::model::{Arch, ModelConfig, SeqModel};
use super::params::Layout;
use super::scalar::Scalar;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"UWDTCK1\0";
pub const VERSION: u16 = 1;

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<T: Scalar>(out: &mut Vec<u8>, layout: &Layout, data: &[T]) {
    for spec in &layout.specs {
        put_u16(out, spec.name.len() as u16);
        out.extend_from_slice(spec.name.as_bytes());
        put_u32(out, spec.len() as u32);
        for &v in &data[spec.offset..spec.offset + spec.len()] {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
}

pub fn encode<T: Scalar>(model: &SeqModel<T>) -> Vec<u8> {
    let arch = &model.arch;
    let cfg = serde_json::to_vec(&arch.cfg).expect("config serializes");
    let mut out = Vec::with_capacity(16 + cfg.len() + 4 * (model.params.len() + model.buffers.len()));
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, (arch.params.specs.len() + arch.buffers.specs.len()) as u32);
    put_tensors(&mut out, &arch.params, &model.params);
    put_tensors(&mut out, &arch.buffers, &model.buffers);
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.data.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.data.len() - self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_tensors<T: Scalar>(c: &mut Cursor, layout: &Layout, out: &mut [T]) -> Result<()> {
    for spec in &layout.specs {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| FormatError::InvariantViolation("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::ConfigMismatch(format!("expected tensor {}, found {name}", spec.name)));
        }
        let len = c.u32()? as usize;
        if len != spec.len() {
            return Err(Error::ConfigMismatch(format!(
                "tensor {name} has {len} values, architecture needs {}",
                spec.len()
            )));
        }
        let raw = c.take(4 * len)?;
        for (dst, b) in out[spec.offset..spec.offset + len].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::c(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
    }
    Ok(())
}

/// Decodes a checkpoint; `expected` (if given) must equal the stored config.
pub fn decode<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<SeqModel<T>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC.to_vec(),
            found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
        }
        .into());
    }
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: MAGIC.len() + 6 - bytes.len(),
        }
        .into());
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut c = Cursor {
        data: body,
        pos: MAGIC.len(),
    };
    let version = c.u16()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let n = c.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(n)?)
        .map_err(|e| FormatError::InvariantViolation(format!("config JSON: {e}")))?;
    if let Some(want) = expected {
        want.check_compatible(&cfg)?;
    }
    let arch = Arch::new(cfg)?;
    let count = c.u32()? as usize;
    if count != arch.params.specs.len() + arch.buffers.specs.len() {
        return Err(Error::ConfigMismatch(format!("checkpoint holds {count} tensors")));
    }
    let mut params = vec![T::zero(); arch.params.len];
    let mut buffers = vec![T::zero(); arch.buffers.len];
    read_tensors(&mut c, &arch.params, &mut params)?;
    read_tensors(&mut c, &arch.buffers, &mut buffers)?;
    if c.pos != body.len() {
        return Err(FormatError::InvariantViolation(format!("{} trailing bytes", body.len() - c.pos)).into());
    }
    Ok(SeqModel { arch, params, buffers })
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, model: &SeqModel<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<SeqModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SeqModel<f32> {
        let mut m = SeqModel::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.buffers.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.01);
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode(&m);
        let back: SeqModel<f32> = decode(&bytes, Some(&ModelConfig::default())).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let m = model();
        let mut bytes = encode(&m);
        assert!(matches!(
            decode::<f32>(&bytes, Some(&ModelConfig::bc())),
            Err(Error::ConfigMismatch(_))
        ));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            decode::<f32>(&bytes, None),
            Err(Error::Format(FormatError::Checksum { .. }))
        ));
        assert!(matches!(
            decode::<f32>(b"NOTACKPT", None),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut v = encode(&m);
        v[8] = 9;
        assert!(matches!(
            decode::<f32>(&v, None),
            Err(Error::Format(FormatError::VersionMismatch { found: 9, .. }))
        ));
    }

    #[test]
    fn file_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model()).unwrap();
        assert_eq!(load::<f32>(&p, None).unwrap(), model());
        assert!(matches!(load::<f32>(dir.path().join("missing"), None), Err(Error::Io { .. })));
    }
}
