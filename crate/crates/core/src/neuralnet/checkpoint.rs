//! Binary checkpoint format.
//!
//! ```text
//! magic      "SCKPT1" [flag] "\n"     flag byte 'D' marks a learned denoiser
//! u32 LE     layer_count
//! per layer  u32 in_dim, u32 out_dim,
//!            out*in f64 LE weights (row-major), out f64 LE biases
//! ```

use std::path::Path;

use super::{Dense, Mlp};
use crate::error::{CheckpointError, Error, Result};
use crate::fsutil;

const MAGIC_PREFIX: &[u8] = b"SCKPT";
const VERSION: u8 = b'1';
const DENOISER_FLAG: u8 = b'D';

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Denoiser,
}

pub fn to_checkpoint_bytes(model: &Mlp, kind: CheckpointKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC_PREFIX);
    out.push(VERSION);
    if kind == CheckpointKind::Denoiser {
        out.push(DENOISER_FLAG);
    }
    out.push(b'\n');
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
        for v in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let len = n.checked_mul(8).ok_or(CheckpointError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<(Mlp, CheckpointKind), CheckpointError> {
    if bytes.len() < MAGIC_PREFIX.len() + 2 || !bytes.starts_with(MAGIC_PREFIX) {
        return Err(CheckpointError::BadMagic);
    }
    let version = bytes[MAGIC_PREFIX.len()];
    if !version.is_ascii_digit() {
        return Err(CheckpointError::BadMagic);
    }
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version - b'0'));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC_PREFIX.len() + 1,
    };
    let kind = match r.take(1)?[0] {
        b'\n' => CheckpointKind::Model,
        DENOISER_FLAG => {
            if r.take(1)?[0] != b'\n' {
                return Err(CheckpointError::BadMagic);
            }
            CheckpointKind::Denoiser
        }
        _ => return Err(CheckpointError::BadMagic),
    };
    let count = r.u32()?;
    if count == 0 {
        return Err(CheckpointError::Empty);
    }
    let mut layers: Vec<Dense> = Vec::with_capacity(count.min(1024));
    for l in 0..count {
        let in_dim = r.u32()?;
        let out_dim = r.u32()?;
        if let Some(prev) = layers.last() {
            if prev.out_dim != in_dim {
                return Err(CheckpointError::DimChain {
                    layer: l,
                    expected: in_dim,
                    got: prev.out_dim,
                });
            }
        }
        let weights = r.f64s(in_dim * out_dim)?;
        let bias = r.f64s(out_dim)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite);
        }
        layers.push(Dense {
            in_dim,
            out_dim,
            weights,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let model = Mlp::new(layers).map_err(|_| CheckpointError::Empty)?;
    Ok((model, kind))
}

pub fn save_checkpoint(model: &Mlp, kind: CheckpointKind, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &to_checkpoint_bytes(model, kind))
}

pub fn load_checkpoint(path: &Path) -> Result<(Mlp, CheckpointKind)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_checkpoint_bytes(&bytes)?)
}

pub fn save_model(model: &Mlp, path: &Path) -> Result<()> {
    save_checkpoint(model, CheckpointKind::Model, path)
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    load_checkpoint(path).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn net() -> Mlp {
        Mlp::init(&[2, 5, 3], &RngStream::new(4)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = net();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let x = [0.37, -1.21];
        let a = m.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn layout_is_as_documented() {
        let m = Mlp::new(vec![Dense::new(1, 1, vec![2.0], vec![-1.0]).unwrap()]).unwrap();
        let bytes = to_checkpoint_bytes(&m, CheckpointKind::Model);
        let mut expected = b"SCKPT1\n".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2.0f64.to_le_bytes());
        expected.extend_from_slice(&(-1.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
        let d = to_checkpoint_bytes(&m, CheckpointKind::Denoiser);
        assert!(d.starts_with(b"SCKPT1D\n"));
        assert_eq!(from_checkpoint_bytes(&d).unwrap().1, CheckpointKind::Denoiser);
    }

    #[test]
    fn structured_errors() {
        let good = to_checkpoint_bytes(&net(), CheckpointKind::Model);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_checkpoint_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut v2 = good.clone();
        v2[5] = b'2';
        assert!(matches!(from_checkpoint_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2))));

        assert!(matches!(
            from_checkpoint_bytes(&good[..good.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(from_checkpoint_bytes(&extra), Err(CheckpointError::TrailingBytes(1))));

        // second layer claims in_dim 4 while the first produces 5
        let mut chain = good.clone();
        let second = 7 + 4 + 8 + 8 * (2 * 5 + 5);
        chain[second..second + 4].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(from_checkpoint_bytes(&chain), Err(CheckpointError::DimChain { .. })));
    }
}
