//! MTK1 tensor blobs.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 8            | magic `MTKTNSR1`                         |
//! | 1            | element width, 4 (f32) or 8 (f64)        |
//! | 4            | order `d` (u32)                          |
//! | 4·d          | extents (u32 each)                       |
//! | width·∏ext   | row-major IEEE-754 data                  |
//!
//! Readers reject a wrong magic, an unknown width and any trailing or
//! missing bytes.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{DenseTensor, TensorError};

pub const MAGIC: &[u8; 8] = b"MTKTNSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ElementWidth {
    F32,
    #[default]
    F64,
}

impl ElementWidth {
    pub fn bytes(self) -> usize {
        match self {
            ElementWidth::F32 => 4,
            ElementWidth::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum Mtk1Error {
    #[error("bad magic: expected MTKTNSR1")]
    BadMagic,
    #[error("unsupported element width flag {0}")]
    BadWidth(u8),
    #[error("blob length {actual} bytes, header implies {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("blob truncated inside the header")]
    TruncatedHeader,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub fn to_bytes(t: &DenseTensor, width: ElementWidth) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.order() + width.bytes() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(width.bytes() as u8);
    out.extend_from_slice(&(t.order() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match width {
        ElementWidth::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        ElementWidth::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Parses a blob, returning the tensor (widened to f64) and the stored width.
pub fn from_bytes(bytes: &[u8]) -> Result<(DenseTensor, ElementWidth), Mtk1Error> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Mtk1Error::BadMagic);
    }
    if bytes.len() < 13 {
        return Err(Mtk1Error::TruncatedHeader);
    }
    let width = match bytes[8] {
        4 => ElementWidth::F32,
        8 => ElementWidth::F64,
        other => return Err(Mtk1Error::BadWidth(other)),
    };
    let order = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let header = 13 + 4 * order;
    if bytes.len() < header {
        return Err(Mtk1Error::TruncatedHeader);
    }
    let shape: Vec<usize> = bytes[13..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + count * width.bytes();
    if bytes.len() != expected {
        return Err(Mtk1Error::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[header..];
    let data: Vec<f64> = match width {
        ElementWidth::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        ElementWidth::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((DenseTensor::new(shape, data)?, width))
}

pub fn save(path: &Path, t: &DenseTensor, width: ElementWidth) -> Result<(), Mtk1Error> {
    fs::write(path, to_bytes(t, width)).map_err(|source| Mtk1Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<DenseTensor, Mtk1Error> {
    let bytes = fs::read(path).map_err(|source| Mtk1Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = DenseTensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = to_bytes(&t, ElementWidth::F64);
        assert_eq!(&b[..8], b"MTKTNSR1");
        assert_eq!(b[8], 8);
        assert_eq!(&b[9..13], &[2, 0, 0, 0]);
        assert_eq!(&b[13..21], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[21..29], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 37);
        let b4 = to_bytes(&t, ElementWidth::F32);
        assert_eq!(b4[8], 4);
        assert_eq!(b4.len(), 29);
    }

    #[test]
    fn rejects_bad_magic_width_and_length() {
        let t = DenseTensor::ones(&[3]);
        let mut b = to_bytes(&t, ElementWidth::F64);
        assert!(matches!(from_bytes(&b[..b.len() - 1]), Err(Mtk1Error::LengthMismatch { .. })));
        let mut longer = b.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(Mtk1Error::LengthMismatch { .. })));
        b[8] = 2;
        assert!(matches!(from_bytes(&b), Err(Mtk1Error::BadWidth(2))));
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Mtk1Error::BadMagic)));
    }

    proptest! {
        #[test]
        fn round_trips(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = if shape.is_empty() {
                DenseTensor::scalar(0.375)
            } else {
                DenseTensor::randn(&shape, 1.0, &mut rng)
            };
            let (back, w) = from_bytes(&to_bytes(&t, ElementWidth::F64)).unwrap();
            prop_assert_eq!(w, ElementWidth::F64);
            prop_assert_eq!(&back, &t);
            let (narrow, _) = from_bytes(&to_bytes(&t, ElementWidth::F32)).unwrap();
            let expect = t.map(|v| v as f32 as f64);
            prop_assert_eq!(narrow, expect);
        }
    }
}
