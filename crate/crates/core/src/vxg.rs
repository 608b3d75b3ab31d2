//! VXG1 voxel files: `b"VXG1"`, then little-endian `u32` version, C, Dx, Dy, Dz,
//! then `C·Dx·Dy·Dz` little-endian `f32` in `(c, x, y, z)` row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VXG1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Format(format!("VXG1 stores C×Dx×Dy×Dz volumes, got shape {s:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    for v in [VERSION as usize, s[0], s[1], s[2], s[3]] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing VXG1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != VERSION as usize {
        return Err(Error::Format(format!("unsupported VXG version {}", word(0))));
    }
    let shape = [word(1), word(2), word(3), word(4)];
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let expected = n.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {} bytes, file has {}",
            expected.map_or("too many".into(), |e| e.to_string()),
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode(t)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}
