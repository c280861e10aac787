//! Little-endian container formats for tensors and model checkpoints, plus
//! PGM/PBM export for looking at images and masks.
//!
//! Tensor file (`.mdtf`):
//!
//! | bytes      | content                         |
//! |------------|---------------------------------|
//! | 4          | magic `MDTF`                    |
//! | 2          | format version (`u16`, = 1)     |
//! | 1          | rank `r` (`u8`)                 |
//! | 4·r        | extents (`u32` each)            |
//! | 4·Πextents | payload, `f32` row-major        |
//!
//! Checkpoint file (`.mdck`): magic `MDCK`, version `u16`, model kind `u8`,
//! parameter count `u32`, then per parameter a `u16` name length, the UTF-8
//! name and an embedded tensor file; finally the CRC-32 (IEEE) of every
//! preceding byte as `u32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MDTF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const TENSOR_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Epsilon,
    Classifier,
    FeatureNet,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Epsilon => 1,
            ModelKind::Classifier => 2,
            ModelKind::FeatureNet => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Epsilon),
            2 => Some(ModelKind::Classifier),
            3 => Some(ModelKind::FeatureNet),
            _ => None,
        }
    }
}

/// Named parameter table of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { path: self.path.to_path_buf() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let path = self.path.to_path_buf();
        if self.take(4)? != TENSOR_MAGIC {
            return Err(Error::BadMagic { path });
        }
        let version = self.u16()?;
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion { path, version });
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed { path: path.clone(), reason: "extent overflow".into() })?;
        let bytes = self.take(len.checked_mul(4).ok_or(Error::Truncated { path: path.clone() })?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| Error::Malformed { path, reason: e.to_string() })
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(Error::Malformed { path: path.to_path_buf(), reason: "trailing bytes".into() });
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.len());
    encode_tensor(t, &mut buf);
    write_atomic(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read(path)?, path)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(ck.kind.tag());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in &ck.params {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        encode_tensor(t, &mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let p = || path.to_path_buf();
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: p() });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: p() });
    }
    if bytes.len() >= 6 {
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { path: p(), version });
        }
    }
    if bytes.len() < 4 + 2 + 1 + 4 + 4 {
        return Err(Error::Truncated { path: p() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum { path: p() });
    }
    let mut r = Reader { buf: body, pos: 6, path };
    let kind = ModelKind::from_tag(r.u8()?)
        .ok_or_else(|| Error::Malformed { path: p(), reason: "unknown model kind".into() })?;
    let count = r.u32()? as usize;
    let mut params: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Malformed { path: p(), reason: "parameter name is not UTF-8".into() })?
            .to_string();
        if params.iter().any(|(n, _)| *n == name) {
            return Err(Error::Malformed { path: p(), reason: format!("duplicate parameter {name}") });
        }
        params.push((name, r.tensor()?));
    }
    if r.pos != body.len() {
        return Err(Error::Malformed { path: p(), reason: "trailing bytes".into() });
    }
    Ok(Checkpoint { kind, params })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read(path)?, path)
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::InvalidArgument(format!("expected a single image plane, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// 8-bit binary PGM with `[lo, hi]` mapped linearly onto `[0, 255]`.
pub fn encode_pgm(t: &Tensor, lo: f32, hi: f32) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        let u = ((v - lo) / (hi - lo) * 255.0).round();
        u.clamp(0.0, 255.0) as u8
    }));
    Ok(out)
}

/// Image in `[-1, 1]` as PGM.
pub fn save_image_pgm(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pgm(t, -1.0, 1.0)?)
}

/// Binary mask as 1-bit PBM (`P4`); set pixels are written as 1.
pub fn encode_pbm(mask: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(mask)?;
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for i in 0..h {
        let mut row = vec![0u8; row_bytes];
        for j in 0..w {
            if mask.data()[i * w + j] > 0.5 {
                row[j / 8] |= 0x80 >> (j % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(out)
}

pub fn save_mask_pbm(path: &Path, mask: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pbm(mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mem() -> &'static Path {
        Path::new("<memory>")
    }

    fn ck() -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Classifier,
            params: vec![
                ("conv0.w".into(), Tensor::from_fn(vec![2, 1, 3, 3], |i| i as f32 * 0.5)),
                ("conv0.b".into(), Tensor::from_fn(vec![2], |i| -(i as f32))),
            ],
        }
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_is_bit_identical(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, &mut buf);
            let back = decode_tensor(&buf, mem()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn tensor_layout_is_fixed() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let mut expected = b"MDTF".to_vec();
        expected.extend_from_slice(&[1, 0, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let bytes = encode_checkpoint(&ck()).unwrap();
        assert_eq!(decode_checkpoint(&bytes, mem()).unwrap(), ck());
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let mut bytes = encode_checkpoint(&ck()).unwrap();
        let i = bytes.len() - 10;
        bytes[i] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes, mem()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = encode_checkpoint(&ck()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes, mem()), Err(Error::UnsupportedVersion { version: 9, .. })));
        let mut t = Vec::new();
        encode_tensor(&Tensor::ones(vec![2]), &mut t);
        t[4] = 2;
        assert!(matches!(decode_tensor(&t, mem()), Err(Error::UnsupportedVersion { version: 2, .. })));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut t = Vec::new();
        encode_tensor(&Tensor::ones(vec![3]), &mut t);
        assert!(matches!(decode_tensor(&t[..t.len() - 1], mem()), Err(Error::Truncated { .. })));
        t[0] = b'X';
        assert!(matches!(decode_tensor(&t, mem()), Err(Error::BadMagic { .. })));
        let bytes = encode_checkpoint(&ck()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], mem()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = ck();
        c.params.push(("conv0.b".into(), Tensor::ones(vec![1])));
        assert!(encode_checkpoint(&c).is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/model.mdck");
        save_checkpoint(&p, &ck()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck());
        let tp = dir.path().join("x.mdtf");
        let t = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32 / 16.0);
        save_tensor(&tp, &t).unwrap();
        assert_eq!(load_tensor(&tp).unwrap(), t);
    }

    #[test]
    fn pgm_and_pbm_encoding() {
        let img = Tensor::new(vec![1, 1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let pgm = encode_pgm(&img, -1.0, 1.0).unwrap();
        assert_eq!(&pgm[..], b"P5\n3 1\n255\n\x00\x80\xff");
        let mask = Tensor::new(vec![1, 1, 2, 9], vec![1., 0., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        let pbm = encode_pbm(&mask).unwrap();
        assert_eq!(&pbm[..], b"P4\n9 2\n\x80\x80\x40\x00");
    }
}
