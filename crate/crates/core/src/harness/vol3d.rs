//! Little-endian volume files: intensities (f32, C channels) and labels (u16).
//!
//! ```text
//! "V3D1" | dtype u8 (0 = f32, 1 = u16) | D H W as u32 | [C as u32 if f32] | payload
//! ```
//! The f32 payload is channel-major, then D, H, W row-major.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"V3D1";

#[derive(Clone, Debug, PartialEq)]
pub enum VolData {
    F32 { channels: usize, values: Vec<f32> },
    U16(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vol3d {
    pub extents: [usize; 3],
    pub data: VolData,
}

fn voxels(extents: [usize; 3]) -> usize {
    extents.iter().product()
}

impl Vol3d {
    pub fn intensity(extents: [usize; 3], channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || voxels(extents) == 0 || values.len() != channels * voxels(extents) {
            return Err(Error::Format(format!("{} values for {channels} channels of {extents:?}", values.len())));
        }
        Ok(Vol3d { extents, data: VolData::F32 { channels, values } })
    }

    pub fn labels(extents: [usize; 3], values: Vec<u16>) -> Result<Self> {
        if voxels(extents) == 0 || values.len() != voxels(extents) {
            return Err(Error::Format(format!("{} labels for {extents:?}", values.len())));
        }
        Ok(Vol3d { extents, data: VolData::U16(values) })
    }

    pub fn as_f32(&self) -> Result<(usize, &[f32])> {
        match &self.data {
            VolData::F32 { channels, values } => Ok((*channels, values)),
            VolData::U16(_) => Err(Error::Format("expected an intensity volume, found labels".into())),
        }
    }

    pub fn as_labels(&self) -> Result<&[u16]> {
        match &self.data {
            VolData::U16(v) => Ok(v),
            VolData::F32 { .. } => Err(Error::Format("expected a label volume, found intensities".into())),
        }
    }

    /// 1×C×D×H×W network input.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let (c, v) = self.as_f32()?;
        let [d, h, w] = self.extents;
        Tensor::new(&[1, c, d, h, w], v.iter().map(|&x| T::c(x as f64)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * voxels(self.extents));
        out.extend_from_slice(MAGIC);
        out.push(match self.data {
            VolData::F32 { .. } => 0,
            VolData::U16(_) => 1,
        });
        for e in self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match &self.data {
            VolData::F32 { channels, values } => {
                out.extend_from_slice(&(*channels as u32).to_le_bytes());
                values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            VolData::U16(values) => values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("not a V3D1 volume: {m}"));
        if bytes.len() < 17 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let u32_at = |o: usize| -> Result<usize> {
            let b = bytes.get(o..o + 4).ok_or_else(|| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        let extents = [u32_at(5)?, u32_at(9)?, u32_at(13)?];
        let n = voxels(extents);
        match bytes[4] {
            0 => {
                let channels = u32_at(17)?;
                let payload = &bytes[21..];
                if payload.len() != 4 * channels * n {
                    return Err(bad(&format!("payload is {} bytes, header implies {}", payload.len(), 4 * channels * n)));
                }
                let values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Vol3d::intensity(extents, channels, values)
            }
            1 => {
                let payload = &bytes[17..];
                if payload.len() != 2 * n {
                    return Err(bad(&format!("payload is {} bytes, header implies {}", payload.len(), 2 * n)));
                }
                Vol3d::labels(extents, payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
            }
            d => Err(bad(&format!("unknown dtype code {d}"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes next to `path` and renames over it, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(res?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = Vol3d::labels([1, 2, 3], vec![0, 1, 2, 3, 4, 65535]).unwrap();
        let b = v.to_bytes();
        assert_eq!(&b[..5], b"V3D1\x01");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(b.len(), 17 + 12);
        assert_eq!(&b[b.len() - 2..], &[0xff, 0xff]);
        let f = Vol3d::intensity([1, 1, 2], 2, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = f.to_bytes();
        assert_eq!(b[4], 0);
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(Vol3d::from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn rejects_malformed() {
        let b = Vol3d::labels([2, 2, 2], vec![1; 8]).unwrap().to_bytes();
        assert!(Vol3d::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Vol3d::from_bytes(b"V3D2").is_err());
        let mut wrong = b.clone();
        wrong[4] = 7;
        assert!(Vol3d::from_bytes(&wrong).is_err());
        assert!(Vol3d::labels([2, 2, 2], vec![0; 7]).is_err());
        assert!(Vol3d::intensity([2, 2, 2], 0, vec![]).is_err());
    }
}
