//! Binary checkpoints.
//!
//! ```text
//! "MMCK0001"
//! config: u32 length + canonical config text, then its SHA-256 (32 bytes)
//! epoch: u64 (epochs completed)
//! rng: ChaCha8 seed (32 bytes), stream u64, word position u128
//! params: u32 count, then per parameter
//!     name (u16 length + utf8), group u8, decay u8, rank u8, dims u32…,
//!     values f32…, momentum f32…
//! ```
//! All integers and floats are little-endian. Parameters are stored by name;
//! loading rebuilds the network from the embedded config and requires every
//! name and shape to match.

use super::config::RunConfig;
use super::vol3d::write_atomic;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamGroup;
use crate::optim::SgdState;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MMCK0001";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub model: Model<f32>,
    pub optimizer: SgdState<f32>,
}

pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.array()?) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&config_hash(&text));
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let params = self.model.params.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (p, v) in params.iter().zip(&self.optimizer.velocity) {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.group {
                ParamGroup::Cnn => 0,
                ParamGroup::Transformer => 1,
            });
            out.push(p.decay as u8);
            out.push(p.tensor.rank() as u8);
            for &e in p.tensor.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            p.tensor.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            v.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config text is not utf-8".into()))?;
        if r.array::<32>()? != config_hash(text) {
            return Err(Error::Format("config hash mismatch".into()));
        }
        let config = RunConfig::parse(text)?;
        let epoch = r.u64()? as usize;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(r.array()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.array()?));

        let mut model = Model::<f32>::new(&config.model, 0)?;
        let mut velocity: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
        let count = r.u32()?;
        if count != model.params.len() {
            return Err(Error::Format(format!("checkpoint has {count} parameters, the config builds {}", model.params.len())));
        }
        for _ in 0..count {
            let n = r.u16()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let group = match r.u8()? {
                0 => ParamGroup::Cnn,
                1 => ParamGroup::Transformer,
                g => return Err(Error::Format(format!("{name}: unknown group code {g}"))),
            };
            let decay = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let id = model.params.find(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            let slot = &model.params.params()[id.index()];
            if slot.tensor.shape() != shape.as_slice() || slot.group != group || slot.decay != decay {
                return Err(Error::Format(format!("{name}: stored {shape:?}/{group:?} does not match the network")));
            }
            let numel = shape.iter().product();
            model.params.set(id, Tensor::new(&shape, r.f32s(numel)?)?);
            velocity[id.index()] = Some(Tensor::new(&shape, r.f32s(numel)?)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let velocity = velocity
            .into_iter()
            .map(|v| v.ok_or_else(|| Error::Format("parameter stored twice".into())))
            .collect::<Result<_>>()?;
        Ok(Checkpoint { config, epoch, rng, model, optimizer: SgdState { velocity } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn small() -> Checkpoint {
        let config = RunConfig::parse("model.base_channels = 2\nmodel.channel_cap = 8\nhead.width = 8\nhead.heads = 2\nfsad.width = 8\nfsad.heads = 2\nphantom.classes = 2\n").unwrap();
        let model = Model::<f32>::new(&config.model, 3).unwrap();
        let mut optimizer = SgdState::new(&model.params);
        optimizer.velocity.iter_mut().enumerate().for_each(|(i, v)| v.data_mut()[0] = i as f32 * 0.25 - 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        Checkpoint { config, epoch: 7, rng, model, optimizer }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = small();
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes(), b);
        assert_eq!(back.epoch, 7);
        let (mut r1, mut r2) = (c.rng.clone(), back.rng.clone());
        assert_eq!(r1.next_u64(), r2.next_u64());
        for (p, q) in c.model.params.params().iter().zip(back.model.params.params()) {
            assert_eq!(p.name, q.name);
            assert!(p.tensor.data().iter().zip(q.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let b = small().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut flipped = b.clone();
        flipped[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
