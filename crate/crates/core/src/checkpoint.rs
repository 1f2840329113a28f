//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "MSSD" | version u32 | config_len u32 | config text | step u64
//! | state records | adam_t u64 | moment records | crc32 u32
//! ```
//!
//! A record section is `count u32` followed by, per record, `name_len u32 |
//! name | kind u8 | rank u32 | dims u64… | f32 values`. The checksum covers
//! every preceding byte.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{EntryKind, NetworkState};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSSD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps completed when the checkpoint was taken.
    pub step: u64,
    pub state: NetworkState<f32>,
    pub adam: Adam<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, kind: EntryKind, t: &Tensor<f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(match kind {
        EntryKind::Param => 0,
        EntryKind::Buffer => 1,
    });
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        let text = self.config.to_text();
        put_u32(&mut buf, text.len() as u32);
        buf.extend_from_slice(text.as_bytes());
        put_u64(&mut buf, self.step);
        put_u32(&mut buf, self.state.len() as u32);
        for (name, e) in self.state.iter() {
            put_record(&mut buf, name, e.kind, &e.tensor);
        }
        put_u64(&mut buf, self.adam.t);
        put_u32(&mut buf, 2 * self.adam.moments.len() as u32);
        for (name, (m, v)) in &self.adam.moments {
            put_record(&mut buf, &format!("m:{name}"), EntryKind::Buffer, m);
            put_record(&mut buf, &format!("v:{name}"), EntryKind::Buffer, v);
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (file is corrupt)".into()));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let step = r.u64()?;
        let mut state = NetworkState::new();
        for _ in 0..r.u32()? {
            let (name, kind, t) = r.record()?;
            state.insert(name, kind, t)?;
        }
        let mut adam = Adam::new(config.optim);
        adam.t = r.u64()?;
        let count = r.u32()? as usize;
        if count % 2 != 0 {
            return Err(Error::Checkpoint("unpaired optimizer moments".into()));
        }
        let mut moments = IndexMap::new();
        for _ in 0..count / 2 {
            let (mn, _, m) = r.record()?;
            let (vn, _, v) = r.record()?;
            let name = mn
                .strip_prefix("m:")
                .filter(|n| vn.strip_prefix("v:") == Some(*n))
                .ok_or_else(|| Error::Checkpoint(format!("malformed moment records {mn:?}/{vn:?}")))?;
            moments.insert(name.to_string(), (m, v));
        }
        adam.moments = moments;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            state,
            adam,
        })
    }

    /// Writes via a temporary file and rename so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn record(&mut self) -> Result<(String, EntryKind, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let kind = match self.take(1)?[0] {
            0 => EntryKind::Param,
            1 => EntryKind::Buffer,
            k => return Err(Error::Checkpoint(format!("{name}: unknown record kind {k}"))),
        };
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, kind, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;

    fn small() -> Checkpoint {
        let mut config = RunConfig::desk();
        config.model.base_channels = 2;
        config.model.input_size = (32, 32);
        config.data.synthetic.size = (32, 32);
        let net = Network::new(&config.model).unwrap();
        let state = net.init_state(3).unwrap();
        let mut adam = Adam::new(config.optim);
        let grads = state.params().map(|(n, t)| (n.to_string(), t.map(|v| v * 0.5))).collect();
        let mut stepped = state.clone();
        adam.step(&mut stepped, &grads, 1e-3).unwrap();
        Checkpoint {
            config,
            step: 1,
            state: stepped,
            adam,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = small().to_bytes();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found, .. }) if found == VERSION + 1
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = small().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE00000000").is_err());
    }
}
