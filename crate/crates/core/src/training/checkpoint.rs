//! Binary checkpoint: magic `CRC1`, little-endian, a `u32` section count,
//! then per section a `u32` name length, the name, a `u64` payload length
//! and the payload. Tensors are stored as `u32` rank, `u32` dims, `f64`
//! values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::init::{rng_from_seed, CrcRng};
use crate::layers::Params;
use crate::memory::MemoryPool;
use crate::numerics::Tensor;

use super::adam::AdamState;
use super::config::TrainConfig;
use super::model::CrcParams;

pub const MAGIC: &[u8; 4] = b"CRC1";

/// Complete training state; enough to score or to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: CrcParams,
    pub memory: MemoryPool,
    pub clusters: Option<ClusterModel>,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: CrcRng,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Seeded initialization, before any epoch.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let params = CrcParams::new(config, &mut rng)?;
        let memory = MemoryPool::random(config.channels(), config.memory_entries, &mut rng)?;
        let adam = AdamState::new(params.tensors());
        Ok(Self {
            config: config.clone(),
            params,
            memory,
            clusters: None,
            epoch: 0,
            rng,
            adam,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", self.config.to_text().into_bytes()),
            ("params", tensors_payload(self.params.tensors())),
            ("memory", tensors_payload([self.memory.matrix()])),
        ];
        if let Some(c) = &self.clusters {
            sections.push(("clusters", tensors_payload([c.centers()])));
        }
        let mut state = Vec::new();
        state.extend_from_slice(&self.epoch.to_le_bytes());
        state.extend_from_slice(&self.rng.get_seed());
        state.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        state.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        sections.push(("state", state));
        let mut adam = self.adam.t.to_le_bytes().to_vec();
        adam.extend(tensors_payload(self.adam.m.iter().chain(&self.adam.v)));
        sections.push(("adam", adam));

        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, 0);
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad checkpoint magic".into(),
            });
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.abs();
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at, "section name is not UTF-8"))?
                .to_string();
            let size = r.u64()?;
            let start = r.abs();
            let payload = r.take(usize::try_from(size).map_err(|_| r.error_at(start, "section too large"))?)?;
            sections.push((name, start, payload));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.abs(), "trailing bytes after last section"));
        }
        let find = |name: &str| {
            sections
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, off, p)| Reader::new(p, *off))
        };
        let missing = |name: &str| Error::Format {
            offset: bytes.len() as u64,
            detail: format!("missing section {name:?}"),
        };

        let mut cr = find("config").ok_or_else(|| missing("config"))?;
        let text = std::str::from_utf8(cr.rest()).map_err(|_| cr.error_at(cr.base, "config is not UTF-8"))?;
        let config = TrainConfig::from_text(text)?;

        let mut ck = Checkpoint::init(&config)?;
        let mut pr = find("params").ok_or_else(|| missing("params"))?;
        for slot in ck.params.tensors_mut() {
            let at = pr.abs();
            let t = pr.tensor()?;
            if t.shape() != slot.shape() {
                return Err(pr.error_at(at, "parameter shape does not match config"));
            }
            *slot = t;
        }
        pr.finish()?;

        let mut mr = find("memory").ok_or_else(|| missing("memory"))?;
        let at = mr.abs();
        ck.memory = MemoryPool::from_matrix(mr.tensor()?).map_err(|e| mr.error_at(at, &e.to_string()))?;
        mr.finish()?;

        if let Some(mut cl) = find("clusters") {
            let at = cl.abs();
            let model = ClusterModel::new(cl.tensor()?).map_err(|e| cl.error_at(at, &e.to_string()))?;
            cl.finish()?;
            ck.clusters = Some(model);
        }

        let mut sr = find("state").ok_or_else(|| missing("state"))?;
        ck.epoch = sr.u64()?;
        let seed: [u8; 32] = sr.take(32)?.try_into().expect("32 bytes");
        let stream = sr.u64()?;
        let word_pos = u128::from_le_bytes(sr.take(16)?.try_into().expect("16 bytes"));
        sr.finish()?;
        let mut rng = CrcRng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        ck.rng = rng;

        let mut ar = find("adam").ok_or_else(|| missing("adam"))?;
        ck.adam.t = ar.u64()?;
        for slot in ck.adam.m.iter_mut().chain(ck.adam.v.iter_mut()) {
            let at = ar.abs();
            let t = ar.tensor()?;
            if t.shape() != slot.shape() {
                return Err(ar.error_at(at, "optimizer moment shape does not match config"));
            }
            *slot = t;
        }
        ar.finish()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn tensors_payload<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Cursor over a byte slice that reports absolute offsets on error.
struct Reader<'a> {
    bytes: &'a [u8],
    base: u64,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: u64) -> Self {
        Self { bytes, base, pos: 0 }
    }

    fn abs(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn error_at(&self, offset: u64, detail: &str) -> Error {
        Error::Format {
            offset,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.base + self.bytes.len() as u64,
                detail: format!("truncated: need {n} bytes at offset {}", self.abs()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.abs();
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(self.error_at(at, &format!("unsupported tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count.checked_mul(8).ok_or_else(|| self.error_at(at, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| self.error_at(at, &e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error_at(self.abs(), "unexpected bytes at end of section"));
        }
        Ok(())
    }
}
