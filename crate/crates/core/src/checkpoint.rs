//! Binary checkpoints.
//!
//! Layout (little endian): magic `R2CK`, `u32` version, `u64` length of the
//! config text followed by the text itself, then one record per tensor until
//! end of file: `u32` name length, name, `u32` rank, `u32` per dimension,
//! `f32` payload. The config text is the run configuration plus `epoch`. The
//! frequency table travels as the records `freq.link_prob` and
//! `freq.pred_prob`; the training RNG is fully determined by `seed` and
//! `epoch`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, PathContext, Result};
use crate::freq::FreqTable;
use crate::model::Model;
use crate::tensor::{ModelParams, Tensor};

pub const MAGIC: &[u8; 4] = b"R2CK";
pub const VERSION: u32 = 1;
const LINK_RECORD: &str = "freq.link_prob";
const PRED_RECORD: &str = "freq.pred_prob";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Completed training epochs.
    pub epoch: usize,
}

fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let m = &self.model;
        let text = format!("{}epoch = {}\n", m.config.to_text(), self.epoch);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        let dl = m.freq.label_count;
        push_record(&mut buf, LINK_RECORD, &[dl, dl], &m.freq.pair_link_prob);
        push_record(&mut buf, PRED_RECORD, &[dl, dl, m.freq.classes()], &m.freq.pair_pred_prob);
        for (name, t) in m.params.iter() {
            push_record(&mut buf, name, t.shape(), t.data());
        }
        buf
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("config text is not UTF-8"))?;
        let (config, extra) = RunConfig::parse_with_extra(text, &["epoch"])?;
        let epoch = extra
            .iter()
            .find(|(k, _)| k == "epoch")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| r.fail("config text lacks a valid epoch"))?;

        let mut params = ModelParams::new();
        let mut link = None;
        let mut pred = None;
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.fail("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect::<Vec<_>>();
            match name.as_str() {
                LINK_RECORD => link = Some(data),
                PRED_RECORD => pred = Some(data),
                _ => {
                    if params.contains(&name) {
                        return Err(r.fail(&format!("duplicate tensor `{name}`")));
                    }
                    let t = Tensor::new(shape, data).map_err(|e| r.fail(&e.to_string()))?;
                    params.insert(name, t.with_requires_grad(true));
                }
            }
        }
        let (Some(pair_link_prob), Some(pair_pred_prob)) = (link, pred) else {
            return Err(r.fail("frequency table records missing"));
        };
        let dl = config.d_l;
        if pair_link_prob.len() != dl * dl || pair_pred_prob.len() != dl * dl * (config.d_r + 1) {
            return Err(r.fail("frequency table size disagrees with the config"));
        }
        let freq = FreqTable {
            label_count: dl,
            predicate_count: config.d_r,
            pair_link_prob,
            pair_pred_prob,
            empty_corpus: false,
        };
        let model = Model::from_parts(config, freq, params)?;
        Ok(Checkpoint { model, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: &str) -> Error {
        Error::Parse {
            location: format!("{}@{}", self.origin, self.pos),
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail("truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
