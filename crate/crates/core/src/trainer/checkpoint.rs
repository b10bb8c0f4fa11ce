//! Binary checkpoint format.
//!
//! ```text
//! "CMRM" | u32 version | [u8; 32] config hash
//! u32 len | metadata JSON (sorted keys)
//! u32 count | count × tensor
//! u8 has_optimizer | [u64 step | u32 count | count × (name, m, v)]
//! u64 seed | u64 epoch | u64 batch          training cursor
//!
//! tensor = u16 name_len | name | u8 dtype | u8 trainable | u32 rank
//!          | rank × u64 dim | f64 data
//! ```
//!
//! All integers and floats are little-endian; tensors are sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::optim::Moments;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMRM";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// Position in the deterministic batch stream. Shuffles derive from
/// `(seed, epoch)`, so this fully determines the data-order generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Free-form results (accuracy, step count, parent hash...).
    pub metrics: BTreeMap<String, Value>,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub cursor: Cursor,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, params: ParamStore) -> Self {
        Self {
            cursor: Cursor {
                seed: config.seed,
                ..Cursor::default()
            },
            config,
            metrics: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    fn metadata(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serialises"),
        );
        m.insert(
            "metrics".into(),
            Value::Object(self.metrics.clone().into_iter().collect()),
        );
        Value::Object(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.extend_from_slice(&self.config.hash());
        let meta = serde_json::to_string(&self.metadata()).expect("metadata serialises");
        w.u32(meta.len() as u32);
        w.0.extend_from_slice(meta.as_bytes());
        w.u32(self.params.len() as u32);
        for (name, p) in self.params.iter() {
            w.name(name);
            w.u8(DTYPE_F64);
            w.u8(p.trainable as u8);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.floats(p.value.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                w.u32(o.moments.len() as u32);
                for (name, mo) in &o.moments {
                    w.name(name);
                    w.u64(mo.m.len() as u64);
                    w.floats(&mo.m);
                    w.floats(&mo.v);
                }
            }
        }
        w.u64(self.cursor.seed);
        w.u64(self.cursor.epoch);
        w.u64(self.cursor.batch);
        w.0
    }

    /// Parses a checkpoint. With `expected` set, a different config hash is
    /// an error unless `force`.
    pub fn from_bytes(buf: &[u8], expected: Option<&[u8; 32]>, force: bool) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if let Some(want) = expected {
            if *want != hash && !force {
                return Err(Error::Checkpoint(format!(
                    "config hash {} does not match the expected {}; pass --force to load anyway",
                    hex::encode(hash),
                    hex::encode(want)
                )));
            }
        }
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let config: RunConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        if config.hash() != hash {
            return Err(Error::Checkpoint(
                "embedded config does not match the stored hash".into(),
            ));
        }
        let metrics = match &meta["metrics"] {
            Value::Object(m) => m.clone().into_iter().collect(),
            _ => return Err(Error::Checkpoint("metadata lacks a metrics object".into())),
        };
        let mut params = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..r.u32()? {
            let name = r.name()?;
            if last.as_deref().is_some_and(|l| l >= name.as_str()) {
                return Err(Error::Checkpoint(format!("tensor {name} is out of order")));
            }
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has an unknown dtype"
                )));
            }
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has a bad trainable flag"
                    )))
                }
            };
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims.iter().product();
            let t = Tensor::new(dims, r.floats(len)?)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name.clone(), t);
            params.set_trainable(&name, trainable)?;
            last = Some(name);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let name = r.name()?;
                    let n = r.u64()? as usize;
                    let m = r.floats(n)?;
                    let v = r.floats(n)?;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimizerState { step, moments })
            }
            _ => return Err(Error::Checkpoint("bad optimizer flag".into())),
        };
        let cursor = Cursor {
            seed: r.u64()?,
            epoch: r.u64()?,
            batch: r.u64()?,
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            metrics,
            params,
            optimizer,
            cursor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&[u8; 32]>, force: bool) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, expected, force).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Byte encoding of the tensor table alone, for comparing weights
    /// while ignoring metadata.
    pub fn tensor_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        for (name, p) in self.params.iter() {
            w.name(name);
            w.floats(p.value.data());
        }
        w.0
    }
}
