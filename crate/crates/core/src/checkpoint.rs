//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "JCRN" | version u32 | echo_len u32 | echo (key=value text)
//! count u32 | count x record
//! has_state u8 | [state]
//!
//! record = name_len u32 | name | rank u32 | rank x extent u32
//!          | payload_len u64 | payload (f32 LE) | crc32 u32 (over name..payload)
//! state  = step u64 | total_steps u64 | eta_max f64 | eta_min f64 | seed u64
//!          | rng_word_pos u128 | adam_step u64
//!          | m_count u32 | records | v_count u32 | records
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamState, Schedule, TrainState};

pub const MAGIC: &[u8; 4] = b"JCRN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration echo; always holds the model keys.
    pub echo: KvMap,
    pub params: ParamStore<f32>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: ParamStore<f32>, state: Option<TrainState>) -> Self {
        Checkpoint {
            echo: config.to_kv(),
            params,
            state,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::default().updated_from(&self.echo)
    }

    /// The training state, required for resuming.
    pub fn require_state(&self) -> Result<&TrainState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::config("checkpoint has no training state and cannot be resumed"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let echo = self.echo.render();
        put_u32(&mut w, len_u32(echo.len())?);
        w.extend_from_slice(echo.as_bytes());
        write_store(&mut w, &self.params)?;
        match &self.state {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_u64(&mut w, s.step as u64);
                put_u64(&mut w, s.schedule.total_steps as u64);
                w.extend_from_slice(&s.schedule.eta_max.to_le_bytes());
                w.extend_from_slice(&s.schedule.eta_min.to_le_bytes());
                put_u64(&mut w, s.seed);
                w.extend_from_slice(&s.rng_word_pos.to_le_bytes());
                put_u64(&mut w, s.adam.step);
                write_store(&mut w, &s.adam.m)?;
                write_store(&mut w, &s.adam.v)?;
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let echo_len = r.u32()? as usize;
        let at = r.pos;
        let echo = std::str::from_utf8(r.take(echo_len)?)
            .map_err(|_| Error::format(at as u64, "config echo is not UTF-8"))?;
        let echo = KvMap::parse(echo).map_err(|e| match e {
            Error::Format { offset, detail } => Error::format(at as u64 + offset, detail),
            other => other,
        })?;
        let params = r.store()?;
        let at = r.pos;
        let state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()? as usize;
                let total_steps = r.u64()? as usize;
                let eta_max = f64::from_le_bytes(r.array()?);
                let eta_min = f64::from_le_bytes(r.array()?);
                let seed = r.u64()?;
                let rng_word_pos = u128::from_le_bytes(r.array()?);
                let adam_step = r.u64()?;
                let m = r.store()?;
                let v = r.store()?;
                Some(TrainState {
                    step,
                    schedule: Schedule {
                        eta_max,
                        eta_min,
                        total_steps,
                    },
                    seed,
                    rng_word_pos,
                    adam: AdamState { step: adam_step, m, v },
                })
            }
            flag => return Err(Error::format(at as u64, format!("invalid state flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { echo, params, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { offset, detail } => Error::format(offset, format!("{}: {detail}", path.display())),
            other => other,
        })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::config(format!("length {n} does not fit the checkpoint format")))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_store(w: &mut Vec<u8>, store: &ParamStore<f32>) -> Result<()> {
    put_u32(w, len_u32(store.len())?);
    for (name, t) in store.iter() {
        let start = w.len();
        put_u32(w, len_u32(name.len())?);
        w.extend_from_slice(name.as_bytes());
        put_u32(w, len_u32(t.rank())?);
        for &e in t.shape() {
            put_u32(w, len_u32(e)?);
        }
        put_u64(w, (t.numel() * 4) as u64);
        for v in t.data() {
            w.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&w[start..]);
        put_u32(w, crc);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!("unexpected end of file: need {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn store(&mut self) -> Result<ParamStore<f32>> {
        let count = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let start = self.pos;
            let name_len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| Error::format(start as u64 + 4, "tensor name is not UTF-8"))?
                .to_string();
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let at = self.pos;
            let payload_len = self.u64()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::format(at as u64, format!("extent overflow in `{name}`")))?;
            if payload_len != (numel * 4) as u64 {
                return Err(Error::format(
                    at as u64,
                    format!("`{name}`: payload of {payload_len} bytes does not match shape {shape:?}"),
                ));
            }
            let payload = self.take(numel * 4)?;
            let crc_at = self.pos;
            let stored = self.u32()?;
            if crc32fast::hash(&self.bytes[start..crc_at]) != stored {
                return Err(Error::format(crc_at as u64, format!("`{name}`: record checksum mismatch")));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            store
                .insert(&name, tensor)
                .map_err(|_| Error::format(start as u64, format!("duplicate tensor name `{name}`")))?;
        }
        Ok(store)
    }
}
