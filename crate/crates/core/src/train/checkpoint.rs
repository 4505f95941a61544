//! Binary checkpoints (`MMTC`), little-endian throughout:
//!
//! ```text
//! magic "MMTC" | u32 version
//! u32 len | config text (canonical key = value form)
//! u64 epoch | u64 step
//! rng: [u8; 32] seed | u64 stream | u128 word position
//! u32 entries | per entry: u32 len, name, u32 rows, u32 cols, u64 offset
//! u64 n | n × f64 parameters
//! f64 beta1 | f64 beta2 | f64 eps | u64 t | n × f64 m | n × f64 v
//! ```
//!
//! Nothing else is stored, so `save(load(save(x))) == save(x)` byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamStore};

pub const MAGIC: &[u8; 4] = b"MMTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub adam: Adam,
}

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn put_len(w: &mut impl Write, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large for checkpoint")))?;
    put_u32(w, n)
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn take_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn take_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r)?))
}

fn take_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

fn take_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    Ok(v)
}

fn take_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let bytes = take_bytes(r, n.checked_mul(8).ok_or_else(|| Error::Format("bad length".into()))?)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn take_string(r: &mut impl Read) -> Result<String> {
    let n = take_u32(r)? as usize;
    String::from_utf8(take_bytes(r, n)?).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        let text = self.config.to_text();
        put_len(w, text.len(), "config")?;
        w.write_all(text.as_bytes())?;
        put_u64(w, self.epoch)?;
        put_u64(w, self.step)?;
        w.write_all(&self.rng.seed)?;
        put_u64(w, self.rng.stream)?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let entries = self.params.entries();
        put_len(w, entries.len(), "parameter table")?;
        for e in entries {
            put_len(w, e.name.len(), "parameter name")?;
            w.write_all(e.name.as_bytes())?;
            put_len(w, e.rows, "rows")?;
            put_len(w, e.cols, "cols")?;
            put_u64(w, e.offset as u64)?;
        }
        let flat = self.params.flat();
        put_u64(w, flat.len() as u64)?;
        put_f64s(w, flat)?;
        put_f64s(w, &[self.adam.beta1, self.adam.beta2, self.adam.eps])?;
        put_u64(w, self.adam.t)?;
        if self.adam.m.len() != flat.len() || self.adam.v.len() != flat.len() {
            return Err(Error::shape("Checkpoint::write", format!("{} moments", flat.len()), format!("{}", self.adam.m.len())));
        }
        put_f64s(w, &self.adam.m)?;
        put_f64s(w, &self.adam.v)?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        if &take::<4>(r)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = take_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::parse(&take_string(r)?)?;
        let epoch = take_u64(r)?;
        let step = take_u64(r)?;
        let rng = RngState {
            seed: take(r)?,
            stream: take_u64(r)?,
            word_pos: u128::from_le_bytes(take(r)?),
        };
        let n_entries = take_u32(r)? as usize;
        let mut entries = Vec::with_capacity(n_entries.min(4096));
        for _ in 0..n_entries {
            entries.push(ParamEntry {
                name: take_string(r)?,
                rows: take_u32(r)? as usize,
                cols: take_u32(r)? as usize,
                offset: take_u64(r)? as usize,
            });
        }
        let n = take_u64(r)? as usize;
        let data = take_f64s(r, n)?;
        let params =
            ParamStore::from_parts(entries, data).ok_or_else(|| Error::Format("parameter table does not match data".into()))?;
        let (beta1, beta2, eps) = (take_f64(r)?, take_f64(r)?, take_f64(r)?);
        let t = take_u64(r)?;
        let m = take_f64s(r, n)?;
        let v = take_f64s(r, n)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            epoch,
            step,
            rng,
            params,
            adam: Adam { beta1, beta2, eps, t, m, v },
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    /// Writes to a temporary sibling and renames, so an existing file is
    /// replaced only by a complete checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}
