//! Binary checkpoint format.
//!
//! ```text
//! "PCT1"  u32 version  u32 tensor_count
//! repeat tensor_count (sorted by name):
//!     u32 name_len  name (utf-8)  u32 rank  u64 dims[rank]  f64 payload[prod(dims)]
//! u32 config_len  config (utf-8 TOML echo)
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{PctError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore, config_echo: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.scalar_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    out.extend_from_slice(config_echo.as_bytes());
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PctError::Format(format!(
                "truncated {} at byte {} (wanted {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses a checkpoint into its parameters and configuration echo.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, String)> {
    let mut r = Reader::new(bytes, "checkpoint");
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(PctError::Checkpoint(format!(
            "bad magic {magic:?}, expected \"PCT1\""
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PctError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut map = BTreeMap::new();
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| PctError::Checkpoint("tensor name is not utf-8".into()))?;
        if previous.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(PctError::Checkpoint(format!("tensor `{name}` out of sorted order")));
        }
        let rank = r.u32()?;
        let (rows, cols) = match rank {
            1 => (1, r.u64()? as usize),
            2 => (r.u64()? as usize, r.u64()? as usize),
            _ => return Err(PctError::Checkpoint(format!("tensor `{name}` has unsupported rank {rank}"))),
        };
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| PctError::Checkpoint(format!("tensor `{name}` is implausibly large")))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64()?);
        }
        map.insert(name.clone(), Tensor::from_vec(rows, cols, data));
        previous = Some(name);
    }
    let len = r.u32()? as usize;
    let config = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| PctError::Checkpoint("config echo is not utf-8".into()))?;
    if !r.finished() {
        return Err(PctError::Checkpoint("trailing bytes after config echo".into()));
    }
    Ok((ParamStore::from_map(map), config))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore, config_echo: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, config_echo)).map_err(|e| PctError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, String)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(PctError::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| PctError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        PctError::Format(m) | PctError::Checkpoint(m) => PctError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{Init, ParamSpec};

    fn sample() -> ParamStore {
        let specs = vec![
            ParamSpec { name: "b".into(), rows: 1, cols: 3, init: Init::Xavier { fan_in: 1, fan_out: 3 } },
            ParamSpec { name: "a".into(), rows: 2, cols: 2, init: Init::Xavier { fan_in: 2, fan_out: 2 } },
        ];
        ParamStore::initialize(&specs, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = sample();
        let bytes = encode_checkpoint(&ps, "code_len = 8\n");
        let (back, cfg) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ps);
        assert_eq!(cfg, "code_len = 8\n");
        assert_eq!(encode_checkpoint(&back, &cfg), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode_checkpoint(&sample(), "");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(PctError::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        match decode_checkpoint(&v2).unwrap_err() {
            PctError::Checkpoint(m) => assert!(m.contains("version 2")),
            e => panic!("{e:?}"),
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn missing_file() {
        let r = load_checkpoint("/nonexistent/model.pct1");
        assert!(matches!(r, Err(PctError::MissingCheckpoint(_))));
    }
}
