//! "SSM1" parameter files, little-endian throughout.
//!
//! ```text
//! magic "SSM1" | version u32 | payload length u64
//! descriptor length u32 | descriptor UTF-8
//! means 43 x f32 | stds 43 x f32 | clamped flags 43 x u8
//! tensor count u32
//! per tensor: name length u32, name UTF-8, rank u32, dims rank x u32, data f32
//! CRC32 of every byte between magic/version and the CRC itself
//! ```

use std::io::Write;
use std::path::Path;

use super::{NnError, ParamSet, Result, Tensor};
use crate::dataset::{NormStats, N_CHANNELS};

pub const SSM_MAGIC: [u8; 4] = *b"SSM1";
pub const SSM_VERSION: u32 = 1;

const PREFIX: usize = 4 + 4 + 8;
const CRC_BYTES: usize = 4;

/// Everything a trained model needs besides code: its architecture
/// descriptor, the dataset normalization and the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub descriptor: String,
    pub stats: NormStats,
    pub params: ParamSet<f32>,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&SSM_MAGIC);
        out.extend_from_slice(&SSM_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.stats.clamped.iter().map(|&c| c as u8));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let payload = (out.len() - PREFIX) as u64;
        out[8..PREFIX].copy_from_slice(&payload.to_le_bytes());
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected| NnError::Truncated {
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(PREFIX + CRC_BYTES));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != SSM_MAGIC {
            return Err(NnError::BadMagic(magic));
        }
        if bytes.len() < 8 {
            return Err(truncated(PREFIX + CRC_BYTES));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SSM_VERSION {
            return Err(NnError::UnsupportedVersion(version));
        }
        if bytes.len() < PREFIX {
            return Err(truncated(PREFIX + CRC_BYTES));
        }
        let payload = u64::from_le_bytes(bytes[8..PREFIX].try_into().unwrap());
        let expected = usize::try_from(payload)
            .ok()
            .and_then(|p| p.checked_add(PREFIX + CRC_BYTES))
            .ok_or_else(|| NnError::Corrupt(format!("payload length {payload}")))?;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(NnError::Corrupt(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - expected
            )));
        }
        let body_end = expected - CRC_BYTES;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[8..body_end]);
        if stored != computed {
            return Err(NnError::Checksum { stored, computed });
        }

        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: PREFIX,
        };
        let desc_len = r.u32()? as usize;
        let descriptor = r.utf8(desc_len, "descriptor")?;
        let mut stats = NormStats {
            mean: [0.0; N_CHANNELS],
            std: [0.0; N_CHANNELS],
            clamped: [false; N_CHANNELS],
        };
        for v in stats.mean.iter_mut().chain(stats.std.iter_mut()) {
            *v = r.f32()?;
        }
        for (c, &b) in stats.clamped.iter_mut().zip(r.take(N_CHANNELS)?) {
            *c = match b {
                0 => false,
                1 => true,
                _ => return Err(NnError::Corrupt(format!("clamped flag {b}"))),
            };
        }
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len, "tensor name")?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(NnError::Corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 4)
                .ok_or_else(|| NnError::Corrupt(format!("tensor `{name}` dims {dims:?} exceed the file")))?;
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            params
                .insert(&name, Tensor::new(dims, data)?)
                .map_err(|e| NnError::Corrupt(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(NnError::Corrupt(format!(
                "{} unparsed payload bytes",
                r.remaining()
            )));
        }
        Ok(ModelFile {
            descriptor,
            stats,
            params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(NnError::Corrupt("record runs past the payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        std::str::from_utf8(self.take(n)?)
            .map(str::to_owned)
            .map_err(|e| NnError::Corrupt(format!("{what} is not UTF-8: {e}")))
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a sibling `.partial` file that is renamed into place.
pub fn save_params(model: &ModelFile, path: &Path) -> Result<()> {
    let bytes = model.to_bytes();
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(path)(e)
    })
}

pub fn load_params(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    ModelFile::from_bytes(&bytes)
}
