//! "SSD1" binary layout, little-endian throughout.
//!
//! ```text
//! magic "SSD1" | version u32 | scenario u8 | has_vision u8 | reserved u16
//! seed u64 | sample count u32 | config length u32 | config UTF-8 bytes
//! means 43 x f32 | stds 43 x f32
//! records: index u32, action 3 x f32, arm_q 3 x f32, finger_q 20 x f32,
//!          forces 20 x f32, [frame 12288 x u8]
//! CRC32 of every byte between the magic/version and the CRC itself
//! ```

use std::io::Write;
use std::path::Path;

use super::stats::N_CHANNELS;
use super::{compute_norm_stats, Dataset, DatasetError, Sample, Scenario, N_JOINTS};
use crate::render::FRAME_LEN;

pub const MAGIC: [u8; 4] = *b"SSD1";
pub const FORMAT_VERSION: u32 = 1;

const FIXED_HEADER: usize = 4 + 4 + 1 + 1 + 2 + 8 + 4 + 4;
const STATS_BYTES: usize = 2 * N_CHANNELS * 4;
const CRC_BYTES: usize = 4;

pub fn header_size(config_len: usize) -> usize {
    FIXED_HEADER + config_len + STATS_BYTES
}

pub fn record_size(has_vision: bool) -> usize {
    4 + (3 + 3 + 2 * N_JOINTS) * 4 + if has_vision { FRAME_LEN } else { 0 }
}

/// Exact size of a file holding `n` samples.
pub fn file_size(config_len: usize, n: usize, has_vision: bool) -> usize {
    header_size(config_len) + n * record_size(has_vision) + CRC_BYTES
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(file_size(ds.config.len(), ds.len(), ds.has_vision));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ds.scenario.code());
    out.push(ds.has_vision as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.config.len() as u32).to_le_bytes());
    out.extend_from_slice(ds.config.as_bytes());
    for v in ds.stats.mean.iter().chain(&ds.stats.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        out.extend_from_slice(&s.index.to_le_bytes());
        for v in s.action.iter().chain(&s.arm_q).chain(&s.finger_q).chain(&s.forces) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(f) = &s.frame {
            out.extend_from_slice(f);
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f32s<const N: usize>(&mut self) -> [f32; N] {
        std::array::from_fn(|_| f32::from_le_bytes(self.take(4).try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let truncated = |expected| DatasetError::Truncated {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(FIXED_HEADER));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    if bytes.len() < FIXED_HEADER {
        return Err(truncated(FIXED_HEADER));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let scenario_code = r.take(1)[0];
    let vision_flag = r.take(1)[0];
    r.take(2);
    let seed = u64::from_le_bytes(r.take(8).try_into().unwrap());
    let n = r.u32() as usize;
    let config_len = r.u32() as usize;
    let has_vision = vision_flag != 0;
    let expected = file_size(config_len, n, has_vision);
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(DatasetError::Corrupt(format!(
            "{} trailing bytes after the checksum",
            bytes.len() - expected
        )));
    }
    let body_end = expected - CRC_BYTES;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[8..body_end]);
    if stored != computed {
        return Err(DatasetError::Checksum { stored, computed });
    }

    let scenario = Scenario::from_code(scenario_code)
        .ok_or_else(|| DatasetError::Corrupt(format!("unknown scenario code {scenario_code}")))?;
    if vision_flag > 1 {
        return Err(DatasetError::Corrupt(format!("vision flag {vision_flag}")));
    }
    let config = std::str::from_utf8(r.take(config_len))
        .map_err(|e| DatasetError::Corrupt(format!("config snapshot is not UTF-8: {e}")))?
        .to_owned();
    let mean: [f32; N_CHANNELS] = r.f32s();
    let std: [f32; N_CHANNELS] = r.f32s();

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let index = r.u32();
        let action = r.f32s();
        let arm_q = r.f32s();
        let finger_q = r.f32s();
        let forces = r.f32s();
        let frame = has_vision.then(|| r.take(FRAME_LEN).to_vec());
        samples.push(Sample::new(index, action, arm_q, finger_q, forces, frame));
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let stats = compute_norm_stats(&samples)?;
    if stats.mean != mean || stats.std != std {
        return Err(DatasetError::Corrupt(
            "stored normalization statistics disagree with the samples".into(),
        ));
    }
    let ds = Dataset::new(scenario, seed, has_vision, samples, config)
        .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    Ok(ds)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a sibling temporary file so a failed write never leaves a
/// partial dataset under `path`.
pub fn save(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let bytes = encode(ds);
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

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}
