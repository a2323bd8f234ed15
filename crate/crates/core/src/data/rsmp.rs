//! The `RSMP` binary sample format (little-endian, version 1):
//!
//! ```text
//! "RSMP" | u32 version | u64 N | u32 C | str sample_id | C x str channel
//! | u32 K | K x (str key, str value)
//! | N*3 f32 coords (row-major) | N*C f32 fields (row-major) | u32 crc32
//! ```
//!
//! `str` is a u16 byte length followed by UTF-8 bytes. The checksum covers every
//! preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::SampleRecord;
use crate::binio::{write_atomic, Reader, Writer};
use crate::error::{Result, RetoError};

pub const RSMP_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RSMP";

pub fn encode_sample(rec: &SampleRecord) -> Result<Vec<u8>> {
    rec.validate()?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(RSMP_VERSION);
    w.u64(rec.num_points() as u64);
    w.u32(rec.channels.len() as u32);
    w.str(&rec.sample_id);
    for c in &rec.channels {
        w.str(c);
    }
    w.u32(rec.metadata.len() as u32);
    for (k, v) in &rec.metadata {
        w.str(k);
        w.str(v);
    }
    for v in rec.coords.iter() {
        w.f32(*v as f32);
    }
    for v in rec.fields.iter() {
        w.f32(*v as f32);
    }
    Ok(w.finish())
}

pub fn decode_sample(bytes: &[u8]) -> Result<SampleRecord> {
    let mut r = Reader::checked(bytes)?;
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != RSMP_VERSION {
        return Err(RetoError::Version {
            found: version,
            expected: RSMP_VERSION,
        });
    }
    let at = r.offset();
    let n = r.u64()? as usize;
    let c = r.u32()? as usize;
    if n == 0 {
        return Err(RetoError::Format {
            offset: at,
            reason: "sample has zero points".into(),
        });
    }
    let sample_id = r.str()?;
    let channels = (0..c).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let k = r.u32()? as usize;
    let mut metadata = BTreeMap::new();
    for _ in 0..k {
        let key = r.str()?;
        metadata.insert(key, r.str()?);
    }
    let mut read_block = |cols: usize| -> Result<Array2<f64>> {
        let at = r.offset();
        let len = n.checked_mul(cols).and_then(|v| v.checked_mul(4)).ok_or(RetoError::Format {
            offset: at,
            reason: "size overflow".into(),
        })?;
        let raw = r.take(len)?;
        let vals = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Array2::from_shape_vec((n, cols), vals).expect("sized"))
    };
    let coords = read_block(3)?;
    let fields = read_block(c)?;
    r.expect_end()?;
    SampleRecord::new(sample_id, coords, fields, channels, metadata)
}

/// Writes a sample atomically; values are stored as 32-bit floats.
pub fn save_sample(path: &Path, rec: &SampleRecord) -> Result<()> {
    write_atomic(path, &encode_sample(rec)?)
}

pub fn load_sample(path: &Path) -> Result<SampleRecord> {
    decode_sample(&std::fs::read(path)?)
}
