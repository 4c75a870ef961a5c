//! GZFL: a minimal little-endian container for one participant's
//! normalized samples.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GZFL" (47 5A 46 4C)
//! 4       2     u16 version = 1
//! 6       2     u16 participant id
//! 8       4     u32 sample count
//! 12      ...   count × record
//!
//! record: 2160 × f32 eye pixels (36 rows × 60 columns, row-major),
//!         f32 head pitch, f32 head yaw, f32 gaze yaw, f32 gaze pitch
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{GazeAngles, HeadPose, ParticipantDataset, Provenance, Sample, EYE_PIXELS};
use crate::error::{Error, ParseErrorKind, Result};

pub const GZFL_MAGIC: [u8; 4] = *b"GZFL";
pub const GZFL_VERSION: u16 = 1;

const HEADER_LEN: usize = 12;
const RECORD_LEN: usize = (EYE_PIXELS + 4) * 4;

pub fn encode_participant(ds: &ParticipantDataset) -> Result<Vec<u8>> {
    let count = u32::try_from(ds.samples.len())
        .map_err(|_| Error::invalid("encode_participant", "more than u32::MAX samples"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.samples.len() * RECORD_LEN);
    out.extend_from_slice(&GZFL_MAGIC);
    out.extend_from_slice(&GZFL_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.id.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (i, s) in ds.samples.iter().enumerate() {
        if s.eye.len() != EYE_PIXELS {
            return Err(Error::invalid(
                "encode_participant",
                format!("sample {i} has {} pixels", s.eye.len()),
            ));
        }
        for &p in &s.eye {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for v in [s.head.pitch, s.head.yaw, s.gaze.yaw, s.gaze.pitch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn decode_participant(bytes: &[u8]) -> Result<ParticipantDataset> {
    let err = |offset: usize, kind| Error::Parse {
        offset: offset as u64,
        kind,
    };
    if bytes.len() < 4 || bytes[..4] != GZFL_MAGIC {
        let mut seen = [0u8; 4];
        let n = bytes.len().min(4);
        seen[..n].copy_from_slice(&bytes[..n]);
        return Err(err(0, ParseErrorKind::BadMagic(seen)));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err(
            bytes.len(),
            ParseErrorKind::Truncated {
                expected: 0,
                actual: 0,
            },
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GZFL_VERSION {
        return Err(err(4, ParseErrorKind::UnsupportedVersion(version)));
    }
    let id = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    let body = bytes.len() - HEADER_LEN;
    let complete = body / RECORD_LEN;
    if (complete as u64) < count as u64 {
        return Err(err(
            HEADER_LEN + complete * RECORD_LEN,
            ParseErrorKind::Truncated {
                expected: count,
                actual: complete as u32,
            },
        ));
    }
    let used = HEADER_LEN + count as usize * RECORD_LEN;
    if used != bytes.len() {
        return Err(err(used, ParseErrorKind::TrailingBytes((bytes.len() - used) as u64)));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let base = HEADER_LEN + i * RECORD_LEN;
        let eye = (0..EYE_PIXELS).map(|p| f32_at(bytes, base + 4 * p)).collect();
        let tail = base + 4 * EYE_PIXELS;
        let sample = Sample {
            eye,
            head: HeadPose {
                pitch: f32_at(bytes, tail),
                yaw: f32_at(bytes, tail + 4),
            },
            gaze: GazeAngles {
                yaw: f32_at(bytes, tail + 8),
                pitch: f32_at(bytes, tail + 12),
            },
        };
        sample.validate().map_err(|reason| {
            err(
                base,
                ParseErrorKind::InvalidSample {
                    index: i as u32,
                    reason,
                },
            )
        })?;
        samples.push(sample);
    }
    ParticipantDataset::new(id, samples, Provenance::Loaded)
}

pub fn write_participant(path: impl AsRef<Path>, ds: &ParticipantDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_participant(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_participant(path: impl AsRef<Path>) -> Result<ParticipantDataset> {
    let path = path.as_ref();
    decode_participant(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads every `*.gzfl` file of `dir`, ordered by participant id.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<ParticipantDataset>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gzfl"))
        .collect();
    paths.sort();
    let mut out = paths
        .iter()
        .map(load_participant)
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|d| d.id);
    if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::invalid(
            "load_dir",
            format!("duplicate participant id {} in {}", w[0].id, dir.display()),
        ));
    }
    if out.is_empty() {
        return Err(Error::invalid(
            "load_dir",
            format!("no .gzfl files in {}", dir.display()),
        ));
    }
    Ok(out)
}
