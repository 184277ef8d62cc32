//! Dataset container IO: a little-endian binary format plus a JSON-lines
//! variant for external converters.
//!
//! Binary layout: magic "CGLSKEL1"; header {u32 num_sequences, u16 joints,
//! u16 frames, u16 num_classes}; each record {u16 label,
//! f32[frames*joints*3] coords}.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use cgl_core::data::{Dataset, DatasetProfile, SkeletonSequence};

pub const MAGIC: &[u8; 8] = b"CGLSKEL1";

#[derive(Debug)]
pub enum FormatError {
    Io(io::Error),
    /// Unexpected end of file; `offset` is where the read began.
    Truncated { offset: u64, expected: usize },
    BadMagic { found: Vec<u8> },
    ShapeMismatch { record: usize, detail: String },
    BadLabel { record: usize, label: u32, num_classes: usize },
    Json { line: usize, detail: String },
    Invalid(String),
}

impl std::fmt::Display for FormatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "io error: {e}"),
            FormatError::Truncated { offset, expected } => {
                write!(f, "truncated file: needed {expected} bytes at offset {offset}")
            }
            FormatError::BadMagic { found } => write!(f, "bad magic {found:?}, expected {MAGIC:?}"),
            FormatError::ShapeMismatch { record, detail } => {
                write!(f, "record {record}: shape mismatch: {detail}")
            }
            FormatError::BadLabel { record, label, num_classes } => {
                write!(f, "record {record}: label {label} outside [0,{num_classes})")
            }
            FormatError::Json { line, detail } => write!(f, "line {line}: {detail}"),
            FormatError::Invalid(d) => write!(f, "{d}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e)
    }
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        let start = self.offset;
        let mut got = 0;
        while got < buf.len() {
            let n = self.inner.read(&mut buf[got..])?;
            if n == 0 {
                return Err(FormatError::Truncated { offset: start, expected: buf.len() });
            }
            got += n;
            self.offset += n as u64;
        }
        Ok(())
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        let mut b = [0u8; 2];
        self.read_exact_at(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn save_binary(path: &Path, dataset: &Dataset) -> Result<(), FormatError> {
    let p = &dataset.profile;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dataset.sequences.len() as u32).to_le_bytes());
    out.extend_from_slice(&(p.joints as u16).to_le_bytes());
    out.extend_from_slice(&(p.frames as u16).to_le_bytes());
    out.extend_from_slice(&(p.num_classes as u16).to_le_bytes());
    for seq in &dataset.sequences {
        out.extend_from_slice(&(seq.label as u16).to_le_bytes());
        for &v in &seq.coords {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load and validate against `profile` if given; otherwise trust the
/// header.
pub fn load_binary(path: &Path, profile: Option<&DatasetProfile>) -> Result<Dataset, FormatError> {
    let mut r = Counted { inner: fs::File::open(path)?, offset: 0 };
    let mut magic = [0u8; 8];
    r.read_exact_at(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec() });
    }
    let num_sequences = r.u32()? as usize;
    let joints = r.u16()? as usize;
    let frames = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    if let Some(p) = profile {
        if joints != p.joints || frames != p.frames || num_classes != p.num_classes {
            return Err(FormatError::ShapeMismatch {
                record: 0,
                detail: format!(
                    "header ({joints} joints, {frames} frames, {num_classes} classes) \
                     does not match profile ({}, {}, {})",
                    p.joints, p.frames, p.num_classes
                ),
            });
        }
    }
    let profile = DatasetProfile { joints, frames, num_classes };
    let per = frames * joints * 3;
    let mut sequences = Vec::with_capacity(num_sequences);
    let mut buf = vec![0u8; per * 4];
    for rec in 0..num_sequences {
        let label = r.u16()? as usize;
        if label >= num_classes {
            return Err(FormatError::BadLabel { record: rec, label: label as u32, num_classes });
        }
        r.read_exact_at(&mut buf)?;
        let coords: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::ShapeMismatch {
                record: rec,
                detail: "non-finite coordinate".into(),
            });
        }
        sequences.push(SkeletonSequence { coords, label, source_id: format!("bin:{rec}") });
    }
    let dataset = Dataset { profile, sequences };
    dataset
        .validate()
        .map_err(|e| FormatError::Invalid(format!("{e}")))?;
    Ok(dataset)
}

/// One sequence per line: {"label": int, "coords": [[[x,y,z]; joints]; frames]}.
pub fn save_jsonl(path: &Path, dataset: &Dataset) -> Result<(), FormatError> {
    let p = &dataset.profile;
    let mut out = String::new();
    for seq in &dataset.sequences {
        let frames: Vec<Vec<[f64; 3]>> = (0..p.frames)
            .map(|t| {
                (0..p.joints)
                    .map(|j| {
                        let base = (t * p.joints + j) * 3;
                        [seq.coords[base], seq.coords[base + 1], seq.coords[base + 2]]
                    })
                    .collect()
            })
            .collect();
        let line = serde_json::json!({ "label": seq.label, "coords": frames });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_jsonl(path: &Path, profile: &DatasetProfile) -> Result<Dataset, FormatError> {
    let text = fs::read_to_string(path)?;
    let mut sequences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| FormatError::Json { line: i + 1, detail: format!("{e}") })?;
        let label = v["label"]
            .as_u64()
            .ok_or_else(|| FormatError::Json { line: i + 1, detail: "missing label".into() })?
            as usize;
        if label >= profile.num_classes {
            return Err(FormatError::BadLabel {
                record: i,
                label: label as u32,
                num_classes: profile.num_classes,
            });
        }
        let frames = v["coords"]
            .as_array()
            .ok_or_else(|| FormatError::Json { line: i + 1, detail: "missing coords".into() })?;
        if frames.len() != profile.frames {
            return Err(FormatError::ShapeMismatch {
                record: i,
                detail: format!("{} frames, profile wants {}", frames.len(), profile.frames),
            });
        }
        let mut coords = Vec::with_capacity(profile.frames * profile.joints * 3);
        for frame in frames {
            let joints = frame.as_array().ok_or_else(|| FormatError::Json {
                line: i + 1,
                detail: "frame is not an array".into(),
            })?;
            if joints.len() != profile.joints {
                return Err(FormatError::ShapeMismatch {
                    record: i,
                    detail: format!("{} joints, profile wants {}", joints.len(), profile.joints),
                });
            }
            for joint in joints {
                let xyz = joint.as_array().filter(|a| a.len() == 3).ok_or_else(|| {
                    FormatError::ShapeMismatch { record: i, detail: "joint is not [x,y,z]".into() }
                })?;
                for c in xyz {
                    coords.push(c.as_f64().ok_or_else(|| FormatError::Json {
                        line: i + 1,
                        detail: "non-numeric coordinate".into(),
                    })?);
                }
            }
        }
        sequences.push(SkeletonSequence { coords, label, source_id: format!("jsonl:{i}") });
    }
    let dataset = Dataset { profile: profile.clone(), sequences };
    dataset
        .validate()
        .map_err(|e| FormatError::Invalid(format!("{e}")))?;
    Ok(dataset)
}

/// Dispatch on extension: `.jsonl` goes through the JSON reader,
/// everything else through the binary reader.
pub fn load_dataset(path: &Path, profile: Option<&DatasetProfile>) -> Result<Dataset, FormatError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let p = profile.ok_or_else(|| {
            FormatError::Invalid("jsonl loading requires an explicit profile".into())
        })?;
        load_jsonl(path, p)
    } else {
        load_binary(path, profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgl_core::data::generate_synthetic;

    fn small() -> Dataset {
        let profile = DatasetProfile { joints: 3, frames: 4, num_classes: 2 };
        generate_synthetic(&profile, 3, 7)
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cglskel");
        let ds = small();
        save_binary(&path, &ds).unwrap();
        let back = load_binary(&path, Some(&ds.profile)).unwrap();
        assert_eq!(back.sequences.len(), ds.sequences.len());
        for (a, b) in back.sequences.iter().zip(&ds.sequences) {
            assert_eq!(a.label, b.label);
            // f32 storage quantizes
            for (x, y) in a.coords.iter().zip(&b.coords) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truncated_file_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cglskel");
        let ds = small();
        save_binary(&path, &ds).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        let err = load_binary(&path, None).unwrap_err();
        match err {
            FormatError::Truncated { offset, .. } => assert!(offset > 0),
            other => panic!("expected truncation, got {other}"),
        }
        let msg = format!("{err}");
        assert!(msg.contains("offset"));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cglskel");
        fs::write(&path, b"NOTMAGIC____________________").unwrap();
        assert!(matches!(load_binary(&path, None), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn profile_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cglskel");
        let ds = small();
        save_binary(&path, &ds).unwrap();
        let wrong = DatasetProfile { joints: 24, frames: 4, num_classes: 2 };
        assert!(matches!(
            load_binary(&path, Some(&wrong)),
            Err(FormatError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = small();
        save_jsonl(&path, &ds).unwrap();
        let back = load_jsonl(&path, &ds.profile).unwrap();
        assert_eq!(back.sequences.len(), ds.sequences.len());
        for (a, b) in back.sequences.iter().zip(&ds.sequences) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.coords, b.coords);
        }
    }

    #[test]
    fn jsonl_wrong_joint_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"label\":0,\"coords\":[[[1,2,3]]]}\n").unwrap();
        let profile = DatasetProfile { joints: 2, frames: 1, num_classes: 2 };
        assert!(matches!(
            load_jsonl(&path, &profile),
            Err(FormatError::ShapeMismatch { record: 0, .. })
        ));
    }
}
