//! Binary dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PMOEDS1\0"
//! version    u32      = 1
//! N, n, d, c u32 x 4
//! labels     N x i32
//! patches    N*n*d x f32   sample-major, patch-major, element-minor
//! provenance u32 length + UTF-8 JSON
//! ```
//!
//! Patch values are stored as `f32`; `disc_index` is not part of the payload
//! and is carried inside the provenance JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const DATASET_MAGIC: &[u8; 8] = b"PMOEDS1\0";
pub const DATASET_VERSION: u32 = 1;

const DISC_KEY: &str = "disc_index";

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(28 + dataset.len() * (4 + dataset.n * dataset.d * 4));
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        dataset.len() as u32,
        dataset.n as u32,
        dataset.d as u32,
        dataset.c as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &dataset.samples {
        buf.extend_from_slice(&s.label.to_le_bytes());
    }
    for s in &dataset.samples {
        for &x in &s.patches {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut meta = serde_json::to_value(&dataset.provenance)?;
    let disc: Vec<usize> = dataset.samples.iter().map(|s| s.disc_index).collect();
    meta.as_object_mut()
        .expect("provenance serializes to an object")
        .insert(DISC_KEY.into(), serde_json::to_value(disc)?);
    let json = serde_json::to_vec(&meta)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.write_all(&json).expect("write to Vec");
    write_atomic(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated payload: need {len} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::format(path, "bad magic (expected PMOEDS1)"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let c = r.u32()? as usize;
    let labels: Vec<i32> = r
        .take(4 * count)?
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let payload = r.take(4 * count * n * d)?;
    let json_len = r.u32()? as usize;
    let json = r.take(json_len)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after provenance"));
    }
    let mut meta: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::format(path, format!("provenance: {e}")))?;
    let disc: Vec<usize> = match meta.as_object_mut().and_then(|o| o.remove(DISC_KEY)) {
        Some(v) => serde_json::from_value(v).map_err(|e| Error::format(path, format!("disc_index: {e}")))?,
        None => return Err(Error::MissingMetadata(format!("{}: disc_index", path.display()))),
    };
    if disc.len() != count {
        return Err(Error::format(path, "disc_index length differs from sample count"));
    }
    let provenance: Provenance =
        serde_json::from_value(meta).map_err(|e| Error::format(path, format!("provenance: {e}")))?;
    let stride = n * d * 4;
    let samples = labels
        .into_iter()
        .zip(disc)
        .enumerate()
        .map(|(i, (label, disc_index))| Sample {
            patches: payload[i * stride..(i + 1) * stride]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            dim: d,
            label,
            disc_index,
        })
        .collect();
    Dataset::new(samples, n, d, c, provenance).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Placement, SyntheticConfig};
    use crate::rng::Rng;

    fn small() -> Dataset {
        let cfg = SyntheticConfig {
            d: 6,
            n: 4,
            c: 2,
            p: 2,
            delta_d: 0.1,
            delta_r: 0.3,
            l_star: 2,
            placement: Placement::Uniform,
        };
        let lib = cfg.library(&Rng::new(1)).unwrap();
        cfg.dataset(&lib, 10, &mut Rng::new(2)).unwrap()
    }

    fn quantized(ds: &Dataset) -> Dataset {
        let mut q = ds.clone();
        for s in &mut q.samples {
            s.patches.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        q
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = quantized(&small());
        let p1 = dir.path().join("a.pmoe");
        let p2 = dir.path().join("b.pmoe");
        save_dataset(&ds, &p1).unwrap();
        let back = load_dataset(&p1).unwrap();
        assert_eq!(back, ds);
        save_dataset(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        let p = dir.path().join("a.pmoe");
        save_dataset(&ds, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"PMOEDS1\0");
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        assert_eq!([word(0), word(1), word(2), word(3), word(4)], [1, 10, 4, 6, 2]);
        let first_label = i32::from_le_bytes(bytes[28..32].try_into().unwrap());
        assert_eq!(first_label, ds.samples[0].label);
        let first_value = f32::from_le_bytes(bytes[28 + 40..28 + 44].try_into().unwrap());
        assert_eq!(first_value, ds.samples[0].patches[0] as f32);
    }

    #[test]
    fn corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pmoe");
        save_dataset(&small(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pmoe");
        save_dataset(&small(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&p),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pmoe");
        save_dataset(&small(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
