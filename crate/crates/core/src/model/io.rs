//! Binary parameter container.
//!
//! ```text
//! magic    8 bytes  "PMOEMP1\0"
//! version  u32      = 1
//! mode     u8       0 separate, 1 joint, 2 cnn; bit 6 unit gates, bit 7 per-class heads
//! k,m,d,n,l,c       u32 x 6
//! gating   k*d x f64 (absent for cnn)
//! experts  m*d x f64
//! output   heads*m x f64
//! ```

use std::fs;
use std::path::Path;

use super::{Arch, Mode, ModelParams};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const PARAMS_MAGIC: &[u8; 8] = b"PMOEMP1\0";
pub const PARAMS_VERSION: u32 = 1;

const UNIT_GATES_BIT: u8 = 0x40;
const MULTI_HEAD_BIT: u8 = 0x80;

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(params))
}

pub(crate) fn encode(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    let mut tag = match params.mode {
        Mode::Separate => 0u8,
        Mode::Joint => 1,
        Mode::Cnn => 2,
    };
    if params.unit_gates {
        tag |= UNIT_GATES_BIT;
    }
    if params.multi_head {
        tag |= MULTI_HEAD_BIT;
    }
    buf.push(tag);
    for v in [params.k, params.m, params.d, params.n, params.l, params.c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for x in params
        .gating_kernels
        .iter()
        .chain(&params.expert_weights)
        .chain(&params.output_weights)
    {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    const HEADER: usize = 8 + 4 + 1 + 24;
    if bytes.len() < HEADER {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..8] != PARAMS_MAGIC {
        return Err(Error::format(path, "bad magic (expected PMOEMP1)"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(8);
    if version != PARAMS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let tag = bytes[12];
    let mode = match tag & 0x3f {
        0 => Mode::Separate,
        1 => Mode::Joint,
        2 => Mode::Cnn,
        t => return Err(Error::format(path, format!("unknown mode tag {t}"))),
    };
    let dims: Vec<usize> = (0..6).map(|i| word(13 + 4 * i) as usize).collect();
    let arch = Arch {
        mode,
        k: dims[0],
        m: dims[1],
        d: dims[2],
        n: dims[3],
        l: dims[4],
        c: dims[5],
        multi_head: tag & MULTI_HEAD_BIT != 0,
        unit_gates: tag & UNIT_GATES_BIT != 0,
    };
    let mut params = ModelParams::zeros(&arch).map_err(|e| Error::format(path, e.to_string()))?;
    if params.arch() != arch {
        return Err(Error::format(path, "inconsistent cnn header"));
    }
    let total = params.gating_kernels.len() + params.expert_weights.len() + params.output_weights.len();
    let body = &bytes[HEADER..];
    if body.len() != total * 8 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", body.len(), total * 8),
        ));
    }
    let mut values = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    for slot in params
        .gating_kernels
        .iter_mut()
        .chain(params.expert_weights.iter_mut())
        .chain(params.output_weights.iter_mut())
    {
        *slot = values.next().expect("length checked");
    }
    Ok(params)
}
