//! Binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TFNP" | u32 version | u32 n
//! u32 history | u32 vr_hidden | u32 prop_hidden | u32 core_hidden
//! u8 recurrent | u8 activation | u32 critic_layers | u32 width * critic_layers
//! f64 offset_bound | f64 torque_bound
//! u32 block_count | (u32 rows, u32 cols) * block_count
//! u64 value_count | f64 * value_count
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Activation, Layout, PolicyArch, PolicyParams};

pub const MAGIC: &[u8; 4] = b"TFNP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamsIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter file (bad magic)")]
    BadMagic,
    #[error("unsupported parameter format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt parameter file: {0}")]
    Corrupt(String),
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_usize(buf: &mut Vec<u8>, v: usize) {
    put_u32(buf, u32::try_from(v).expect("dimension fits in u32"));
}

pub fn write_params(params: &PolicyParams) -> Vec<u8> {
    let arch = &params.arch;
    let mut buf = Vec::with_capacity(64 + 8 * params.data.len());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, params.format_version);
    put_usize(&mut buf, arch.n_joints);
    put_usize(&mut buf, arch.history);
    put_usize(&mut buf, arch.vr_hidden);
    put_usize(&mut buf, arch.prop_hidden);
    put_usize(&mut buf, arch.core_hidden);
    buf.push(arch.recurrent as u8);
    buf.push(arch.activation.code());
    put_usize(&mut buf, arch.critic_hidden.len());
    for &w in &arch.critic_hidden {
        put_usize(&mut buf, w);
    }
    buf.extend_from_slice(&arch.offset_bound.to_le_bytes());
    buf.extend_from_slice(&arch.torque_bound.to_le_bytes());
    let blocks = params.layout.blocks();
    put_usize(&mut buf, blocks.len());
    for b in &blocks {
        put_usize(&mut buf, b.rows);
        put_usize(&mut buf, b.cols);
    }
    buf.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamsIoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ParamsIoError::Corrupt("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ParamsIoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ParamsIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize, ParamsIoError> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64, ParamsIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ParamsIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_params(bytes: &[u8]) -> Result<PolicyParams, ParamsIoError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(ParamsIoError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ParamsIoError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(ParamsIoError::Corrupt("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Err(ParamsIoError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };

    let n_joints = r.usize()?;
    let history = r.usize()?;
    let vr_hidden = r.usize()?;
    let prop_hidden = r.usize()?;
    let core_hidden = r.usize()?;
    let recurrent = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(ParamsIoError::Corrupt(format!("recurrent flag {v}"))),
    };
    let activation = Activation::from_code(r.u8()?)
        .ok_or_else(|| ParamsIoError::Corrupt("unknown activation".into()))?;
    let layers = r.usize()?;
    if layers > 64 {
        return Err(ParamsIoError::Corrupt(format!("{layers} critic layers")));
    }
    let critic_hidden = (0..layers).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let offset_bound = r.f64()?;
    let torque_bound = r.f64()?;
    let arch = PolicyArch {
        n_joints,
        history,
        vr_hidden,
        prop_hidden,
        core_hidden,
        recurrent,
        critic_hidden,
        activation,
        offset_bound,
        torque_bound,
    };
    arch.validate()
        .map_err(|e| ParamsIoError::Shape(e.to_string()))?;
    let layout = Layout::new(&arch);
    let expected = layout.blocks();

    let count = r.usize()?;
    if count != expected.len() {
        return Err(ParamsIoError::Shape(format!(
            "{count} blocks in file, architecture has {}",
            expected.len()
        )));
    }
    for (k, b) in expected.iter().enumerate() {
        let (rows, cols) = (r.usize()?, r.usize()?);
        if (rows, cols) != (b.rows, b.cols) {
            return Err(ParamsIoError::Shape(format!(
                "block {k} is {rows}x{cols}, architecture expects {}x{}",
                b.rows, b.cols
            )));
        }
    }
    let values = r.u64()? as usize;
    if values != layout.total {
        return Err(ParamsIoError::Shape(format!(
            "{values} values in file, architecture has {}",
            layout.total
        )));
    }
    let mut data = Vec::with_capacity(values);
    for _ in 0..values {
        data.push(r.f64()?);
    }
    if r.pos != body.len() {
        return Err(ParamsIoError::Corrupt("trailing bytes".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ParamsIoError::Corrupt("non-finite weight".into()));
    }
    Ok(PolicyParams {
        arch,
        layout,
        data,
        format_version: version,
    })
}

pub fn save_params(params: &PolicyParams, path: impl AsRef<Path>) -> Result<(), ParamsIoError> {
    fs::write(path, write_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<PolicyParams, ParamsIoError> {
    read_params(&fs::read(path)?)
}
