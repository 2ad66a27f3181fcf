//! Policy/critic checkpoint container.
//!
//! ```text
//! magic "RXRP" | version u32
//! policy: layer count u32 | sizes u32 * count | params f64 * n | log-std f64 * act dim
//! has value u8 | value: layer count u32 | sizes u32 * count | params f64 * n
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GaussianPolicy, Mlp, NnError, ValueFn};
use crate::grrt::hex;

pub const MAGIC: &[u8; 4] = b"RXRP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

impl From<NnError> for CheckpointError {
    fn from(e: NnError) -> Self {
        CheckpointError::Corrupt(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: GaussianPolicy,
    pub value: Option<ValueFn>,
}

impl Checkpoint {
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        write_checkpoint(self, &mut buf).expect("writing to memory cannot fail");
        hex(&Sha256::digest(&buf))
    }
}

fn write_mlp<W: Write>(net: &Mlp, w: &mut W) -> io::Result<()> {
    w.write_u32::<LE>(net.sizes().len() as u32)?;
    for &n in net.sizes() {
        w.write_u32::<LE>(n as u32)?;
    }
    for &p in net.params() {
        w.write_f64::<LE>(p)?;
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp, CheckpointError> {
    let count = r.read_u32::<LE>()? as usize;
    if !(2..=64).contains(&count) {
        return Err(CheckpointError::Corrupt(format!("implausible layer count {count}")));
    }
    let sizes = (0..count).map(|_| r.read_u32::<LE>().map(|v| v as usize)).collect::<io::Result<Vec<_>>>()?;
    if sizes.iter().any(|&n| n == 0 || n > 1 << 16) {
        return Err(CheckpointError::Corrupt(format!("implausible layer sizes {sizes:?}")));
    }
    let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let params = (0..n).map(|_| r.read_f64::<LE>()).collect::<io::Result<Vec<_>>>()?;
    Ok(Mlp::from_params(&sizes, params)?)
}

pub fn write_checkpoint<W: Write>(c: &Checkpoint, w: &mut W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    write_mlp(&c.policy.mean, w)?;
    for &v in c.policy.log_std() {
        w.write_f64::<LE>(v)?;
    }
    match &c.value {
        Some(v) => {
            w.write_u8(1)?;
            write_mlp(&v.net, w)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
    }
    let mean = read_mlp(r)?;
    let log_std = (0..mean.output_dim()).map(|_| r.read_f64::<LE>()).collect::<io::Result<Vec<_>>>()?;
    let policy = GaussianPolicy::from_parts(mean, log_std)?;
    let value = match r.read_u8()? {
        0 => None,
        1 => Some(ValueFn::from_net(read_mlp(r)?)?),
        k => return Err(CheckpointError::Corrupt(format!("bad value flag {k}"))),
    };
    Ok(Checkpoint { policy, value })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path).map_err(CheckpointError::Io)?);
    write_checkpoint(c, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(CheckpointError::Io)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::RngHandle;

    fn ck(with_value: bool) -> Checkpoint {
        let mut r = RngHandle::new(1, 0);
        let policy = GaussianPolicy::new(5, 2, &[8, 8], 0.1, &mut r).unwrap();
        let value = with_value.then(|| ValueFn::new(7, &[8, 8], &mut r).unwrap());
        Checkpoint { policy, value }
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for v in [false, true] {
            let c = ck(v);
            let p = dir.path().join("c.rxrp");
            save_checkpoint(&c, &p).unwrap();
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn header_errors() {
        let mut b = Vec::new();
        write_checkpoint(&ck(true), &mut b).unwrap();
        let mut bad = b.clone();
        bad[1] = 0;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::BadMagic)));
        let mut old = b.clone();
        old[4] = 7;
        assert!(matches!(read_checkpoint(&mut old.as_slice()), Err(CheckpointError::VersionMismatch { .. })));
        assert!(matches!(read_checkpoint(&mut &b[..b.len() - 3]), Err(CheckpointError::Truncated)));
    }
}
