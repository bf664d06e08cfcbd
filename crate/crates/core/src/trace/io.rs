//! Binary trace format (little-endian):
//!
//! ```text
//! magic      b"SATR"
//! version    u32
//! layers, heads, tokens, head_dim, steps, block_size,
//! vel_t, vel_h, vel_w,                                     u32 each
//! kappa_lo, kappa_hi, gain_lo, gain_hi                     u32 each (f32 bit patterns)
//! seed       u64
//! payload    f32 * steps*layers*heads*3*tokens*head_dim
//!            in (step, layer, head, tensor{Q,K,V}, token, dim) order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DenoiseTrace, TraceConfig};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"SATR";
pub const TRACE_VERSION: u32 = 1;

pub fn write_trace<W: Write>(trace: &DenoiseTrace, mut out: W) -> Result<()> {
    let c = trace.config();
    out.write_all(TRACE_MAGIC)?;
    out.write_all(&TRACE_VERSION.to_le_bytes())?;
    let dims = [
        c.layers,
        c.heads,
        c.tokens,
        c.head_dim,
        c.steps,
        c.block_size,
        c.velocity_shape[0],
        c.velocity_shape[1],
        c.velocity_shape[2],
    ];
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for f in [c.kappa_range.0, c.kappa_range.1, c.gain_range.0, c.gain_range.1] {
        out.write_all(&f.to_bits().to_le_bytes())?;
    }
    out.write_all(&c.seed.to_le_bytes())?;

    let mut buf = Vec::with_capacity(1 << 16);
    for chunk in trace.data().chunks(1 << 14) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated trace".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_trace<R: Read>(mut input: R) -> Result<DenoiseTrace> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = read_u32(&mut input)? as usize;
    }
    let mut floats = [0f32; 4];
    for f in &mut floats {
        *f = f32::from_bits(read_u32(&mut input)?);
    }
    let mut seed = [0u8; 8];
    input.read_exact(&mut seed).map_err(truncated)?;

    let config = TraceConfig {
        layers: dims[0],
        heads: dims[1],
        tokens: dims[2],
        head_dim: dims[3],
        steps: dims[4],
        block_size: dims[5],
        velocity_shape: [dims[6], dims[7], dims[8]],
        kappa_range: (floats[0], floats[1]),
        gain_range: (floats[2], floats[3]),
        seed: u64::from_le_bytes(seed),
    };
    config.validate().map_err(|e| Error::Format(format!("header: {e}")))?;

    let n = config.payload_len();
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes).map_err(truncated)?;
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    DenoiseTrace::from_parts(config, data)
}

pub fn write_trace_file(trace: &DenoiseTrace, path: impl AsRef<Path>) -> Result<()> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<DenoiseTrace> {
    read_trace(BufReader::new(File::open(path)?))
}
