use std::io::{Read, Write};

use super::OptimizerState;
use crate::error::format_err;
use crate::io::{read_f64, read_magic, read_u32, read_u64};
use crate::nn::{read_checkpoint, ParameterSet, UNet, UNetConfig};
use crate::{Result, Scalar};

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"PCOS";

/// Network checkpoint followed by `"PCOS"`, the iteration counter and the
/// momentum buffers.
pub fn write_training_checkpoint<T: Scalar, W: Write>(
    net: &UNet,
    params: &ParameterSet<T>,
    state: &OptimizerState<T>,
    w: &mut W,
) -> Result<()> {
    net.write_checkpoint(params, w)?;
    w.write_all(OPTIMIZER_MAGIC)?;
    w.write_all(&state.iteration.to_le_bytes())?;
    w.write_all(&(state.buffers.len() as u32).to_le_bytes())?;
    for b in &state.buffers {
        w.write_all(&(b.len() as u64).to_le_bytes())?;
        for v in b {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a training checkpoint. A plain network checkpoint (no optimizer
/// section) yields `None` for the optimizer state.
pub fn read_training_checkpoint<T: Scalar, R: Read>(
    r: &mut R,
) -> Result<(UNetConfig, ParameterSet<T>, Option<OptimizerState<T>>)> {
    let (cfg, params) = read_checkpoint(r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? == 0 {
        return Ok((cfg, params, None));
    }
    let mut rest = [0u8; 3];
    r.read_exact(&mut rest)
        .map_err(|_| format_err("checkpoint", "truncated optimizer section"))?;
    let magic = [probe[0], rest[0], rest[1], rest[2]];
    read_magic(&mut &magic[..], OPTIMIZER_MAGIC, "checkpoint")?;
    let iteration = read_u64(r)?;
    let count = read_u32(r)? as usize;
    if count != params.len() {
        return Err(format_err("checkpoint", "optimizer buffer count differs from parameters"));
    }
    let mut buffers = Vec::with_capacity(count);
    for e in params.entries() {
        let len = read_u64(r)? as usize;
        if len != e.data.len() {
            return Err(format_err("checkpoint", format!("{}: optimizer buffer size mismatch", e.name)));
        }
        buffers.push((0..len).map(|_| read_f64(r).map(T::lit)).collect::<Result<Vec<_>>>()?);
    }
    Ok((cfg, params, Some(OptimizerState { buffers, iteration })))
}
