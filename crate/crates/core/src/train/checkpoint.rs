//! Quantized network checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! spec_hash    32 bytes   SHA-256 of the network spec
//! layer_count  u32
//! per layer:   weight blob (see `QuantizedWeights::write_blob`)
//!              beta  f64
//!              theta f64
//! ```
//!
//! The raw VMEM constants are not stored; they are rebuilt from `beta`,
//! `theta` and the quantization settings on load.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::quant::QuantizedWeights;

use super::eval::{PtqConfig, QuantizedNetwork};
use super::network::NetworkSpec;

pub fn save_checkpoint<W: Write>(mut w: W, net: &QuantizedNetwork) -> Result<()> {
    w.write_all(&net.spec_hash)?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for l in &net.layers {
        l.fixed.weights.write_blob(&mut w)?;
        w.write_all(&l.beta.to_le_bytes())?;
        w.write_all(&l.theta.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_checkpoint<R: Read>(
    mut r: R,
    spec: &NetworkSpec,
    cfg: &PtqConfig,
) -> Result<QuantizedNetwork> {
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    if hash != spec.hash() {
        return Err(Error::Format(
            "checkpoint was written for a different network spec".into(),
        ));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    if n != spec.layers.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n} layers, spec has {}",
            spec.layers.len()
        )));
    }
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let w = QuantizedWeights::read_blob(&mut r)?;
        let beta = read_f64(&mut r)?;
        let theta = read_f64(&mut r)?;
        parts.push((w, beta, theta));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    QuantizedNetwork::from_parts(spec, parts, cfg)
}
