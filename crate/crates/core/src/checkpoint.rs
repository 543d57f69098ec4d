//! Binary network checkpoints.
//!
//! Layout: an 8-byte magic string, a little-endian u32 format version, a
//! length-prefixed JSON header (architecture, input scaling, and the config
//! fingerprint of the run that produced the file), the parameter array as
//! little-endian f64 in declaration order, and a trailing FNV-1a hash of all
//! preceding bytes. Save followed by load reproduces the network bit for bit.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonfmt::fnv1a64;
use crate::neuralnet::{InputScaling, NetSpec, ValueNetwork};

const MAGIC: &[u8; 8] = b"KSNNCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetSpec,
    scaling: InputScaling,
    config_hash: u64,
}

/// Writes a checkpoint for `net`, stamping it with the run's config hash.
pub fn save(net: &ValueNetwork, path: &Path, config_hash: u64) -> Result<()> {
    let header = Header {
        spec: net.spec().clone(),
        scaling: net.scaling().clone(),
        config_hash,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header_bytes.len() + net.param_count() * 8 + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let hash = fnv1a64(&buf);
    buf.extend_from_slice(&hash.to_le_bytes());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, verifying magic, version, integrity hash, and shape.
/// Returns the network and the config hash it was stamped with.
pub fn load(path: &Path) -> Result<(ValueNetwork, u64)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::CheckpointFormat(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 + 4 + 8 + 8 + 8 {
        return Err(fail("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(fail("integrity hash mismatch"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(fail("truncated"));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut pos, header_len)?)?;
    let n_params = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let raw = take(&mut pos, n_params * 8)?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != body.len() {
        return Err(fail("trailing bytes"));
    }
    let mut net = ValueNetwork::zeros(header.spec, header.scaling)?;
    if params.len() != net.param_count() {
        return Err(fail(&format!(
            "parameter count {} does not match spec ({})",
            params.len(),
            net.param_count()
        )));
    }
    net.set_params(&params)?;
    Ok((net, header.config_hash))
}

/// Loads a checkpoint and rejects it unless the architecture matches.
pub fn load_matching(path: &Path, expected: &NetSpec) -> Result<(ValueNetwork, u64)> {
    let (net, hash) = load(path)?;
    if net.spec() != expected {
        return Err(Error::SpecMismatch(format!(
            "{}: stored measure_dim={} n_features={}, expected measure_dim={} n_features={}",
            path.display(),
            net.spec().measure_dim,
            net.spec().n_features,
            expected.measure_dim,
            expected.n_features,
        )));
    }
    Ok((net, hash))
}

/// The integrity hash stored in a checkpoint's trailer.
pub fn stored_hash(path: &Path) -> Result<u64> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::CheckpointFormat("file too short".into()));
    }
    Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()))
}
