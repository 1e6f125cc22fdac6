//! Single-file checkpoint container.
//!
//! Layout: magic, schema version, payload length, SHA-256 of the payload,
//! payload. The payload holds the config snapshot (JSON), training counters,
//! parameters, and optimizer moments as little-endian f64 arrays. Loading
//! verifies the checksum before parsing, so truncated or corrupt files fail
//! with an integrity error and no partial state.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::network::ParamStore;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FDWM";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: AppConfig,
    /// Completed epochs at save time.
    pub epoch: u64,
    /// Completed optimizer steps at save time.
    pub iteration: u64,
    /// Base seed; together with the counters it reconstructs every RNG stream.
    pub rng_seed: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn array(&mut self, a: &ArrayD<f64>) {
        self.u64(a.ndim() as u64);
        for d in a.shape() {
            self.u64(*d as u64);
        }
        for v in a.iter() {
            self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("payload ends unexpectedly".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn array(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u64()? as usize;
        if ndim > 8 {
            return Err(Error::Integrity(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Integrity(format!("bad array shape: {e}")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut p = PayloadWriter { buf: Vec::new() };
    p.bytes(serde_json::to_string(&ckpt.config)?.as_bytes());
    p.u64(ckpt.epoch);
    p.u64(ckpt.iteration);
    p.u64(ckpt.rng_seed);
    p.u64(ckpt.adam.t);
    p.u64(ckpt.params.len() as u64);
    for (name, value) in ckpt.params.iter() {
        p.bytes(name.as_bytes());
        p.array(value);
    }
    for m in &ckpt.adam.m {
        p.array(m);
    }
    for v in &ckpt.adam.v {
        p.array(v);
    }

    let digest = Sha256::digest(&p.buf);
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&SCHEMA_VERSION.to_le_bytes())?;
    file.write_all(&(p.buf.len() as u64).to_le_bytes())?;
    file.write_all(&digest)?;
    file.write_all(&p.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 4 + 4 + 8 + 32];
    file.read_exact(&mut header)
        .map_err(|_| Error::Integrity("file shorter than its header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != SCHEMA_VERSION {
        return Err(Error::VersionedFormat { expected: SCHEMA_VERSION, found: version });
    }
    let payload_len = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let expected_digest = &header[16..48];

    let mut payload = vec![0u8; payload_len];
    file.read_exact(&mut payload)
        .map_err(|_| Error::Integrity("payload is truncated".into()))?;
    let digest = Sha256::digest(&payload);
    if digest.as_slice() != expected_digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }

    let mut r = PayloadReader { buf: &payload, pos: 0 };
    let config: AppConfig = serde_json::from_slice(r.bytes()?)?;
    let epoch = r.u64()?;
    let iteration = r.u64()?;
    let rng_seed = r.u64()?;
    let t = r.u64()?;
    let n = r.u64()? as usize;

    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|e| Error::Integrity(format!("bad parameter name: {e}")))?;
        params.insert(&name, r.array()?);
    }
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.array()?);
    }
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.array()?);
    }
    if r.pos != payload.len() {
        return Err(Error::Integrity("trailing bytes in payload".into()));
    }

    Ok(Checkpoint {
        config,
        epoch,
        iteration,
        rng_seed,
        params,
        adam: AdamState { m, v, t },
    })
}
