//! Binary checkpoint: magic, config hash, then each tensor as rank,
//! dims and little-endian f64 values. Reload is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::PolicyParameters;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSDCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParameters,
    pub config_hash: String,
    /// Epoch the parameters come from; 0 is the pre-training policy.
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let hash_len = read_u32(&mut r)? as usize;
        let mut hash = vec![0u8; hash_len];
        read_exact(&mut r, &mut hash)?;
        let config_hash =
            String::from_utf8(hash).map_err(|_| Error::Parse("config hash is not UTF-8".into()))?;
        let epoch = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        if count != 6 {
            return Err(Error::Parse(format!("expected 6 tensors, found {count}")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Parse(format!("bad tensor rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > r.len() / 8 {
                return Err(Error::Parse("truncated tensor data".into()));
            }
            let data = (0..n)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))?);
        }
        if !r.is_empty() {
            return Err(Error::Parse("trailing bytes after checkpoint".into()));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let params = PolicyParameters {
            embed: next(),
            w_in: next(),
            w_rec: next(),
            b_rec: next(),
            w_out: next(),
            b_out: next(),
        };
        let (v, d, h) = (params.vocab_size(), params.embed_dim(), params.hidden_dim());
        if !params.same_shape(&PolicyParameters::zeros(v, d, h)) {
            return Err(Error::Parse("inconsistent tensor shapes".into()));
        }
        Ok(Checkpoint {
            params,
            config_hash,
            epoch,
        })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Parse("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
