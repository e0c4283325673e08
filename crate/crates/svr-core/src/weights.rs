//! Named parameter registry and the binary weight-file container.
//!
//! File layout: ASCII magic `SVRW1`, then one record per parameter in
//! ascending name order: `u32` name length, UTF-8 name, `u32` rank, `u32`
//! extents, then row-major IEEE-754 `f32` values. All integers and floats
//! are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

const MAGIC: &[u8; 5] = b"SVRW1";

/// Uniform init on (-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init tensor")
}

/// A named model parameter. Non-trainable entries (batch-norm running
/// statistics) travel in the same file but receive no optimizer updates.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

/// Ordered collection of every parameter in the model.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f32>, trainable: bool) {
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<f32>> {
        Ok(&self.get(name)?.value)
    }

    /// Replace a parameter's value; the shape must be unchanged.
    pub fn set_value(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dimension(format!(
                "parameter '{name}': replacing {:?} with {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Register leaves for every trainable parameter on `tape` (frozen
    /// parameters pass through untracked) in the checker's scalar type.
    pub fn bind<S: Scalar>(&self, tape: &Tape<S>) -> BoundParams<S> {
        let map = self
            .params
            .values()
            .map(|p| {
                let t: Tensor<S> = p.value.cast();
                let t = if p.trainable { tape.leaf(&t) } else { t };
                (p.name.clone(), t)
            })
            .collect();
        BoundParams { map }
    }

    /// Serialize every parameter to `path` in the container format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(64 + self.numel() * 4);
        buf.extend_from_slice(MAGIC);
        for p in self.params.values() {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &e in p.value.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load values from `path` into this set. Every record must name an
    /// existing parameter with a matching shape; trainable flags are kept.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = read_weight_file(path)?;
        for (name, value) in loaded {
            let p = self
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::ingestion(format!("weight file names unknown parameter '{name}'")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::ingestion(format!(
                    "parameter '{name}': file shape {:?} != model shape {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Parameter lookup for a forward pass; values may be tape leaves.
pub struct BoundParams<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> BoundParams<S> {
    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }
}

fn read_exact_or(buf: &mut impl Read, out: &mut [u8], what: &str) -> Result<()> {
    buf.read_exact(out)
        .map_err(|_| Error::ingestion(format!("weight file truncated reading {what}")))
}

fn read_u32(buf: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(buf, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Decode a weight file into (name, tensor) pairs in file order.
pub fn read_weight_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::ingestion(format!("cannot read weight file {}: {e}", path.display())))?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 5];
    read_exact_or(&mut cur, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::ingestion(format!(
            "bad weight file magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    while (cur.position() as usize) < bytes.len() {
        let name_len = read_u32(&mut cur, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut cur, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::ingestion("weight file parameter name is not UTF-8"))?;
        let rank = read_u32(&mut cur, "rank")? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::ingestion(format!(
                "parameter '{name}' has invalid rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            read_exact_or(&mut cur, &mut b, "values")?;
            data.push(f32::from_le_bytes(b));
        }
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::ingestion(format!("parameter '{name}': {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}
