//! Named parameter tensors with seeded initialization and a flat binary archive.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Matrix;
use crate::error::{Error, Result};

const ARCHIVE_MAGIC: &[u8; 8] = b"PDVPARM1";

/// Deterministic uniform fan-in initialization: values are drawn from
/// `U(-1/√fan_in, 1/√fan_in)` with a generator keyed on `(seed, path, shape)`.
pub fn seeded_init(seed: u64, path: &str, shape: (usize, usize), fan_in: usize) -> Matrix {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((path.len() as u64).to_le_bytes());
    hasher.update(path.as_bytes());
    hasher.update((shape.0 as u64).to_le_bytes());
    hasher.update((shape.1 as u64).to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(key);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// All learnable tensors, keyed by module path (`pool.l3.r0.0.weight`, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    seed: u64,
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, tensors: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds a tensor. Re-inserting an existing name is allowed only with the same shape.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("parameter {name} has non-finite entries")));
        }
        if let Some(old) = self.tensors.get(&name) {
            if old.dim() != value.dim() {
                return Err(Error::Contract(format!(
                    "parameter {name} shape is fixed at {:?}, got {:?}",
                    old.dim(),
                    value.dim()
                )));
            }
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Inserts a seeded tensor unless `name` already exists.
    pub fn init(&mut self, name: &str, shape: (usize, usize), fan_in: usize) {
        if !self.tensors.contains_key(name) {
            let t = seeded_init(self.seed, name, shape, fan_in);
            self.tensors.insert(name.to_string(), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.fill(0.0);
            }
        }
    }

    /// Concatenates the named tensors (row-major) into one vector.
    pub fn flatten(&self, names: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for n in names {
            out.extend(self.get(n)?.iter().copied());
        }
        Ok(out)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, names: &[String], values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for n in names {
            let t = self.get_mut(n)?;
            let len = t.len();
            if offset + len > values.len() {
                return Err(Error::dim("flattened parameters", offset + len, values.len()));
            }
            for (dst, src) in t.iter_mut().zip(&values[offset..offset + len]) {
                *dst = *src;
            }
            offset += len;
        }
        if offset != values.len() {
            return Err(Error::dim("flattened parameters", offset, values.len()));
        }
        Ok(())
    }

    /// Archive layout: magic, seed, tensor count, then per tensor
    /// `name_len:u32, name, rows:u64, cols:u64, rows*cols f64` (all little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (r, c) = t.dim();
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(Error::Format { offset: 0, message: "not a parameter archive".into() });
        }
        let seed = r.u64()?;
        let count = r.u64()?;
        let mut store = Self::new(seed);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: at as u64, message: "tensor name is not utf-8".into() })?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            let t = Array2::from_shape_vec((rows, cols), data).expect("shape matches payload");
            store.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes after parameter archive".into(),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("archive truncated, wanted {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Gradient buffers keyed like [`ParamStore`]. Contributions to the same
/// name accumulate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<String, Matrix>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, g: Matrix) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    /// Flattens gradients in the order of `names`, using zeros for names with no
    /// recorded contribution.
    pub fn flatten(&self, names: &[String], params: &ParamStore) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for n in names {
            match self.grads.get(n) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(0.0, params.get(n)?.len())),
            }
        }
        Ok(out)
    }
}
