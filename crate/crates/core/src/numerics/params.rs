//! Named parameter storage and the binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LDDP" | u32 version | u32 n_meta | n_meta x (u32 len, utf8 "key=value")
//! u32 n_params | n_params x (u32 name_len, name, u32 rank, rank x u64 dim, f64 payload)
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, Tensor};
use crate::hash::Fnv1a;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDDP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which head or trunk a parameter belongs to. Derived from the name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Rep,
    Policy,
    Value,
    Dynamics,
    /// Parameters outside the four shared-model groups (VAE decoder,
    /// inverse-model head).
    Aux,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or_default() {
            "rep" => ParamGroup::Rep,
            "pi" => ParamGroup::Policy,
            "v" => ParamGroup::Value,
            "dyn" => ParamGroup::Dynamics,
            _ => ParamGroup::Aux,
        }
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds or replaces a parameter.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = tensor;
            return ParamId(i);
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of(&self.names[id.0])
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copy holding only the parameters whose group passes `keep`.
    pub fn subset(&self, keep: impl Fn(ParamGroup) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            if keep(ParamGroup::of(name)) {
                out.insert(name, t.clone());
            }
        }
        out
    }

    /// Overwrites every parameter of `self` that `src` also holds with the
    /// same shape. Returns how many were copied.
    pub fn copy_from(&mut self, src: &ParamStore, keep: impl Fn(ParamGroup) -> bool) -> Result<usize, NumericsError> {
        let mut copied = 0;
        for (_, name, t) in src.iter() {
            if !keep(ParamGroup::of(name)) {
                continue;
            }
            if let Some(&i) = self.index.get(name) {
                if self.tensors[i].shape() != t.shape() {
                    return Err(NumericsError::Shape {
                        op: "copy_from",
                        left: self.tensors[i].shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                self.tensors[i] = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Hash of names, shapes and exact payload bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::default();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W, metadata: &[(String, String)]) -> Result<(), NumericsError> {
        let mut buf = Vec::with_capacity(16 + self.num_scalars() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
        for (k, v) in metadata {
            if k.contains('=') {
                return Err(NumericsError::Checkpoint(format!("metadata key {k:?} contains '='")));
            }
            let kv = format!("{k}={v}");
            buf.extend_from_slice(&(kv.len() as u32).to_le_bytes());
            buf.extend_from_slice(kv.as_bytes());
        }
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (_, name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| NumericsError::Io(e.to_string()))
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ParamStore, Vec<(String, String)>), NumericsError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| NumericsError::Io(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(NumericsError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
        }
        let n_meta = cur.u32()?;
        let mut metadata = Vec::with_capacity(n_meta as usize);
        for _ in 0..n_meta {
            let len = cur.u32()? as usize;
            let kv = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| NumericsError::Checkpoint("metadata not utf-8".into()))?;
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| NumericsError::Checkpoint("metadata entry without '='".into()))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let n = cur.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| NumericsError::Checkpoint("name not utf-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = cur.take(count.checked_mul(8).ok_or_else(|| NumericsError::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(NumericsError::Checkpoint("trailing bytes".into()));
        }
        Ok((store, metadata))
    }

    pub fn save(&self, path: &Path, metadata: &[(String, String)]) -> Result<(), NumericsError> {
        let mut f = std::fs::File::create(path).map_err(|e| NumericsError::Io(format!("{}: {e}", path.display())))?;
        self.write_checkpoint(&mut f, metadata)
    }

    pub fn load(path: &Path) -> Result<(ParamStore, Vec<(String, String)>), NumericsError> {
        let mut f = std::fs::File::open(path).map_err(|e| NumericsError::Io(format!("{}: {e}", path.display())))?;
        Self::read_checkpoint(&mut f)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.bytes.len() {
            return Err(NumericsError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
