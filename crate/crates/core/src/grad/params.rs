//! Named parameter tensors and their binary checkpoint format.
//!
//! A [`ParamStore`] owns every learnable (and frozen) tensor of a model in a
//! stable insertion order, which is what makes training deterministic: leaf
//! registration on the tape, gradient accumulation, and optimizer updates
//! all iterate the same order.
//!
//! Checkpoints use a little-endian binary layout with magic `ADFP`:
//!
//! ```text
//! "ADFP"  u32 version  u32 count
//! repeated count times:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rows, u32 cols, u8 trainable
//!   rows*cols f32 values
//! ```
//!
//! Values are stored as `f32`; with the `f32` arithmetic used for training
//! the round trip is bit-exact.

use std::collections::HashMap;
use std::path::Path;

use crate::real::{r, to_f64, Real};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADFP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Malformed(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Malformed(detail) => write!(f, "malformed checkpoint: {detail}"),
            CheckpointError::Io(e) => write!(f, "checkpoint i/o error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Stable handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
    /// Frozen tensors ride along in checkpoints but are skipped by the
    /// optimizer.
    pub trainable: bool,
}

/// Ordered, name-indexed collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Names must be unique; a duplicate is a
    /// programming error, not a recoverable condition.
    pub fn insert(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        values: Vec<T>,
        trainable: bool,
    ) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter shape mismatch for {name}");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name: name.to_string(), rows, cols, values, trainable });
        let id = ParamId(self.entries.len() - 1);
        self.index.insert(name.to_string(), id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id(name).map(|id| self.entry(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Ids of trainable tensors, in insertion order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Element counts of the given tensors (e.g. to size an optimizer).
    pub fn lens(&self, ids: &[ParamId]) -> Vec<usize> {
        ids.iter().map(|&id| self.entries[id.0].values.len()).collect()
    }

    /// Mutable value slices for the given ids, which must be ascending
    /// (as returned by [`trainable_ids`](Self::trainable_ids)) — the shape
    /// an optimizer step consumes.
    pub fn values_mut(&mut self, ids: &[ParamId]) -> Vec<&mut [T]> {
        debug_assert!(ids.windows(2).all(|w| w[0].0 < w[1].0), "ids must be ascending");
        let mut out = Vec::with_capacity(ids.len());
        let mut iter = self.entries.iter_mut().enumerate();
        for id in ids {
            loop {
                let (i, e) = iter.next().expect("parameter id out of range");
                if i == id.0 {
                    out.push(e.values.as_mut_slice());
                    break;
                }
            }
        }
        out
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.rows as u32).to_le_bytes());
            out.extend_from_slice(&(e.cols as u32).to_le_bytes());
            out.push(e.trainable as u8);
            for &v in &e.values {
                out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Malformed(format!(
                "bad magic {:02x?}, expected {:02x?}",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Malformed(format!(
                "unsupported version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name_bytes = cur.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Malformed("non-UTF-8 tensor name".into()))?
                .to_string();
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let trainable = cur.take(1)?[0] != 0;
            let n = rows.checked_mul(cols).ok_or_else(|| {
                CheckpointError::Malformed(format!("tensor {name} shape overflows"))
            })?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let b = cur.take(4)?;
                values.push(r(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64));
            }
            if store.index.contains_key(&name) {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate tensor name {name}"
                )));
            }
            store.insert(&name, rows, cols, values, trainable);
        }
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }

    pub fn save_file(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w1", 2, 3, vec![0.1, -0.2, 0.3, 1.5e-7, -4.0, 0.0], true);
        s.insert("b1", 2, 1, vec![std::f32::consts::PI, -1.0], true);
        s.insert("frozen/scale", 1, 1, vec![2.5], false);
        s
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let store = sample_store();
        let bytes = store.to_bytes();
        let loaded = ParamStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (id, e) in store.iter() {
            let l = loaded.entry(ParamId(id.index()));
            assert_eq!(l.name, e.name);
            assert_eq!((l.rows, l.cols, l.trainable), (e.rows, e.cols, e.trainable));
            for (a, b) in l.values.iter().zip(&e.values) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {}", e.name);
            }
        }
        // And the re-serialization is byte-identical.
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.adfp");
        let store = sample_store();
        store.save_file(&path).unwrap();
        let loaded = ParamStore::<f32>::load_file(&path).unwrap();
        assert_eq!(loaded.to_bytes(), store.to_bytes());
    }

    #[test]
    fn rejects_bad_magic_version_truncation_and_trailer() {
        let good = sample_store().to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ParamStore::<f32>::from_bytes(&bad_magic),
            Err(CheckpointError::Malformed(_))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 0xFF;
        assert!(matches!(
            ParamStore::<f32>::from_bytes(&bad_version),
            Err(CheckpointError::Malformed(_))
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            ParamStore::<f32>::from_bytes(truncated),
            Err(CheckpointError::Malformed(_))
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            ParamStore::<f32>::from_bytes(&trailing),
            Err(CheckpointError::Malformed(_))
        ));
    }

    #[test]
    fn trainable_ids_preserve_insertion_order_and_skip_frozen() {
        let store = sample_store();
        let ids = store.trainable_ids();
        assert_eq!(ids.len(), 2);
        assert_eq!(store.entry(ids[0]).name, "w1");
        assert_eq!(store.entry(ids[1]).name, "b1");
        assert_eq!(store.lens(&ids), vec![6, 2]);
    }

    #[test]
    fn lookup_by_name() {
        let store = sample_store();
        assert!(store.get("w1").is_some());
        assert!(store.get("nope").is_none());
        assert_eq!(store.id("b1").map(|i| i.index()), Some(1));
    }
}
