//! Precomputed scene embeddings for ret-based matching.
//!
//! Layout (little-endian): magic `T2SGEMB1`, `version: u32`, `dim: u32`,
//! `count: u64`, the fixed-counterpart id (`u16` length + UTF-8), then
//! `count` records of id (`u16` length + UTF-8) followed by `dim` `f32`s.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RetrievalError;

pub const STORE_MAGIC: &[u8; 8] = b"T2SGEMB1";
pub const STORE_VERSION: u32 = 1;
/// magic + version + dim + count
pub const STORE_HEADER_BYTES: usize = 8 + 4 + 4 + 8;
const MAX_DIM: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    fixed_id: String,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, fixed_id: impl Into<String>) -> Self {
        Self { dim, fixed_id: fixed_id.into(), ids: Vec::new(), vectors: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Id of the fixed text-graph every scene was paired with.
    pub fn fixed_id(&self) -> &str {
        &self.fixed_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), RetrievalError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(RetrievalError::BadStore(format!("vector for {id} has {} dims, store has {}", vector.len(), self.dim)));
        }
        if id.len() > u16::MAX as usize {
            return Err(RetrievalError::BadStore(format!("id longer than {} bytes", u16::MAX)));
        }
        if self.index.contains_key(&id) {
            return Err(RetrievalError::DuplicateSceneId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    /// Exact serialized size: header + fixed id + Σ(2 + id_len) + count·dim·4.
    pub fn encoded_len(&self) -> usize {
        STORE_HEADER_BYTES
            + 2
            + self.fixed_id.len()
            + self.ids.iter().map(|id| 2 + id.len()).sum::<usize>()
            + self.len() * self.dim * 4
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        write_str(&mut w, &self.fixed_id)?;
        for (id, v) in self.entries() {
            write_str(&mut w, id)?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(RetrievalError::BadStore("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != STORE_VERSION {
            return Err(RetrievalError::BadStore(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut r)?);
        if dim == 0 || dim > MAX_DIM {
            return Err(RetrievalError::BadStore(format!("implausible dimension {dim}")));
        }
        let count = u64::from_le_bytes(read_array(&mut r)?);
        let fixed = read_str(&mut r)?;
        let mut store = Self::new(dim as usize, fixed);
        let mut buf = vec![0u8; dim as usize * 4];
        for _ in 0..count {
            let id = read_str(&mut r)?;
            r.read_exact(&mut buf)?;
            let v = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(id, v)?;
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(RetrievalError::BadStore("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, RetrievalError> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| RetrievalError::BadStore("id is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_store_is_valid_file() {
        let s = EmbeddingStore::new(3, "t");
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), s.encoded_len());
        assert_eq!(bytes.len(), STORE_HEADER_BYTES + 2 + 1);
        assert_eq!(EmbeddingStore::read_from(&bytes[..]).unwrap(), s);
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut s = EmbeddingStore::new(2, "t");
        s.insert("a", vec![1.0, 2.0]).unwrap();
        assert!(matches!(s.insert("a", vec![0.0, 0.0]), Err(RetrievalError::DuplicateSceneId(_))));
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut s = EmbeddingStore::new(2, "t");
        s.insert("a", vec![1.0, 2.0]).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::read_from(&bad[..]), Err(RetrievalError::BadStore(_))));
        assert!(EmbeddingStore::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(EmbeddingStore::read_from(&long[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            dim in 1usize..8,
            ids in proptest::collection::hash_set("[a-z0-9_-]{0,12}", 0..20),
            seed in any::<u32>(),
        ) {
            let mut s = EmbeddingStore::new(dim, "fixed-text");
            for (i, id) in ids.iter().enumerate() {
                let v = (0..dim).map(|j| f32::from_bits(seed.wrapping_add((i * 31 + j) as u32) % 0x7f00_0000)).collect();
                s.insert(id.clone(), v).unwrap();
            }
            let mut bytes = Vec::new();
            s.write_to(&mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), s.encoded_len());
            let back = EmbeddingStore::read_from(&bytes[..]).unwrap();
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }
}
