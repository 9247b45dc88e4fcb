//! Embedding storage and the binary table format.
//!
//! `GCEB` file: magic, u32 version, u32 D, u64 count, then `count` rows of
//! D little-endian f32. Row identities live in a JSONL sidecar next to it
//! (`emb.gceb` → `emb.ids.jsonl`) with one `{row, id, kind}` per line.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::io::{parse_jsonl, to_jsonl};
use crate::rng::derive_rng;

const MAGIC: &[u8; 4] = b"GCEB";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
/// Stored rows must have unit norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Image => "image",
            EmbeddingKind::Text => "text",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(EmbeddingKind::Image),
            "text" => Ok(EmbeddingKind::Text),
            _ => Err(format!("unknown embedding kind {s:?}")),
        }
    }
}

/// One sidecar line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub row: u64,
    pub id: String,
    pub kind: EmbeddingKind,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ids.jsonl")
}

/// Unit vectors keyed by (kind, id), stored in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    keys: Vec<(EmbeddingKind, String)>,
    index: [HashMap<String, usize>; 2],
}

fn slot(kind: EmbeddingKind) -> usize {
    match kind {
        EmbeddingKind::Image => 0,
        EmbeddingKind::Text => 1,
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            keys: Vec::new(),
            index: Default::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn insert(&mut self, kind: EmbeddingKind, id: impl Into<String>, v: &[f32]) -> Result<(), RetrievalError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(RetrievalError::NotUnitNorm { kind, id, norm });
        }
        let map = &mut self.index[slot(kind)];
        if map.contains_key(&id) {
            return Err(RetrievalError::DuplicateId { kind, id });
        }
        map.insert(id.clone(), self.keys.len());
        self.keys.push((kind, id));
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn contains(&self, kind: EmbeddingKind, id: &str) -> bool {
        self.index[slot(kind)].contains_key(id)
    }

    pub fn get(&self, kind: EmbeddingKind, id: &str) -> Option<&[f32]> {
        self.index[slot(kind)].get(id).map(|&r| self.row(r))
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// The stored vector widened to f64, or `MissingEmbedding`.
    pub fn vector(&self, kind: EmbeddingKind, id: &str) -> Result<Vec<f64>, RetrievalError> {
        self.get(kind, id)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| RetrievalError::MissingEmbedding { kind, id: id.to_string() })
    }

    pub fn keys(&self) -> impl Iterator<Item = (EmbeddingKind, &str)> {
        self.keys.iter().map(|(k, id)| (*k, id.as_str()))
    }

    pub fn sidecar(&self) -> Vec<SidecarEntry> {
        self.keys
            .iter()
            .enumerate()
            .map(|(row, (kind, id))| SidecarEntry { row: row as u64, id: id.clone(), kind: *kind })
            .collect()
    }

    pub fn to_gceb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Rebuilds a table from GCEB bytes and sidecar entries, validating
    /// row coverage, uniqueness and unit norms.
    pub fn from_parts(bytes: &[u8], sidecar: &[SidecarEntry]) -> Result<Self, RetrievalError> {
        let fmt_err = |m: String| RetrievalError::Format(m);
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(fmt_err("missing GCEB header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let dim = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let expected = (count as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
        if expected != bytes.len() as u128 {
            return Err(fmt_err(format!(
                "{count} rows of dimension {dim} need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        if sidecar.len() as u64 != count {
            return Err(fmt_err(format!("sidecar lists {} rows, table has {count}", sidecar.len())));
        }
        let mut by_row: Vec<Option<&SidecarEntry>> = vec![None; sidecar.len()];
        for e in sidecar {
            let slot = by_row
                .get_mut(e.row as usize)
                .ok_or_else(|| fmt_err(format!("sidecar row {} out of range", e.row)))?;
            if slot.replace(e).is_some() {
                return Err(fmt_err(format!("sidecar row {} listed twice", e.row)));
            }
        }
        let floats: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut table = Self::new(dim);
        for (r, e) in by_row.into_iter().enumerate() {
            let e = e.expect("every row covered");
            table.insert(e.kind, e.id.clone(), &floats[r * dim..(r + 1) * dim])?;
        }
        Ok(table)
    }

    /// Writes `path` and its sidecar.
    pub fn write(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| RetrievalError::Io { path: p, source }
        };
        fs::write(path, self.to_gceb_bytes()).map_err(io(path))?;
        let side = sidecar_path(path);
        fs::write(&side, to_jsonl(&self.sidecar())).map_err(io(&side))
    }

    pub fn read(path: &Path) -> Result<Self, RetrievalError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| RetrievalError::Io { path: p, source }
        };
        let bytes = fs::read(path).map_err(io(path))?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(io(&side))?;
        let entries: Vec<SidecarEntry> = parse_jsonl(&side.display().to_string(), &text)?;
        Self::from_parts(&bytes, &entries)
    }
}

/// Deterministic stand-in for an encoder: a hash-seeded direction on the
/// unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    pub dim: usize,
    pub salt: u64,
}

impl StubEmbedder {
    pub fn embed(&self, key: &str) -> Vec<f32> {
        stub_embed(key, self.dim, self.salt)
    }
}

/// Pure function of (key, dim, salt). Panics if `dim < 2`.
pub fn stub_embed(key: &str, dim: usize, salt: u64) -> Vec<f32> {
    assert!(dim >= 2, "stub embeddings need at least two dimensions");
    let mut rng = derive_rng(salt, &["stub-embed", &dim.to_string(), key]);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn stub_is_deterministic_and_unit() {
        let a = stub_embed("horse", 64, 7);
        assert_eq!(a, stub_embed("horse", 64, 7));
        assert_ne!(a, stub_embed("horse", 64, 8));
        assert_ne!(a, stub_embed("horses", 64, 7));
        assert!((norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn insert_validates() {
        let mut t = EmbeddingTable::new(2);
        t.insert(EmbeddingKind::Image, "a", &[1.0, 0.0]).unwrap();
        t.insert(EmbeddingKind::Text, "a", &[0.0, 1.0]).unwrap();
        assert!(matches!(t.insert(EmbeddingKind::Image, "a", &[1.0, 0.0]), Err(RetrievalError::DuplicateId { .. })));
        assert!(matches!(t.insert(EmbeddingKind::Image, "b", &[1.0, 1.0]), Err(RetrievalError::NotUnitNorm { .. })));
        assert!(matches!(t.insert(EmbeddingKind::Image, "b", &[f32::NAN, 0.0]), Err(RetrievalError::NotUnitNorm { .. })));
        assert!(matches!(t.insert(EmbeddingKind::Image, "b", &[1.0]), Err(RetrievalError::DimensionMismatch { .. })));
        assert_eq!(t.get(EmbeddingKind::Text, "a"), Some(&[0.0f32, 1.0][..]));
        assert!(matches!(t.vector(EmbeddingKind::Text, "zz"), Err(RetrievalError::MissingEmbedding { .. })));
    }

    #[test]
    fn header_layout_and_corruption() {
        let mut t = EmbeddingTable::new(3);
        t.insert(EmbeddingKind::Image, "x", &stub_embed("x", 3, 0)).unwrap();
        let b = t.to_gceb_bytes();
        assert_eq!(&b[..4], b"GCEB");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
        assert_eq!(b.len(), 20 + 12);
        let side = t.sidecar();
        assert!(EmbeddingTable::from_parts(&b[..b.len() - 1], &side).is_err());
        assert!(EmbeddingTable::from_parts(&b, &[]).is_err());
        let mut moved = side.clone();
        moved[0].row = 4;
        assert!(EmbeddingTable::from_parts(&b, &moved).is_err());
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("out/emb.gceb")), PathBuf::from("out/emb.ids.jsonl"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.gceb");
        let mut t = EmbeddingTable::new(8);
        for (i, k) in ["a", "b", "c"].iter().enumerate() {
            let kind = if i % 2 == 0 { EmbeddingKind::Image } else { EmbeddingKind::Text };
            t.insert(kind, *k, &stub_embed(k, 8, 1)).unwrap();
        }
        t.write(&p).unwrap();
        assert_eq!(EmbeddingTable::read(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(keys in proptest::collection::btree_set("[a-z]{1,6}", 0..20), d in 2usize..16, salt: u64) {
            let mut t = EmbeddingTable::new(d);
            for k in &keys {
                t.insert(EmbeddingKind::Image, k.clone(), &stub_embed(k, d, salt)).unwrap();
            }
            let back = EmbeddingTable::from_parts(&t.to_gceb_bytes(), &t.sidecar()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
