//! Word-vector featurization of graph labels, attributes and relations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::graph::{GraphKind, SemanticGraph};

pub const DEFAULT_DIM: usize = 300;
pub const DEFAULT_FALLBACK_SEED: u64 = 0x5eed_0f_0007;

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("malformed vector file: {0}")]
    MalformedVectorFile(String),
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token → vector lookup with deterministic out-of-vocabulary fallback.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
    fallback_seed: u64,
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl WordVectorTable {
    /// A table with no entries: every word resolves through the seeded
    /// fallback.
    pub fn empty(dim: usize, fallback_seed: u64) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self { dim, entries: HashMap::new(), fallback_seed }
    }

    pub fn from_entries(
        dim: usize,
        entries: HashMap<String, Vec<f64>>,
        fallback_seed: u64,
    ) -> Result<Self, VectorError> {
        if dim == 0 {
            return Err(VectorError::MalformedVectorFile("dimension must be positive".into()));
        }
        if let Some((t, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(VectorError::MalformedVectorFile(format!(
                "token {t:?} has {} components, expected {dim}",
                v.len()
            )));
        }
        Ok(Self { dim, entries, fallback_seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(|v| v.as_slice())
    }

    pub fn with_fallback_seed(mut self, seed: u64) -> Self {
        self.fallback_seed = seed;
        self
    }

    /// Unit-norm pseudo-random vector derived from `hash(word, seed)`.
    pub fn fallback_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes(), self.fallback_seed));
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        match self.entries.get(word) {
            Some(v) => v.clone(),
            None => self.fallback_vector(word),
        }
    }

    /// Vector for a (possibly multi-word) token. A token present verbatim is
    /// returned as stored; otherwise the whitespace-separated words are
    /// averaged, each resolved by lookup or fallback.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        debug_assert!(!token.trim().is_empty(), "token must be non-empty");
        if let Some(v) = self.entries.get(token) {
            return v.clone();
        }
        let words: Vec<&str> = token.split_whitespace().collect();
        if words.len() == 1 {
            return self.word_vector(words[0]);
        }
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            for (a, x) in acc.iter_mut().zip(self.word_vector(w)) {
                *a += x;
            }
        }
        let n = words.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Reads a text-format word-vector file: a `count dim` header line followed
/// by `token v1 .. v_dim` lines.
pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<WordVectorTable, VectorError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| VectorError::MalformedVectorFile("empty file".into()))??;
    let mut parts = header.split_whitespace();
    let parse_usize = |s: Option<&str>, what: &str| -> Result<usize, VectorError> {
        s.and_then(|x| x.parse().ok())
            .ok_or_else(|| VectorError::MalformedVectorFile(format!("bad header {what}: {header:?}")))
    };
    let count = parse_usize(parts.next(), "count")?;
    let dim = parse_usize(parts.next(), "dim")?;
    if dim == 0 {
        return Err(VectorError::MalformedVectorFile("dimension must be positive".into()));
    }
    let mut entries = HashMap::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().unwrap().to_string();
        let vals: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    VectorError::MalformedVectorFile(format!("line {line_no}: bad float {f:?}"))
                })
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != dim {
            return Err(VectorError::DimensionMismatch { line: line_no, expected: dim, found: vals.len() });
        }
        entries.insert(token, vals);
    }
    if entries.len() != count {
        log::warn!("vector file header announced {count} entries, read {}", entries.len());
    }
    Ok(WordVectorTable { dim, entries, fallback_seed: DEFAULT_FALLBACK_SEED })
}

/// Network input: per-node and per-edge feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedGraph {
    pub graph_id: String,
    pub kind: GraphKind,
    pub node_features: Array2<f64>,
    /// `(source_index, target_index)` into the node rows.
    pub edge_list: Vec<(usize, usize)>,
    pub edge_features: Array2<f64>,
}

impl FeaturizedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.node_features.iter().chain(self.edge_features.iter()).all(|x| x.is_finite())
    }

    /// Same graph with node rows reordered so that new row `i` is old row
    /// `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> FeaturizedGraph {
        assert_eq!(perm.len(), self.num_nodes());
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        FeaturizedGraph {
            graph_id: self.graph_id.clone(),
            kind: self.kind,
            node_features: self.node_features.select(ndarray::Axis(0), perm),
            edge_list: self.edge_list.iter().map(|&(s, t)| (inverse[s], inverse[t])).collect(),
            edge_features: self.edge_features.clone(),
        }
    }
}

/// Node row = label vector + mean attribute vector (zero when there are no
/// attributes); edge row = relation vector.
pub fn featurize(table: &WordVectorTable, g: &SemanticGraph) -> FeaturizedGraph {
    let dim = table.dim();
    let mut node_features = Array2::zeros((g.nodes.len(), dim));
    for (i, node) in g.nodes.iter().enumerate() {
        let mut row = Array1::from(table.token_vector(&node.label));
        if !node.attributes.is_empty() {
            let t = node.attributes.len() as f64;
            for attr in &node.attributes {
                row.scaled_add(1.0 / t, &Array1::from(table.token_vector(attr)));
            }
        }
        node_features.row_mut(i).assign(&row);
    }
    let index = g.node_index();
    let mut edge_features = Array2::zeros((g.edges.len(), dim));
    let mut edge_list = Vec::with_capacity(g.edges.len());
    for (e, edge) in g.edges.iter().enumerate() {
        edge_list.push((index[&edge.source], index[&edge.target]));
        edge_features.row_mut(e).assign(&Array1::from(table.token_vector(&edge.relation)));
    }
    FeaturizedGraph { graph_id: g.graph_id.clone(), kind: g.kind, node_features, edge_list, edge_features }
}
