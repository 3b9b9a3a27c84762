//! Featurized (scene, description) corpora and the training manifest format.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::parse_text_graph;
use crate::graph::{filter_edges, parse_scene_graph, GraphError, SemanticGraph};
use crate::vectors::{featurize, FeaturizedGraph, WordVectorTable};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("duplicate scene id {0}")]
    DuplicateSceneId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One manifest record: a scene graph and the text-graphs describing it.
/// Paths are relative to the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_graph_path: String,
    pub text_graph_paths: Vec<String>,
}

pub type Manifest = Vec<ManifestEntry>;

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DatasetError::Manifest(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct TextSample {
    pub graph: FeaturizedGraph,
    pub scene_index: usize,
}

/// Scenes plus descriptions, each description tied to its scene.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scenes: Vec<FeaturizedGraph>,
    pub texts: Vec<TextSample>,
}

impl Dataset {
    pub fn from_graphs(
        table: &WordVectorTable,
        pairs: &[(SemanticGraph, Vec<SemanticGraph>)],
    ) -> Result<Self, DatasetError> {
        let mut ds = Dataset::default();
        let mut seen = HashMap::new();
        for (scene, texts) in pairs {
            if seen.insert(scene.graph_id.clone(), ()).is_some() {
                return Err(DatasetError::DuplicateSceneId(scene.graph_id.clone()));
            }
            let scene_index = ds.scenes.len();
            ds.scenes.push(featurize(table, scene));
            for t in texts {
                ds.texts.push(TextSample { graph: featurize(table, t), scene_index });
            }
        }
        Ok(ds)
    }

    /// Loads every manifest entry, filtering scene edges at `tau` meters.
    pub fn load(manifest_path: impl AsRef<Path>, table: &WordVectorTable, tau: f64) -> Result<Self, DatasetError> {
        let manifest_path = manifest_path.as_ref();
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest = read_manifest(manifest_path)?;
        let read_graph = |rel: &str, scene: bool| -> Result<SemanticGraph, DatasetError> {
            let path = base.join(rel);
            let bytes = std::fs::read(&path)?;
            let parsed = if scene { parse_scene_graph(&bytes) } else { parse_text_graph(&bytes) };
            let g = parsed.map_err(|source| DatasetError::Graph { path: path.clone(), source })?;
            if scene {
                filter_edges(&g, tau)
                    .map(|o| o.graph)
                    .map_err(|source| DatasetError::Graph { path, source })
            } else {
                Ok(g)
            }
        };
        let mut pairs = Vec::with_capacity(manifest.len());
        for entry in &manifest {
            let scene = read_graph(&entry.scene_graph_path, true)?;
            let texts = entry
                .text_graph_paths
                .iter()
                .map(|p| read_graph(p, false))
                .collect::<Result<Vec<_>, _>>()?;
            pairs.push((scene, texts));
        }
        Self::from_graphs(table, &pairs)
    }

    /// Indices of scenes with at least one description.
    pub fn described_scenes(&self) -> Vec<usize> {
        let mut has = vec![false; self.scenes.len()];
        for t in &self.texts {
            has[t.scene_index] = true;
        }
        (0..self.scenes.len()).filter(|&i| has[i]).collect()
    }

    /// Description indices grouped by scene.
    pub fn texts_by_scene(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.scenes.len()];
        for (k, t) in self.texts.iter().enumerate() {
            out[t.scene_index].push(k);
        }
        out
    }

    /// Index into `texts` of the description with this graph id.
    pub fn text_index(&self, id: &str) -> Option<usize> {
        self.texts.iter().position(|t| t.graph.graph_id == id)
    }

    pub fn dim(&self) -> Option<usize> {
        self.scenes.first().map(|s| s.dim())
    }
}
