//! Scoring text-queries against scenes and ranking candidates.
//!
//! Three scores: the head's matching probability, the cosine between the
//! pooled embeddings of the pair, and (ret-based) the cosine between the
//! query embedded against a fixed scene and scene embeddings precomputed
//! against a fixed text-graph.

pub mod eval;
pub mod store;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rayon::prelude::*;
use thiserror::Error;

use crate::nn::{GraphEncoding, JointModel, PairForward};
use crate::train::cosine;
use crate::vectors::FeaturizedGraph;

pub use eval::{bench, eval_recall, write_recall_csv, BenchReport, CandidatePool, ModelScorer, RecallTable, Scorer};
pub use store::EmbeddingStore;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate scene id {0}")]
    DuplicateSceneId(String),
    #[error("unknown scene id {0}")]
    UnknownSceneId(String),
    #[error("need at least {needed} scenes, have {available}")]
    InsufficientScenes { needed: usize, available: usize },
    #[error("no queries given")]
    EmptyQuerySet,
    #[error("k = {k} is invalid for {candidates} candidates")]
    InvalidK { k: usize, candidates: usize },
    #[error("ret-based mode needs a store built against {expected:?}, have {found:?}")]
    FixedCounterpartMismatch { expected: String, found: Option<String> },
    #[error("embedding store: {0}")]
    BadStore(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MatchMode {
    MatchProb,
    CosSim,
    /// Id of the fixed text-graph the store was built against.
    RetBased(String),
}

impl MatchMode {
    pub fn name(&self) -> &'static str {
        match self {
            MatchMode::MatchProb => "match-prob",
            MatchMode::CosSim => "cos-sim",
            MatchMode::RetBased(_) => "ret-based",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `match-prob`, `cos-sim`, `ret-based` or `ret-based:<fixed id>`.
/// A bare `ret-based` carries an empty id, to be filled from the store.
impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "match-prob" => Ok(MatchMode::MatchProb),
            "cos-sim" => Ok(MatchMode::CosSim),
            "ret-based" => Ok(MatchMode::RetBased(String::new())),
            _ => s
                .strip_prefix("ret-based:")
                .map(|id| MatchMode::RetBased(id.to_string()))
                .ok_or_else(|| format!("unknown mode {s:?} (expected match-prob, cos-sim or ret-based)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Best first; ties by ascending scene id.
    pub ranked: Vec<(String, f64)>,
    pub mode: MatchMode,
}

/// Score of a single pair under a pairwise mode.
pub fn score_pair(model: &JointModel, text: &FeaturizedGraph, scene: &FeaturizedGraph, mode: &MatchMode) -> f64 {
    let t = GraphEncoding::new(model, text);
    let s = GraphEncoding::new(model, scene);
    pair_score(model, &t, &s, mode)
}

fn pair_score(model: &JointModel, text: &GraphEncoding, scene: &GraphEncoding, mode: &MatchMode) -> f64 {
    let p = PairForward::new(model, text, scene);
    match mode {
        MatchMode::MatchProb => p.match_prob,
        MatchMode::CosSim => cosine(&p.s_scene, &p.s_text),
        MatchMode::RetBased(_) => panic!("ret-based scores need a store"),
    }
}

/// Embeds every scene against `fixed_text`, keyed by scene id.
pub fn precompute_store(
    model: &JointModel,
    scenes: &[FeaturizedGraph],
    fixed_text: &FeaturizedGraph,
) -> Result<EmbeddingStore, RetrievalError> {
    let text = GraphEncoding::new(model, fixed_text);
    let vectors: Vec<Vec<f32>> = scenes
        .par_iter()
        .map(|s| {
            let p = PairForward::new(model, &text, &GraphEncoding::new(model, s));
            p.s_scene.iter().map(|&x| x as f32).collect()
        })
        .collect();
    let mut store = EmbeddingStore::new(model.dim(), fixed_text.graph_id.clone());
    for (s, v) in scenes.iter().zip(vectors) {
        store.insert(s.graph_id.clone(), v)?;
    }
    Ok(store)
}

/// Orders candidate indices by descending score, ties by ascending id.
pub fn rank(ids: &[&str], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    order
}

/// 1-based rank of candidate `truth` under the same ordering as [`rank`].
pub fn rank_of(ids: &[&str], scores: &[f64], truth: usize) -> usize {
    1 + (0..ids.len())
        .filter(|&j| j != truth)
        .filter(|&j| scores[j] > scores[truth] || (scores[j] == scores[truth] && ids[j] < ids[truth]))
        .count()
}

/// Ranks a fixed collection of scenes for text queries. Scene encodings are
/// computed once; the ret-based path needs [`Retriever::with_store`].
pub struct Retriever<'a> {
    model: &'a JointModel,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    scenes: Vec<GraphEncoding>,
    store: Option<RetBasedIndex>,
}

struct RetBasedIndex {
    fixed_id: String,
    fixed_scene: GraphEncoding,
    /// Aligned with `Retriever::ids`.
    vectors: Vec<Option<Array1<f64>>>,
}

impl<'a> Retriever<'a> {
    pub fn new(model: &'a JointModel, scenes: &[FeaturizedGraph]) -> Result<Self, RetrievalError> {
        let mut index = HashMap::new();
        for (i, s) in scenes.iter().enumerate() {
            if index.insert(s.graph_id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateSceneId(s.graph_id.clone()));
            }
        }
        let encoded = scenes.par_iter().map(|s| GraphEncoding::new(model, s)).collect();
        Ok(Self { model, ids: scenes.iter().map(|s| s.graph_id.clone()).collect(), index, scenes: encoded, store: None })
    }

    /// Enables ret-based scoring. `fixed_scene` is the counterpart queries
    /// are embedded against.
    pub fn with_store(mut self, store: &EmbeddingStore, fixed_scene: &FeaturizedGraph) -> Result<Self, RetrievalError> {
        if store.dim() != self.model.dim() {
            return Err(RetrievalError::BadStore(format!("store dim {} != model dim {}", store.dim(), self.model.dim())));
        }
        let vectors = self
            .ids
            .iter()
            .map(|id| store.get(id).map(|v| v.iter().map(|&x| x as f64).collect()))
            .collect();
        self.store = Some(RetBasedIndex {
            fixed_id: store.fixed_id().to_string(),
            fixed_scene: GraphEncoding::new(self.model, fixed_scene),
            vectors,
        });
        Ok(self)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scene_index(&self, id: &str) -> Result<usize, RetrievalError> {
        self.index.get(id).copied().ok_or_else(|| RetrievalError::UnknownSceneId(id.to_string()))
    }

    fn ret_index(&self, mode: &MatchMode) -> Result<Option<&RetBasedIndex>, RetrievalError> {
        let MatchMode::RetBased(expected) = mode else { return Ok(None) };
        match &self.store {
            Some(s) if expected.is_empty() || *expected == s.fixed_id => Ok(Some(s)),
            other => Err(RetrievalError::FixedCounterpartMismatch {
                expected: expected.clone(),
                found: other.as_ref().map(|s| s.fixed_id.clone()),
            }),
        }
    }

    /// Scores of `query` against the scenes at `candidates`.
    pub fn scores(&self, query: &GraphEncoding, candidates: &[usize], mode: &MatchMode) -> Result<Vec<f64>, RetrievalError> {
        match self.ret_index(mode)? {
            Some(store) => {
                let q = PairForward::new(self.model, query, &store.fixed_scene).s_text;
                candidates
                    .iter()
                    .map(|&c| {
                        store.vectors[c]
                            .as_ref()
                            .map(|v| cosine(&q, v))
                            .ok_or_else(|| RetrievalError::UnknownSceneId(self.ids[c].clone()))
                    })
                    .collect()
            }
            None => Ok(candidates.iter().map(|&c| pair_score(self.model, query, &self.scenes[c], mode)).collect()),
        }
    }

    pub fn encode_query(&self, text: &FeaturizedGraph) -> GraphEncoding {
        GraphEncoding::new(self.model, text)
    }

    /// Top-`k` of `candidate_ids` for `text`.
    pub fn retrieve(
        &self,
        text: &FeaturizedGraph,
        candidate_ids: &[&str],
        mode: &MatchMode,
        k: usize,
    ) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 || k > candidate_ids.len() {
            return Err(RetrievalError::InvalidK { k, candidates: candidate_ids.len() });
        }
        let idx = candidate_ids.iter().map(|id| self.scene_index(id)).collect::<Result<Vec<_>, _>>()?;
        let scores = self.scores(&self.encode_query(text), &idx, mode)?;
        let ranked = rank(candidate_ids, &scores)
            .into_iter()
            .take(k)
            .map(|i| (candidate_ids[i].to_string(), scores[i]))
            .collect();
        Ok(RetrievalResult { query_id: text.graph_id.clone(), ranked, mode: mode.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::vectors::{featurize, WordVectorTable};
    use proptest::prelude::*;

    fn fixture(dim: usize) -> (JointModel, Vec<FeaturizedGraph>, Vec<FeaturizedGraph>) {
        let table = WordVectorTable::empty(dim, 1);
        let synth = generate(&SynthConfig { num_scenes: 12, descriptions_per_scene: 1, ..Default::default() }).unwrap();
        let scenes = synth.iter().map(|s| featurize(&table, &s.scene)).collect();
        let texts = synth.iter().map(|s| featurize(&table, &s.descriptions[0].1)).collect();
        let model = JointModel::new(ModelConfig { dim, mlp_hidden: 8, seed: 5, ..Default::default() });
        (model, scenes, texts)
    }

    #[test]
    fn identical_graphs_have_unit_cosine() {
        let (mut model, scenes, _) = fixture(6);
        model.zero_cross_attention();
        let s = score_pair(&model, &scenes[0], &scenes[0], &MatchMode::CosSim);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn match_prob_in_unit_interval() {
        let (model, scenes, texts) = fixture(6);
        for t in &texts {
            for s in &scenes {
                let m = score_pair(&model, t, s, &MatchMode::MatchProb);
                assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn store_matches_online_embedding_bitwise() {
        let (model, scenes, texts) = fixture(6);
        let store = precompute_store(&model, &scenes, &texts[0]).unwrap();
        assert_eq!(store.fixed_id(), texts[0].graph_id);
        for s in &scenes {
            let online: Vec<f32> = crate::nn::embed_pair(&model, &texts[0], s).s_scene.iter().map(|&x| x as f32).collect();
            assert_eq!(store.get(&s.graph_id).unwrap(), online.as_slice());
        }
        let dup = vec![scenes[0].clone(), scenes[0].clone()];
        assert!(matches!(precompute_store(&model, &dup, &texts[0]), Err(RetrievalError::DuplicateSceneId(_))));
        assert!(precompute_store(&model, &[], &texts[0]).unwrap().is_empty());
    }

    #[test]
    fn retrieve_contract() {
        let (model, scenes, texts) = fixture(6);
        let r = Retriever::new(&model, &scenes).unwrap();
        let one = r.retrieve(&texts[0], &[&scenes[3].graph_id], &MatchMode::CosSim, 1).unwrap();
        assert_eq!(one.ranked[0].0, scenes[3].graph_id);
        let all: Vec<&str> = scenes.iter().map(|s| s.graph_id.as_str()).collect();
        let res = r.retrieve(&texts[1], &all, &MatchMode::MatchProb, all.len()).unwrap();
        assert!(res.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(res.ranked.len(), all.len());
        assert!(matches!(
            r.retrieve(&texts[0], &["nope"], &MatchMode::CosSim, 1),
            Err(RetrievalError::UnknownSceneId(_))
        ));
        assert!(matches!(r.retrieve(&texts[0], &all[..2], &MatchMode::CosSim, 3), Err(RetrievalError::InvalidK { .. })));
        assert!(matches!(
            r.retrieve(&texts[0], &all, &MatchMode::RetBased("x".into()), 1),
            Err(RetrievalError::FixedCounterpartMismatch { .. })
        ));
    }

    #[test]
    fn ret_based_uses_store() {
        let (model, scenes, texts) = fixture(6);
        let store = precompute_store(&model, &scenes, &texts[0]).unwrap();
        let r = Retriever::new(&model, &scenes).unwrap().with_store(&store, &scenes[0]).unwrap();
        let all: Vec<&str> = scenes.iter().map(|s| s.graph_id.as_str()).collect();
        let mode = MatchMode::RetBased(texts[0].graph_id.clone());
        let a = r.retrieve(&texts[2], &all, &mode, 5).unwrap();
        let b = r.retrieve(&texts[2], &all, &mode, 5).unwrap();
        assert_eq!(a, b);
        let q = PairForward::new(&model, &GraphEncoding::new(&model, &texts[2]), &GraphEncoding::new(&model, &scenes[0])).s_text;
        let v: Array1<f64> = store.get(&a.ranked[0].0).unwrap().iter().map(|&x| x as f64).collect();
        assert_eq!(a.ranked[0].1, cosine(&q, &v));
    }

    #[test]
    fn ties_break_by_id() {
        let ids = ["b", "a", "c"];
        assert_eq!(rank(&ids, &[0.5, 0.5, 0.5]), vec![1, 0, 2]);
        assert_eq!(rank_of(&ids, &[0.5, 0.5, 0.5], 0), 2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("cos-sim".parse::<MatchMode>().unwrap(), MatchMode::CosSim);
        assert_eq!("ret-based:t1".parse::<MatchMode>().unwrap(), MatchMode::RetBased("t1".into()));
        assert!("cosine".parse::<MatchMode>().is_err());
    }

    proptest! {
        #[test]
        fn positive_scaling_preserves_ranking(
            scores in proptest::collection::vec(-10.0f64..10.0, 1..20),
            scale in 0.01f64..100.0,
        ) {
            let ids: Vec<String> = (0..scores.len()).map(|i| format!("s{i:03}")).collect();
            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(rank(&ids, &scores), rank(&ids, &scaled));
        }

        #[test]
        fn rank_of_agrees_with_rank(scores in proptest::collection::vec(0i32..4, 1..12)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let ids: Vec<String> = (0..scores.len()).map(|i| format!("s{i:03}")).collect();
            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
            let order = rank(&ids, &scores);
            for (pos, &i) in order.iter().enumerate() {
                prop_assert_eq!(rank_of(&ids, &scores, i), pos + 1);
            }
        }
    }
}
