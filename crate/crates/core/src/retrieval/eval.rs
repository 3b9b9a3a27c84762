//! Top-k recall over sampled candidate pools, and query timing.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::{rank, rank_of, EmbeddingStore, MatchMode, RetrievalError, Retriever};
use crate::dataset::Dataset;
use crate::nn::{GraphEncoding, JointModel, PairForward};
use crate::train::cosine;
use crate::vectors::FeaturizedGraph;

/// Trials are split into this many equal groups; the reported ± is the
/// standard deviation of the per-group recalls.
pub const RECALL_GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidatePool {
    /// The true scene plus 9 distinct random distractors.
    TenCandidates,
    AllScenes,
}

impl CandidatePool {
    fn size(self, num_scenes: usize) -> usize {
        match self {
            CandidatePool::TenCandidates => 10,
            CandidatePool::AllScenes => num_scenes,
        }
    }
}

/// Scores a description (index into `dataset.texts`) against scenes
/// (indices into `dataset.scenes`).
pub trait Scorer: Sync {
    fn score(&self, text: usize, scenes: &[usize]) -> Result<Vec<f64>, RetrievalError>;
    fn name(&self) -> String;
}

/// Scores with a trained model under a [`MatchMode`].
pub struct ModelScorer<'a> {
    retriever: Retriever<'a>,
    texts: Vec<GraphEncoding>,
    mode: MatchMode,
}

impl<'a> ModelScorer<'a> {
    /// For ret-based mode pass the store and the index of the scene that
    /// queries are embedded against.
    pub fn new(
        model: &'a JointModel,
        dataset: &Dataset,
        mode: MatchMode,
        store: Option<(&EmbeddingStore, usize)>,
    ) -> Result<Self, RetrievalError> {
        let mut retriever = Retriever::new(model, &dataset.scenes)?;
        if let Some((store, fixed_scene)) = store {
            retriever = retriever.with_store(store, &dataset.scenes[fixed_scene])?;
        }
        let texts = dataset.texts.par_iter().map(|t| GraphEncoding::new(model, &t.graph)).collect();
        Ok(Self { retriever, texts, mode })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, text: usize, scenes: &[usize]) -> Result<Vec<f64>, RetrievalError> {
        self.retriever.scores(&self.texts[text], scenes, &self.mode)
    }

    fn name(&self) -> String {
        self.mode.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallTable {
    pub mode: String,
    pub pool: CandidatePool,
    pub ks: Vec<usize>,
    /// Fraction of trials with the true scene in the top k.
    pub recall: Vec<f64>,
    pub stddev: Vec<f64>,
    pub trials: usize,
}

/// Samples `trials` queries and records the rank of each true scene.
pub fn eval_recall<R: Rng + ?Sized>(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    ks: &[usize],
    pool: CandidatePool,
    trials: usize,
    rng: &mut R,
) -> Result<RecallTable, RetrievalError> {
    let n = dataset.scenes.len();
    let pool_size = pool.size(n);
    if n < pool_size.max(1) {
        return Err(RetrievalError::InsufficientScenes { needed: pool_size.max(1), available: n });
    }
    if dataset.texts.is_empty() || trials == 0 {
        return Err(RetrievalError::EmptyQuerySet);
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > pool_size) {
        return Err(RetrievalError::InvalidK { k, candidates: pool_size });
    }
    // (text, candidates, position of the true scene among the candidates)
    let draws: Vec<(usize, Vec<usize>, usize)> = (0..trials)
        .map(|_| {
            let text = rng.random_range(0..dataset.texts.len());
            let truth = dataset.texts[text].scene_index;
            match pool {
                CandidatePool::AllScenes => (text, (0..n).collect(), truth),
                CandidatePool::TenCandidates => {
                    let others = sample(rng, n - 1, 9).into_iter().map(|j| if j >= truth { j + 1 } else { j });
                    (text, std::iter::once(truth).chain(others).collect(), 0)
                }
            }
        })
        .collect();
    let ranks: Vec<usize> = draws
        .par_iter()
        .map(|(text, candidates, truth)| {
            let scores = scorer.score(*text, candidates)?;
            let ids: Vec<&str> = candidates.iter().map(|&c| dataset.scenes[c].graph_id.as_str()).collect();
            Ok(rank_of(&ids, &scores, *truth))
        })
        .collect::<Result<_, RetrievalError>>()?;

    let groups = RECALL_GROUPS.min(trials);
    let bounds: Vec<usize> = (0..=groups).map(|g| g * trials / groups).collect();
    let mut recall = Vec::with_capacity(ks.len());
    let mut stddev = Vec::with_capacity(ks.len());
    for &k in ks {
        let hits: Vec<f64> = ranks.iter().map(|&r| f64::from(u8::from(r <= k))).collect();
        recall.push(hits.iter().sum::<f64>() / trials as f64);
        let per_group: Vec<f64> = bounds
            .windows(2)
            .map(|w| hits[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
            .collect();
        stddev.push(sample_stddev(&per_group));
    }
    Ok(RecallTable { mode: scorer.name(), pool, ks: ks.to_vec(), recall, stddev, trials })
}

fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One row per table, one `top-k` column per k, cells `recall±stddev` in
/// percent with two decimals. All tables must share the same ks.
pub fn write_recall_csv<W: Write>(mut w: W, tables: &[RecallTable]) -> std::io::Result<()> {
    let Some(first) = tables.first() else { return Ok(()) };
    write!(w, "mode")?;
    for k in &first.ks {
        write!(w, ",top-{k}")?;
    }
    writeln!(w)?;
    for t in tables {
        write!(w, "{}", t.mode)?;
        for (r, s) in t.recall.iter().zip(&t.stddev) {
            write!(w, ",{:.2}±{:.2}", 100.0 * r, 100.0 * s)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub median_query_seconds: f64,
    pub store_bytes: usize,
    pub queries: usize,
    pub candidates: usize,
}

/// Times embedding each query against the fixed scene and ranking every
/// store entry by cosine. Single-threaded; one untimed warm-up pass, then
/// the median over `repetitions` timed passes of every query.
pub fn bench(
    model: &JointModel,
    store: &EmbeddingStore,
    queries: &[FeaturizedGraph],
    fixed_scene: &FeaturizedGraph,
    repetitions: usize,
) -> Result<BenchReport, RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::EmptyQuerySet);
    }
    let fixed = GraphEncoding::new(model, fixed_scene);
    let ids: Vec<&str> = store.ids().iter().map(String::as_str).collect();
    let vectors: Vec<Array1<f64>> = store.entries().map(|(_, v)| v.iter().map(|&x| x as f64).collect()).collect();
    let run = |q: &FeaturizedGraph| {
        let text = GraphEncoding::new(model, q);
        let emb = PairForward::new(model, &text, &fixed).s_text;
        let scores: Vec<f64> = vectors.iter().map(|v| cosine(&emb, v)).collect();
        rank(&ids, &scores)
    };
    for q in queries {
        black_box(run(q));
    }
    let mut times = Vec::with_capacity(queries.len() * repetitions.max(1));
    for _ in 0..repetitions.max(1) {
        for q in queries {
            let start = Instant::now();
            black_box(run(black_box(q)));
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        median_query_seconds: times[times.len() / 2],
        store_bytes: store.encoded_len(),
        queries: queries.len(),
        candidates: store.len(),
    })
}
