//! Joint text-graph / scene-graph embedding network.
//!
//! `N` blocks of (self-attention on each graph, then cross-attention between
//! them), mean pooling to `S_text` / `S_scene`, and a three-layer MLP on
//! `[S_text ‖ S_scene]` producing a matching probability.
//!
//! Forward and backward passes are written by hand. The pair forward is split
//! in two stages so batched training can share work: [`GraphEncoding`] holds
//! everything that depends on one graph only (first-block self-attention and
//! the first block's cross-attention projections), and [`PairForward`] holds
//! the rest.

mod attention;
pub mod checkpoint;
mod forward;
mod linear;

pub use attention::{mean_pool, neighborhoods, CrossAttention, CrossProjection, Incoming, SelfAttention};
pub use forward::{embed_pair, GraphEncoding, GraphGrad, PairForward};
pub use linear::Linear;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which edges a node attends over in self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Neighborhood {
    /// Sources of the node's incoming directed edges.
    #[default]
    InNeighbors,
    /// Both endpoints of every incident edge.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_blocks: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    #[serde(default)]
    pub neighborhood: Neighborhood,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 300, num_blocks: 1, mlp_hidden: 256, seed: 0, neighborhood: Neighborhood::InNeighbors }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be positive".into());
        }
        if self.num_blocks == 0 {
            return Err("num_blocks must be at least 1".into());
        }
        if self.mlp_hidden == 0 {
            return Err("mlp_hidden must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub self_attn: SelfAttention,
    pub cross_attn: CrossAttention,
}

/// `2·dim → hidden → hidden → 1`, ReLU between layers, sigmoid on output.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchHead {
    pub layers: [Linear; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub head: MatchHead,
}

/// Matching output for one (text, scene) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub s_scene: Vec<f64>,
    pub s_text: Vec<f64>,
    pub match_prob: f64,
}

impl JointModel {
    /// Weights uniform in `±1/sqrt(fan_in)` from the config seed; biases zero.
    pub fn new(config: ModelConfig) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.dim;
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                self_attn: SelfAttention::init(&mut rng, dim),
                cross_attn: CrossAttention::init(&mut rng, dim),
            })
            .collect();
        let head = MatchHead {
            layers: [
                Linear::init(&mut rng, 2 * dim, config.mlp_hidden, true),
                Linear::init(&mut rng, config.mlp_hidden, config.mlp_hidden, true),
                Linear::init(&mut rng, config.mlp_hidden, 1, true),
            ],
        };
        Self { config, blocks, head }
    }

    /// Same shapes, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block { self_attn: b.self_attn.zeros_like(), cross_attn: b.cross_attn.zeros_like() })
                .collect(),
            head: MatchHead { layers: self.head.layers.clone().map(|l| l.zeros_like()) },
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let sa = &block.self_attn;
            out.push((format!("block{b}.self.query"), &sa.query));
            out.push((format!("block{b}.self.key"), &sa.key));
            out.push((format!("block{b}.self.value"), &sa.value));
            out.push((format!("block{b}.self.edge"), &sa.edge));
            let ca = &block.cross_attn;
            out.push((format!("block{b}.cross.query"), &ca.query));
            out.push((format!("block{b}.cross.key"), &ca.key));
            out.push((format!("block{b}.cross.value"), &ca.value));
        }
        for (i, l) in self.head.layers.iter().enumerate() {
            out.push((format!("head.{i}"), l));
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for block in self.blocks.iter_mut() {
            let sa = &mut block.self_attn;
            out.extend([&mut sa.query, &mut sa.key, &mut sa.value, &mut sa.edge]);
            let ca = &mut block.cross_attn;
            out.extend([&mut ca.query, &mut ca.key, &mut ca.value]);
        }
        out.extend(self.head.layers.iter_mut());
        out
    }

    /// Every parameter tensor in declaration order, named by group.
    pub fn parameters(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.linears() {
            out.push((format!("{name}.weight"), l.weight.as_slice().expect("contiguous")));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b.as_slice().expect("contiguous")));
            }
        }
        out
    }

    /// Mutable views in the same order as [`JointModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.linears_mut() {
            out.push(l.weight.as_slice_mut().expect("contiguous"));
            if let Some(b) = l.bias.as_mut() {
                out.push(b.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|(_, p)| p.iter().all(|x| x.is_finite()))
    }

    /// Sets every cross-attention parameter to zero.
    pub fn zero_cross_attention(&mut self) {
        for b in &mut self.blocks {
            b.cross_attn = b.cross_attn.zeros_like();
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &JointModel, scale: f64) {
        let src: Vec<Vec<f64>> = other.parameters().into_iter().map(|(_, p)| p.to_vec()).collect();
        for (dst, s) in self.parameters_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s) {
                *d += scale * x;
            }
        }
    }
}
