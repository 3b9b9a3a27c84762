use ndarray::{concatenate, Array1, Array2, Axis};

use super::attention::{mean_pool, neighborhoods, CrossAttention, CrossProjection, Incoming, SelfAttentionCache};
use super::{EmbeddingPair, JointModel};
use crate::vectors::FeaturizedGraph;

/// Everything that depends on one graph alone: the first block's
/// self-attention output and its cross-attention projections.
#[derive(Debug, Clone)]
pub struct GraphEncoding {
    incoming: Vec<Vec<Incoming>>,
    edge_features: Array2<f64>,
    self_cache: SelfAttentionCache,
    pub hidden: Array2<f64>,
    pub proj: CrossProjection,
}

/// Gradient flowing back into a [`GraphEncoding`] from one or more pairs.
#[derive(Debug, Clone)]
pub struct GraphGrad {
    pub hidden: Array2<f64>,
    pub proj: CrossProjection,
}

impl GraphGrad {
    pub fn zeros_for(enc: &GraphEncoding) -> Self {
        Self { hidden: Array2::zeros(enc.hidden.raw_dim()), proj: enc.proj.zeros_like() }
    }

    pub fn add_assign(&mut self, other: &GraphGrad) {
        self.hidden += &other.hidden;
        self.proj.add_assign(&other.proj);
    }
}

impl GraphEncoding {
    pub fn new(model: &JointModel, g: &FeaturizedGraph) -> Self {
        assert_eq!(g.dim(), model.dim(), "feature dimension does not match the model");
        let incoming = neighborhoods(g.num_nodes(), &g.edge_list, model.config.neighborhood);
        let block = &model.blocks[0];
        let (hidden, self_cache) = block.self_attn.forward(&g.node_features, &g.edge_features, incoming.clone());
        let proj = block.cross_attn.project(&hidden);
        Self { incoming, edge_features: g.edge_features.clone(), self_cache, hidden, proj }
    }

    pub fn num_nodes(&self) -> usize {
        self.hidden.nrows()
    }

    /// Back-propagates accumulated pair gradients through the first block.
    /// Returns `(dL/d node_features, dL/d edge_features)`.
    pub fn backward(&self, model: &JointModel, grad_in: &GraphGrad, grads: &mut JointModel) -> (Array2<f64>, Array2<f64>) {
        let block = &model.blocks[0];
        let gblock = &mut grads.blocks[0];
        let mut d_hidden = grad_in.hidden.clone();
        d_hidden += &block.cross_attn.project_backward(&self.hidden, &grad_in.proj, &mut gblock.cross_attn);
        block.self_attn.backward(&self.self_cache, &d_hidden, &mut gblock.self_attn)
    }
}

/// Per-graph state of a block after the first one.
#[derive(Debug, Clone)]
struct LaterBlockSide {
    self_cache: SelfAttentionCache,
    hidden: Array2<f64>,
    proj: CrossProjection,
}

#[derive(Debug, Clone)]
struct CrossStep {
    att_text: Array2<f64>,
    att_scene: Array2<f64>,
}

/// Cached forward pass of one (text, scene) pair on top of two
/// [`GraphEncoding`]s.
#[derive(Debug, Clone)]
pub struct PairForward {
    cross: Vec<CrossStep>,
    later: Vec<(LaterBlockSide, LaterBlockSide)>,
    text_nodes: usize,
    scene_nodes: usize,
    head_input: Array2<f64>,
    head_pre: [Array2<f64>; 2],
    head_act: [Array2<f64>; 2],
    /// Node states after the last block, before pooling.
    pub h_text: Array2<f64>,
    pub h_scene: Array2<f64>,
    pub s_text: Array1<f64>,
    pub s_scene: Array1<f64>,
    pub match_prob: f64,
}

impl PairForward {
    pub fn new(model: &JointModel, text: &GraphEncoding, scene: &GraphEncoding) -> Self {
        let (mut h_t, att_t) = CrossAttention::attend(&text.hidden, &text.proj, &scene.proj);
        let (mut h_s, att_s) = CrossAttention::attend(&scene.hidden, &scene.proj, &text.proj);
        let mut cross = vec![CrossStep { att_text: att_t, att_scene: att_s }];
        let mut later = Vec::new();
        for block in &model.blocks[1..] {
            let side = |h: &Array2<f64>, enc: &GraphEncoding| {
                let (hidden, self_cache) = block.self_attn.forward(h, &enc.edge_features, enc.incoming.clone());
                let proj = block.cross_attn.project(&hidden);
                LaterBlockSide { self_cache, hidden, proj }
            };
            let st = side(&h_t, text);
            let ss = side(&h_s, scene);
            let (nt, att_t) = CrossAttention::attend(&st.hidden, &st.proj, &ss.proj);
            let (ns, att_s) = CrossAttention::attend(&ss.hidden, &ss.proj, &st.proj);
            h_t = nt;
            h_s = ns;
            cross.push(CrossStep { att_text: att_t, att_scene: att_s });
            later.push((st, ss));
        }
        let s_text = mean_pool(&h_t);
        let s_scene = mean_pool(&h_s);
        let head_input = concatenate![Axis(0), s_text.view(), s_scene.view()].insert_axis(Axis(0));
        let [l1, l2, l3] = &model.head.layers;
        let pre1 = l1.forward(&head_input);
        let act1 = pre1.mapv(|x| x.max(0.0));
        let pre2 = l2.forward(&act1);
        let act2 = pre2.mapv(|x| x.max(0.0));
        let logit = l3.forward(&act2)[[0, 0]];
        let match_prob = 1.0 / (1.0 + (-logit).exp());
        Self {
            cross,
            later,
            text_nodes: text.num_nodes(),
            scene_nodes: scene.num_nodes(),
            head_input,
            head_pre: [pre1, pre2],
            head_act: [act1, act2],
            h_text: h_t,
            h_scene: h_s,
            s_text,
            s_scene,
            match_prob,
        }
    }

    pub fn embedding_pair(&self) -> EmbeddingPair {
        EmbeddingPair { s_scene: self.s_scene.to_vec(), s_text: self.s_text.to_vec(), match_prob: self.match_prob }
    }

    /// Back-propagates `dL/dS_text`, `dL/dS_scene` and `dL/dm` through the
    /// pair-specific part of the network, accumulating parameter gradients
    /// into `grads`. Returns the gradients for the text and scene encodings.
    pub fn backward(
        &self,
        model: &JointModel,
        text: &GraphEncoding,
        scene: &GraphEncoding,
        d_s_text: &Array1<f64>,
        d_s_scene: &Array1<f64>,
        d_match: f64,
        grads: &mut JointModel,
    ) -> (GraphGrad, GraphGrad) {
        let dim = model.dim();
        // head
        let [l1, l2, l3] = &model.head.layers;
        let [g1, g2, g3] = &mut grads.head.layers;
        let d_logit = Array2::from_elem((1, 1), d_match * self.match_prob * (1.0 - self.match_prob));
        let mut d = l3.backward(&self.head_act[1], &d_logit, g3);
        d.zip_mut_with(&self.head_pre[1], |g, &p| if p <= 0.0 { *g = 0.0 });
        let mut d = l2.backward(&self.head_act[0], &d, g2);
        d.zip_mut_with(&self.head_pre[0], |g, &p| if p <= 0.0 { *g = 0.0 });
        let d_in = l1.backward(&self.head_input, &d, g1);
        let d_in = d_in.row(0);
        let d_st = &d_in.slice(ndarray::s![..dim]) + d_s_text;
        let d_ss = &d_in.slice(ndarray::s![dim..]) + d_s_scene;

        // mean pooling
        let mut d_ht = Array2::from_shape_fn((self.text_nodes, dim), |(_, j)| d_st[j] / self.text_nodes as f64);
        let mut d_hs = Array2::from_shape_fn((self.scene_nodes, dim), |(_, j)| d_ss[j] / self.scene_nodes as f64);

        // blocks after the first, in reverse
        for (b, (st, ss)) in self.later.iter().enumerate().rev() {
            let block = &model.blocks[b + 1];
            let gblock = &mut grads.blocks[b + 1];
            let step = &self.cross[b + 1];
            let (dq_t, dk_s, dv_s) = CrossAttention::attend_backward(&step.att_text, &st.proj, &ss.proj, &d_ht);
            let (dq_s, dk_t, dv_t) = CrossAttention::attend_backward(&step.att_scene, &ss.proj, &st.proj, &d_hs);
            let dp_t = CrossProjection { q: dq_t, k: dk_t, v: dv_t };
            let dp_s = CrossProjection { q: dq_s, k: dk_s, v: dv_s };
            let mut dh_t = d_ht;
            dh_t += &block.cross_attn.project_backward(&st.hidden, &dp_t, &mut gblock.cross_attn);
            let mut dh_s = d_hs;
            dh_s += &block.cross_attn.project_backward(&ss.hidden, &dp_s, &mut gblock.cross_attn);
            d_ht = block.self_attn.backward(&st.self_cache, &dh_t, &mut gblock.self_attn).0;
            d_hs = block.self_attn.backward(&ss.self_cache, &dh_s, &mut gblock.self_attn).0;
        }

        // first block cross-attention; projections belong to the encodings
        let step = &self.cross[0];
        let (dq_t, dk_s, dv_s) = CrossAttention::attend_backward(&step.att_text, &text.proj, &scene.proj, &d_ht);
        let (dq_s, dk_t, dv_t) = CrossAttention::attend_backward(&step.att_scene, &scene.proj, &text.proj, &d_hs);
        (
            GraphGrad { hidden: d_ht, proj: CrossProjection { q: dq_t, k: dk_t, v: dv_t } },
            GraphGrad { hidden: d_hs, proj: CrossProjection { q: dq_s, k: dk_s, v: dv_s } },
        )
    }
}

/// Runs the full network on one (text, scene) pair.
pub fn embed_pair(model: &JointModel, text: &FeaturizedGraph, scene: &FeaturizedGraph) -> EmbeddingPair {
    let t = GraphEncoding::new(model, text);
    let s = GraphEncoding::new(model, scene);
    PairForward::new(model, &t, &s).embedding_pair()
}
