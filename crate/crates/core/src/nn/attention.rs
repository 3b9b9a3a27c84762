//! Single-head graph attention layers.
//!
//! Self-attention follows the transformer-convolution form: each node
//! attends over its incoming edges plus an implicit self-edge whose edge
//! feature is zero. Edge features are projected and added into both keys and
//! values. Cross-attention attends over every node of the other graph.
//! Both layers add their output to the input (residual).

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::linear::Linear;
use super::Neighborhood;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn row(m: &Array2<f64>, i: usize) -> &[f64] {
    m.row(i).to_slice().expect("standard layout")
}

fn row_mut(m: &mut Array2<f64>, i: usize) -> &mut [f64] {
    m.row_mut(i).into_slice().expect("standard layout")
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut r in m.rows_mut() {
        let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|x| (x - max).exp());
        let sum = r.sum();
        r.mapv_inplace(|x| x / sum);
    }
}

/// One attention entry of node `i`: the source node and, unless this is the
/// implicit self-edge, the edge whose feature contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incoming {
    pub source: usize,
    pub edge: Option<usize>,
}

/// Per-node attention lists (self-edge first, then edges in stored order).
pub fn neighborhoods(num_nodes: usize, edges: &[(usize, usize)], mode: Neighborhood) -> Vec<Vec<Incoming>> {
    let mut lists: Vec<Vec<Incoming>> =
        (0..num_nodes).map(|i| vec![Incoming { source: i, edge: None }]).collect();
    for (e, &(src, dst)) in edges.iter().enumerate() {
        lists[dst].push(Incoming { source: src, edge: Some(e) });
        if mode == Neighborhood::Symmetric {
            lists[src].push(Incoming { source: dst, edge: Some(e) });
        }
    }
    lists
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Edge projection; bias-free so the implicit self-edge contributes zero.
    pub edge: Linear,
}

#[derive(Debug, Clone)]
pub struct SelfAttentionCache {
    input: Array2<f64>,
    edge_input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    edge_proj: Array2<f64>,
    incoming: Vec<Vec<Incoming>>,
    alpha: Vec<Vec<f64>>,
}

impl SelfAttention {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            query: Linear::init(rng, dim, dim, true),
            key: Linear::init(rng, dim, dim, true),
            value: Linear::init(rng, dim, dim, true),
            edge: Linear::init(rng, dim, dim, false),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            edge: self.edge.zeros_like(),
        }
    }

    pub fn forward(
        &self,
        h: &Array2<f64>,
        edge_features: &Array2<f64>,
        incoming: Vec<Vec<Incoming>>,
    ) -> (Array2<f64>, SelfAttentionCache) {
        let dim = h.ncols();
        let scale = 1.0 / (dim as f64).sqrt();
        let q = self.query.forward(h);
        let k = self.key.forward(h);
        let v = self.value.forward(h);
        let edge_proj = self.edge.forward(edge_features);
        let mut out = h.clone();
        let mut alpha = Vec::with_capacity(incoming.len());
        for (i, entries) in incoming.iter().enumerate() {
            let qi = row(&q, i);
            let mut w: Vec<f64> = entries
                .iter()
                .map(|inc| {
                    let mut sc = dot(qi, row(&k, inc.source));
                    if let Some(e) = inc.edge {
                        sc += dot(qi, row(&edge_proj, e));
                    }
                    sc * scale
                })
                .collect();
            let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            w.iter_mut().for_each(|x| *x = (*x - max).exp());
            let sum: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= sum);
            let oi = row_mut(&mut out, i);
            for (inc, &a) in entries.iter().zip(&w) {
                axpy(a, row(&v, inc.source), oi);
                if let Some(e) = inc.edge {
                    axpy(a, row(&edge_proj, e), oi);
                }
            }
            alpha.push(w);
        }
        let cache = SelfAttentionCache {
            input: h.clone(),
            edge_input: edge_features.clone(),
            q,
            k,
            v,
            edge_proj,
            incoming,
            alpha,
        };
        (out, cache)
    }

    /// Returns `(dL/dh, dL/d edge_features)`.
    pub fn backward(
        &self,
        cache: &SelfAttentionCache,
        d_out: &Array2<f64>,
        grad: &mut SelfAttention,
    ) -> (Array2<f64>, Array2<f64>) {
        let dim = cache.input.ncols();
        let scale = 1.0 / (dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let mut dedge = Array2::zeros(cache.edge_proj.raw_dim());
        let mut kv = vec![0.0; dim];
        for (i, entries) in cache.incoming.iter().enumerate() {
            let alpha = &cache.alpha[i];
            let di = row(d_out, i);
            // dL/dalpha_e = <d_out_i, v_e>
            let dalpha: Vec<f64> = entries
                .iter()
                .map(|inc| {
                    let mut s = dot(di, row(&cache.v, inc.source));
                    if let Some(e) = inc.edge {
                        s += dot(di, row(&cache.edge_proj, e));
                    }
                    s
                })
                .collect();
            let weighted: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            let qi = row(&cache.q, i).to_vec();
            for ((inc, &a), &da) in entries.iter().zip(alpha).zip(&dalpha) {
                let dscore = a * (da - weighted) * scale;
                // key vector of this entry
                kv.copy_from_slice(row(&cache.k, inc.source));
                if let Some(e) = inc.edge {
                    axpy(1.0, row(&cache.edge_proj, e), &mut kv);
                }
                axpy(dscore, &kv, row_mut(&mut dq, i));
                axpy(dscore, &qi, row_mut(&mut dk, inc.source));
                axpy(a, di, row_mut(&mut dv, inc.source));
                if let Some(e) = inc.edge {
                    let de = row_mut(&mut dedge, e);
                    axpy(dscore, &qi, de);
                    axpy(a, di, de);
                }
            }
        }
        let mut dh = d_out.clone();
        dh += &self.query.backward(&cache.input, &dq, &mut grad.query);
        dh += &self.key.backward(&cache.input, &dk, &mut grad.key);
        dh += &self.value.backward(&cache.input, &dv, &mut grad.value);
        let d_edges = self.edge.backward(&cache.edge_input, &dedge, &mut grad.edge);
        (dh, d_edges)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// Query/key/value projections of one graph's node rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossProjection {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl CrossProjection {
    pub fn zeros_like(&self) -> Self {
        Self {
            q: Array2::zeros(self.q.raw_dim()),
            k: Array2::zeros(self.k.raw_dim()),
            v: Array2::zeros(self.v.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &CrossProjection) {
        self.q += &other.q;
        self.k += &other.k;
        self.v += &other.v;
    }
}

impl CrossAttention {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            query: Linear::init(rng, dim, dim, true),
            key: Linear::init(rng, dim, dim, true),
            value: Linear::init(rng, dim, dim, true),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { query: self.query.zeros_like(), key: self.key.zeros_like(), value: self.value.zeros_like() }
    }

    pub fn project(&self, h: &Array2<f64>) -> CrossProjection {
        CrossProjection { q: self.query.forward(h), k: self.key.forward(h), v: self.value.forward(h) }
    }

    pub fn project_backward(
        &self,
        h: &Array2<f64>,
        d_proj: &CrossProjection,
        grad: &mut CrossAttention,
    ) -> Array2<f64> {
        let mut dh = self.query.backward(h, &d_proj.q, &mut grad.query);
        dh += &self.key.backward(h, &d_proj.k, &mut grad.key);
        dh += &self.value.backward(h, &d_proj.v, &mut grad.value);
        dh
    }

    /// `h_a + softmax(Q_a K_b^T / sqrt(dim)) V_b`; returns the output and the
    /// attention matrix (`n_a × n_b`).
    pub fn attend(h_a: &Array2<f64>, a: &CrossProjection, b: &CrossProjection) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (h_a.ncols() as f64).sqrt();
        let mut att = a.q.dot(&b.k.t());
        att *= scale;
        softmax_rows(&mut att);
        let out = h_a + &att.dot(&b.v);
        (out, att)
    }

    /// Given `dL/d out`, returns `(dL/dQ_a, dL/dK_b, dL/dV_b)`. The residual
    /// gradient `dL/dh_a = d_out` is left to the caller.
    pub fn attend_backward(
        att: &Array2<f64>,
        a: &CrossProjection,
        b: &CrossProjection,
        d_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (a.q.ncols() as f64).sqrt();
        let d_att = d_out.dot(&b.v.t());
        let dv_b = att.t().dot(d_out);
        let row_dot = (&d_att * att).sum_axis(Axis(1));
        let mut d_scores = d_att;
        for (i, mut r) in d_scores.rows_mut().into_iter().enumerate() {
            let c = row_dot[i];
            r.zip_mut_with(&att.slice(s![i, ..]), |d, &p| *d = p * (*d - c) * scale);
        }
        let dq_a = d_scores.dot(&b.k);
        let dk_b = d_scores.t().dot(&a.q);
        (dq_a, dk_b, dv_b)
    }
}

/// Mean of the node rows.
pub fn mean_pool(h: &Array2<f64>) -> ndarray::Array1<f64> {
    h.mean_axis(Axis(0)).expect("graphs have at least one node")
}
