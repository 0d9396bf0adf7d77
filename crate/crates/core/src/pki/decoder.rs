//! Transformer decoder over label queries.
//!
//! Post-norm block: self-attention over the queries, cross-attention into
//! the image memory, feed-forward, each with a residual connection and
//! layer norm. Positional embeddings are added to queries and keys, never
//! to values.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{MccError, Result};
use crate::graph::{Graph, Var};
use crate::params::{xavier, Bound, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, heads: usize) -> Self {
        let mut mat = |name: &str, store: &mut ParamStore| store.add(format!("{prefix}.{name}"), xavier(rng, d, d));
        let wq = mat("wq", store);
        let wk = mat("wk", store);
        let wv = mat("wv", store);
        let wo = mat("wo", store);
        let bias = |name: &str, store: &mut ParamStore| store.add(format!("{prefix}.{name}"), Array2::zeros((1, d)));
        Attention {
            heads,
            wq,
            bq: bias("bq", store),
            wk,
            bk: bias("bk", store),
            wv,
            bv: bias("bv", store),
            wo,
            bo: bias("bo", store),
        }
    }

    /// Scaled dot-product attention split over `heads` column blocks.
    pub fn forward(&self, g: &mut Graph, p: &Bound, query: Var, key: Var, value: Var) -> Var {
        let q = g.linear(query, p.var(self.wq), p.var(self.bq));
        let k = g.linear(key, p.var(self.wk), p.var(self.bk));
        let v = g.linear(value, p.var(self.wv), p.var(self.bv));
        let d = g.shape(q).1;
        assert_eq!(d % self.heads, 0, "model width must divide into heads");
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        g.linear(joined, p.var(self.wo), p.var(self.bo))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.gamma"), Array2::ones((1, d))),
            beta: store.add(format!("{prefix}.beta"), Array2::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let s = g.mul_row(n, p.var(self.gamma));
        g.add_row(s, p.var(self.beta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        let hidden = d * ffn_mult;
        DecoderLayer {
            self_attn: Attention::new(store, rng, &format!("{prefix}.self_attn"), d, heads),
            cross_attn: Attention::new(store, rng, &format!("{prefix}.cross_attn"), d, heads),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d),
            ff1_w: store.add(format!("{prefix}.ff1.w"), xavier(rng, d, hidden)),
            ff1_b: store.add(format!("{prefix}.ff1.b"), Array2::zeros((1, hidden))),
            ff2_w: store.add(format!("{prefix}.ff2.w"), xavier(rng, hidden, d)),
            ff2_b: store.add(format!("{prefix}.ff2.b"), Array2::zeros((1, d))),
        }
    }

    /// One decoder step: `C × D` queries attend to a `P × D` memory.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
    ) -> Result<Var> {
        if g.shape(memory).0 == 0 {
            return Err(MccError::shape("decoder memory is empty"));
        }
        if g.shape(memory).1 != g.shape(queries).1 {
            return Err(MccError::shape("decoder memory and queries differ in width"));
        }
        let q_bar = g.add(queries, query_pos);
        let sa = self.self_attn.forward(g, p, q_bar, q_bar, queries);
        let x = g.add(queries, sa);
        let q1 = self.norm1.forward(g, p, x);

        let q1_bar = g.add(q1, query_pos);
        let f_bar = g.add(memory, memory_pos);
        let ca = self.cross_attn.forward(g, p, q1_bar, f_bar, memory);
        let x = g.add(q1, ca);
        let q2 = self.norm2.forward(g, p, x);

        let h = g.linear(q2, p.var(self.ff1_w), p.var(self.ff1_b));
        let h = g.relu(h);
        let ff = g.linear(h, p.var(self.ff2_w), p.var(self.ff2_b));
        let x = g.add(q2, ff);
        Ok(self.norm3.forward(g, p, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn identity_attention(d: usize, heads: usize) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = Attention::new(&mut store, &mut rng, "att", d, heads);
        for id in [att.wq, att.wk, att.wv, att.wo] {
            *store.get_mut(id) = Array2::eye(d);
        }
        (store, att)
    }

    #[test]
    fn single_query_single_memory_is_a_fixed_point() {
        let (store, att) = identity_attention(3, 1);
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let q = g.constant(array![[0.3, -1.2, 2.0]]);
        let out = att.forward(&mut g, &p, q, q, q);
        assert_eq!(g.value(out), &array![[0.3, -1.2, 2.0]]);
    }

    #[test]
    fn identical_memory_rows_collapse_cross_attention() {
        let (mut store, att) = identity_attention(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        *store.get_mut(att.wq) = xavier(&mut rng, 4, 4);
        *store.get_mut(att.wk) = xavier(&mut rng, 4, 4);
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let v = array![0.5, -0.25, 1.5, 2.0];
        let memory = g.constant(Array2::from_shape_fn((6, 4), |(_, j)| v[j]));
        let keys = g.constant(crate::params::normal(&mut rng, 6, 4, 1.0));
        let queries = g.constant(crate::params::normal(&mut rng, 5, 4, 3.0));
        let out = att.forward(&mut g, &p, queries, keys, memory);
        for row in g.value(out).rows() {
            for (a, b) in row.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_shape_contract_and_empty_memory() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DecoderLayer::new(&mut store, &mut rng, "dec", 16, 4, 4);
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let q = g.constant(crate::params::normal(&mut rng, 28, 16, 1.0));
        let qp = g.constant(Array2::zeros((28, 16)));
        let m = g.constant(crate::params::normal(&mut rng, 49, 16, 1.0));
        let mp = g.constant(Array2::zeros((49, 16)));
        let out = layer.forward(&mut g, &p, q, qp, m, mp).unwrap();
        assert_eq!(g.shape(out), (28, 16));
        assert!(g.value(out).iter().all(|v| v.is_finite()));

        let empty = g.constant(Array2::zeros((0, 16)));
        assert!(layer.forward(&mut g, &p, q, qp, empty, empty).is_err());
    }
}
