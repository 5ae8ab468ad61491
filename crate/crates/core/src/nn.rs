//! Parameterized layers shared by the backbone, the CIF blocks and the head.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{linear_init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), linear_init(rng, fan_in, fan_out, gain), group, true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out), group, false));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::filled(1, dim, 1.0), group, false),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, dim), group, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true, group, 1.0),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true, group, 0.5),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true, group, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true, group, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true, group, 1.0),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true, group, 0.5),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var) -> Var {
        self.forward_with_weights(g, query, kv).0
    }

    /// Also returns each head's `(queries, keys)` softmax weight matrix.
    pub fn forward_with_weights(&self, g: &mut Graph, query: Var, kv: Var) -> (Var, Vec<Var>) {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd),
                    g.slice_cols(k, h * hd, hd),
                    g.slice_cols(v, h * hd, hd),
                )
            };
            let scores = g.matmul(qh, kh, false, true);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores);
            weights.push(p);
            outs.push(g.matmul(p, vh, false, false));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.o.forward(g, cat), weights)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, group),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, group),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}
