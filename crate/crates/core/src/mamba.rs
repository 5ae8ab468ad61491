//! Gated selective-SSM layer that stores contextual information.
//!
//! ```text
//! F_in = RMSNorm(F_i)
//! x    = SiLU(CausalConv(F_in W_x))         -> selective scan -> F_x
//! z    = SiLU(F_in W_z)
//! F_i' = (F_x * z) W_out
//! F_o  = F_i' + F_i        (F_in when `residual_from_norm`)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{linear_init, ParamGroup, ParamId, ParamStore};
use crate::ssm::HiddenState;
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaConfig {
    pub dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub state_size: usize,
    /// Rank of the delta projection; 0 selects `ceil(dim / 16)`.
    pub dt_rank: usize,
    pub use_d: bool,
    pub residual_from_norm: bool,
}

impl MambaConfig {
    pub fn new(dim: usize, state_size: usize) -> Self {
        Self {
            dim,
            expand: 2,
            conv_kernel: 4,
            state_size,
            dt_rank: 0,
            use_d: true,
            residual_from_norm: false,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.dim
    }

    pub fn resolved_dt_rank(&self) -> usize {
        if self.dt_rank == 0 {
            self.dim.div_ceil(16)
        } else {
            self.dt_rank
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.expand == 0 || self.conv_kernel == 0 || self.state_size == 0 {
            return Err(Error::Config("mamba dims, expand, conv_kernel and state_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MambaLayer {
    pub config: MambaConfig,
    pub norm_scale: ParamId,
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: Option<ParamId>,
    pub out_proj: Linear,
}

/// Graph nodes produced by one layer application.
#[derive(Debug, Clone, Copy)]
pub struct MambaVars {
    pub out: Var,
    pub state: Var,
    /// Scan output before gating (`F_x`).
    pub ssm_out: Var,
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, config: MambaConfig) -> Self {
        let group = ParamGroup::Rest;
        let dim = config.dim;
        let inner = config.inner();
        let n = config.state_size;
        let r = config.resolved_dt_rank();
        let k = config.conv_kernel;
        let norm_scale = store.add(format!("{name}.norm"), Tensor::filled(1, dim, 1.0), group, false);
        let in_x = Linear::new(store, rng, &format!("{name}.in_x"), dim, inner, false, group, 1.0);
        let in_z = Linear::new(store, rng, &format!("{name}.in_z"), dim, inner, false, group, 1.0);
        let bound = 1.0 / (k as f64).sqrt();
        let conv_w = store.add(
            format!("{name}.conv.w"),
            Tensor::from_fn(k, inner, |_, _| rng.gen_range(-bound..bound)),
            group,
            true,
        );
        let conv_b = store.add(format!("{name}.conv.b"), Tensor::zeros(1, inner), group, false);
        let x_proj = Linear::new(store, rng, &format!("{name}.x_proj"), inner, r + 2 * n, false, group, 1.0);
        let dt_w = store.add(format!("{name}.dt_proj.w"), linear_init(rng, r, inner, 1.0), group, true);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_b = store.add(
            format!("{name}.dt_proj.b"),
            Tensor::from_fn(1, inner, |_, _| inv_softplus(rng.gen_range(lo..hi).exp())),
            group,
            false,
        );
        let dt_proj = Linear { w: dt_w, b: Some(dt_b) };
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(inner, n, |_, j| ((j + 1) as f64).ln()),
            group,
            false,
        );
        let d = config
            .use_d
            .then(|| store.add(format!("{name}.d"), Tensor::filled(1, inner, 1.0), group, false));
        let out_proj = Linear::new(store, rng, &format!("{name}.out_proj"), inner, dim, false, group, 0.5);
        Self {
            config,
            norm_scale,
            in_x,
            in_z,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            d,
            out_proj,
        }
    }

    /// `(inner_channels, state_size)`.
    pub fn state_shape(&self) -> (usize, usize) {
        (self.config.inner(), self.config.state_size)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: Var) -> MambaVars {
        let r = self.config.resolved_dt_rank();
        let n = self.config.state_size;
        let scale = g.param(self.norm_scale);
        let x_in = g.rms_norm(x, scale, RMS_EPS);
        let xb = self.in_x.forward(g, x_in);
        let z = self.in_z.forward(g, x_in);
        let cw = g.param(self.conv_w);
        let cb = g.param(self.conv_b);
        let xc = g.causal_conv(xb, cw, cb);
        let xa = g.silu(xc);
        let dbl = self.x_proj.forward(g, xa);
        let dt_in = g.slice_cols(dbl, 0, r);
        let b = g.slice_cols(dbl, r, n);
        let c = g.slice_cols(dbl, r + n, n);
        let dt = self.dt_proj.forward(g, dt_in);
        let delta = g.softplus(dt);
        let a_log = g.param(self.a_log);
        let a_pos = g.exp(a_log);
        let a = g.scale(a_pos, -1.0);
        let d = self.d.map(|d| g.param(d));
        let (y, state) = g.selective_scan(xa, delta, a, b, c, d, h);
        let gate = g.silu(z);
        let gated = g.mul(y, gate);
        let branch = self.out_proj.forward(g, gated);
        let residual = if self.config.residual_from_norm { x_in } else { x };
        let out = g.add(branch, residual);
        MambaVars { out, state, ssm_out: y }
    }

    /// Evaluates the layer outside of training.
    pub fn apply(&self, store: &ParamStore, f_i: &Tensor, h_prev: &HiddenState) -> Result<(Tensor, HiddenState)> {
        if f_i.cols() != self.config.dim {
            return Err(Error::Contract(format!(
                "mamba input width {} does not match dim {}",
                f_i.cols(),
                self.config.dim
            )));
        }
        if h_prev.h.shape() != self.state_shape() {
            return Err(Error::Contract(format!(
                "hidden state {:?} does not match layer state {:?}",
                h_prev.h.shape(),
                self.state_shape()
            )));
        }
        if !f_i.is_finite() || !h_prev.h.is_finite() {
            return Err(Error::Input("non-finite mamba input".into()));
        }
        let mut g = Graph::inference(store);
        let x = g.constant(f_i.clone());
        let h = g.constant(h_prev.h.clone());
        let out = self.forward(&mut g, x, h);
        Ok((
            g.value(out.out).clone(),
            HiddenState {
                h: g.value(out.state).clone(),
                frame_index: h_prev.frame_index,
            },
        ))
    }
}

/// Row-wise RMS normalization with `eps = 1e-6`.
pub fn rms_norm(x: &Tensor, scale: &[f64]) -> Tensor {
    assert_eq!(scale.len(), x.cols(), "scale length must equal width");
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, s) in row.iter_mut().zip(scale) {
            *v *= inv * s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params_entrywise;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(dim: usize, n: usize, seed: u64) -> (ParamStore, MambaLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = MambaLayer::new(&mut store, &mut rng, "m", MambaConfig::new(dim, n));
        (store, l)
    }

    fn rand_tensor(seed: u64, r: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rms_norm_zero_and_constant_rows() {
        let x = Tensor::from_rows(&[vec![0.0; 4], vec![3.0; 4]]);
        let y = rms_norm(&x, &[1.0; 4]);
        assert!(y.row(0).iter().all(|v| v.abs() < 1e-12));
        for v in y.row(1) {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn rms_norm_scale_invariant() {
        let x = rand_tensor(1, 3, 8);
        let y1 = rms_norm(&x, &[0.5; 8]);
        let y2 = rms_norm(&x.map(|v| v * 37.0), &[0.5; 8]);
        assert!(y1.max_abs_diff(&y2) < 1e-5);
    }

    #[test]
    fn forward_preserves_shape() {
        let (store, l) = layer(8, 4, 2);
        for tokens in [1, 5, 17] {
            let x = rand_tensor(tokens as u64, tokens, 8);
            let (y, h) = l.apply(&store, &x, &HiddenState::zeros(16, 4)).unwrap();
            assert_eq!(y.shape(), (tokens, 8));
            assert_eq!(h.h.shape(), (16, 4));
        }
    }

    #[test]
    fn zeroed_output_projection_is_identity() {
        let (mut store, l) = layer(8, 4, 3);
        store.value_mut(l.out_proj.w).scale_assign(0.0);
        let x = rand_tensor(4, 6, 8);
        let (y, _) = l.apply(&store, &x, &HiddenState::zeros(16, 4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn residual_from_norm_flag() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = MambaConfig::new(8, 4);
        cfg.residual_from_norm = true;
        let l = MambaLayer::new(&mut store, &mut rng, "m", cfg);
        store.value_mut(l.out_proj.w).scale_assign(0.0);
        let x = rand_tensor(6, 3, 8);
        let (y, _) = l.apply(&store, &x, &HiddenState::zeros(16, 4)).unwrap();
        assert!(y.max_abs_diff(&rms_norm(&x, &[1.0; 8])) < 1e-12);
    }

    #[test]
    fn state_updates_on_nonzero_input() {
        let (store, l) = layer(8, 4, 7);
        let x = rand_tensor(8, 4, 8);
        let h0 = HiddenState::zeros(16, 4);
        let (_, h1) = l.apply(&store, &x, &h0).unwrap();
        assert_ne!(h1.h, h0.h);
    }

    #[test]
    fn wrong_state_shape_is_contract_error() {
        let (store, l) = layer(8, 4, 9);
        let r = l.apply(&store, &Tensor::zeros(2, 8), &HiddenState::zeros(8, 4));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn split_calls_carry_the_scan_state() {
        let (store, l) = layer(8, 4, 10);
        let x = rand_tensor(11, 12, 8);
        let h0 = HiddenState::zeros(16, 4);
        let (joint, _) = l.apply(&store, &x, &h0).unwrap();
        let (first, h_mid) = l.apply(&store, &x.slice_rows(0, 5), &h0).unwrap();
        assert!(first.max_abs_diff(&joint.slice_rows(0, 5)) < 1e-12);
        let (carried, _) = l.apply(&store, &x.slice_rows(5, 7), &h_mid).unwrap();
        let (fresh, _) = l.apply(&store, &x.slice_rows(5, 7), &h0).unwrap();
        assert!(carried.max_abs_diff(&fresh) > 1e-9);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (store, l) = layer(8, 16, 12);
        let x = rand_tensor(13, 2, 8);
        let h0 = rand_tensor(14, 16, 16).map(|v| 0.3 * v);
        let w = rand_tensor(15, 2, 8);
        let wh = rand_tensor(16, 16, 16);
        let loss = |s: &ParamStore, want_grads: bool| {
            let mut g = Graph::new(s);
            let xv = g.constant(x.clone());
            let hv = g.constant(h0.clone());
            let out = l.forward(&mut g, xv, hv);
            let wv = g.constant(w.clone());
            let whv = g.constant(wh.clone());
            let a = g.mul(out.out, wv);
            let b = g.mul(out.state, whv);
            let sa = sum_all(&mut g, a);
            let sb = sum_all(&mut g, b);
            let total = g.add(sa, sb);
            let value = g.value(total).data()[0];
            let grads = want_grads.then(|| g.backward(total).param_grads(s.len()));
            (value, grads)
        };
        let (_, grads) = loss(&store, true);
        let report = check_params_entrywise(&store, |s| loss(s, false).0, &grads.unwrap(), 1e-5, usize::MAX);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    fn sum_all(g: &mut Graph, x: Var) -> Var {
        let (r, c) = g.shape(x);
        let a = g.constant(Tensor::filled(1, r, 1.0));
        let b = g.constant(Tensor::filled(c, 1, 1.0));
        let s = g.matmul(a, x, false, false);
        g.matmul(s, b, false, false)
    }
}
