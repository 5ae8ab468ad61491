//! Contextual information fusion block.
//!
//! ```text
//! F_h, H_t  = Mamba(F_c_prev, H_{t-1})
//! F_vx      = Block(F_vx + Att_in(F_vx, F_h, F_h))
//! F_c'      = Att_out(F_h, F_vx, F_vx) + F_h
//! F_c       = F_c' + FFN(F_c')
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mamba::{MambaConfig, MambaLayer, MambaVars};
use crate::nn::{Attention, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::ssm::HiddenState;
use crate::tensor::Tensor;

/// How context and visual tokens are combined on either side of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Attention,
    /// Elementwise addition of the other stream's mean token.
    Addition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CifConfig {
    /// `false` removes the CIF blocks entirely: no context is carried.
    pub enabled: bool,
    pub state_size: usize,
    /// Context tokens per block; 0 uses the search-region token count.
    pub context_tokens: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub fuse_in: FusionKind,
    pub fuse_out: FusionKind,
    pub use_d: bool,
    pub residual_from_norm: bool,
}

impl Default for CifConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            state_size: 16,
            context_tokens: 0,
            heads: 4,
            ffn_ratio: 2,
            fuse_in: FusionKind::Attention,
            fuse_out: FusionKind::Attention,
            use_d: true,
            residual_from_norm: false,
        }
    }
}

impl CifConfig {
    pub fn mamba(&self, dim: usize) -> MambaConfig {
        let mut m = MambaConfig::new(dim, self.state_size);
        m.use_d = self.use_d;
        m.residual_from_norm = self.residual_from_norm;
        m
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.state_size == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("cif state_size, heads and ffn_ratio must be positive".into()));
        }
        if dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {} cif heads", self.heads)));
        }
        Ok(())
    }
}

/// Recurrent state of one CIF block.
#[derive(Debug, Clone, PartialEq)]
pub struct CifBlockState {
    pub hidden: HiddenState,
}

impl CifBlockState {
    pub fn zeros(block: &CifBlock) -> Self {
        let (c, n) = block.mamba.state_shape();
        Self {
            hidden: HiddenState::zeros(c, n),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CifBlock {
    pub dim: usize,
    pub mamba: MambaLayer,
    pub att_in: Option<Attention>,
    pub att_out: Option<Attention>,
    pub ffn: Mlp,
}

impl CifBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, config: &CifConfig) -> Self {
        let group = ParamGroup::Rest;
        let mamba = MambaLayer::new(store, rng, &format!("{name}.mamba"), config.mamba(dim));
        let att_in = (config.fuse_in == FusionKind::Attention)
            .then(|| Attention::new(store, rng, &format!("{name}.att_in"), dim, config.heads, group));
        let att_out = (config.fuse_out == FusionKind::Attention)
            .then(|| Attention::new(store, rng, &format!("{name}.att_out"), dim, config.heads, group));
        let ffn = Mlp::new(store, rng, &format!("{name}.ffn"), dim, dim * config.ffn_ratio, group);
        Self {
            dim,
            mamba,
            att_in,
            att_out,
            ffn,
        }
    }

    pub fn pre(&self, g: &mut Graph, f_c_prev: Var, h: Var) -> MambaVars {
        self.mamba.forward(g, f_c_prev, h)
    }

    pub fn fuse_in(&self, g: &mut Graph, f_vx: Var, f_h: Var) -> Var {
        let injected = match &self.att_in {
            Some(att) => att.forward(g, f_vx, f_h),
            None => {
                let n = g.shape(f_vx).0;
                let mean = g.mean_rows(f_h);
                g.broadcast_rows(mean, n)
            }
        };
        g.add(f_vx, injected)
    }

    pub fn fuse_out(&self, g: &mut Graph, f_h: Var, f_vx: Var) -> Var {
        let harvested = match &self.att_out {
            Some(att) => att.forward(g, f_h, f_vx),
            None => {
                let n = g.shape(f_h).0;
                let mean = g.mean_rows(f_vx);
                g.broadcast_rows(mean, n)
            }
        };
        let f_c1 = g.add(harvested, f_h);
        let ff = self.ffn.forward(g, f_c1);
        g.add(f_c1, ff)
    }

    fn check_dim(&self, what: &str, t: &Tensor) -> Result<()> {
        if t.cols() != self.dim {
            return Err(Error::Contract(format!("{what} width {} does not match dim {}", t.cols(), self.dim)));
        }
        Ok(())
    }

    /// Runs the mamba layer on the incoming context stream.
    pub fn cif_pre(
        &self,
        store: &ParamStore,
        f_c_prev: &Tensor,
        state: &CifBlockState,
    ) -> Result<(Tensor, CifBlockState)> {
        let (f_h, hidden) = self.mamba.apply(store, f_c_prev, &state.hidden)?;
        Ok((f_h, CifBlockState { hidden }))
    }

    pub fn apply_fuse_in(&self, store: &ParamStore, f_vx: &Tensor, f_h: &Tensor) -> Result<Tensor> {
        self.check_dim("visual tokens", f_vx)?;
        self.check_dim("context tokens", f_h)?;
        let mut g = Graph::inference(store);
        let a = g.constant(f_vx.clone());
        let b = g.constant(f_h.clone());
        let out = self.fuse_in(&mut g, a, b);
        Ok(g.value(out).clone())
    }

    pub fn apply_fuse_out(&self, store: &ParamStore, f_h: &Tensor, f_vx: &Tensor) -> Result<Tensor> {
        self.check_dim("visual tokens", f_vx)?;
        self.check_dim("context tokens", f_h)?;
        let mut g = Graph::inference(store);
        let a = g.constant(f_h.clone());
        let b = g.constant(f_vx.clone());
        let out = self.fuse_out(&mut g, a, b);
        Ok(g.value(out).clone())
    }
}
