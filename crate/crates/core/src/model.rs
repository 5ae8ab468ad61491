//! The full tracker network: backbone groups interleaved with CIF blocks and
//! a prediction head on the search-region tokens.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, TokenLayout};
use crate::bbox::BBox;
use crate::cif::{CifBlock, CifBlockState, CifConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{center_cell, gaussian_target, Head, HeadConfig, HeadMaps, HeadVars, Lambdas};
use crate::image::Image;
use crate::params::{normal_init, Checkpoint, ParamGroup, ParamId, ParamStore};
use crate::backbone::STEM_PATCH;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cif: CifConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cif.validate(self.backbone.dim)
    }

    pub fn context_tokens(&self) -> usize {
        if self.cif.context_tokens == 0 {
            self.backbone.search_tokens()
        } else {
            self.cif.context_tokens
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `F_vx` after the last block group.
    pub tokens: Var,
    /// Normalized search-span tokens fed to the head.
    pub features: Var,
    pub context: Option<Var>,
    pub states: Vec<Var>,
    pub head: HeadVars,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Result of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub maps: HeadMaps,
    pub states: Vec<CifBlockState>,
    pub tokens: Tensor,
    pub features: Tensor,
    pub context: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub cif: Vec<CifBlock>,
    pub context_seed: Option<ParamId>,
    pub head: Head,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// Builds a freshly initialized model. Backbone, CIF and head draw from
    /// separate random streams, so variants that share a component also
    /// share its initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut stream_rng(seed, 0), &config.backbone);
        let dim = config.backbone.dim;
        let mut cif_rng = stream_rng(seed, 1);
        let (cif, context_seed) = if config.cif.enabled {
            let blocks = (0..config.backbone.n_groups)
                .map(|i| CifBlock::new(&mut store, &mut cif_rng, &format!("cif.{i}"), dim, &config.cif))
                .collect();
            let seed = store.add(
                "cif.context_seed",
                normal_init(&mut cif_rng, config.context_tokens(), dim, 0.02),
                ParamGroup::Rest,
                false,
            );
            (blocks, Some(seed))
        } else {
            (Vec::new(), None)
        };
        let head = Head::new(&mut store, &mut stream_rng(seed, 2), dim, &config.head);
        Ok(Self {
            config,
            store,
            backbone,
            cif,
            context_seed,
            head,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.config.backbone.layout()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn zero_states(&self) -> Vec<CifBlockState> {
        self.cif.iter().map(CifBlockState::zeros).collect()
    }

    /// Zeroes the output projection of every in-attention, which turns the
    /// context injection into an exact identity.
    pub fn zero_in_attention(&mut self) {
        for b in &self.cif {
            if let Some(att) = &b.att_in {
                self.store.value_mut(att.o.w).scale_assign(0.0);
                if let Some(bias) = att.o.b {
                    self.store.value_mut(bias).scale_assign(0.0);
                }
            }
        }
    }

    /// Forward pass on patchified clip templates and search region.
    /// `states` holds one hidden state per CIF block.
    pub fn forward(&self, g: &mut Graph, clip: &[Var], search: Var, states: &[Var]) -> ForwardVars {
        assert_eq!(states.len(), self.cif.len(), "one hidden state per CIF block");
        let cfg = &self.config.backbone;
        let mut x = self.backbone.embed_tokens(g, clip, search);
        let mut context = self.context_seed.map(|p| g.param(p));
        let mut new_states = Vec::with_capacity(self.cif.len());
        for gi in 0..cfg.n_groups {
            match (self.cif.get(gi), context) {
                (Some(block), Some(fc)) => {
                    let pre = block.pre(g, fc, states[gi]);
                    new_states.push(pre.state);
                    let fused = block.fuse_in(g, x, pre.out);
                    x = self.backbone.run_group(g, gi, fused);
                    context = Some(block.fuse_out(g, pre.out, x));
                }
                _ => x = self.backbone.run_group(g, gi, x),
            }
        }
        let span = self.layout().search_span();
        let s = g.slice_rows(x, span.start, span.len());
        let features = self.backbone.final_norm.forward(g, s);
        let grid = cfg.search_grid();
        let head = self.head.forward(g, features, grid, grid);
        ForwardVars {
            tokens: x,
            features,
            context,
            states: new_states,
            head,
        }
    }

    /// Weighted classification, L1 and GIoU loss of one search frame. Box
    /// regression is read at the cell containing the ground-truth center.
    pub fn frame_loss(&self, g: &mut Graph, head: HeadVars, gt: &BBox, lambdas: &Lambdas) -> LossVars {
        let grid = self.config.backbone.search_grid();
        let target = gaussian_target(gt, grid, grid).reshape(grid * grid, 1);
        let cls = g.focal_loss(head.score, &target);
        let (i, j) = center_cell(gt, grid, grid);
        let r = i * grid + j;
        let off = g.slice_rows(head.offset, r, 1);
        let size = g.slice_rows(head.size, r, 1);
        let v = g.concat_cols(&[off, size]);
        let pred = g.box_from_cell(v, i, j, grid, grid);
        let l1 = g.l1_box(pred, gt.corners());
        let giou = g.giou_loss(pred, gt.corners());
        let a = g.scale(cls, lambdas.cls);
        let b = g.scale(l1, lambdas.l1);
        let c = g.scale(giou, lambdas.giou);
        let ab = g.add(a, b);
        let total = g.add(ab, c);
        LossVars { total, cls, l1, giou }
    }

    pub fn check_inputs(&self, clip: &[Image], search: &Image) -> Result<()> {
        let cfg = &self.config.backbone;
        if clip.len() != cfg.clip_len {
            return Err(Error::Contract(format!("expected {} clip frames, got {}", cfg.clip_len, clip.len())));
        }
        for im in clip {
            if im.width() != cfg.template_size || im.height() != cfg.template_size {
                return Err(Error::Contract(format!(
                    "template crop is {}x{}, expected {}",
                    im.width(),
                    im.height(),
                    cfg.template_size
                )));
            }
        }
        if search.width() != cfg.search_size || search.height() != cfg.search_size {
            return Err(Error::Contract(format!(
                "search crop is {}x{}, expected {}",
                search.width(),
                search.height(),
                cfg.search_size
            )));
        }
        Ok(())
    }

    /// Runs the network without recording gradients.
    pub fn infer(&self, clip: &[Image], search: &Image, states: &[CifBlockState]) -> Result<Inference> {
        self.check_inputs(clip, search)?;
        if states.len() != self.cif.len() {
            return Err(Error::Contract(format!(
                "expected {} CIF states, got {}",
                self.cif.len(),
                states.len()
            )));
        }
        for (s, b) in states.iter().zip(&self.cif) {
            if s.hidden.h.shape() != b.mamba.state_shape() {
                return Err(Error::Contract("hidden state does not match its CIF block".into()));
            }
        }
        let clip_p = clip.iter().map(|c| c.patchify(STEM_PATCH)).collect::<Result<Vec<_>>>()?;
        let search_p = search.patchify(STEM_PATCH)?;
        let mut g = Graph::inference(&self.store);
        let clip_v: Vec<Var> = clip_p.into_iter().map(|t| g.constant(t)).collect();
        let search_v = g.constant(search_p);
        let state_v: Vec<Var> = states.iter().map(|s| g.constant(s.hidden.h.clone())).collect();
        let out = self.forward(&mut g, &clip_v, search_v, &state_v);
        let grid = self.config.backbone.search_grid();
        let maps = HeadMaps::from_vars(&g, out.head, grid, grid);
        let new_states = out
            .states
            .iter()
            .zip(states)
            .map(|(&v, old)| CifBlockState {
                hidden: crate::ssm::HiddenState {
                    h: g.value(v).clone(),
                    frame_index: old.hidden.frame_index,
                },
            })
            .collect();
        Ok(Inference {
            maps,
            states: new_states,
            tokens: g.value(out.tokens).clone(),
            features: g.value(out.features).clone(),
            context: out.context.map(|c| g.value(c).clone()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let f = File::create(path)?;
        self.store.write_checkpoint(BufWriter::new(f), &cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(BufReader::new(File::open(path)?))?;
        let config: ModelConfig =
            serde_json::from_value(ck.manifest.model.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        model.store.load_checkpoint_values(&ck)?;
        Ok(model)
    }
}
