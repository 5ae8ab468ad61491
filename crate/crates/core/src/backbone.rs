//! Patch embedding, token assembly and the grouped transformer trunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp, TransformerLayer};
use crate::params::{normal_init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pixel side of a stem patch; two 2x2 merges bring the stride to 16.
pub const STEM_PATCH: usize = 4;
pub const STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub depth: usize,
    pub n_groups: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub clip_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 8,
            n_groups: 4,
            heads: 4,
            mlp_ratio: 4,
            template_size: 64,
            search_size: 128,
            clip_len: 5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("dim {} must be a positive multiple of 4", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.n_groups == 0 || self.depth % self.n_groups != 0 {
            return bad(format!("depth {} is not divisible by {} groups", self.depth, self.n_groups));
        }
        for (what, s) in [("template", self.template_size), ("search", self.search_size)] {
            if s == 0 || s % STRIDE != 0 {
                return bad(format!("{what} size {s} is not a positive multiple of {STRIDE}"));
            }
        }
        if self.clip_len == 0 {
            return bad("clip_len must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / STRIDE
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / STRIDE
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.clip_len, self.template_tokens(), self.search_tokens())
    }

    pub fn layers_per_group(&self) -> usize {
        self.depth / self.n_groups
    }
}

/// Token spans of the concatenated clip + search sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub clip_frames: usize,
    pub tokens_per_template: usize,
    pub search_tokens: usize,
}

impl TokenLayout {
    pub fn new(clip_frames: usize, tokens_per_template: usize, search_tokens: usize) -> Self {
        Self {
            clip_frames,
            tokens_per_template,
            search_tokens,
        }
    }

    pub fn clip_span(&self) -> std::ops::Range<usize> {
        0..self.clip_frames * self.tokens_per_template
    }

    pub fn search_span(&self) -> std::ops::Range<usize> {
        let s = self.clip_span().end;
        s..s + self.search_tokens
    }

    pub fn len(&self) -> usize {
        self.search_span().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenates clip tokens (frame order) and search tokens, adding the
/// template, clip-index and search position embeddings.
pub fn assemble_tokens(
    clip: &[Tensor],
    search: &Tensor,
    template_pos: &Tensor,
    clip_index: &Tensor,
    search_pos: &Tensor,
) -> Result<(Tensor, TokenLayout)> {
    let dim = search.cols();
    let tz = template_pos.rows();
    if search.shape() != search_pos.shape() {
        return Err(Error::Contract("search tokens do not match search embedding".into()));
    }
    if clip_index.rows() < clip.len() || clip_index.cols() != dim {
        return Err(Error::Contract("clip index embedding too small".into()));
    }
    let mut parts = Vec::with_capacity(clip.len() + 1);
    for (k, f) in clip.iter().enumerate() {
        if f.shape() != (tz, dim) || template_pos.cols() != dim {
            return Err(Error::Contract(format!(
                "clip frame {k} has shape {:?}, expected ({tz}, {dim})",
                f.shape()
            )));
        }
        parts.push(Tensor::from_fn(tz, dim, |r, c| {
            f.get(r, c) + template_pos.get(r, c) + clip_index.get(k, c)
        }));
    }
    parts.push(search.zip_map(search_pos, |a, b| a + b));
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::concat_rows(&refs), TokenLayout::new(clip.len(), tz, search.rows())))
}

/// Stride-4 patch projection, a residual MLP, then two 2x2 merges.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub stem: Linear,
    pub stem_norm: LayerNorm,
    pub mlp: Mlp,
    pub norm1: LayerNorm,
    pub merge1: Linear,
    pub norm2: LayerNorm,
    pub merge2: Linear,
}

impl PatchEmbed {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) -> Self {
        let g = ParamGroup::Backbone;
        let c0 = dim / 4;
        let c1 = dim / 2;
        let pin = 3 * STEM_PATCH * STEM_PATCH;
        let stem = Linear::new(store, rng, "embed.stem", pin, c0, true, g, 1.0);
        // Padding normalizes to exact zeros; a zero bias would feed the stem
        // norm a zero-variance row and make it ill-conditioned.
        if let Some(b) = stem.b {
            let bound = 1.0 / (pin as f64).sqrt();
            *store.value_mut(b) = Tensor::from_fn(1, c0, |_, _| rng.gen_range(-bound..bound));
        }
        Self {
            stem,
            stem_norm: LayerNorm::new(store, "embed.stem_norm", c0, g),
            mlp: Mlp::new(store, rng, "embed.mlp", c0, 2 * c0, g),
            norm1: LayerNorm::new(store, "embed.norm1", 4 * c0, g),
            merge1: Linear::new(store, rng, "embed.merge1", 4 * c0, c1, true, g, 1.0),
            norm2: LayerNorm::new(store, "embed.norm2", 4 * c1, g),
            merge2: Linear::new(store, rng, "embed.merge2", 4 * c1, dim, true, g, 1.0),
        }
    }

    /// `patches` is `(side/4)^2 x 48` from [`crate::image::Image::patchify`].
    pub fn forward(&self, g: &mut Graph, patches: Var, side: usize) -> Var {
        let grid = side / STEM_PATCH;
        let x = self.stem.forward(g, patches);
        let h = self.stem_norm.forward(g, x);
        let h = self.mlp.forward(g, h);
        let x = g.add(x, h);
        let x = g.patch_merge(x, grid, grid);
        let x = self.norm1.forward(g, x);
        let x = self.merge1.forward(g, x);
        let x = g.patch_merge(x, grid / 2, grid / 2);
        let x = self.norm2.forward(g, x);
        self.merge2.forward(g, x)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: PatchEmbed,
    pub template_pos: ParamId,
    pub clip_index: ParamId,
    pub search_pos: ParamId,
    pub groups: Vec<Vec<TransformerLayer>>,
    pub final_norm: LayerNorm,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &BackboneConfig) -> Self {
        let g = ParamGroup::Backbone;
        let dim = config.dim;
        let embed = PatchEmbed::new(store, rng, dim);
        let template_pos = store.add("pos.template", normal_init(rng, config.template_tokens(), dim, 0.02), g, false);
        let clip_index = store.add("pos.clip", normal_init(rng, config.clip_len, dim, 0.02), g, false);
        let search_pos = store.add("pos.search", normal_init(rng, config.search_tokens(), dim, 0.02), g, false);
        let groups = (0..config.n_groups)
            .map(|gi| {
                (0..config.layers_per_group())
                    .map(|li| {
                        TransformerLayer::new(
                            store,
                            rng,
                            &format!("blocks.{gi}.{li}"),
                            dim,
                            config.heads,
                            config.mlp_ratio,
                            g,
                        )
                    })
                    .collect()
            })
            .collect();
        let final_norm = LayerNorm::new(store, "blocks.norm", dim, g);
        Self {
            config: config.clone(),
            embed,
            template_pos,
            clip_index,
            search_pos,
            groups,
            final_norm,
        }
    }

    /// Embeds and concatenates clip and search patches into `F_vx`.
    pub fn embed_tokens(&self, g: &mut Graph, clip: &[Var], search: Var) -> Var {
        let cfg = &self.config;
        let tz = cfg.template_tokens();
        let tpos = g.param(self.template_pos);
        let cidx = g.param(self.clip_index);
        let mut parts = Vec::with_capacity(clip.len() + 1);
        for (k, &p) in clip.iter().enumerate() {
            let e = self.embed.forward(g, p, cfg.template_size);
            let e = g.add(e, tpos);
            let idx = g.slice_rows(cidx, k, 1);
            let idx = g.broadcast_rows(idx, tz);
            parts.push(g.add(e, idx));
        }
        let s = self.embed.forward(g, search, cfg.search_size);
        let spos = g.param(self.search_pos);
        parts.push(g.add(s, spos));
        g.concat_rows(&parts)
    }

    pub fn run_group(&self, g: &mut Graph, i: usize, mut x: Var) -> Var {
        for layer in &self.groups[i] {
            x = layer.forward(g, x);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts_follow_stride() {
        for (side, n) in [(128, 64), (64, 16), (224, 196)] {
            assert_eq!((side / STRIDE) * (side / STRIDE), n);
        }
        let cfg = BackboneConfig::default();
        let layout = cfg.layout();
        assert_eq!(layout.len(), 5 * 16 + 64);
        assert_eq!(layout.clip_span(), 0..80);
        assert_eq!(layout.search_span(), 80..144);
        assert_eq!(TokenLayout::new(1, 16, 64).len(), 80);
    }

    #[test]
    fn assemble_orders_clip_first() {
        let clip = vec![Tensor::filled(2, 4, 1.0), Tensor::filled(2, 4, 2.0)];
        let search = Tensor::filled(3, 4, 5.0);
        let tpos = Tensor::zeros(2, 4);
        let cidx = Tensor::from_fn(2, 4, |r, _| 10.0 * r as f64);
        let (t, layout) = assemble_tokens(&clip, &search, &tpos, &cidx, &Tensor::zeros(3, 4)).unwrap();
        assert_eq!(t.rows(), 7);
        assert_eq!(t.get(0, 0), 1.0);
        assert_eq!(t.get(2, 0), 12.0);
        assert_eq!(t.get(6, 0), 5.0);
        assert_eq!(layout.search_span(), 4..7);
        let bad = assemble_tokens(&[Tensor::zeros(2, 3)], &search, &tpos, &cidx, &Tensor::zeros(3, 4));
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            search_size: 100,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = BackboneConfig {
            depth: 6,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
