//! Center-based prediction head, box decoding and the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::graph::{giou_loss_and_grad, Graph, Var};
pub use crate::graph::focal_term;
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden channels of each branch; 0 uses the model width.
    pub channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { channels: 0 }
    }
}

/// One convolutional branch: 3x3 conv, SiLU, 3x3 conv, SiLU, 1x1 conv.
#[derive(Debug, Clone)]
pub struct Branch {
    pub conv1: Linear,
    pub conv2: Linear,
    pub out: Linear,
}

impl Branch {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, ch: usize, out: usize) -> Self {
        let group = ParamGroup::Rest;
        let half = (ch / 2).max(1);
        Self {
            conv1: Linear::new(store, rng, &format!("{name}.conv1"), 9 * dim, ch, true, group, 1.0),
            conv2: Linear::new(store, rng, &format!("{name}.conv2"), 9 * ch, half, true, group, 1.0),
            out: Linear::new(store, rng, &format!("{name}.out"), half, out, true, group, 0.5),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, hm: usize, wm: usize) -> Var {
        let u = g.unfold3x3(x, hm, wm);
        let h = self.conv1.forward(g, u);
        let h = g.silu(h);
        let u = g.unfold3x3(h, hm, wm);
        let h = self.conv2.forward(g, u);
        let h = g.silu(h);
        let o = self.out.forward(g, h);
        g.sigmoid(o)
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub score: Branch,
    pub size: Branch,
    pub offset: Branch,
}

/// Head outputs as graph nodes: `score (cells, 1)`, `size (cells, 2)` and
/// `offset (cells, 2)`, cells in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub score: Var,
    pub size: Var,
    pub offset: Var,
}

/// Initial score bias so that every cell starts at probability 0.1.
pub const SCORE_PRIOR: f64 = 0.1;

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, config: &HeadConfig) -> Self {
        let ch = if config.channels == 0 { dim } else { config.channels };
        let score = Branch::new(store, rng, "head.score", dim, ch, 1);
        let bias = (SCORE_PRIOR / (1.0 - SCORE_PRIOR)).ln();
        store.value_mut(score.out.b.expect("head bias")).data_mut()[0] = bias;
        Self {
            score,
            size: Branch::new(store, rng, "head.size", dim, ch, 2),
            offset: Branch::new(store, rng, "head.offset", dim, ch, 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, features: Var, hm: usize, wm: usize) -> HeadVars {
        HeadVars {
            score: self.score.forward(g, features, hm, wm),
            size: self.size.forward(g, features, hm, wm),
            offset: self.offset.forward(g, features, hm, wm),
        }
    }

    /// Evaluates the head on `(hm * wm, dim)` search features.
    pub fn apply(&self, store: &ParamStore, features: &Tensor, hm: usize, wm: usize) -> Result<HeadMaps> {
        if features.rows() != hm * wm {
            return Err(Error::Contract(format!(
                "{} feature tokens do not form a {hm}x{wm} map",
                features.rows()
            )));
        }
        let expect = self.score.conv1.w;
        if store.value(expect).rows() != 9 * features.cols() {
            return Err(Error::Contract(format!("feature width {} does not match head", features.cols())));
        }
        let mut g = Graph::inference(store);
        let x = g.constant(features.clone());
        let v = self.forward(&mut g, x, hm, wm);
        Ok(HeadMaps::from_vars(&g, v, hm, wm))
    }
}

/// Score, size and offset maps, each `(hm, wm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub score: Tensor,
    pub width: Tensor,
    pub height: Tensor,
    pub offset_x: Tensor,
    pub offset_y: Tensor,
}

impl HeadMaps {
    pub fn from_vars(g: &Graph, v: HeadVars, hm: usize, wm: usize) -> Self {
        let s = g.value(v.score);
        let b = g.value(v.size);
        let o = g.value(v.offset);
        let col = |t: &Tensor, c: usize| Tensor::from_fn(hm, wm, |i, j| t.get(i * wm + j, c));
        Self {
            score: col(s, 0),
            width: col(b, 0),
            height: col(b, 1),
            offset_x: col(o, 0),
            offset_y: col(o, 1),
        }
    }

    pub fn hm(&self) -> usize {
        self.score.rows()
    }

    pub fn wm(&self) -> usize {
        self.score.cols()
    }
}

/// Row-major argmax, first occurrence on ties.
pub fn argmax(t: &Tensor) -> (usize, usize) {
    let mut best = 0;
    for (k, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = k;
        }
    }
    (best / t.cols(), best % t.cols())
}

/// Box at the highest-scoring cell in normalized search coordinates.
pub fn decode_box(maps: &HeadMaps) -> (BBox, f64) {
    let (i, j) = argmax(&maps.score);
    let (hm, wm) = (maps.hm() as f64, maps.wm() as f64);
    let cx = (j as f64 + maps.offset_x.get(i, j)) / wm;
    let cy = (i as f64 + maps.offset_y.get(i, j)) / hm;
    let b = BBox::from_center(cx, cy, maps.width.get(i, j), maps.height.get(i, j));
    (b.clamp01(), maps.score.get(i, j))
}

/// Map cell containing the box center, clamped to the map.
pub fn center_cell(gt: &BBox, hm: usize, wm: usize) -> (usize, usize) {
    let (cx, cy) = gt.center();
    let i = ((cy * hm as f64).floor().max(0.0) as usize).min(hm - 1);
    let j = ((cx * wm as f64).floor().max(0.0) as usize).min(wm - 1);
    (i, j)
}

/// Regression target `[ox, oy, w, h]` at the center cell.
pub fn regression_target(gt: &BBox, hm: usize, wm: usize) -> [f64; 4] {
    let (i, j) = center_cell(gt, hm, wm);
    let (cx, cy) = gt.center();
    [cx * wm as f64 - j as f64, cy * hm as f64 - i as f64, gt.width(), gt.height()]
}

/// Gaussian heatmap around the box center, in cell units. The map is scaled
/// so the cell containing the center is exactly 1; a center on a cell edge
/// gives both neighbours 1.
pub fn gaussian_target(gt: &BBox, hm: usize, wm: usize) -> Tensor {
    let (cx, cy) = gt.center();
    let (cx, cy) = (cx * wm as f64, cy * hm as f64);
    let sigma = ((gt.width() * wm as f64).max(gt.height() * hm as f64) / 3.0).max(0.25);
    let denom = 2.0 * sigma * sigma;
    let (pi, pj) = center_cell(gt, hm, wm);
    let d2 = |i: usize, j: usize| {
        let dx = j as f64 + 0.5 - cx;
        let dy = i as f64 + 0.5 - cy;
        dx * dx + dy * dy
    };
    let peak = d2(pi, pj);
    Tensor::from_fn(hm, wm, |i, j| (-(d2(i, j) - peak) / denom).exp().min(1.0))
}

/// Penalty-reduced focal loss normalized by the number of exact positives.
pub fn focal_loss(score: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(score.shape(), target.shape(), "focal_loss shape mismatch");
    let n_pos = target.data().iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    score
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| focal_term(p, t))
        .sum::<f64>()
        / n_pos
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou_loss(a, b)
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    giou_loss_and_grad(pred.corners(), gt.corners()).0
}

/// Mean absolute corner difference.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.corners().iter().zip(gt.corners()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl FrameLoss {
    pub fn weighted(&self, l: &Lambdas) -> f64 {
        l.cls * self.cls + l.l1 * self.l1 + l.giou * self.giou
    }
}

/// Weighted sum over frames.
pub fn total_loss(frames: &[FrameLoss], lambdas: &Lambdas) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Contract("total_loss needs at least one frame".into()));
    }
    Ok(frames.iter().map(|f| f.weighted(lambdas)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps_with(hm: usize, wm: usize) -> HeadMaps {
        HeadMaps {
            score: Tensor::zeros(hm, wm),
            width: Tensor::zeros(hm, wm),
            height: Tensor::zeros(hm, wm),
            offset_x: Tensor::zeros(hm, wm),
            offset_y: Tensor::zeros(hm, wm),
        }
    }

    #[test]
    fn head_shapes_and_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::new(&mut store, &mut rng, 16, &HeadConfig::default());
        let f = Tensor::from_fn(64, 16, |_, _| rng.gen_range(-3.0..3.0));
        let m = head.apply(&store, &f, 8, 8).unwrap();
        assert_eq!(m.score.shape(), (8, 8));
        for t in [&m.score, &m.width, &m.height, &m.offset_x, &m.offset_y] {
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(head.apply(&store, &f, 8, 8).unwrap(), m);
        assert!(matches!(head.apply(&store, &f, 4, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn decode_hand_case() {
        let mut m = maps_with(8, 8);
        m.score.set(3, 3, 0.9);
        m.offset_x.set(3, 3, 0.5);
        m.offset_y.set(3, 3, 0.5);
        m.width.set(3, 3, 0.25);
        m.height.set(3, 3, 0.25);
        let (b, s) = decode_box(&m);
        assert_eq!(s, 0.9);
        assert_eq!(b, BBox::new(0.3125, 0.3125, 0.5625, 0.5625));
        m.score = m.score.map(|v| v * 7.0);
        assert_eq!(decode_box(&m).0, b);
    }

    #[test]
    fn decode_degenerate_and_ties() {
        let m = maps_with(4, 4);
        let (b, _) = decode_box(&m);
        assert_eq!(b, BBox::new(0.0, 0.0, 0.0, 0.0));
        let mut t = Tensor::zeros(3, 3);
        t.set(1, 2, 1.0);
        t.set(2, 0, 1.0);
        assert_eq!(argmax(&t), (1, 2));
    }

    #[test]
    fn gaussian_target_properties() {
        let gt = BBox::new(0.3, 0.55, 0.42, 0.7);
        let t = gaussian_target(&gt, 8, 8);
        let (i, j) = center_cell(&gt, 8, 8);
        assert_eq!(t.get(i, j), 1.0);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(t.sum() > 1.0);
        let sym = gaussian_target(&BBox::new(0.4, 0.35, 0.6, 0.65), 8, 8);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(sym.get(r, c), sym.get(r, 7 - c));
            }
        }
    }

    #[test]
    fn decode_of_encoded_target_is_within_a_cell() {
        let gt = BBox::new(0.21, 0.6, 0.37, 0.81);
        let (hm, wm) = (8, 8);
        let mut m = maps_with(hm, wm);
        m.score = gaussian_target(&gt, hm, wm);
        let r = regression_target(&gt, hm, wm);
        m.offset_x = Tensor::filled(hm, wm, r[0]);
        m.offset_y = Tensor::filled(hm, wm, r[1]);
        m.width = Tensor::filled(hm, wm, r[2]);
        m.height = Tensor::filled(hm, wm, r[3]);
        let (b, _) = decode_box(&m);
        for (a, c) in b.corners().iter().zip(gt.corners()) {
            assert!((a - c).abs() <= 1.0 / 8.0 + 1e-12);
        }
    }

    #[test]
    fn focal_cases() {
        let mut target = Tensor::zeros(3, 3);
        target.set(1, 1, 1.0);
        let mut p = Tensor::zeros(3, 3);
        p.set(1, 1, 1.0);
        assert!(focal_loss(&p, &target) < 1e-12);
        p.set(1, 1, 0.5);
        assert!((focal_loss(&p, &target) - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn giou_hand_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a), 0.0);
        assert!((giou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)) + 0.5).abs() < 1e-12);
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let c = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((giou(&b, &c) + 5.0 / 63.0).abs() < 1e-12);
        assert_eq!(giou_loss(&b, &c), giou_loss(&c, &b));
    }

    #[test]
    fn total_loss_arithmetic() {
        let f = FrameLoss {
            cls: 0.1,
            l1: 0.02,
            giou: 0.3,
        };
        assert_eq!(total_loss(&[f, f], &Lambdas::default()).unwrap(), 1.6);
        assert_eq!(total_loss(&[FrameLoss::default()], &Lambdas::default()).unwrap(), 0.0);
        let unit = FrameLoss {
            cls: 1.0,
            l1: 0.0,
            giou: 0.0,
        };
        let l = Lambdas {
            cls: 2.0,
            ..Lambdas::default()
        };
        assert_eq!(total_loss(&[unit], &l).unwrap(), 2.0);
        assert!(total_loss(&[], &l).is_err());
    }
}
