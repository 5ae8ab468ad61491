//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for parameters and for leaves created with
//! [`Graph::leaf`]. Nodes that cannot reach a differentiable leaf are skipped.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::ssm::{scan_backward, scan_forward};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Probability clamp used by the focal loss.
pub const PROB_EPS: f64 = 1e-7;
/// Denominator guard used by the GIoU loss.
pub const AREA_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, g: Var, b: Var, inv_std: Vec<f64> },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    BroadcastRows(Var),
    PatchMerge { x: Var, gh: usize, gw: usize },
    Unfold3x3 { x: Var, h: usize, w: usize },
    CausalConv { x: Var, w: Var, b: Var },
    Scan(Box<ScanNode>),
    ScanState(Var),
    SelectEntries { x: Var, idx: Vec<(usize, usize)> },
    BoxFromCell { v: Var, hm: usize, wm: usize },
    FocalLoss { p: Var, target: Tensor, norm: f64 },
    L1Box { pred: Var, gt: [f64; 4] },
    Giou { pred: Var, gt: [f64; 4] },
}

struct ScanNode {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Option<Var>,
    h0: Var,
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a node, `None` when it does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients indexed by [`ParamId`]; untouched parameters are `None`.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n_params];
        for &(id, node) in &self.params {
            out[id.index()] = self.nodes[node].clone();
        }
        out
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that never records backward information.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut g = Self::new(params);
        g.record = false;
        g
    }

    /// A graph without a parameter store; only constants and leaves.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.ng(v))
    }

    /// A constant: receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf; its gradient is available from [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear: input width {} vs weight rows {}", xv.cols(), wv.rows());
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols()), "linear: bias shape");
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = self.value(a).matmul_t(ta, self.value(b), tb);
        let ng = self.any_ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.any_ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `(1, cols)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "add_row: row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        let ng = self.any_ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.any_ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Multiplies every row of `a` elementwise by a `(1, cols)` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row: row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= x;
            }
        }
        let ng = self.any_ng(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.value(g).shape(), (1, cols), "layer_norm: gain shape");
        assert_eq!(self.value(b).shape(), (1, cols), "layer_norm: bias shape");
        let gv = self.value(g).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * is * gv[c] + bv[c];
            }
        }
        let ng = self.any_ng(&[x, g, b]);
        self.push(out, Op::LayerNorm { x, g, b, inv_std }, ng)
    }

    /// `x / sqrt(mean(x^2) + eps) * scale`, row-wise.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.value(scale).shape(), (1, cols), "rms_norm: scale shape");
        let sv = self.value(scale).data();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms.push(ir);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = row[c] * ir * sv[c];
            }
        }
        let ng = self.any_ng(&[x, scale]);
        self.push(out, Op::RmsNorm { x, scale, inv_rms }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = self.any_ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors);
        let ng = self.any_ng(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column means as a `(1, cols)` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows().max(1) as f64;
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / n);
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    /// Repeats a `(1, cols)` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * xv.cols());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_vec(n, xv.cols(), data);
        let ng = self.ng(x);
        self.push(out, Op::BroadcastRows(x), ng)
    }

    /// Merges each 2x2 neighbourhood of a `gh x gw` token grid into one token
    /// whose channels are the four inputs in order top-left, top-right,
    /// bottom-left, bottom-right.
    pub fn patch_merge(&mut self, x: Var, gh: usize, gw: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), gh * gw, "patch_merge: grid size");
        assert!(gh % 2 == 0 && gw % 2 == 0, "patch_merge: odd grid");
        let c = xv.cols();
        let (oh, ow) = (gh / 2, gw / 2);
        let mut out = Tensor::zeros(oh * ow, 4 * c);
        for i in 0..oh {
            for j in 0..ow {
                let dst = out.row_mut(i * ow + j);
                for (k, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let src = (2 * i + di) * gw + 2 * j + dj;
                    dst[k * c..(k + 1) * c].copy_from_slice(xv.row(src));
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::PatchMerge { x, gh, gw }, ng)
    }

    /// 3x3 neighbourhood gather with zero padding: `(h*w, c) -> (h*w, 9c)`.
    pub fn unfold3x3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), h * w, "unfold3x3: grid size");
        let c = xv.cols();
        let mut out = Tensor::zeros(h * w, 9 * c);
        for i in 0..h {
            for j in 0..w {
                let dst = out.row_mut(i * w + j);
                for k in 0..9 {
                    let (si, sj) = (i as isize + k as isize / 3 - 1, j as isize + k as isize % 3 - 1);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        let src = si as usize * w + sj as usize;
                        dst[k * c..(k + 1) * c].copy_from_slice(xv.row(src));
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Unfold3x3 { x, h, w }, ng)
    }

    /// Depthwise causal convolution along tokens. `w` is `(kernel, channels)`,
    /// `b` is `(1, channels)`; output token `t` sees inputs `t-kernel+1 ..= t`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (l, c) = xv.shape();
        let k = wv.rows();
        assert_eq!(wv.cols(), c, "causal_conv: weight channels");
        assert_eq!(bv.shape(), (1, c), "causal_conv: bias shape");
        let mut out = Tensor::zeros(l, c);
        for t in 0..l {
            let dst = out.row_mut(t);
            dst.copy_from_slice(bv.data());
            for kk in 0..k {
                let src = t as isize - (k - 1) as isize + kk as isize;
                if src < 0 {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(kk);
                for ch in 0..c {
                    dst[ch] += wr[ch] * xr[ch];
                }
            }
        }
        let ng = self.any_ng(&[x, w, b]);
        self.push(out, Op::CausalConv { x, w, b }, ng)
    }

    /// Selective scan; returns `(y, h_final)`. Shapes: `u, delta: (L, C)`,
    /// `a, h0: (C, N)`, `b, c: (L, N)`, `d: (1, C)`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        h0: Var,
    ) -> (Var, Var) {
        let (l, ch) = self.shape(u);
        let n = self.shape(a).1;
        assert_eq!(self.shape(delta), (l, ch), "scan: delta shape");
        assert_eq!(self.shape(a), (ch, n), "scan: A shape");
        assert_eq!(self.shape(b), (l, n), "scan: B shape");
        assert_eq!(self.shape(c), (l, n), "scan: C shape");
        assert_eq!(self.shape(h0), (ch, n), "scan: h0 shape");
        if let Some(d) = d {
            assert_eq!(self.shape(d), (1, ch), "scan: D shape");
        }
        let mut inputs = vec![u, delta, a, b, c, h0];
        inputs.extend(d);
        let ng = self.any_ng(&inputs) && self.record;
        let out = scan_forward(
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            d.map(|d| self.value(d).data()),
            self.value(h0),
            ng,
        );
        let node = ScanNode {
            u,
            delta,
            a,
            b,
            c,
            d,
            h0,
            states: out.states,
        };
        let y = self.push(out.y, Op::Scan(Box::new(node)), ng);
        let h = self.push(out.h_final, Op::ScanState(y), ng);
        (y, h)
    }

    /// Gathers single entries into a `(1, k)` row.
    pub fn select_entries(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(1, idx.len(), idx.iter().map(|&(r, c)| xv.get(r, c)).collect());
        let ng = self.ng(x);
        self.push(
            out,
            Op::SelectEntries {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// `[ox, oy, w, h]` at map cell `(row, col)` to normalized corners.
    pub fn box_from_cell(&mut self, v: Var, row: usize, col: usize, hm: usize, wm: usize) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.shape(), (1, 4), "box_from_cell expects (1, 4)");
        let d = vv.data();
        let cx = (col as f64 + d[0]) / wm as f64;
        let cy = (row as f64 + d[1]) / hm as f64;
        let out = Tensor::from_vec(
            1,
            4,
            vec![cx - d[2] / 2.0, cy - d[3] / 2.0, cx + d[2] / 2.0, cy + d[3] / 2.0],
        );
        let ng = self.ng(v);
        self.push(out, Op::BoxFromCell { v, hm, wm }, ng)
    }

    /// Penalty-reduced focal loss (alpha 2, beta 4) normalized by the number
    /// of exact positives (minimum 1).
    pub fn focal_loss(&mut self, p: Var, target: &Tensor) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "focal_loss shape mismatch");
        let n_pos = target.data().iter().filter(|&&t| t == 1.0).count();
        let norm = n_pos.max(1) as f64;
        let mut total = 0.0;
        for (&pr, &t) in pv.data().iter().zip(target.data()) {
            total += focal_term(pr, t);
        }
        let out = Tensor::scalar(total / norm);
        let ng = self.ng(p);
        self.push(
            out,
            Op::FocalLoss {
                p,
                target: target.clone(),
                norm,
            },
            ng,
        )
    }

    /// Mean absolute difference of the four corner coordinates.
    pub fn l1_box(&mut self, pred: Var, gt: [f64; 4]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), (1, 4));
        let v = pv.data().iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let ng = self.ng(pred);
        self.push(Tensor::scalar(v), Op::L1Box { pred, gt }, ng)
    }

    /// `1 - GIoU(pred, gt)`.
    pub fn giou_loss(&mut self, pred: Var, gt: [f64; 4]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), (1, 4));
        let p = [pv.data()[0], pv.data()[1], pv.data()[2], pv.data()[3]];
        let (loss, _) = giou_loss_and_grad(p, gt);
        let ng = self.ng(pred);
        self.push(Tensor::scalar(loss), Op::Giou { pred, gt }, ng)
    }

    /// Reverse pass from a `(1, 1)` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut scan_state_grads: HashMap<usize, Tensor> = HashMap::new();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let g = match (&node.op, grads[idx].take()) {
                (Op::Scan(_), g) => match g {
                    Some(g) => g,
                    None if scan_state_grads.contains_key(&idx) => Tensor::zeros(node.value.rows(), node.value.cols()),
                    None => continue,
                },
                (_, Some(g)) => g,
                (_, None) => continue,
            };
            self.backprop_node(idx, &g, &mut grads, &mut scan_state_grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v.0))
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        scan_state_grads: &mut HashMap<usize, Tensor>,
    ) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.ng(*x) {
                    self.acc(grads, *x, g.matmul_t(false, wv, true));
                }
                if self.ng(*w) {
                    self.acc(grads, *w, xv.matmul_t(true, g, false));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        self.acc(grads, *b, col_sums(g));
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    // C = op(A) op(B); dop(A) = G op(B)^T.
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    if *ta {
                        gemm_acc(bv, *tb, g, true, &mut ga, 1.0);
                    } else {
                        gemm_acc(g, false, bv, !*tb, &mut ga, 1.0);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm_acc(g, true, av, *ta, &mut gb, 1.0);
                    } else {
                        gemm_acc(av, !*ta, g, false, &mut gb, 1.0);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*row) {
                    let mut gr = Tensor::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for ((o, gg), x) in gr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gg * x;
                        }
                    }
                    self.acc(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gg, yy| gg * yy)),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |gg, yy| gg * yy * (1.0 - yy))),
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gg, x| {
                    let s = sigmoid(x);
                    gg * s * (1.0 + x * (1.0 - s))
                });
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gg, x| gg * gelu_grad(x));
                self.acc(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |gg, x| gg * sigmoid(x));
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, g: gain, b, inv_std } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.shape();
                let n = cols as f64;
                let mut gx = Tensor::zeros(rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                let mut gb = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let is = inv_std[r];
                    let gr = g.row(r);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..cols {
                        let xh = (row[c] - mean) * is;
                        let dxh = gr[c] * gv.data()[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        gg.data_mut()[c] += gr[c] * xh;
                        gb.data_mut()[c] += gr[c];
                    }
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        let xh = (row[c] - mean) * is;
                        let dxh = gr[c] * gv.data()[c];
                        out[c] = is * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gain, gg);
                self.acc(grads, *b, gb);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let xv = self.value(*x);
                let sv = self.value(*scale);
                let (rows, cols) = xv.shape();
                let n = cols as f64;
                let mut gx = Tensor::zeros(rows, cols);
                let mut gs = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let row = xv.row(r);
                    let ir = inv_rms[r];
                    let gr = g.row(r);
                    let mut dot = 0.0;
                    for c in 0..cols {
                        let xn = row[c] * ir;
                        dot += gr[c] * sv.data()[c] * xn;
                        gs.data_mut()[c] += gr[c] * xn;
                    }
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        let xn = row[c] * ir;
                        out[c] = ir * (gr[c] * sv.data()[c] - xn * dot / n);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *scale, gs);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let gp = Tensor::from_fn(g.rows(), c, |r, cc| g.get(r, off + cc));
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                gx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_rows(off, r));
                    }
                    off += r;
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let row: Vec<f64> = g.data().iter().map(|v| v / n.max(1) as f64).collect();
                let mut data = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    data.extend_from_slice(&row);
                }
                self.acc(grads, *x, Tensor::from_vec(n, row.len(), data));
            }
            Op::BroadcastRows(x) => self.acc(grads, *x, col_sums(g)),
            Op::PatchMerge { x, gh, gw } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let ow = gw / 2;
                let mut gx = Tensor::zeros(xv.rows(), c);
                for i in 0..gh / 2 {
                    for j in 0..ow {
                        let src = g.row(i * ow + j);
                        for (k, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let dst = (2 * i + di) * gw + 2 * j + dj;
                            gx.row_mut(dst).copy_from_slice(&src[k * c..(k + 1) * c]);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Unfold3x3 { x, h, w } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), c);
                for i in 0..*h {
                    for j in 0..*w {
                        let src = g.row(i * w + j);
                        for k in 0..9 {
                            let (si, sj) = (i as isize + k as isize / 3 - 1, j as isize + k as isize % 3 - 1);
                            if si >= 0 && sj >= 0 && (si as usize) < *h && (sj as usize) < *w {
                                let dst = gx.row_mut(si as usize * w + sj as usize);
                                for (o, v) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::CausalConv { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (l, c) = xv.shape();
                let k = wv.rows();
                let mut gx = Tensor::zeros(l, c);
                let mut gw = Tensor::zeros(k, c);
                for t in 0..l {
                    let gr = g.row(t);
                    for kk in 0..k {
                        let src = t as isize - (k - 1) as isize + kk as isize;
                        if src < 0 {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            gx.data_mut()[src * c + ch] += gr[ch] * wv.get(kk, ch);
                            gw.data_mut()[kk * c + ch] += gr[ch] * xv.get(src, ch);
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if self.ng(*b) {
                    self.acc(grads, *b, col_sums(g));
                }
            }
            Op::Scan(node) => {
                let gh = scan_state_grads.remove(&idx);
                let sg = scan_backward(
                    self.value(node.u),
                    self.value(node.delta),
                    self.value(node.a),
                    self.value(node.b),
                    self.value(node.c),
                    node.d.map(|d| self.value(d).data()),
                    self.value(node.h0),
                    &node.states,
                    g,
                    gh.as_ref(),
                );
                self.acc(grads, node.u, sg.u);
                self.acc(grads, node.delta, sg.delta);
                self.acc(grads, node.a, sg.a);
                self.acc(grads, node.b, sg.b);
                self.acc(grads, node.c, sg.c);
                if let (Some(d), Some(gd)) = (node.d, sg.d) {
                    self.acc(grads, d, gd);
                }
                self.acc(grads, node.h0, sg.h0);
            }
            Op::ScanState(scan) => {
                match scan_state_grads.get_mut(&scan.0) {
                    Some(existing) => existing.add_assign(g),
                    None => {
                        scan_state_grads.insert(scan.0, g.clone());
                    }
                }
            }
            Op::SelectEntries { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    gx.data_mut()[r * xv.cols() + c] += g.data()[k];
                }
                self.acc(grads, *x, gx);
            }
            Op::BoxFromCell { v, hm, wm, .. } => {
                let d = g.data();
                let gv = Tensor::from_vec(
                    1,
                    4,
                    vec![
                        (d[0] + d[2]) / *wm as f64,
                        (d[1] + d[3]) / *hm as f64,
                        (d[2] - d[0]) / 2.0,
                        (d[3] - d[1]) / 2.0,
                    ],
                );
                self.acc(grads, *v, gv);
            }
            Op::FocalLoss { p, target, norm } => {
                let s = g.data()[0] / norm;
                let gp = self.value(*p).zip_map(target, |pr, t| s * focal_term_grad(pr, t));
                self.acc(grads, *p, gp);
            }
            Op::L1Box { pred, gt } => {
                let s = g.data()[0] / 4.0;
                let pv = self.value(*pred);
                let gp = Tensor::from_vec(
                    1,
                    4,
                    pv.data()
                        .iter()
                        .zip(gt)
                        .map(|(a, b)| {
                            let diff: f64 = a - b;
                            if diff > 0.0 {
                                s
                            } else if diff < 0.0 {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
                self.acc(grads, *pred, gp);
            }
            Op::Giou { pred, gt } => {
                let pv = self.value(*pred).data();
                let (_, gp) = giou_loss_and_grad([pv[0], pv[1], pv[2], pv[3]], *gt);
                let s = g.data()[0];
                self.acc(grads, *pred, Tensor::from_vec(1, 4, gp.iter().map(|v| v * s).collect()));
            }
        }
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Per-cell focal loss term for probability `p` and soft target `t`.
pub fn focal_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if t == 1.0 {
        -(1.0 - p).powi(2) * p.ln()
    } else {
        -(1.0 - t).powi(4) * p * p * (1.0 - p).ln()
    }
}

fn focal_term_grad(p: f64, t: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if t == 1.0 {
        2.0 * (1.0 - p) * p.ln() - (1.0 - p).powi(2) / p
    } else {
        -(1.0 - t).powi(4) * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
    }
}

/// `1 - GIoU` and its gradient with respect to the predicted corners.
pub(crate) fn giou_loss_and_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let pa = pw * ph;
    let ga = (g[2] - g[0]) * (g[3] - g[1]);
    let ix1 = p[0].max(g[0]);
    let iy1 = p[1].max(g[1]);
    let ix2 = p[2].min(g[2]);
    let iy2 = p[3].min(g[3]);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union_raw = pa + ga - inter;
    let union = union_raw.max(AREA_EPS);
    let cx1 = p[0].min(g[0]);
    let cy1 = p[1].min(g[1]);
    let cx2 = p[2].max(g[2]);
    let cy2 = p[3].max(g[3]);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let hull_raw = cw * ch;
    let hull = hull_raw.max(AREA_EPS);
    let iou = inter / union;
    let giou = iou - (hull - union) / hull;
    let loss = 1.0 - giou;

    // loss = 2 - I/U - U/C with U = pa + ga - I.
    let u_active = union_raw > AREA_EPS;
    let c_active = hull_raw > AREA_EPS;
    let g_u = if u_active { inter / (union * union) - 1.0 / hull } else { 0.0 };
    let g_inter_direct = -1.0 / union;
    let g_inter = g_inter_direct - g_u;
    let g_pa = g_u;
    let g_hull = if c_active { union / (hull * hull) } else { 0.0 };

    let mut grad = [0.0; 4];
    // pred area
    grad[0] -= g_pa * ph;
    grad[2] += g_pa * ph;
    grad[1] -= g_pa * pw;
    grad[3] += g_pa * pw;
    // intersection
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let giw = g_inter * ih;
        let gih = g_inter * iw;
        if p[0] >= g[0] {
            grad[0] -= giw;
        }
        if p[2] <= g[2] {
            grad[2] += giw;
        }
        if p[1] >= g[1] {
            grad[1] -= gih;
        }
        if p[3] <= g[3] {
            grad[3] += gih;
        }
    }
    // enclosing box
    let gcw = g_hull * ch;
    let gch = g_hull * cw;
    if p[0] <= g[0] {
        grad[0] -= gcw;
    }
    if p[2] >= g[2] {
        grad[2] += gcw;
    }
    if p[1] <= g[1] {
        grad[1] -= gch;
    }
    if p[3] >= g[3] {
        grad[3] += gch;
    }
    (loss, grad)
}
