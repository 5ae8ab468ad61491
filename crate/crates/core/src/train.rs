//! Two-pass video-level training with AdamW and step learning-rate decay.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::STEM_PATCH;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{FrameLoss, Lambdas};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::synth::{make_training_sample, SampleConfig, SyntheticSequence, TrainingSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    /// Learning rates are multiplied by 0.1 from this epoch on (0-based).
    pub lr_drop_epoch: usize,
    /// Backpropagate through the hidden states carried from the first
    /// search pass into the second.
    pub carry_gradients: bool,
    pub seed: u64,
    pub lambdas: Lambdas,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_rest: 1e-3,
            weight_decay: 1e-4,
            epochs: 40,
            samples_per_epoch: 2000,
            batch_size: 8,
            lr_drop_epoch: 32,
            carry_gradients: true,
            seed: 0,
            lambdas: Lambdas::default(),
            grad_clip: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_rest > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, samples_per_epoch and batch_size must be positive".into()));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    /// `(backbone, rest)` learning rates during `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let f = if epoch >= self.lr_drop_epoch { 0.1 } else { 1.0 };
        (self.lr_backbone * f, self.lr_rest * f)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lrs: (f64, f64), weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let lr = match store.group(id) {
                ParamGroup::Backbone => lrs.0,
                ParamGroup::Rest => lrs.1,
            };
            let decay = store.decays(id);
            let g = grads.get(k).and_then(|g| g.as_ref());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(id).data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                if decay {
                    p[i] -= lr * weight_decay * p[i];
                }
                p[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassLoss {
    pub total: f64,
    pub parts: FrameLoss,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub first: PassLoss,
    pub second: PassLoss,
    pub total: f64,
    pub grads: Option<Vec<Option<Tensor>>>,
}

fn pass_loss(g: &Graph, l: &crate::model::LossVars) -> PassLoss {
    let v = |x: Var| g.value(x).data()[0];
    PassLoss {
        total: v(l.total),
        parts: FrameLoss {
            cls: v(l.cls),
            l1: v(l.l1),
            giou: v(l.giou),
        },
    }
}

/// Runs both search passes of one sample. The first pass starts from zero
/// states; the second continues from the states it produced.
pub fn sample_forward(
    model: &Model,
    sample: &TrainingSample,
    carry_gradients: bool,
    lambdas: &Lambdas,
    with_grads: bool,
) -> Result<SampleOutcome> {
    model.check_inputs(&sample.clip, &sample.search[0])?;
    model.check_inputs(&sample.clip, &sample.search[1])?;
    let mut g = Graph::new(&model.store);
    let clip: Vec<Var> = sample
        .clip
        .iter()
        .map(|c| c.patchify(STEM_PATCH).map(|t| g.constant(t)))
        .collect::<Result<_>>()?;
    let s1 = g.constant(sample.search[0].patchify(STEM_PATCH)?);
    let s2 = g.constant(sample.search[1].patchify(STEM_PATCH)?);
    let zeros: Vec<Var> = model
        .zero_states()
        .into_iter()
        .map(|s| g.constant(s.hidden.h))
        .collect();
    let out1 = model.forward(&mut g, &clip, s1, &zeros);
    let l1 = model.frame_loss(&mut g, out1.head, &sample.gt[0], lambdas);
    let carried: Vec<Var> = if carry_gradients {
        out1.states.clone()
    } else {
        out1.states
            .iter()
            .map(|&v| {
                let t = g.value(v).clone();
                g.constant(t)
            })
            .collect()
    };
    let out2 = model.forward(&mut g, &clip, s2, &carried);
    let l2 = model.frame_loss(&mut g, out2.head, &sample.gt[1], lambdas);
    let total = g.add(l1.total, l2.total);
    let grads = with_grads.then(|| g.backward(total).param_grads(model.store.len()));
    Ok(SampleOutcome {
        first: pass_loss(&g, &l1),
        second: pass_loss(&g, &l2),
        total: g.value(total).data()[0],
        grads,
    })
}

/// Batch-mean losses of one optimizer step; each term sums both passes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

fn add_scaled(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>, s: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(mut g) = g {
            g.scale_assign(s);
            match a {
                Some(a) => a.add_assign(&g),
                None => *a = Some(g),
            }
        }
    }
}

fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for g in grads.iter_mut().flatten() {
            g.scale_assign(max_norm / norm);
        }
    }
}

/// One optimizer update on the mean gradient of `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    lrs: (f64, f64),
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut stats = StepStats::default();
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let out = sample_forward(model, sample, cfg.carry_gradients, &cfg.lambdas, true)?;
        stats.total += out.total * scale;
        for p in [&out.first, &out.second] {
            stats.cls += p.parts.cls * scale;
            stats.l1 += p.parts.l1 * scale;
            stats.giou += p.parts.giou * scale;
        }
        if !out.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr: lrs.0,
                cls: stats.cls,
                l1: stats.l1,
                giou: stats.giou,
            });
        }
        add_scaled(&mut acc, out.grads.expect("requested gradients"), scale);
    }
    if cfg.grad_clip > 0.0 {
        clip_gradients(&mut acc, cfg.grad_clip);
    }
    opt.step(&mut model.store, &acc, lrs, cfg.weight_decay);
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub stats: StepStats,
    pub lr: f64,
}

impl LogRecord {
    /// `epoch,step,loss_total,loss_cls,loss_l1,loss_giou,lr`.
    pub fn line(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:e}",
            self.epoch, self.step, self.stats.total, self.stats.cls, self.stats.l1, self.stats.giou, self.lr
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub records: Vec<LogRecord>,
}

/// Trains `model` on samples drawn from `sequences`. With `out_dir`, appends
/// to `metrics.log` and writes `model.ckpt` (plus periodic
/// `epoch_NNN.ckpt`).
pub fn fit(
    model: &mut Model,
    sequences: &[SyntheticSequence],
    sample_cfg: &SampleConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let f = OpenOptions::new().create(true).append(true).open(dir.join("metrics.log"))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut opt = AdamW::new(&model.store);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lrs = cfg.learning_rates(epoch);
        let mut sum = 0.0;
        let mut remaining = cfg.samples_per_epoch;
        let mut n_steps = 0;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let batch = (0..b)
                .map(|_| {
                    let seq = &sequences[rng.gen_range(0..sequences.len())];
                    make_training_sample(seq, sample_cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = train_step(model, &mut opt, &batch, cfg, lrs, step)?;
            let rec = LogRecord {
                epoch,
                step,
                stats,
                lr: lrs.0,
            };
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", rec.line())?;
            }
            report.records.push(rec);
            sum += stats.total;
            n_steps += 1;
            step += 1;
        }
        report.epoch_losses.push(sum / n_steps as f64);
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                model.save(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("model.ckpt"))?;
    }
    Ok(report)
}

/// Writes `records` as a metrics log, replacing any existing file.
pub fn write_metrics_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", r.line())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        for e in 0..cfg.epochs {
            let (b, r) = cfg.learning_rates(e);
            assert!((r / b - 10.0).abs() < 1e-12);
        }
        let (pre, _) = cfg.learning_rates(cfg.lr_drop_epoch - 1);
        let (post, _) = cfg.learning_rates(cfg.lr_drop_epoch);
        assert!((post - 0.1 * pre).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr_drop_epoch: 40,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_rest: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[vec![1.0, -2.0]]), ParamGroup::Rest, false);
        let mut opt = AdamW::new(&store);
        let g = vec![Some(Tensor::from_rows(&[vec![0.5, -3.0]]))];
        opt.step(&mut store, &g, (0.0, 0.1), 0.0);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[vec![2.0]]), ParamGroup::Backbone, true);
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &[None], (0.5, 0.0), 0.1);
        assert!((store.value(id).data()[0] - 1.9).abs() < 1e-15);
    }
}
