//! One-pass evaluation: success AUC, precision, normalized precision, AO
//! and success rates.

use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::synth::FrameSource;
use crate::tracker::SequenceTracker;

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const NORM_PRECISION_POINTS: usize = 51;
pub const PRECISION_PIXELS: f64 = 20.0;

/// `(threshold, fraction of IoU > threshold)` for thresholds `0, 0.05, ..., 1`.
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    (0..SUCCESS_THRESHOLDS)
        .map(|k| {
            let tau = k as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            let hits = ious.iter().filter(|&&v| v > tau).count();
            (tau, hits as f64 / ious.len().max(1) as f64)
        })
        .collect()
}

pub fn success_auc(ious: &[f64]) -> f64 {
    let curve = success_curve(ious);
    curve.iter().map(|p| p.1).sum::<f64>() / curve.len() as f64
}

/// Precision at 20 pixels and normalized precision (mean over 51 thresholds
/// in `[0, 0.5]` of the fraction of size-normalized center errors within
/// the threshold).
pub fn precision_metrics(pred_centers: &[(f64, f64)], gt: &[BBox], pixel_threshold: f64) -> (f64, f64) {
    assert_eq!(pred_centers.len(), gt.len(), "precision_metrics length mismatch");
    let n = gt.len().max(1) as f64;
    let mut within = 0usize;
    let mut norm_d = Vec::with_capacity(gt.len());
    for (&(px, py), g) in pred_centers.iter().zip(gt) {
        let (gx, gy) = g.center();
        if (px - gx).hypot(py - gy) <= pixel_threshold {
            within += 1;
        }
        let nx = (px - gx) / g.width().max(f64::MIN_POSITIVE);
        let ny = (py - gy) / g.height().max(f64::MIN_POSITIVE);
        norm_d.push(nx.hypot(ny));
    }
    let curve: f64 = (0..NORM_PRECISION_POINTS)
        .map(|k| {
            let tau = 0.5 * k as f64 / (NORM_PRECISION_POINTS - 1) as f64;
            norm_d.iter().filter(|&&d| d <= tau).count() as f64 / n
        })
        .sum();
    (within as f64 / n, curve / NORM_PRECISION_POINTS as f64)
}

/// Mean IoU and the fractions above 0.5 and 0.75.
pub fn ao_sr(ious: &[f64]) -> (f64, f64, f64) {
    let n = ious.len().max(1) as f64;
    let ao = ious.iter().sum::<f64>() / n;
    let sr = |t: f64| ious.iter().filter(|&&v| v > t).count() as f64 / n;
    (ao, sr(0.5), sr(0.75))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub ious: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
}

impl SequenceMetrics {
    pub fn from_predictions(name: &str, boxes: Vec<BBox>, scores: Vec<f64>, gt: &[BBox]) -> Self {
        let ious: Vec<f64> = boxes.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
        let centers: Vec<(f64, f64)> = boxes.iter().map(BBox::center).collect();
        let (precision, norm_precision) = precision_metrics(&centers, gt, PRECISION_PIXELS);
        let (ao, sr_050, sr_075) = ao_sr(&ious);
        Self {
            name: name.to_string(),
            auc: success_auc(&ious),
            precision,
            norm_precision,
            ao,
            sr_050,
            sr_075,
            ious,
            boxes,
            scores,
        }
    }
}

/// Metrics averaged per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceMetrics>,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
}

impl EvalReport {
    pub fn from_sequences(sequences: Vec<SequenceMetrics>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("evaluation needs at least one sequence".into()));
        }
        let n = sequences.len() as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            auc: mean(|s| s.auc),
            precision: mean(|s| s.precision),
            norm_precision: mean(|s| s.norm_precision),
            ao: mean(|s| s.ao),
            sr_050: mean(|s| s.sr_050),
            sr_075: mean(|s| s.sr_075),
            sequences,
        })
    }

    pub fn count(&self) -> usize {
        self.sequences.len()
    }

    /// Success curve averaged over sequences.
    pub fn success_curve(&self) -> Vec<(f64, f64)> {
        let curves: Vec<_> = self.sequences.iter().map(|s| success_curve(&s.ious)).collect();
        (0..SUCCESS_THRESHOLDS)
            .map(|k| {
                let tau = curves[0][k].0;
                (tau, curves.iter().map(|c| c[k].1).sum::<f64>() / curves.len() as f64)
            })
            .collect()
    }

    fn summary(&self) -> [(&'static str, f64); 6] {
        [
            ("auc", self.auc),
            ("precision", self.precision),
            ("norm_precision", self.norm_precision),
            ("ao", self.ao),
            ("sr_050", self.sr_050),
            ("sr_075", self.sr_075),
        ]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "sequence", "AUC", "P", "P_norm", "AO", "SR0.5", "SR0.75"
        );
        let mut row = |name: &str, m: [f64; 6]| {
            let _ = writeln!(
                s,
                "{:<24} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
                name, m[0], m[1], m[2], m[3], m[4], m[5]
            );
        };
        for q in &self.sequences {
            row(&q.name, [q.auc, q.precision, q.norm_precision, q.ao, q.sr_050, q.sr_075]);
        }
        row("mean", self.summary().map(|p| p.1));
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("sequences={}\n", self.count());
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::new();
        for (t, v) in self.success_curve() {
            let _ = writeln!(s, "{t:.2},{v:.6}");
        }
        s
    }

    /// Writes `report.txt`, `metrics.txt` and `success_curve.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("metrics.txt"), self.to_key_values())?;
        std::fs::write(dir.join("success_curve.csv"), self.curve_csv())?;
        Ok(())
    }
}

/// Tracks one sequence from its first annotation; frame 0 reports the
/// initial box with score 1.
pub fn track_sequence<T: SequenceTracker, S: FrameSource + ?Sized>(
    tracker: &mut T,
    seq: &S,
) -> Result<(Vec<BBox>, Vec<f64>)> {
    if seq.is_empty() {
        return Err(Error::Input(format!("sequence {} has no frames", seq.name())));
    }
    let init = seq.gt(0);
    tracker.initialize(&seq.frame(0)?, init)?;
    let mut boxes = vec![init];
    let mut scores = vec![1.0];
    for t in 1..seq.len() {
        let (b, s) = tracker.track(&seq.frame(t)?)?;
        boxes.push(b);
        scores.push(s);
    }
    Ok((boxes, scores))
}

/// One-pass evaluation without re-initialization. `make_tracker` builds a
/// fresh tracker per sequence.
pub fn run_one_pass_eval<T, S, F>(mut make_tracker: F, sequences: &[S]) -> Result<EvalReport>
where
    T: SequenceTracker,
    S: FrameSource,
    F: FnMut() -> T,
{
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut tracker = make_tracker();
        let (boxes, scores) = track_sequence(&mut tracker, seq)?;
        let gt: Vec<BBox> = (0..seq.len()).map(|t| seq.gt(t)).collect();
        out.push(SequenceMetrics::from_predictions(seq.name(), boxes, scores, &gt));
    }
    EvalReport::from_sequences(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_auc_cases() {
        assert!((success_auc(&[1.0; 5]) - 20.0 / 21.0).abs() < 1e-12);
        assert_eq!(success_auc(&[0.0; 3]), 0.0);
        assert!((success_auc(&[0.5]) - 10.0 / 21.0).abs() < 1e-12);
        let c = success_curve(&[0.3]);
        assert_eq!(c.len(), 21);
        assert_eq!(c[0].0, 0.0);
        assert_eq!(c[20].0, 1.0);
    }

    #[test]
    fn ao_sr_cases() {
        assert_eq!(ao_sr(&[1.0, 1.0]), (1.0, 1.0, 1.0));
        assert_eq!(ao_sr(&[1.0, 0.0]), (0.5, 0.5, 0.5));
        let (ao, a, b) = ao_sr(&[0.6, 0.6, 0.6]);
        assert!((ao - 0.6).abs() < 1e-15);
        assert_eq!((a, b), (1.0, 0.0));
    }

    #[test]
    fn precision_cases() {
        let gt = vec![BBox::new(10.0, 10.0, 30.0, 30.0); 2];
        let (p, np) = precision_metrics(&[(20.0, 20.0), (20.0, 20.0)], &gt, 20.0);
        assert_eq!((p, np), (1.0, 1.0));
        let (p, np) = precision_metrics(&[(500.0, 500.0), (-400.0, 20.0)], &gt, 20.0);
        assert_eq!((p, np), (0.0, 0.0));
        let (p, _) = precision_metrics(&[(40.0, 20.0)], &gt[..1], 20.0);
        assert_eq!(p, 1.0);
    }
}
