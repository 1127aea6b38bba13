//! Training losses, pixel metrics and threshold curves.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanetError};
use crate::tensor::{CustomOp, Shape, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Guard added to every IoU denominator so empty terms evaluate to 0.
pub const IOU_EPS: f64 = 1e-7;

fn check_pair(op: &'static str, tape: &Tape, p: Var, y: Var) -> Result<()> {
    let (sp, sy) = (tape.shape(p), tape.shape(y));
    if sp != sy {
        return Err(ScanetError::shape(op, format!("prediction {sp} vs target {sy}")));
    }
    if sp.numel() == 0 {
        return Err(ScanetError::shape(op, "empty prediction"));
    }
    Ok(())
}

struct Bce;

impl CustomOp for Bce {
    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        let (p, y) = (inputs[0], inputs[1]);
        let total: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        vec![total / p.len() as f64]
    }

    // The gradient is taken at the clamped probability and passed through,
    // so a saturated wrong prediction still gets pushed back.
    fn backward(&self, inputs: &[&[f64]], _: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (p, y) = (inputs[0], inputs[1]);
        let k = g[0] / p.len() as f64;
        let dp = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                k * ((1.0 - y) / (1.0 - p) - y / p)
            })
            .collect();
        vec![Some(dp), None]
    }
}

struct Iou;

impl CustomOp for Iou {
    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        let (p, y) = (inputs[0], inputs[1]);
        let total: f64 = p.iter().zip(y).map(|(&p, &y)| y * p / (y + p - y * p + IOU_EPS)).sum();
        vec![1.0 - total / p.len() as f64]
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (p, y) = (inputs[0], inputs[1]);
        let k = g[0] / p.len() as f64;
        let dp = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let den = y + p - y * p + IOU_EPS;
                -k * y * (y + IOU_EPS) / (den * den)
            })
            .collect();
        vec![Some(dp), None]
    }
}

/// Mean binary cross-entropy of probabilities `p` against targets `y`.
pub fn bce_loss(tape: &mut Tape, p: Var, y: Var) -> Result<Var> {
    check_pair("bce_loss", tape, p, y)?;
    tape.custom(&[p, y], Shape::scalar(), Box::new(Bce))
}

/// `1 - mean(y*p / (y + p - y*p + eps))`.
pub fn iou_loss(tape: &mut Tape, p: Var, y: Var) -> Result<Var> {
    check_pair("iou_loss", tape, p, y)?;
    tape.custom(&[p, y], Shape::scalar(), Box::new(Iou))
}

/// Per-stage weights of the deep-supervision loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: [f32; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: [1.0; 4] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(ScanetError::invalid(format!("loss weights must be finite and >= 0: {:?}", self.alpha)));
        }
        if self.alpha.iter().all(|&a| a == 0.0) {
            return Err(ScanetError::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// `sum_i alpha_i * (bce + iou)` over the stage predictions `s_1..s_4`, each
/// against the full-resolution mask `gt` resampled (nearest) to its size.
/// Stages with zero weight are not evaluated.
pub fn total_loss(tape: &mut Tape, preds: &[Var; 4], gt: &Tensor, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let last = tape.shape(preds[3]);
    if (last.h, last.w) != (gt.shape().h, gt.shape().w) {
        return Err(ScanetError::shape(
            "total_loss",
            format!("final prediction {last} does not match ground truth {}", gt.shape()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&p, &a) in preds.iter().zip(&weights.alpha) {
        if a == 0.0 {
            continue;
        }
        let ps = tape.shape(p);
        let y = tape.constant(gt.resize_nearest(ps.h, ps.w));
        let bce = bce_loss(tape, p, y)?;
        let iou = iou_loss(tape, p, y)?;
        let stage = tape.add(bce, iou)?;
        let stage = tape.scale(stage, a);
        total = Some(match total {
            Some(t) => tape.add(t, stage)?,
            None => stage,
        });
    }
    Ok(total.expect("validated weights have a positive entry"))
}

/// Pixel tallies with cloud as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Tallies `pred >= threshold` against `gt >= 0.5`.
pub fn confusion_from_masks(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(ScanetError::shape("confusion_from_masks", format!("{} vs {}", pred.shape(), gt.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        match (p as f64 >= threshold, y >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub error_rate: f64,
    pub miou_pos: f64,
    pub miou_neg: f64,
    pub miou: f64,
    /// Names of the ratios that were 0/0 and therefore set to 1.0.
    pub undefined: Vec<&'static str>,
}

/// Accuracy, precision, recall, F-score, error rate and mean IoU.
///
/// A 0/0 ratio (a class absent from both prediction and truth) counts as
/// 1.0 and is listed in `undefined`. When precision and recall are both 0
/// the F-score is 0.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(ScanetError::invalid("metrics need at least one pixel"));
    }
    let mut undefined = Vec::new();
    let mut ratio = |name: &'static str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name);
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    let recall = ratio("recall", c.tp, c.tp + c.fn_);
    let miou_pos = ratio("miou_pos", c.tp, c.tp + c.fp + c.fn_);
    let miou_neg = ratio("miou_neg", c.tn, c.tn + c.fp + c.fn_);
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let f_score = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f_score,
        // (fp + fn) / total, written so the two rates sum to exactly 1
        error_rate: 1.0 - accuracy,
        miou_pos,
        miou_neg,
        miou: (miou_pos + miou_neg) / 2.0,
        undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FPoint {
    pub threshold: f64,
    pub f_score: f64,
}

pub const DEFAULT_CURVE_POINTS: usize = 256;

/// Counts at thresholds `k / (n - 1)`, pooled over every pixel of every pair.
///
/// Each pixel is binned by the highest threshold it reaches, so the cost is
/// one pass over the pixels plus one pass over the thresholds.
fn pooled_counts(preds: &[Tensor], gts: &[Tensor], n_points: usize) -> Result<Vec<(f64, ConfusionCounts)>> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(ScanetError::invalid(format!(
            "curves need equal nonempty lists, got {} predictions and {} masks",
            preds.len(),
            gts.len()
        )));
    }
    if n_points < 2 {
        return Err(ScanetError::invalid("curves need at least 2 points"));
    }
    let last = n_points - 1;
    let threshold = |k: usize| k as f64 / last as f64;
    // pos[k] / neg[k]: pixels whose highest reached threshold index is k;
    // index n_points holds pixels below threshold 0 (only NaN or negatives)
    let mut pos = vec![0u64; n_points + 1];
    let mut neg = vec![0u64; n_points + 1];
    for (p, y) in preds.iter().zip(gts) {
        if p.shape() != y.shape() {
            return Err(ScanetError::shape("curve", format!("{} vs {}", p.shape(), y.shape())));
        }
        for (&pv, &yv) in p.data().iter().zip(y.data()) {
            let pv = pv as f64;
            let bin = if pv >= 0.0 {
                let mut k = ((pv * last as f64).floor() as usize).min(last);
                while k < last && threshold(k + 1) <= pv {
                    k += 1;
                }
                while k > 0 && threshold(k) > pv {
                    k -= 1;
                }
                k
            } else {
                n_points
            };
            if yv >= 0.5 {
                pos[bin] += 1;
            } else {
                neg[bin] += 1;
            }
        }
    }
    let total_pos: u64 = pos.iter().sum();
    let total_neg: u64 = neg.iter().sum();
    let mut out = vec![(0.0, ConfusionCounts::default()); n_points];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..n_points).rev() {
        tp += pos[k];
        fp += neg[k];
        let c = ConfusionCounts { tp, fp, fn_: total_pos - tp, tn: total_neg - fp };
        out[k] = (threshold(k), c);
    }
    Ok(out)
}

/// Micro-averaged precision/recall at `n_points` evenly spaced thresholds in `[0, 1]`.
pub fn pr_curve(preds: &[Tensor], gts: &[Tensor], n_points: usize) -> Result<Vec<PrPoint>> {
    pooled_counts(preds, gts, n_points)?
        .into_iter()
        .map(|(threshold, c)| {
            let m = metrics_from_counts(&c)?;
            Ok(PrPoint { threshold, precision: m.precision, recall: m.recall })
        })
        .collect()
}

/// Micro-averaged F-score at `n_points` evenly spaced thresholds in `[0, 1]`.
pub fn f_measure_curve(preds: &[Tensor], gts: &[Tensor], n_points: usize) -> Result<Vec<FPoint>> {
    pooled_counts(preds, gts, n_points)?
        .into_iter()
        .map(|(threshold, c)| Ok(FPoint { threshold, f_score: metrics_from_counts(&c)?.f_score }))
        .collect()
}

pub fn write_pr_csv(path: &Path, points: &[PrPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "precision", "recall"])?;
    for p in points {
        w.write_record([format!("{:.6}", p.threshold), format!("{:.6}", p.precision), format!("{:.6}", p.recall)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_f_csv(path: &Path, points: &[FPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "f_score"])?;
    for p in points {
        w.write_record([format!("{:.6}", p.threshold), format!("{:.6}", p.f_score)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes metrics as pretty JSON.
pub fn write_metrics_json(path: &Path, m: &Metrics, counts: &ConfusionCounts) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let doc = serde_json::json!({ "counts": counts, "metrics": m });
    writeln!(f, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
