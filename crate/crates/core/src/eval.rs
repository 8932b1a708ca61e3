//! Lane detection metrics: IoU-matched F1 and point-accuracy scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{rasterize_lane, Category, LaneScene, Point, Polyline, RgbImage};
use crate::model::{decode_lanes, images_to_tensor, DecodeConfig, LaneNet};
use crate::nn::softmax_channels;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Culane,
    Tusimple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub iou_threshold: f64,
    /// Rasterised lane width for IoU matching, in pixels of the native image.
    pub width: f64,
    /// Lateral tolerance for a correct point in point-accuracy mode.
    pub px_threshold: f64,
    /// Per-lane point accuracy above which a lane counts as detected.
    pub lane_accuracy: f64,
    /// Row spacing of the sample rows used in point-accuracy mode.
    pub sample_step: usize,
    pub decode: DecodeConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Culane,
            iou_threshold: 0.5,
            width: 30.0,
            px_threshold: 20.0,
            lane_accuracy: 0.85,
            sample_step: 10,
            decode: DecodeConfig::default(),
            batch_size: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(Error::config("iou_threshold", "must lie in [0, 1)"));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config("width", "must be positive"));
        }
        if !(self.px_threshold >= 0.0 && self.px_threshold.is_finite()) {
            return Err(Error::config("px_threshold", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.lane_accuracy) {
            return Err(Error::config("lane_accuracy", "must lie in [0, 1]"));
        }
        if self.sample_step == 0 {
            return Err(Error::config("sample_step", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.decode.exist_threshold) {
            return Err(Error::config("decode.exist_threshold", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// IoU of two lanes drawn `width` pixels wide on a `dims` canvas.
pub fn lane_iou(pred: &[Point], gt: &[Point], width: f64, dims: (usize, usize)) -> f64 {
    let a = rasterize_lane(pred, width, dims);
    let b = rasterize_lane(gt, width, dims);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(&b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Matching {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(pred, gt)` pairs above the threshold.
    pub pairs: Vec<(usize, usize)>,
}

/// Optimal one-to-one assignment over a `preds x gts` score matrix.
///
/// Maximises the number of pairs scoring above `threshold` first and the total
/// score second, so the true-positive count equals that of exhaustive search.
pub fn assign(scores: &[Vec<f64>], gts: usize, threshold: f64) -> Matching {
    let np = scores.len();
    let ng = gts;
    assert!(scores.iter().all(|r| r.len() == ng), "one score per ground-truth lane");
    let mut m = Matching {
        fp: np,
        fn_: ng,
        ..Matching::default()
    };
    if np == 0 || ng == 0 {
        return m;
    }
    // integer weights: a hit outweighs any sum of fractional scores
    let hit = 1_000_000_000_000i64;
    let weight = |s: f64| (s > threshold) as i64 * hit + (s.clamp(0.0, 1.0) * 1e6).round() as i64;
    let transpose = np > ng;
    let (rows, cols) = if transpose { (ng, np) } else { (np, ng) };
    let mut w = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (p, g) = if transpose { (c, r) } else { (r, c) };
            w.push(weight(scores[p][g]));
        }
    }
    let mat = Matrix::from_vec(rows, cols, w).expect("rows * cols weights");
    let (_, cols_of) = kuhn_munkres(&mat);
    for (r, &c) in cols_of.iter().enumerate() {
        let (p, g) = if transpose { (c, r) } else { (r, c) };
        if scores[p][g] > threshold {
            m.pairs.push((p, g));
        }
    }
    m.pairs.sort_unstable();
    m.tp = m.pairs.len();
    m.fp = np - m.tp;
    m.fn_ = ng - m.tp;
    m
}

/// Match predicted to ground-truth lanes on IoU.
pub fn match_lanes(
    preds: &[Polyline],
    gts: &[Polyline],
    iou_threshold: f64,
    width: f64,
    dims: (usize, usize),
) -> Matching {
    let pm: Vec<Vec<bool>> = preds.iter().map(|l| rasterize_lane(l, width, dims)).collect();
    let gm: Vec<Vec<bool>> = gts.iter().map(|l| rasterize_lane(l, width, dims)).collect();
    let scores: Vec<Vec<f64>> = pm
        .iter()
        .map(|a| {
            gm.iter()
                .map(|b| {
                    let (mut i, mut u) = (0usize, 0usize);
                    for (&x, &y) in a.iter().zip(b) {
                        i += (x && y) as usize;
                        u += (x || y) as usize;
                    }
                    if u == 0 {
                        0.0
                    } else {
                        i as f64 / u as f64
                    }
                })
                .collect()
        })
        .collect();
    assign(&scores, gts.len(), iou_threshold)
}

/// Counts with derived precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        *self = Self::new(self.tp + tp, self.fp + fp, self.fn_ + fn_);
    }
}

/// F1 summary of raw counts.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> Counts {
    Counts::new(tp, fp, fn_)
}

/// Point-accuracy totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointScore {
    pub correct: usize,
    pub total: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub preds: usize,
    pub gts: usize,
}

impl PointScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn fp_rate(&self) -> f64 {
        if self.preds == 0 {
            0.0
        } else {
            self.fp as f64 / self.preds as f64
        }
    }

    pub fn fn_rate(&self) -> f64 {
        if self.gts == 0 {
            0.0
        } else {
            self.fn_ as f64 / self.gts as f64
        }
    }

    fn merge(&mut self, o: &PointScore) {
        self.correct += o.correct;
        self.total += o.total;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.preds += o.preds;
        self.gts += o.gts;
    }
}

/// Lane `x` at each sample row by linear interpolation; `None` outside the
/// lane's vertical extent.
pub fn sample_lane(lane: &[Point], h_samples: &[f64]) -> Vec<Option<f64>> {
    h_samples
        .iter()
        .map(|&y| {
            if let [p] = lane {
                return (p.y == y).then_some(p.x);
            }
            lane.windows(2).find_map(|s| {
                let (a, b) = (s[0], s[1]);
                let (lo, hi) = if a.y <= b.y { (a.y, b.y) } else { (b.y, a.y) };
                if y < lo || y > hi {
                    return None;
                }
                if a.y == b.y {
                    return Some(a.x);
                }
                Some(a.x + (b.x - a.x) * (y - a.y) / (b.y - a.y))
            })
        })
        .collect()
}

/// Point-accuracy scoring of one image. Lanes are sampled at `h_samples`;
/// a ground-truth point is correct when the matched prediction has a point
/// within `px_threshold` on the same row.
pub fn tusimple_accuracy(
    preds: &[Polyline],
    gts: &[Polyline],
    h_samples: &[f64],
    px_threshold: f64,
    lane_accuracy: f64,
) -> Result<PointScore> {
    if h_samples.is_empty() {
        return Err(Error::Invalid("point-accuracy scoring needs h_samples".into()));
    }
    let ps: Vec<Vec<Option<f64>>> = preds.iter().map(|l| sample_lane(l, h_samples)).collect();
    let gs: Vec<Vec<Option<f64>>> = gts.iter().map(|l| sample_lane(l, h_samples)).collect();
    let totals: Vec<usize> = gs.iter().map(|g| g.iter().flatten().count()).collect();
    let hits = |p: &[Option<f64>], g: &[Option<f64>]| {
        p.iter()
            .zip(g)
            .filter(|(a, b)| matches!((a, b), (Some(x), Some(y)) if (x - y).abs() <= px_threshold))
            .count()
    };
    let acc: Vec<Vec<f64>> = ps
        .iter()
        .map(|p| {
            gs.iter()
                .zip(&totals)
                .map(|(g, &t)| if t == 0 { 0.0 } else { hits(p, g) as f64 / t as f64 })
                .collect()
        })
        .collect();
    // pair every lane it can, then score each pair on its own accuracy
    let m = assign(&acc, gts.len(), -1.0);
    let mut s = PointScore {
        total: totals.iter().sum(),
        preds: preds.len(),
        gts: gts.len(),
        ..PointScore::default()
    };
    for &(p, g) in &m.pairs {
        s.correct += hits(&ps[p], &gs[g]);
        if acc[p][g] > lane_accuracy {
            s.tp += 1;
        }
    }
    s.fp = s.preds - s.tp;
    s.fn_ = s.gts - s.tp;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_category: BTreeMap<String, Counts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tusimple: Option<PointReport>,
    pub images: usize,
}

impl EvalReport {
    pub fn counts(&self) -> Counts {
        Counts::new(self.tp, self.fp, self.fn_)
    }

    /// Per-category table. The cross category has no lanes to find, so only
    /// its false positives are shown.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>7} {:>6} {:>6} {:>6} {:>7}", "category", "F1", "TP", "FP", "FN", "images");
        let mut seen: Vec<(&str, &Counts)> = Vec::new();
        for c in Category::ALL {
            if let Some(v) = self.per_category.get(c.as_str()) {
                seen.push((c.as_str(), v));
            }
        }
        for (k, v) in &self.per_category {
            if !seen.iter().any(|(n, _)| n == k) {
                seen.push((k, v));
            }
        }
        for (name, c) in seen {
            if name == Category::Cross.as_str() {
                let _ = writeln!(s, "{:<12} {:>7} {:>6} {:>6} {:>6}", name, "-", "-", c.fp, "-");
            } else {
                let _ = writeln!(
                    s,
                    "{:<12} {:>7.4} {:>6} {:>6} {:>6}",
                    name, c.f1, c.tp, c.fp, c.fn_
                );
            }
        }
        let _ = writeln!(
            s,
            "{:<12} {:>7.4} {:>6} {:>6} {:>6} {:>7}",
            "total", self.f1, self.tp, self.fp, self.fn_, self.images
        );
        if let Some(t) = &self.tusimple {
            let _ = writeln!(
                s,
                "accuracy {:.4}  fp_rate {:.4}  fn_rate {:.4}",
                t.accuracy, t.fp_rate, t.fn_rate
            );
        }
        s
    }
}

/// Sample rows from the bottom of a `height`-row image every `step` rows.
pub fn sample_rows(height: usize, step: usize) -> Vec<f64> {
    let mut rows: Vec<f64> = (0..height).rev().step_by(step.max(1)).map(|y| y as f64).collect();
    rows.reverse();
    rows
}

/// Score per-image predictions against `scenes` (same order).
pub fn evaluate_predictions(preds: &[Vec<Polyline>], scenes: &[LaneScene], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != scenes.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} scenes",
            preds.len(),
            scenes.len()
        )));
    }
    let mut total = Counts::default();
    let mut per_category: BTreeMap<String, Counts> = BTreeMap::new();
    let mut points = PointScore::default();
    for (p, scene) in preds.iter().zip(scenes) {
        let (tp, fp, fn_) = match cfg.mode {
            EvalMode::Culane => {
                let m = match_lanes(p, &scene.lanes, cfg.iou_threshold, cfg.width, scene.dims());
                (m.tp, m.fp, m.fn_)
            }
            EvalMode::Tusimple => {
                let rows = sample_rows(scene.dims().0, cfg.sample_step);
                let s = tusimple_accuracy(p, &scene.lanes, &rows, cfg.px_threshold, cfg.lane_accuracy)?;
                points.merge(&s);
                (s.tp, s.fp, s.fn_)
            }
        };
        total.add(tp, fp, fn_);
        per_category
            .entry(scene.category.as_str().to_string())
            .or_default()
            .add(tp, fp, fn_);
    }
    Ok(EvalReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision,
        recall: total.recall,
        f1: total.f1,
        per_category,
        tusimple: (cfg.mode == EvalMode::Tusimple).then(|| PointReport {
            accuracy: points.accuracy(),
            fp_rate: points.fp_rate(),
            fn_rate: points.fn_rate(),
        }),
        images: scenes.len(),
    })
}

/// Decode lanes for each scene at model resolution, rescaled to native.
pub fn predict_lanes<T: Scalar>(net: &LaneNet<T>, scenes: &[LaneScene], cfg: &EvalConfig) -> Result<Vec<Vec<Polyline>>> {
    let (mh, mw) = net.spec().input_dims;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(cfg.batch_size.max(1)) {
        let resized: Vec<RgbImage> = chunk
            .iter()
            .map(|s| {
                if s.dims() == (mh, mw) {
                    s.image.clone()
                } else {
                    s.image.resized(mh, mw)
                }
            })
            .collect();
        let refs: Vec<&RgbImage> = resized.iter().collect();
        let x: Tensor<T> = images_to_tensor(&refs)?;
        let logits = net.predict(&x)?;
        let probs = Tensor::from_vec(logits.shape(), softmax_channels(&logits));
        for (i, s) in chunk.iter().enumerate() {
            let (h, w) = s.dims();
            let (sy, sx) = (h as f64 / mh as f64, w as f64 / mw as f64);
            let lanes = decode_lanes(&probs, i, &cfg.decode)
                .into_iter()
                .map(|l| {
                    l.into_iter()
                        .map(|p| Point::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5))
                        .collect()
                })
                .collect();
            out.push(lanes);
        }
    }
    Ok(out)
}

/// Run `net` over `scenes` and score the decoded lanes.
pub fn evaluate_split<T: Scalar>(net: &LaneNet<T>, scenes: &[LaneScene], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let preds = predict_lanes(net, scenes, cfg)?;
    evaluate_predictions(&preds, scenes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vline(x: f64, h: f64) -> Polyline {
        vec![Point::new(x, 0.0), Point::new(x, h - 1.0)]
    }

    #[test]
    fn iou_examples() {
        let dims = (100, 200);
        assert_eq!(lane_iou(&vline(50.0, 100.0), &vline(50.0, 100.0), 30.0, dims), 1.0);
        assert_eq!(lane_iou(&vline(20.0, 100.0), &vline(150.0, 100.0), 30.0, dims), 0.0);
        let iou = lane_iou(&vline(60.0, 100.0), &vline(75.0, 100.0), 30.0, dims);
        assert!((iou - 1.0 / 3.0).abs() < 0.02, "{iou}");
    }

    #[test]
    fn assignment_examples() {
        let m = assign(&[vec![0.6]], 1, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = assign(&[vec![0.4]], 1, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        let m = assign(&[], 0, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 0));
        let m = match_lanes(&[], &[vline(3.0, 10.0), vline(8.0, 10.0)], 0.5, 3.0, (10, 12));
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
    }

    #[test]
    fn greedy_trap_is_avoided() {
        // greedy takes (0,0) at 0.9 and leaves pred 1 without a hit
        let m = assign(&[vec![0.9, 0.8], vec![0.7, 0.1]], 2, 0.5);
        assert_eq!(m.tp, 2);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        let m = assign(&[vec![0.9], vec![0.8], vec![0.7]], 1, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 2, 0));
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn f1_examples() {
        let c = f1(90, 10, 30);
        assert!((c.precision - 0.9).abs() < 1e-12);
        assert!((c.recall - 0.75).abs() < 1e-12);
        assert!((c.f1 - 0.818_181_818_181_818_2).abs() < 1e-9);
        assert_eq!(f1(0, 0, 0).f1, 0.0);
        assert!((f1(4, 1, 1).f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn point_accuracy_examples() {
        let rows: Vec<f64> = (0..10).map(|i| i as f64 * 10.0).collect();
        let gt = vec![Point::new(100.0, 0.0), Point::new(100.0, 90.0)];
        let s = tusimple_accuracy(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &rows, 20.0, 0.85).unwrap();
        assert_eq!((s.accuracy(), s.fp_rate(), s.fn_rate()), (1.0, 0.0, 0.0));

        // half the rows 5 px off, half 50 px off
        let pred: Polyline = rows
            .iter()
            .map(|&y| Point::new(if y < 50.0 { 105.0 } else { 150.0 }, y))
            .collect();
        let s = tusimple_accuracy(&[pred], std::slice::from_ref(&gt), &rows, 20.0, 0.85).unwrap();
        assert!((s.accuracy() - 0.5).abs() < 1e-12);
        assert_eq!((s.tp, s.fp, s.fn_), (0, 1, 1));

        let s = tusimple_accuracy(&[], std::slice::from_ref(&gt), &rows, 20.0, 0.85).unwrap();
        assert_eq!((s.accuracy(), s.fn_rate()), (0.0, 1.0));
        assert!(tusimple_accuracy(&[], &[gt], &[], 20.0, 0.85).is_err());
    }

    #[test]
    fn sampling_interpolates_and_skips_outside() {
        let lane = vec![Point::new(0.0, 10.0), Point::new(10.0, 20.0)];
        assert_eq!(sample_lane(&lane, &[5.0, 10.0, 15.0, 20.0, 25.0]), vec![None, Some(0.0), Some(5.0), Some(10.0), None]);
        assert_eq!(sample_rows(10, 4), vec![1.0, 5.0, 9.0]);
    }
}
