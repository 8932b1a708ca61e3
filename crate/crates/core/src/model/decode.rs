use serde::{Deserialize, Serialize};

use crate::dataset::{Point, Polyline};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// A row contributes a point when its peak lane probability exceeds this.
    pub exist_threshold: f64,
    /// Sample every `row_step`-th row, starting from the bottom.
    pub row_step: usize,
    /// Lanes with fewer points are discarded (at least 2).
    pub min_points: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            exist_threshold: 0.3,
            row_step: 2,
            min_points: 2,
        }
    }
}

/// Row-wise decoding of item `n` of a probability map `[N, K+1, H, W]`.
///
/// For each lane class `k >= 1` and each sampled row, the column of maximal
/// probability is emitted when that maximum exceeds the threshold. Lanes come
/// out in class order with increasing y.
pub fn decode_lanes<T: Scalar>(probs: &Tensor<T>, n: usize, cfg: &DecodeConfig) -> Vec<Polyline> {
    let [_, k, h, w] = probs.shape();
    let plane = h * w;
    let item = probs.item(n);
    let step = cfg.row_step.max(1);
    let thr = T::of(cfg.exist_threshold);
    let mut lanes = Vec::new();
    for class in 1..k {
        let map = &item[class * plane..(class + 1) * plane];
        let mut pts = Vec::new();
        let mut rows: Vec<usize> = (0..h).rev().step_by(step).collect();
        rows.reverse();
        for y in rows {
            let row = &map[y * w..(y + 1) * w];
            let (mut best, mut arg) = (row[0], 0);
            for (x, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg = x;
                }
            }
            if best > thr {
                pts.push(Point::new(arg as f64, y as f64));
            }
        }
        if pts.len() >= cfg.min_points.max(2) {
            lanes.push(pts);
        }
    }
    lanes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{rasterize_lane_mask, LaneMask};
    use crate::model::NUM_CLASSES;

    fn one_hot(mask: &LaneMask) -> Tensor<f64> {
        let (h, w) = mask.dims();
        let mut t = Tensor::zeros([1, NUM_CLASSES, h, w]);
        for (i, &l) in mask.data().iter().enumerate() {
            t.data_mut()[l as usize * h * w + i] = 1.0;
        }
        t
    }

    #[test]
    fn background_decodes_to_nothing() {
        let mut t = Tensor::zeros([1, NUM_CLASSES, 8, 8]);
        for v in &mut t.data_mut()[..64] {
            *v = 1.0;
        }
        assert!(decode_lanes(&t, 0, &DecodeConfig::default()).is_empty());
    }

    #[test]
    fn vertical_lane_recovered_within_one_pixel() {
        let gt = vec![Point::new(10.0, 0.0), Point::new(10.0, 31.0)];
        let m = rasterize_lane_mask(&[gt], 3.0, (32, 24));
        let lanes = decode_lanes(&one_hot(&m), 0, &DecodeConfig::default());
        assert_eq!(lanes.len(), 1);
        assert!(lanes[0].len() >= 15);
        for p in &lanes[0] {
            assert!((p.x - 10.0).abs() <= 1.0, "{p:?}");
        }
        assert!(lanes[0].windows(2).all(|s| s[1].y > s[0].y));
    }

    #[test]
    fn disjoint_lanes_come_out_in_class_order() {
        let a = vec![Point::new(3.0, 0.0), Point::new(3.0, 15.0)];
        let b = vec![Point::new(20.0, 0.0), Point::new(20.0, 15.0)];
        let m = rasterize_lane_mask(&[a, b], 1.0, (16, 24));
        let lanes = decode_lanes(&one_hot(&m), 0, &DecodeConfig::default());
        assert_eq!(lanes.len(), 2);
        assert!(lanes[0].iter().all(|p| p.x == 3.0));
        assert!(lanes[1].iter().all(|p| p.x == 20.0));
    }
}
