//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

pub mod grads;

use ril_core::dataset::Point;

/// Largest number of above-threshold pairs over every one-to-one assignment.
pub fn exhaustive_tp(scores: &[Vec<f64>], gts: usize, threshold: f64) -> usize {
    fn go(scores: &[Vec<f64>], row: usize, used: &mut Vec<bool>, threshold: f64) -> usize {
        if row == scores.len() {
            return 0;
        }
        // Leave this prediction unmatched.
        let mut best = go(scores, row + 1, used, threshold);
        for g in 0..used.len() {
            if !used[g] {
                used[g] = true;
                let hit = (scores[row][g] > threshold) as usize;
                best = best.max(hit + go(scores, row + 1, used, threshold));
                used[g] = false;
            }
        }
        best
    }
    go(scores, 0, &mut vec![false; gts], threshold)
}

fn point_segment(px: f64, py: f64, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return (px - a.x).hypot(py - a.y);
    }
    let t = ((px - a.x) * dx + (py - a.y) * dy) / len2;
    if t <= 0.0 {
        (px - a.x).hypot(py - a.y)
    } else if t >= 1.0 {
        (px - b.x).hypot(py - b.y)
    } else {
        (dx * (py - a.y) - dy * (px - a.x)).abs() / len2.sqrt()
    }
}

fn covers(lane: &[Point], width: f64, x: f64, y: f64) -> bool {
    match lane {
        [] => false,
        [p] => (p.x - x).hypot(p.y - y) <= width / 2.0,
        _ => lane.windows(2).any(|s| point_segment(x, y, s[0], s[1]) <= width / 2.0),
    }
}

/// IoU by testing every pixel centre against both thick lanes.
pub fn brute_iou(a: &[Point], b: &[Point], width: f64, (h, w): (usize, usize)) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64, r as f64);
            let (ia, ib) = (covers(a, width, x, y), covers(b, width, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Direct solution of the discrete Poisson blend over `sel` for each
/// `(dest, source)` channel pair (row-major `h x w` planes), assembled from
/// the stencil with clamped image borders.
pub fn dense_poisson(channels: &[(Vec<f64>, Vec<f64>)], sel: &[bool], (h, w): (usize, usize)) -> Vec<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let mut idx = vec![None; h * w];
    let mut n = 0;
    for (p, &s) in sel.iter().enumerate() {
        if s {
            idx[p] = Some(n);
            n += 1;
        }
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut bs = vec![DVector::<f64>::zeros(n); channels.len()];
    for p in 0..h * w {
        let Some(i) = idx[p] else { continue };
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        a[(i, i)] = 4.0;
        for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (qy, qx) = (y + dy, x + dx);
            let inside = qy >= 0 && qx >= 0 && qy < h as isize && qx < w as isize;
            let q = (qy.clamp(0, h as isize - 1) * w as isize + qx.clamp(0, w as isize - 1)) as usize;
            let interior = if inside { idx[q] } else { None };
            if let Some(j) = interior {
                a[(i, j)] -= 1.0;
            }
            for ((dest, source), b) in channels.iter().zip(bs.iter_mut()) {
                b[i] += source[p] - source[q];
                if interior.is_none() {
                    b[i] += dest[q];
                }
            }
        }
    }
    let lu = a.lu();
    bs.iter()
        .map(|b| lu.solve(b).expect("nonsingular").as_slice().to_vec())
        .collect()
}
