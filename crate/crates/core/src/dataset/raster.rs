use super::{LaneMask, Point};

#[inline]
fn seg_dist_sq(px: f64, py: f64, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.x + t * dx - px, a.y + t * dy - py);
    cx * cx + cy * cy
}

/// Euclidean distance from `(x, y)` to the nearest segment of `lane`.
pub fn distance_to_polyline(lane: &[Point], x: f64, y: f64) -> f64 {
    match lane {
        [] => f64::INFINITY,
        [p] => ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt(),
        _ => lane
            .windows(2)
            .map(|s| seg_dist_sq(x, y, s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
            .sqrt(),
    }
}

/// Visit every pixel whose centre `(col, row)` is within `width / 2` of the
/// lane.
fn for_each_covered(lane: &[Point], width: f64, (h, w): (usize, usize), mut visit: impl FnMut(usize)) {
    if lane.is_empty() || h == 0 || w == 0 {
        return;
    }
    let r = width / 2.0;
    let r2 = r * r;
    let single = [lane[0], lane[0]];
    let segs: &[Point] = if lane.len() == 1 { &single } else { lane };
    for s in segs.windows(2) {
        let (a, b) = (s[0], s[1]);
        let x0 = (a.x.min(b.x) - r).ceil().max(0.0);
        let x1 = (a.x.max(b.x) + r).floor().min(w as f64 - 1.0);
        let y0 = (a.y.min(b.y) - r).ceil().max(0.0);
        let y1 = (a.y.max(b.y) + r).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for row in y0 as usize..=y1 as usize {
            for col in x0 as usize..=x1 as usize {
                if seg_dist_sq(col as f64, row as f64, a, b) <= r2 {
                    visit(row * w + col);
                }
            }
        }
    }
}

/// Label map of `lanes` drawn `width` pixels wide. Pixel `(r, c)` gets lane
/// index `k + 1` when its centre lies within `width / 2` of lane `k`; where
/// lanes overlap the lower index wins.
pub fn rasterize_lane_mask(lanes: &[Vec<Point>], width: f64, dims: (usize, usize)) -> LaneMask {
    assert!(lanes.len() < 256, "at most 255 lanes per mask");
    let mut mask = LaneMask::zeros(dims.0, dims.1);
    let data = mask.data_mut();
    for (k, lane) in lanes.iter().enumerate() {
        let label = (k + 1) as u8;
        for_each_covered(lane, width, dims, |i| {
            if data[i] == 0 {
                data[i] = label;
            }
        });
    }
    mask
}

/// Binary coverage of a single lane, row-major.
pub fn rasterize_lane(lane: &[Point], width: f64, dims: (usize, usize)) -> Vec<bool> {
    let mut out = vec![false; dims.0 * dims.1];
    for_each_covered(lane, width, dims, |i| out[i] = true);
    out
}
