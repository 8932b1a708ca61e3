//! Lane scenes: types, ingestion of CULane/TuSimple annotations, mask
//! rasterization and procedural scene synthesis.

mod culane;
mod raster;
mod synth;
mod tusimple;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use culane::{
    load_culane, parse_culane_lines, read_category, write_culane, write_culane_lines, CulaneOptions,
};
pub use raster::{distance_to_polyline, rasterize_lane, rasterize_lane_mask};
pub use synth::{generate_synthetic, SynthParams};
pub use tusimple::{load_tusimple, parse_tusimple_record, TusimpleRecord};

/// Maximum number of lane classes, CULane convention.
pub const K_MAX: usize = 4;

/// Ground-truth mask width used for training labels, in pixels.
pub const DEFAULT_MASK_WIDTH: f64 = 6.0;

/// Suffix appended to the id of a repainted (virtual) scene.
pub const VIRTUAL_SUFFIX: &str = "@virtual";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Ordered lane points; inside a [`LaneScene`] the y-coordinates strictly
/// increase.
pub type Polyline = Vec<Point>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Normal,
    Crowded,
    Dazzle,
    Shadow,
    NoLine,
    Arrow,
    Curve,
    Cross,
    Night,
    Synthetic,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Normal,
        Category::Crowded,
        Category::Dazzle,
        Category::Shadow,
        Category::NoLine,
        Category::Arrow,
        Category::Curve,
        Category::Cross,
        Category::Night,
        Category::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Normal => "normal",
            Category::Crowded => "crowded",
            Category::Dazzle => "dazzle",
            Category::Shadow => "shadow",
            Category::NoLine => "no_line",
            Category::Arrow => "arrow",
            Category::Curve => "curve",
            Category::Cross => "cross",
            Category::Night => "night",
            Category::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == t || (t == "crowd" && *c == Category::Crowded) || (t == "noline" && *c == Category::NoLine) || (t == "hlight" && *c == Category::Dazzle))
            .ok_or_else(|| Error::Invalid(format!("unknown scene category `{s}`")))
    }
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} bytes for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dims")
    }

    pub fn from_image(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().clone(),
        }
    }

    /// Bilinear resize to `(height, width)`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let out = image::imageops::resize(
            &self.to_image(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_image(&out)
    }
}

/// Per-pixel lane labels: 0 = background, k = lane k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LaneMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Highest label present.
    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Labels as class indices for the loss.
    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }
}

/// One sample: image, lanes, rasterized mask and scenario tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneScene {
    pub id: String,
    pub image: RgbImage,
    pub lanes: Vec<Polyline>,
    pub mask: LaneMask,
    pub category: Category,
}

impl LaneScene {
    /// Build a scene, normalising lanes (clipped to the frame, y strictly
    /// increasing, at most [`K_MAX`]) and rasterizing the mask at `mask_width`.
    pub fn new(
        id: impl Into<String>,
        image: RgbImage,
        lanes: Vec<Polyline>,
        category: Category,
        mask_width: f64,
    ) -> Self {
        let id = id.into();
        let dims = image.dims();
        let mut lanes: Vec<Polyline> = lanes
            .into_iter()
            .map(|l| normalize_polyline(&l, dims))
            .filter(|l| !l.is_empty())
            .collect();
        if lanes.len() > K_MAX {
            log::warn!(
                "scene {id}: {} lanes, keeping the first {K_MAX}",
                lanes.len()
            );
            lanes.truncate(K_MAX);
        }
        let mask = rasterize_lane_mask(&lanes, mask_width, dims);
        Self {
            id,
            image,
            lanes,
            mask,
            category,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn is_virtual(&self) -> bool {
        self.id.ends_with(VIRTUAL_SUFFIX)
    }

    /// Id without the virtual marker.
    pub fn base_id(&self) -> &str {
        self.id.strip_suffix(VIRTUAL_SUFFIX).unwrap_or(&self.id)
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        if self.mask.dims() != (h, w) {
            return Err(Error::Dimension(format!("scene {}: mask dims differ from image", self.id)));
        }
        if self.lanes.len() > K_MAX {
            return Err(Error::Invalid(format!("scene {}: more than {K_MAX} lanes", self.id)));
        }
        for (k, lane) in self.lanes.iter().enumerate() {
            for p in lane {
                if !(0.0..=(w - 1) as f64).contains(&p.x) || !(0.0..=(h - 1) as f64).contains(&p.y) {
                    return Err(Error::Invalid(format!(
                        "scene {}: lane {} point ({}, {}) out of frame",
                        self.id,
                        k + 1,
                        p.x,
                        p.y
                    )));
                }
            }
            if lane.windows(2).any(|s| s[1].y <= s[0].y) {
                return Err(Error::Invalid(format!(
                    "scene {}: lane {} y-coordinates not strictly increasing",
                    self.id,
                    k + 1
                )));
            }
        }
        if self.mask.max_label() as usize > self.lanes.len() {
            return Err(Error::Invalid(format!("scene {}: mask label without lane", self.id)));
        }
        Ok(())
    }
}

/// Clip to the frame and order by increasing y, dropping repeated rows.
///
/// A lane that leaves and re-enters the frame keeps its longest in-frame run.
pub fn normalize_polyline(lane: &[Point], (h, w): (usize, usize)) -> Polyline {
    let mut pts: Vec<Point> = lane.iter().copied().filter(|p| p.x.is_finite() && p.y.is_finite()).collect();
    if pts.len() >= 2 && pts[0].y > pts[pts.len() - 1].y {
        pts.reverse();
    }
    let (xmax, ymax) = ((w as f64 - 1.0).max(0.0), (h as f64 - 1.0).max(0.0));
    let inside = |p: &Point| p.x >= 0.0 && p.x <= xmax && p.y >= 0.0 && p.y <= ymax;

    let mut runs: Vec<Polyline> = Vec::new();
    let mut cur: Polyline = Vec::new();
    if pts.len() == 1
        && inside(&pts[0]) {
            cur.push(pts[0]);
        }
    for seg in pts.windows(2) {
        match clip_segment(seg[0], seg[1], xmax, ymax) {
            Some((a, b)) => {
                if let Some(last) = cur.last() {
                    if (last.x - a.x).abs() > 1e-9 || (last.y - a.y).abs() > 1e-9 {
                        runs.push(std::mem::take(&mut cur));
                        cur.push(a);
                    }
                } else {
                    cur.push(a);
                }
                cur.push(b);
            }
            None => {
                if !cur.is_empty() {
                    runs.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    let best = runs.into_iter().max_by_key(|r| r.len()).unwrap_or_default();
    let mut out: Polyline = Vec::with_capacity(best.len());
    for p in best {
        match out.last() {
            Some(last) if p.y <= last.y => {}
            _ => out.push(p),
        }
    }
    out
}

/// Liang-Barsky clip of segment `a-b` to `[0, xmax] x [0, ymax]`.
fn clip_segment(a: Point, b: Point, xmax: f64, ymax: f64) -> Option<(Point, Point)> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [(-dx, a.x), (dx, xmax - a.x), (-dy, a.y), (dy, ymax - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    let at = |t: f64| {
        if t == 0.0 {
            a
        } else if t == 1.0 {
            b
        } else {
            Point::new(
                (a.x + t * dx).clamp(0.0, xmax),
                (a.y + t * dy).clamp(0.0, ymax),
            )
        }
    };
    Some((at(t0), at(t1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_reverses_bottom_up_lanes() {
        let lane = vec![Point::new(5.0, 9.0), Point::new(6.0, 5.0), Point::new(7.0, 1.0)];
        let n = normalize_polyline(&lane, (10, 10));
        assert_eq!(n, vec![Point::new(7.0, 1.0), Point::new(6.0, 5.0), Point::new(5.0, 9.0)]);
    }

    #[test]
    fn normalize_clips_to_frame() {
        let lane = vec![Point::new(-10.0, 0.0), Point::new(10.0, 20.0)];
        let n = normalize_polyline(&lane, (30, 30));
        assert_eq!(n.len(), 2);
        assert!((n[0].x - 0.0).abs() < 1e-12 && (n[0].y - 10.0).abs() < 1e-12);
        assert_eq!(n[1], Point::new(10.0, 20.0));
    }

    #[test]
    fn normalize_drops_fully_outside_lane() {
        let lane = vec![Point::new(-10.0, 0.0), Point::new(-5.0, 20.0)];
        assert!(normalize_polyline(&lane, (30, 30)).is_empty());
    }

    #[test]
    fn scene_keeps_at_most_k_max_lanes() {
        let lanes: Vec<Polyline> = (0..6)
            .map(|i| vec![Point::new(2.0 + 5.0 * i as f64, 0.0), Point::new(2.0 + 5.0 * i as f64, 9.0)])
            .collect();
        let s = LaneScene::new("a", RgbImage::new(10, 40), lanes, Category::Normal, 2.0);
        assert_eq!(s.lanes.len(), K_MAX);
        assert_eq!(s.mask.max_label() as usize, K_MAX);
        s.validate().unwrap();
    }

    #[test]
    fn category_tokens_parse() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
        }
        assert_eq!("crowd".parse::<Category>().unwrap(), Category::Crowded);
        assert!("bogus".parse::<Category>().is_err());
    }

    #[test]
    fn virtual_id_round_trip() {
        let mut s = LaneScene::new("x/1", RgbImage::new(4, 4), vec![], Category::Normal, 2.0);
        assert!(!s.is_virtual());
        s.id.push_str(VIRTUAL_SUFFIX);
        assert!(s.is_virtual());
        assert_eq!(s.base_id(), "x/1");
    }
}
