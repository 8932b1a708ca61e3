//! Procedural road scenes with known lane geometry.
//!
//! Each scene is a perspective road with up to [`K_MAX`] painted lanes,
//! rendered and then degraded by a scenario: parked or moving vehicles,
//! cast shadows, night-time darkening, glare, or missing paint. Degradations
//! touch only the image; lanes and mask always follow the true geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Category, LaneScene, Point, Polyline, RgbImage, DEFAULT_MASK_WIDTH, K_MAX};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub count: usize,
    /// `(height, width)`.
    pub image_dims: (usize, usize),
    /// Inclusive `(min, max)` lanes per scene.
    pub lane_count_range: (usize, usize),
    pub occlusion_density: f64,
    pub shadow_strength: f64,
    pub dash_probability: f64,
    pub mark_contrast: f64,
    /// Width of the rasterized label mask.
    pub mask_width: f64,
    /// Scene ids are `<id_prefix><index:05>`.
    pub id_prefix: String,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 64,
            image_dims: (64, 128),
            lane_count_range: (2, 4),
            occlusion_density: 0.5,
            shadow_strength: 0.5,
            dash_probability: 0.5,
            mark_contrast: 0.6,
            mask_width: DEFAULT_MASK_WIDTH,
            id_prefix: "synth/".into(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("occlusion_density", self.occlusion_density),
            ("shadow_strength", self.shadow_strength),
            ("dash_probability", self.dash_probability),
            ("mark_contrast", self.mark_contrast),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} is outside [0, 1]")));
            }
        }
        let (h, w) = self.image_dims;
        if h < 32 || w < 32 {
            return Err(Error::config("image_dims", format!("{h}x{w} is smaller than 32x32")));
        }
        let (lo, hi) = self.lane_count_range;
        if lo > hi || hi > K_MAX {
            return Err(Error::config(
                "lane_count_range",
                format!("({lo}, {hi}) must satisfy min <= max <= {K_MAX}"),
            ));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.mask_width >= 1.0) {
            return Err(Error::config("mask_width", "must be at least 1 pixel"));
        }
        Ok(())
    }
}

/// Deterministic scene set for `params`; scene `i` depends only on
/// `(seed, i)` and the degradation parameters.
pub fn generate_synthetic(params: &SynthParams) -> Result<Vec<LaneScene>> {
    params.validate()?;
    Ok((0..params.count).map(|i| generate_one(params, i)).collect())
}

fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 of the pair, so neighbouring indices get unrelated streams
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SCENARIOS: [Category; 7] = [
    Category::Normal,
    Category::Crowded,
    Category::Shadow,
    Category::Night,
    Category::Dazzle,
    Category::Curve,
    Category::NoLine,
];

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn at(&mut self, y: usize, x: usize) -> &mut [f64; 3] {
        &mut self.px[y * self.w + x]
    }

    fn blend(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64) {
        let p = self.at(y, x);
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn scale(&mut self, y: usize, x: usize, f: f64) {
        let p = self.at(y, x);
        for v in p.iter_mut() {
            *v *= f;
        }
    }

    fn into_image(self, noise: f64, rng: &mut ChaCha8Rng) -> RgbImage {
        let normal = Normal::new(0.0, noise.max(1e-9)).expect("finite sigma");
        let mut data = Vec::with_capacity(self.h * self.w * 3);
        for p in &self.px {
            for &v in p {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                data.push((v + n).round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage::from_raw(self.h, self.w, data).expect("canvas dims")
    }
}

struct Road {
    horizon: f64,
    bottom: f64,
    vanish_x: f64,
    bend: f64,
    bottoms: Vec<f64>,
    spacing: f64,
}

impl Road {
    /// Perspective depth coordinate: 0 at the horizon, 1 at the bottom row.
    fn t(&self, y: f64) -> f64 {
        ((y - self.horizon) / (self.bottom - self.horizon)).clamp(0.0, 1.0)
    }

    fn lane_x(&self, lane: usize, y: f64) -> f64 {
        let t = self.t(y);
        self.vanish_x + (self.bottoms[lane] - self.vanish_x) * t + self.bend * t * (1.0 - t)
    }

    /// x of a virtual lane at fractional slot `s` (slot 0 = first lane).
    fn slot_x(&self, s: f64, y: f64) -> f64 {
        let first = self.bottoms[0];
        let xb = first + s * self.spacing;
        let t = self.t(y);
        self.vanish_x + (xb - self.vanish_x) * t + self.bend * t * (1.0 - t)
    }
}

fn generate_one(params: &SynthParams, index: usize) -> LaneScene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(params.seed, index));
    let (h, w) = params.image_dims;
    let (hf, wf) = (h as f64, w as f64);
    let category = SCENARIOS[rng.random_range(0..SCENARIOS.len())];

    let (lo, hi) = params.lane_count_range;
    let n_lanes = rng.random_range(lo..=hi);
    let spacing = wf * rng.random_range(0.24..0.32);
    let offset = rng.random_range(-0.35..0.35) * spacing;
    let bend = if category == Category::Curve {
        let b = wf * rng.random_range(0.25..0.4);
        if rng.random_bool(0.5) {
            b
        } else {
            -b
        }
    } else {
        wf * rng.random_range(-0.1..0.1)
    };
    let road = Road {
        horizon: hf * rng.random_range(0.3..0.4),
        bottom: hf - 1.0,
        vanish_x: wf * (0.5 + rng.random_range(-0.08..0.08)),
        bend,
        bottoms: (0..n_lanes)
            .map(|i| wf / 2.0 + offset + (i as f64 - (n_lanes as f64 - 1.0) / 2.0) * spacing)
            .collect(),
        spacing,
    };

    let mut canvas = Canvas {
        h,
        w,
        px: vec![[0.0; 3]; h * w],
    };
    paint_background(&mut canvas, &road, n_lanes, &mut rng);

    // lane geometry, shared by paint and labels
    let y_top = road.horizon + 0.08 * (road.bottom - road.horizon);
    let step = (hf / 16.0).max(2.0);
    let mut lanes: Vec<Polyline> = Vec::with_capacity(n_lanes);
    for k in 0..n_lanes {
        let mut pts = Vec::new();
        let mut y = y_top.ceil();
        while y < road.bottom {
            pts.push(Point::new(road.lane_x(k, y), y));
            y += step;
        }
        pts.push(Point::new(road.lane_x(k, road.bottom), road.bottom));
        lanes.push(pts);
    }

    let paint_scale = if category == Category::NoLine { 0.12 } else { 1.0 };
    for k in 0..n_lanes {
        let strength = params.mark_contrast * rng.random_range(0.55..1.0) * paint_scale;
        let dashed = rng.random_bool(params.dash_probability);
        let phase: f64 = rng.random();
        let color = if rng.random_bool(0.25) {
            [235.0, 205.0, 90.0]
        } else {
            [235.0, 235.0, 230.0]
        };
        paint_lane(&mut canvas, &road, k, y_top, strength, dashed, phase, color);
    }

    let vehicles = match category {
        Category::Crowded => (params.occlusion_density * rng.random_range(3.0..7.0)).round() as usize,
        _ => (params.occlusion_density * rng.random_range(0.0..1.6)).floor() as usize,
    };
    draw_vehicles(&mut canvas, &road, n_lanes, vehicles, &mut rng);

    let shadow = match category {
        Category::Shadow => params.shadow_strength,
        _ if rng.random_bool(0.25) => 0.5 * params.shadow_strength,
        _ => 0.0,
    };
    if shadow > 0.0 {
        cast_shadows(&mut canvas, &road, shadow, &mut rng);
    }
    match category {
        Category::Night => {
            let f = rng.random_range(0.3..0.45);
            for y in 0..h {
                for x in 0..w {
                    canvas.scale(y, x, f);
                }
            }
        }
        Category::Dazzle => {
            let cx = road.vanish_x + rng.random_range(-0.15..0.15) * wf;
            let cy = road.horizon + rng.random_range(0.0..0.25) * (hf - road.horizon);
            let sigma = rng.random_range(0.25..0.4) * wf;
            let peak = rng.random_range(0.6..0.9);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    canvas.blend(y, x, [250.0, 248.0, 235.0], peak * (-d2 / (sigma * sigma)).exp());
                }
            }
        }
        _ => {}
    }

    let noise = rng.random_range(2.5..5.0);
    let image = canvas.into_image(noise, &mut rng);
    LaneScene::new(
        format!("{}{index:05}", params.id_prefix),
        image,
        lanes,
        category,
        params.mask_width,
    )
}

fn paint_background(canvas: &mut Canvas, road: &Road, n_lanes: usize, rng: &mut ChaCha8Rng) {
    let (h, w) = (canvas.h, canvas.w);
    let sky_top = [
        rng.random_range(140.0..190.0),
        rng.random_range(160.0..200.0),
        rng.random_range(180.0..220.0),
    ];
    let asphalt = rng.random_range(70.0..110.0);
    let tint = rng.random_range(-6.0..6.0);
    let verge = [
        rng.random_range(55.0..90.0),
        rng.random_range(75.0..110.0),
        rng.random_range(45.0..75.0),
    ];
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..7))
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(road.horizon..h as f64),
                rng.random_range(0.05..0.2) * w as f64,
                rng.random_range(-14.0..14.0),
            )
        })
        .collect();
    let last = n_lanes.max(1) as f64 - 1.0;
    for y in 0..h {
        let yf = y as f64;
        for x in 0..w {
            let xf = x as f64;
            let color = if yf < road.horizon {
                let f = yf / road.horizon.max(1.0);
                [sky_top[0] - 25.0 * f, sky_top[1] - 20.0 * f, sky_top[2] - 15.0 * f]
            } else {
                let left = road.slot_x(-0.5, yf);
                let right = road.slot_x(last + 0.5, yf);
                let blob: f64 = blobs
                    .iter()
                    .map(|&(bx, by, r, a)| a * (-((xf - bx).powi(2) + (yf - by).powi(2)) / (r * r)).exp())
                    .sum();
                if xf < left || xf > right {
                    [verge[0] + blob, verge[1] + blob, verge[2] + blob]
                } else {
                    [asphalt + tint + blob, asphalt + blob, asphalt - tint + blob]
                }
            };
            *canvas.at(y, x) = color;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn paint_lane(
    canvas: &mut Canvas,
    road: &Road,
    lane: usize,
    y_top: f64,
    strength: f64,
    dashed: bool,
    phase: f64,
    color: [f64; 3],
) {
    let (h, w) = (canvas.h, canvas.w);
    for y in (y_top.ceil() as usize)..h {
        let yf = y as f64;
        let t = road.t(yf);
        if dashed {
            // dash pattern with constant period in road distance (~ 1/t)
            let z = 1.0 / (t + 0.05);
            if (z * 1.6 + phase).fract() > 0.55 {
                continue;
            }
        }
        let half = (0.028 * w as f64 * t).max(0.7) / 2.0;
        let cx = road.lane_x(lane, yf);
        let x0 = (cx - half - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + half + 1.0).ceil() as usize).min(w - 1);
        for x in x0..=x1 {
            let cov = (half + 0.5 - (x as f64 - cx).abs()).clamp(0.0, 1.0);
            if cov > 0.0 {
                canvas.blend(y, x, color, strength * cov);
            }
        }
    }
}

fn draw_vehicles(canvas: &mut Canvas, road: &Road, n_lanes: usize, count: usize, rng: &mut ChaCha8Rng) {
    let (h, w) = (canvas.h, canvas.w);
    let mut cars: Vec<(f64, f64, [f64; 3])> = (0..count)
        .map(|_| {
            let t = rng.random_range(0.2..0.95);
            // lateral slot: on a lane (integer) or between lanes (half-integer)
            let slot = rng.random_range(-0.5..(n_lanes as f64 - 0.5)).round_ties_even_half();
            let body = match rng.random_range(0..3) {
                0 => {
                    let v = rng.random_range(20.0..70.0);
                    [v, v, v]
                }
                1 => {
                    let v = rng.random_range(160.0..225.0);
                    [v, v, v]
                }
                _ => [
                    rng.random_range(40.0..200.0),
                    rng.random_range(30.0..120.0),
                    rng.random_range(30.0..120.0),
                ],
            };
            (t, slot, body)
        })
        .collect();
    cars.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (t, slot, body) in cars {
        let yb = road.horizon + t * (road.bottom - road.horizon);
        let cx = road.slot_x(slot, yb);
        let half_w = 0.42 * road.spacing * t;
        let height = 1.4 * half_w;
        let y0 = (yb - height).max(0.0) as usize;
        let y1 = (yb.min(h as f64 - 1.0)) as usize;
        let x0 = (cx - half_w).max(0.0) as usize;
        let x1 = ((cx + half_w).max(0.0) as usize).min(w - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            let rel = (y as f64 - y0 as f64) / (height.max(1.0));
            let shade = if rel < 0.35 { 0.55 } else { 1.0 };
            for x in x0..=x1 {
                *canvas.at(y, x) = [body[0] * shade, body[1] * shade, body[2] * shade];
            }
        }
        // contact shadow under the car
        let sy = (y1 + 1).min(h - 1);
        for y in sy..(sy + 2).min(h) {
            for x in x0..=x1 {
                canvas.scale(y, x, 0.5);
            }
        }
    }
}

trait HalfRound {
    fn round_ties_even_half(self) -> f64;
}

impl HalfRound for f64 {
    /// Snap to the nearest multiple of 0.5.
    fn round_ties_even_half(self) -> f64 {
        (self * 2.0).round() / 2.0
    }
}

fn cast_shadows(canvas: &mut Canvas, road: &Road, strength: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (canvas.h, canvas.w);
    let n = rng.random_range(2..5);
    for _ in 0..n {
        let depth = strength * rng.random_range(0.5..0.8);
        if rng.random_bool(0.5) {
            // band across the road (building or bridge shadow)
            let yc = rng.random_range(road.horizon..h as f64);
            let half = rng.random_range(0.04..0.15) * h as f64;
            for y in 0..h {
                let d = ((y as f64 - yc).abs() - half).max(0.0);
                let a = (1.0 - d / 2.0).clamp(0.0, 1.0);
                if a > 0.0 {
                    for x in 0..w {
                        canvas.scale(y, x, 1.0 - depth * a);
                    }
                }
            }
        } else {
            // soft blob (tree shadow)
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(road.horizon..h as f64);
            let rx = rng.random_range(0.08..0.25) * w as f64;
            let ry = rng.random_range(0.05..0.15) * h as f64;
            for y in 0..h {
                for x in 0..w {
                    let r = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                    let a = (1.5 - r).clamp(0.0, 1.0);
                    if a > 0.0 {
                        canvas.scale(y, x, 1.0 - depth * a);
                    }
                }
            }
        }
    }
}
