//! Lane repainting: select the lane region, brighten it with an affine
//! contrast stretch and blend it back by solving a Poisson equation per
//! colour channel.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{rasterize_lane_mask, LaneScene, RgbImage, VIRTUAL_SUFFIX};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepaintConfig {
    pub gain: f64,
    pub lift: f64,
    pub region_width: f64,
    pub solver_tol: f64,
    /// Defaults to `10 * |omega|` when unset.
    pub solver_max_iter: Option<usize>,
}

impl Default for RepaintConfig {
    fn default() -> Self {
        Self {
            gain: 1.5,
            lift: 30.0,
            region_width: 8.0,
            solver_tol: 1e-8,
            solver_max_iter: None,
        }
    }
}

impl RepaintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::config("gain", format!("must be positive, got {}", self.gain)));
        }
        if !self.lift.is_finite() {
            return Err(Error::config("lift", "must be finite"));
        }
        if !(self.region_width >= 1.0 && self.region_width.is_finite()) {
            return Err(Error::config("region_width", format!("must be >= 1, got {}", self.region_width)));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol <= 1e-2) {
            return Err(Error::config("solver_tol", format!("must lie in (0, 1e-2], got {}", self.solver_tol)));
        }
        if self.solver_max_iter == Some(0) {
            return Err(Error::config("solver_max_iter", "must be positive"));
        }
        Ok(())
    }

    fn max_iter(&self, omega: usize) -> usize {
        self.solver_max_iter.unwrap_or(10 * omega.max(1))
    }
}

/// Binary pixel selection over an `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl Selection {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![false; height * width],
        }
    }

    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Dimension(format!("{} selection cells for {height}x{width}", mask.len())));
        }
        Ok(Self { height, width, mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn insert(&mut self, y: usize, x: usize) {
        self.mask[y * self.width + x] = true;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }
}

/// Lane region: every pixel within `region_width / 2` of some lane.
pub fn extract_region(scene: &LaneScene, cfg: &RepaintConfig) -> Selection {
    let (h, w) = scene.dims();
    let m = rasterize_lane_mask(&scene.lanes, cfg.region_width, (h, w));
    let sel = Selection {
        height: h,
        width: w,
        mask: m.data().iter().map(|&v| v != 0).collect(),
    };
    if sel.is_empty() {
        log::warn!("scene {}: empty lane region, repaint is the identity", scene.id);
    }
    sel
}

/// `clamp(gain * v + lift, 0, 255)` elementwise.
pub fn enhance_linear(pixels: &[f64], cfg: &RepaintConfig) -> Vec<f64> {
    pixels.iter().map(|&v| (cfg.gain * v + cfg.lift).clamp(0.0, 255.0)).collect()
}

const NONE: u32 = u32::MAX;

/// Discrete Poisson system over `omega` for one channel:
///
/// `4 f_p - sum_{q in N_p ∩ Ω} f_q = sum_{q in N_p \ Ω} f*_q + sum_{q in N_p} (g_p - g_q)`
///
/// Neighbours outside the image are boundary pixels carrying the clamped
/// pixel's `f*` and `g`, so every row has exactly four neighbours.
#[derive(Debug, Clone)]
pub struct PoissonProblem<T: Scalar> {
    pub channel: usize,
    /// Row-major coordinates of the interior pixels, in index order.
    pub omega: Vec<(usize, usize)>,
    /// Destination values at the interior pixels (initial guess).
    pub dest: Vec<T>,
    /// Laplacian guidance `sum_q (g_p - g_q)` per interior pixel.
    pub guidance: Vec<T>,
    rhs: Vec<T>,
    neighbors: Vec<[u32; 4]>,
}

#[derive(Debug, Clone)]
pub struct PoissonSolution<T> {
    pub values: Vec<T>,
    pub iterations: usize,
    /// `||b - A f|| / ||b||`, or `||b - A f||` when `b = 0`.
    pub residual: f64,
}

impl<T: Scalar> PoissonProblem<T> {
    /// Assemble from single-channel planes (row-major, `H x W`).
    pub fn new(dest: &[T], source: &[T], sel: &Selection, channel: usize) -> Result<Self> {
        let (h, w) = sel.dims();
        if dest.len() != h * w || source.len() != h * w {
            return Err(Error::Dimension(format!(
                "planes of {} and {} values for a {h}x{w} selection",
                dest.len(),
                source.len()
            )));
        }
        let mut index = vec![NONE; h * w];
        let mut omega = Vec::new();
        for (i, &inside) in sel.mask().iter().enumerate() {
            if inside {
                index[i] = omega.len() as u32;
                omega.push((i / w, i % w));
            }
        }
        if omega.is_empty() {
            return Err(Error::Invalid("empty selection".into()));
        }
        let n = omega.len();
        let mut neighbors = Vec::with_capacity(n);
        let mut rhs = Vec::with_capacity(n);
        let mut guidance = Vec::with_capacity(n);
        let mut dest_in = Vec::with_capacity(n);
        for &(y, x) in &omega {
            let p = y * w + x;
            let cand = [
                (y as isize - 1, x as isize),
                (y as isize + 1, x as isize),
                (y as isize, x as isize - 1),
                (y as isize, x as isize + 1),
            ];
            let mut nb = [NONE; 4];
            let mut b = T::zero();
            let mut guide = T::zero();
            for (k, &(qy, qx)) in cand.iter().enumerate() {
                let in_image = qy >= 0 && qx >= 0 && (qy as usize) < h && (qx as usize) < w;
                let cy = qy.clamp(0, h as isize - 1) as usize;
                let cx = qx.clamp(0, w as isize - 1) as usize;
                let q = cy * w + cx;
                guide += source[p] - source[q];
                if in_image && index[q] != NONE {
                    nb[k] = index[q];
                } else {
                    b += dest[q];
                }
            }
            neighbors.push(nb);
            guidance.push(guide);
            rhs.push(b + guide);
            dest_in.push(dest[p]);
        }
        if guidance.iter().any(|g| !g.is_finite()) {
            return Err(Error::Invalid("non-finite guidance".into()));
        }
        Ok(Self {
            channel,
            omega,
            dest: dest_in,
            guidance,
            rhs,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn rhs(&self) -> &[T] {
        &self.rhs
    }

    /// Neighbour indices into `omega` (`None` for boundary neighbours).
    pub fn neighbors(&self, i: usize) -> [Option<usize>; 4] {
        self.neighbors[i].map(|j| (j != NONE).then_some(j as usize))
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        let four = T::of(4.0);
        for (i, nb) in self.neighbors.iter().enumerate() {
            let mut acc = four * x[i];
            for &j in nb {
                if j != NONE {
                    acc -= x[j as usize];
                }
            }
            y[i] = acc;
        }
    }

    /// Relative residual of `x`.
    pub fn residual(&self, x: &[T]) -> f64 {
        let mut ax = vec![T::zero(); self.len()];
        self.apply(x, &mut ax);
        let r: f64 = self
            .rhs
            .iter()
            .zip(&ax)
            .map(|(&b, &a)| (b - a).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let nb = self.rhs.iter().map(|b| b.as_f64().powi(2)).sum::<f64>().sqrt();
        if nb > 0.0 {
            r / nb
        } else {
            r
        }
    }

    /// Conjugate gradients from the destination values.
    pub fn solve(&self, tol: f64, max_iter: usize) -> Result<PoissonSolution<T>> {
        let n = self.len();
        let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&u, &v)| u * v).fold(T::zero(), |s, t| s + t);
        let b_norm = dot(&self.rhs, &self.rhs).sqrt().as_f64();
        let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
        let mut x = self.dest.clone();
        let mut ap = vec![T::zero(); n];
        self.apply(&x, &mut ap);
        let mut r: Vec<T> = self.rhs.iter().zip(&ap).map(|(&b, &a)| b - a).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let mut it = 0;
        loop {
            let rel = rr.sqrt().as_f64() / scale;
            if rel <= tol {
                // guard against drift of the recursive residual
                let true_rel = self.residual(&x);
                if true_rel <= tol {
                    return Ok(PoissonSolution {
                        values: x,
                        iterations: it,
                        residual: true_rel,
                    });
                }
                self.apply(&x, &mut ap);
                for i in 0..n {
                    r[i] = self.rhs[i] - ap[i];
                }
                p.copy_from_slice(&r);
                rr = dot(&r, &r);
            }
            if it >= max_iter {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: self.residual(&x),
                });
            }
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(pap > T::zero()) {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: self.residual(&x),
                });
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
            it += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FuseStats {
    pub omega: usize,
    /// Per-channel relative residual before clamping.
    pub residuals: [f64; 3],
    pub iterations: [usize; 3],
}

/// Blend `source` (interleaved `H x W x 3`, real-valued) into `dest` over
/// `omega`. Pixels outside `omega` are copied from `dest` unchanged.
pub fn poisson_fuse(
    dest: &RgbImage,
    source: &[f64],
    omega: &Selection,
    cfg: &RepaintConfig,
) -> Result<(RgbImage, FuseStats)> {
    let (h, w) = dest.dims();
    if omega.dims() != (h, w) || source.len() != h * w * 3 {
        return Err(Error::Dimension(format!(
            "dest {h}x{w}, selection {:?}, source of {} values",
            omega.dims(),
            source.len()
        )));
    }
    let mut out = dest.clone();
    let mut stats = FuseStats {
        omega: omega.count(),
        ..Default::default()
    };
    if stats.omega == 0 {
        return Ok((out, stats));
    }
    let max_iter = cfg.max_iter(stats.omega);
    for c in 0..3 {
        let d: Vec<f64> = (0..h * w).map(|i| dest.data()[i * 3 + c] as f64).collect();
        let s: Vec<f64> = (0..h * w).map(|i| source[i * 3 + c]).collect();
        let prob = PoissonProblem::new(&d, &s, omega, c)?;
        let sol = prob.solve(cfg.solver_tol, max_iter)?;
        stats.residuals[c] = sol.residual;
        stats.iterations[c] = sol.iterations;
        for (&(y, x), &v) in prob.omega.iter().zip(&sol.values) {
            out.set(y, x, c, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((out, stats))
}

/// Enhanced source for `scene`: affine-stretched inside `omega`, dest
/// values elsewhere.
pub fn enhanced_source(image: &RgbImage, omega: &Selection, cfg: &RepaintConfig) -> Vec<f64> {
    let raw: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let enhanced = enhance_linear(&raw, cfg);
    raw.iter()
        .zip(&enhanced)
        .enumerate()
        .map(|(i, (&r, &e))| if omega.mask()[i / 3] { e } else { r })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepaintStats {
    pub id: String,
    pub omega: usize,
    pub residual: f64,
    pub iterations: usize,
    pub seconds: f64,
}

/// Virtual counterpart of `scene` plus solver statistics.
pub fn repaint_scene_with_stats(scene: &LaneScene, cfg: &RepaintConfig) -> Result<(LaneScene, RepaintStats)> {
    let start = Instant::now();
    let omega = extract_region(scene, cfg);
    let source = enhanced_source(&scene.image, &omega, cfg);
    let (image, fs) = poisson_fuse(&scene.image, &source, &omega, cfg)?;
    let v = LaneScene {
        id: format!("{}{VIRTUAL_SUFFIX}", scene.base_id()),
        image,
        lanes: scene.lanes.clone(),
        mask: scene.mask.clone(),
        category: scene.category,
    };
    let stats = RepaintStats {
        id: scene.id.clone(),
        omega: fs.omega,
        residual: fs.residuals.iter().copied().fold(0.0, f64::max),
        iterations: fs.iterations.iter().copied().max().unwrap_or(0),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((v, stats))
}

pub fn repaint_scene(scene: &LaneScene, cfg: &RepaintConfig) -> Result<LaneScene> {
    repaint_scene_with_stats(scene, cfg).map(|(s, _)| s)
}

/// Repaint every scene. All scenes are attempted; if any fail the error
/// reports how many and the first failure.
pub fn repaint_dataset_with_stats(
    scenes: &[LaneScene],
    cfg: &RepaintConfig,
) -> Result<(Vec<LaneScene>, Vec<RepaintStats>)> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(scenes.len());
    let mut stats = Vec::with_capacity(scenes.len());
    let mut failed: Vec<Error> = Vec::new();
    for s in scenes {
        match repaint_scene_with_stats(s, cfg) {
            Ok((v, st)) => {
                out.push(v);
                stats.push(st);
            }
            Err(e) => {
                log::error!("scene {}: {e}", s.id);
                failed.push(e);
            }
        }
    }
    if !failed.is_empty() {
        let count = failed.len();
        return Err(Error::Batch {
            count,
            total: scenes.len(),
            first: Box::new(failed.swap_remove(0)),
        });
    }
    Ok((out, stats))
}

pub fn repaint_dataset(scenes: &[LaneScene], cfg: &RepaintConfig) -> Result<Vec<LaneScene>> {
    repaint_dataset_with_stats(scenes, cfg).map(|(v, _)| v)
}
