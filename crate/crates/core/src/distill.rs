//! Feature distillation from a frozen teacher: same-scale matching, and
//! cross-scale matching against the teacher's finer stage after
//! down-sample alignment.

use serde::{Deserialize, Serialize};

use crate::model::{BackboneSpec, FeaturePyramid, Provenance};
use crate::nn::{avg_pool2, Graph, Var};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Off,
    SameOnly,
    ScaleFusing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// 1-based stages matched at equal scale.
    pub same_stages: Vec<usize>,
    /// `(teacher stage j-1, student stage j)` pairs.
    pub cross_pairs: Vec<(usize, usize)>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::ScaleFusing,
            same_stages: vec![3, 4],
            cross_pairs: vec![(2, 3), (3, 4)],
        }
    }
}

impl DistillConfig {
    pub fn off() -> Self {
        Self {
            mode: DistillMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        for &j in &self.same_stages {
            if j == 0 || j > spec.stages {
                return Err(Error::config("same_stages", format!("stage {j} outside 1..={}", spec.stages)));
            }
        }
        for &(t, s) in &self.cross_pairs {
            if s < 2 || s > spec.stages || t + 1 != s {
                return Err(Error::config(
                    "cross_pairs",
                    format!("pair ({t}, {s}) must satisfy teacher = student - 1 within 1..={}", spec.stages),
                ));
            }
        }
        Ok(())
    }

    fn same_active(&self) -> bool {
        self.mode != DistillMode::Off && !self.same_stages.is_empty()
    }

    fn cross_active(&self) -> bool {
        self.mode == DistillMode::ScaleFusing && !self.cross_pairs.is_empty()
    }
}

/// Fixed `c_out x c_in` channel map. Output channel `o` averages the input
/// channels whose share of `[0, 1)` overlaps its own, weighted by overlap;
/// rows sum to one, so constant maps are preserved. For `c_out = 2 c_in`
/// every input channel is replicated twice.
pub fn channel_projection(c_in: usize, c_out: usize) -> Vec<f64> {
    let mut p = vec![0.0; c_out * c_in];
    for o in 0..c_out {
        let (lo, hi) = (o as f64 / c_out as f64, (o + 1) as f64 / c_out as f64);
        let mut row_sum = 0.0;
        for i in 0..c_in {
            let (a, b) = (i as f64 / c_in as f64, (i + 1) as f64 / c_in as f64);
            let overlap = (hi.min(b) - lo.max(a)).max(0.0);
            p[o * c_in + i] = overlap;
            row_sum += overlap;
        }
        for v in &mut p[o * c_in..(o + 1) * c_in] {
            *v /= row_sum;
        }
    }
    p
}

/// Down-sample alignment: 2x2 average pooling, then the fixed channel
/// projection to `target = (channels, height, width)`.
pub fn align_down<T: Scalar>(feature: &Tensor<T>, target: (usize, usize, usize)) -> Result<Tensor<T>> {
    let [n, c, h, w] = feature.shape();
    let (tc, th, tw) = target;
    if h != 2 * th || w != 2 * tw {
        return Err(Error::Dimension(format!(
            "alignment needs an exact 2x ratio, got {h}x{w} -> {th}x{tw}"
        )));
    }
    let pooled = avg_pool2(feature);
    if tc == c {
        return Ok(pooled);
    }
    let proj: Vec<T> = channel_projection(c, tc).into_iter().map(T::of).collect();
    let plane = th * tw;
    let mut out = Tensor::zeros([n, tc, th, tw]);
    for item in 0..n {
        let src = pooled.item(item);
        let dst = out.item_mut(item);
        T::gemm(tc, c, plane, T::one(), &proj, c as isize, 1, src, plane as isize, 1, T::zero(), dst, plane as isize, 1);
    }
    Ok(out)
}

/// Loss vars for one batch on a graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistillVars {
    pub same: Option<Var>,
    pub cross: Option<Var>,
}

fn check_dims<T: Scalar>(g: &Graph<T>, v: Var, want: [usize; 4], what: &str) -> Result<()> {
    let got = g.value(v).shape();
    if got != want {
        return Err(Error::Dimension(format!("{what}: {got:?} vs teacher {want:?}")));
    }
    Ok(())
}

fn pair_term<T: Scalar>(g: &mut Graph<T>, target: &Tensor<T>, sv: Var, sr: Var) -> Var {
    let a = g.mse_to(sv, target);
    let b = g.mse_to(sr, target);
    g.add(a, b)
}

/// Distillation terms on `g` for student stage vars `s_v`, `s_r` (index
/// `j - 1` holds stage `j`) against the constant teacher pyramid.
pub fn distill_graph<T: Scalar>(
    g: &mut Graph<T>,
    t_v: &FeaturePyramid<T>,
    s_v: &[Var],
    s_r: &[Var],
    cfg: &DistillConfig,
) -> Result<DistillVars> {
    t_v.expect(Provenance::TEACHER_VIRTUAL)?;
    let stage = |vars: &[Var], j: usize| -> Result<Var> {
        j.checked_sub(1)
            .and_then(|i| vars.get(i).copied())
            .ok_or_else(|| Error::Dimension(format!("student pyramid has no stage {j}")))
    };
    let mut out = DistillVars::default();
    if cfg.same_active() {
        let mut terms = Vec::new();
        for &j in &cfg.same_stages {
            let t = t_v.stage(j)?;
            let (sv, sr) = (stage(s_v, j)?, stage(s_r, j)?);
            check_dims(g, sv, t.shape(), "S_v")?;
            check_dims(g, sr, t.shape(), "S_r")?;
            terms.push(pair_term(g, t, sv, sr));
        }
        let sum = g.sum_all(&terms).expect("nonempty");
        out.same = Some(g.scale(sum, T::of(1.0 / terms.len() as f64)));
    }
    if cfg.cross_active() {
        let mut terms = Vec::new();
        for &(tj, sj) in &cfg.cross_pairs {
            let (sv, sr) = (stage(s_v, sj)?, stage(s_r, sj)?);
            let [_, c, h, w] = g.value(sv).shape();
            let aligned = align_down(t_v.stage(tj)?, (c, h, w))?;
            check_dims(g, sv, aligned.shape(), "S_v")?;
            check_dims(g, sr, aligned.shape(), "S_r")?;
            terms.push(pair_term(g, &aligned, sv, sr));
        }
        let sum = g.sum_all(&terms).expect("nonempty");
        out.cross = Some(g.scale(sum, T::of(1.0 / terms.len() as f64)));
    }
    Ok(out)
}

fn evaluate<T: Scalar>(
    t_v: &FeaturePyramid<T>,
    s_v: &FeaturePyramid<T>,
    s_r: &FeaturePyramid<T>,
    cfg: &DistillConfig,
) -> Result<(T, T)> {
    s_v.expect(Provenance::STUDENT_VIRTUAL)?;
    s_r.expect(Provenance::STUDENT_REAL)?;
    let mut g = Graph::new();
    let sv: Vec<Var> = s_v.stages.iter().map(|t| g.constant(t.clone())).collect();
    let sr: Vec<Var> = s_r.stages.iter().map(|t| g.constant(t.clone())).collect();
    let vars = distill_graph(&mut g, t_v, &sv, &sr, cfg)?;
    let val = |v: Option<Var>| v.map_or(T::zero(), |v| g.value(v).value());
    Ok((val(vars.same), val(vars.cross)))
}

/// `(1/N_same) sum_j [ d(T_v^j, S_v^j) + d(T_v^j, S_r^j) ]` with `d` the
/// mean squared difference. Zero when the mode is off.
pub fn loss_same<T: Scalar>(
    t_v: &FeaturePyramid<T>,
    s_v: &FeaturePyramid<T>,
    s_r: &FeaturePyramid<T>,
    cfg: &DistillConfig,
) -> Result<T> {
    let cfg = DistillConfig {
        mode: if cfg.mode == DistillMode::Off {
            DistillMode::Off
        } else {
            DistillMode::SameOnly
        },
        ..cfg.clone()
    };
    evaluate(t_v, s_v, s_r, &cfg).map(|(s, _)| s)
}

/// `(1/N_cross) sum [ d(A(T_v^{j-1}), S_v^j) + d(A(T_v^{j-1}), S_r^j) ]`,
/// evaluated regardless of the mode switch.
pub fn loss_cross<T: Scalar>(
    t_v: &FeaturePyramid<T>,
    s_v: &FeaturePyramid<T>,
    s_r: &FeaturePyramid<T>,
    cfg: &DistillConfig,
) -> Result<T> {
    let cfg = DistillConfig {
        mode: DistillMode::ScaleFusing,
        same_stages: Vec::new(),
        ..cfg.clone()
    };
    evaluate(t_v, s_v, s_r, &cfg).map(|(_, c)| c)
}

/// Same-scale plus cross-scale loss, honouring the mode.
pub fn loss_distill<T: Scalar>(
    t_v: &FeaturePyramid<T>,
    s_v: &FeaturePyramid<T>,
    s_r: &FeaturePyramid<T>,
    cfg: &DistillConfig,
) -> Result<T> {
    let (s, c) = evaluate(t_v, s_v, s_r, cfg)?;
    Ok(s + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BackboneSpec {
        BackboneSpec {
            stages: 4,
            base_channels: 2,
            input_dims: (64, 64),
        }
    }

    fn constant(v: f64, p: Provenance) -> FeaturePyramid<f64> {
        let s = spec();
        FeaturePyramid::new(
            (1..=4)
                .map(|j| {
                    let (c, h, w) = s.stage_dims(j);
                    Tensor::full([1, c, h, w], v)
                })
                .collect(),
            p,
        )
    }

    #[test]
    fn projection_rows_sum_to_one_and_replicate() {
        let p = channel_projection(2, 4);
        assert_eq!(p, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let q = channel_projection(4, 2);
        assert_eq!(q, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let r = channel_projection(3, 5);
        for o in 0..5 {
            let s: f64 = r[o * 3..(o + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn align_examples() {
        let t = Tensor::full([1, 3, 4, 6], 2.5f64);
        let a = align_down(&t, (6, 2, 3)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let b = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 1.0, 3.0, 3.0]);
        assert_eq!(align_down(&b, (1, 1, 1)).unwrap().data(), &[2.0]);
        assert!(align_down(&b, (1, 2, 1)).is_err());
    }

    #[test]
    fn same_scale_examples() {
        let cfg = DistillConfig::default();
        let t = constant(1.0, Provenance::TEACHER_VIRTUAL);
        let zero = constant(0.0, Provenance::STUDENT_VIRTUAL);
        let one = constant(1.0, Provenance::STUDENT_REAL);
        assert!((loss_same(&t, &zero, &one, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let sv = constant(1.0, Provenance::STUDENT_VIRTUAL);
        assert_eq!(loss_same(&t, &sv, &one, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn cross_scale_examples() {
        let cfg = DistillConfig::default();
        let t = constant(2.0, Provenance::TEACHER_VIRTUAL);
        let sv = constant(0.0, Provenance::STUDENT_VIRTUAL);
        let sr = constant(2.0, Provenance::STUDENT_REAL);
        assert!((loss_cross(&t, &sv, &sr, &cfg).unwrap() - 4.0).abs() < 1e-12);
        let c = constant(3.0, Provenance::TEACHER_VIRTUAL);
        let cv = constant(3.0, Provenance::STUDENT_VIRTUAL);
        let cr = constant(3.0, Provenance::STUDENT_REAL);
        assert!(loss_cross(&c, &cv, &cr, &cfg).unwrap().abs() < 1e-12);
        let swapped = DistillConfig {
            cross_pairs: vec![(3, 4), (2, 3)],
            ..cfg.clone()
        };
        assert_eq!(
            loss_cross(&t, &sv, &sr, &cfg).unwrap(),
            loss_cross(&t, &sv, &sr, &swapped).unwrap()
        );
    }

    #[test]
    fn modes_compose() {
        let t = constant(2.0, Provenance::TEACHER_VIRTUAL);
        let sv = constant(1.0, Provenance::STUDENT_VIRTUAL);
        let sr = constant(0.0, Provenance::STUDENT_REAL);
        let full = DistillConfig::default();
        let total = loss_distill(&t, &sv, &sr, &full).unwrap();
        let parts = loss_same(&t, &sv, &sr, &full).unwrap() + loss_cross(&t, &sv, &sr, &full).unwrap();
        assert!((total - parts).abs() < 1e-12);
        let same = DistillConfig {
            mode: DistillMode::SameOnly,
            ..full.clone()
        };
        assert_eq!(loss_distill(&t, &sv, &sr, &same).unwrap(), loss_same(&t, &sv, &sr, &full).unwrap());
        assert_eq!(loss_distill(&t, &sv, &sr, &DistillConfig::off()).unwrap(), 0.0);
    }

    #[test]
    fn provenance_is_checked() {
        let t = constant(1.0, Provenance::TEACHER_VIRTUAL);
        let s = constant(1.0, Provenance::STUDENT_REAL);
        let cfg = DistillConfig::default();
        assert!(matches!(loss_same(&t, &s, &s, &cfg), Err(Error::Provenance { .. })));
        assert!(matches!(loss_same(&s, &s, &s, &cfg), Err(Error::Provenance { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = DistillConfig {
            cross_pairs: vec![(2, 4)],
            ..Default::default()
        };
        assert!(bad.validate(&spec()).is_err());
        let bad = DistillConfig {
            same_stages: vec![5],
            ..Default::default()
        };
        assert!(bad.validate(&spec()).is_err());
        DistillConfig::default().validate(&spec()).unwrap();
    }
}
