//! Adversarial feature alignment.
//!
//! Coupled mode uses two discriminators on one backbone stage: `D_net`
//! separates teacher-virtual from student-virtual features, `D_data`
//! separates student-virtual from student-real features. Single mode uses
//! one discriminator between teacher-virtual and student-real features.
//!
//! Discriminators minimise their cross-entropy objectives; the student
//! minimises the non-saturating surrogate `-ln D_net(S_v) - ln D_data(S_r)`
//! (or, with `literal_roles`, the discriminator objectives themselves).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BackboneSpec, Discriminator, DiscriminatorSpec};
use crate::nn::{Graph, Optimizer, OptimizerKind, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    Off,
    Single,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub mode: AdvMode,
    /// Observed backbone stage; deepest when unset.
    pub observed_stage: Option<usize>,
    pub d_learning_rate: f64,
    /// Multiplier on the student's adversarial terms.
    pub g_weight: f64,
    pub d_conv_layers: usize,
    pub d_width: usize,
    pub d_optimizer: OptimizerKind,
    /// Coupled mode only: keep the data-sensitive discriminator.
    pub data_discriminator: bool,
    /// Let the student minimise the discriminator objectives as written
    /// instead of the fooling surrogate.
    pub literal_roles: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            mode: AdvMode::Coupled,
            observed_stage: None,
            d_learning_rate: 1e-3,
            g_weight: 1.0,
            d_conv_layers: 3,
            d_width: 32,
            d_optimizer: OptimizerKind::Adaptive {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            data_discriminator: true,
            literal_roles: false,
        }
    }
}

impl AdvConfig {
    pub fn off() -> Self {
        Self {
            mode: AdvMode::Off,
            ..Self::default()
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            observed_stage: self.observed_stage,
            conv_layers: self.d_conv_layers,
            width: self.d_width,
        }
    }

    pub fn validate(&self, backbone: &BackboneSpec) -> Result<()> {
        if !(self.d_learning_rate > 0.0 && self.d_learning_rate.is_finite()) {
            return Err(Error::config("d_learning_rate", "must be positive"));
        }
        if !(self.g_weight >= 0.0 && self.g_weight.is_finite()) {
            return Err(Error::config("g_weight", "must be finite and >= 0"));
        }
        self.discriminator_spec().validate(backbone).map_err(|e| match e {
            Error::Config { key, msg } => Error::Config {
                key: match key.as_str() {
                    "conv_layers" => "d_conv_layers".into(),
                    "width" => "d_width".into(),
                    _ => key,
                },
                msg,
            },
            other => other,
        })
    }
}

fn checked(what: &'static str, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Probability { what, value: p });
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// `-(ln p_pos + ln(1 - p_neg))` with clamped probabilities.
fn bce_pair(pos_name: &'static str, p_pos: f64, neg_name: &'static str, p_neg: f64) -> Result<f64> {
    let a = checked(pos_name, p_pos)?;
    let b = checked(neg_name, p_neg)?;
    Ok(-(a.ln() + (1.0 - b).ln()))
}

/// Net-sensitive objective `-(ln D_net(T_v) + ln(1 - D_net(S_v)))`.
pub fn d_net_loss(p_t: f64, p_sv: f64) -> Result<f64> {
    bce_pair("D_net(T_v)", p_t, "D_net(S_v)", p_sv)
}

/// Data-sensitive objective `-(ln D_data(S_v) + ln(1 - D_data(S_r)))`.
pub fn d_data_loss(p_sv: f64, p_sr: f64) -> Result<f64> {
    bce_pair("D_data(S_v)", p_sv, "D_data(S_r)", p_sr)
}

/// Single-discriminator objective `-(ln D(T_v) + ln(1 - D(S_r)))`.
pub fn d_single_loss(p_t: f64, p_sr: f64) -> Result<f64> {
    bce_pair("D_single(T_v)", p_t, "D_single(S_r)", p_sr)
}

/// Student's non-saturating term `-ln p` for a probability it wants high.
pub fn fooling_loss(p: f64) -> Result<f64> {
    Ok(-checked("D(student)", p)?.ln())
}

/// Sum of the two adversarial terms; zero when the mode is off.
pub fn adv_total(mode: AdvMode, net_term: f64, data_term: f64) -> f64 {
    match mode {
        AdvMode::Off => 0.0,
        AdvMode::Single => net_term,
        AdvMode::Coupled => net_term + data_term,
    }
}

/// Discriminator losses of one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorLosses {
    pub d_net: f64,
    pub d_data: f64,
}

/// Student-side adversarial vars on a graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratorVars {
    pub net: Option<Var>,
    pub data: Option<Var>,
}

struct Head<T> {
    d: Discriminator<T>,
    opt: Optimizer<T>,
}

/// Discriminators and their optimizers for one imitation run.
pub struct AdversarialModule<T> {
    cfg: AdvConfig,
    /// `D_net` in coupled mode, `D_single` in single mode.
    first: Option<Head<T>>,
    /// `D_data`, coupled mode only.
    second: Option<Head<T>>,
}

fn probs<T: Scalar>(d: &Discriminator<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = d.params().bind(&mut g, false);
    let v = g.constant(x.clone());
    let p = d.forward(&mut g, &b, v)?;
    Ok(g.value(p).data().iter().map(|v| v.as_f64()).collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl<T: Scalar> AdversarialModule<T> {
    pub fn new(cfg: AdvConfig, backbone: &BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(backbone)?;
        let spec = cfg.discriminator_spec();
        let kind = cfg.d_optimizer;
        let mut head = || -> Result<Head<T>> {
            let d = Discriminator::new(spec.clone(), backbone, rng)?;
            let opt = Optimizer::new(kind, d.params());
            Ok(Head { d, opt })
        };
        let (first, second) = match cfg.mode {
            AdvMode::Off => (None, None),
            AdvMode::Single => (Some(head()?), None),
            AdvMode::Coupled => {
                let a = head()?;
                let b = if cfg.data_discriminator { Some(head()?) } else { None };
                (Some(a), b)
            }
        };
        Ok(Self { cfg, first, second })
    }

    pub fn config(&self) -> &AdvConfig {
        &self.cfg
    }

    pub fn mode(&self) -> AdvMode {
        self.cfg.mode
    }

    /// Backbone stage read by the discriminators.
    pub fn stage(&self) -> Option<usize> {
        self.first.as_ref().map(|h| h.d.stage())
    }

    pub fn discriminator_count(&self) -> usize {
        self.first.is_some() as usize + self.second.is_some() as usize
    }

    /// `D_net` (coupled) or `D_single` (single).
    pub fn first(&self) -> Option<&Discriminator<T>> {
        self.first.as_ref().map(|h| &h.d)
    }

    /// `D_data` (coupled).
    pub fn second(&self) -> Option<&Discriminator<T>> {
        self.second.as_ref().map(|h| &h.d)
    }

    pub fn first_mut(&mut self) -> Option<&mut Discriminator<T>> {
        self.first.as_mut().map(|h| &mut h.d)
    }

    pub fn second_mut(&mut self) -> Option<&mut Discriminator<T>> {
        self.second.as_mut().map(|h| &mut h.d)
    }

    /// Objectives at the current parameters without updating anything.
    pub fn discriminator_losses(&self, t_v: &Tensor<T>, s_v: &Tensor<T>, s_r: &Tensor<T>) -> Result<DiscriminatorLosses> {
        let mut out = DiscriminatorLosses::default();
        match self.cfg.mode {
            AdvMode::Off => {}
            AdvMode::Single => {
                let d = &self.first.as_ref().expect("single head").d;
                out.d_net = d_single_loss(mean(&probs(d, t_v)?), mean(&probs(d, s_r)?))?;
            }
            AdvMode::Coupled => {
                let d = &self.first.as_ref().expect("net head").d;
                out.d_net = d_net_loss(mean(&probs(d, t_v)?), mean(&probs(d, s_v)?))?;
                if let Some(h) = &self.second {
                    out.d_data = d_data_loss(mean(&probs(&h.d, s_v)?), mean(&probs(&h.d, s_r)?))?;
                }
            }
        }
        Ok(out)
    }

    /// One descent step of each discriminator on its objective. Features are
    /// constants: nothing reaches either backbone.
    pub fn discriminator_phase(
        &mut self,
        t_v: &Tensor<T>,
        s_v: &Tensor<T>,
        s_r: &Tensor<T>,
    ) -> Result<DiscriminatorLosses> {
        let lr = self.cfg.d_learning_rate;
        let mut out = DiscriminatorLosses::default();
        let step = |h: &mut Head<T>, pos: &Tensor<T>, neg: &Tensor<T>| -> Result<f64> {
            let mut g = Graph::new();
            let b = h.d.params().bind(&mut g, true);
            let xp = g.constant(pos.clone());
            let xn = g.constant(neg.clone());
            let pp = h.d.forward(&mut g, &b, xp)?;
            let pn = h.d.forward(&mut g, &b, xn)?;
            let eps = T::of(PROB_EPS);
            let lp = g.neg_log_mean(pp, false, eps);
            let ln = g.neg_log_mean(pn, true, eps);
            let loss = g.add(lp, ln);
            let value = g.value(loss).value().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: h.opt.steps() as usize,
                    diagnostics: format!(
                        "discriminator loss {value}; p(pos) {:?}, p(neg) {:?}, |pos| {:.4e}, |neg| {:.4e}",
                        g.value(pp).data(),
                        g.value(pn).data(),
                        pos.sq_norm().as_f64().sqrt(),
                        neg.sq_norm().as_f64().sqrt()
                    ),
                });
            }
            let grads = g.backward(loss);
            let gs = h.d.params().collect_grads(&b, &grads);
            h.opt.step(h.d.params_mut(), &gs, lr);
            Ok(value)
        };
        match self.cfg.mode {
            AdvMode::Off => {}
            AdvMode::Single => {
                out.d_net = step(self.first.as_mut().expect("single head"), t_v, s_r)?;
            }
            AdvMode::Coupled => {
                out.d_net = step(self.first.as_mut().expect("net head"), t_v, s_v)?;
                if let Some(h) = self.second.as_mut() {
                    out.d_data = step(h, s_v, s_r)?;
                }
            }
        }
        Ok(out)
    }

    /// Student-side terms on `g`, with discriminator parameters bound as
    /// constants. `t_v` is only used under `literal_roles`.
    pub fn generator_vars(&self, g: &mut Graph<T>, t_v: &Tensor<T>, s_v: Var, s_r: Var) -> Result<GeneratorVars> {
        let eps = T::of(PROB_EPS);
        let w = T::of(self.cfg.g_weight);
        let literal = self.cfg.literal_roles;
        let mut out = GeneratorVars::default();
        let weighted = |g: &mut Graph<T>, v: Var| g.scale(v, w);
        match self.cfg.mode {
            AdvMode::Off => {}
            AdvMode::Single => {
                let d = &self.first.as_ref().expect("single head").d;
                let b = d.params().bind(g, false);
                let p = d.forward(g, &b, s_r)?;
                let term = if literal {
                    let tv = g.constant(t_v.clone());
                    let pt = d.forward(g, &b, tv)?;
                    let a = g.neg_log_mean(pt, false, eps);
                    let c = g.neg_log_mean(p, true, eps);
                    g.add(a, c)
                } else {
                    g.neg_log_mean(p, false, eps)
                };
                out.net = Some(weighted(g, term));
            }
            AdvMode::Coupled => {
                let d = &self.first.as_ref().expect("net head").d;
                let b = d.params().bind(g, false);
                let p = d.forward(g, &b, s_v)?;
                let term = if literal {
                    let tv = g.constant(t_v.clone());
                    let pt = d.forward(g, &b, tv)?;
                    let a = g.neg_log_mean(pt, false, eps);
                    let c = g.neg_log_mean(p, true, eps);
                    g.add(a, c)
                } else {
                    g.neg_log_mean(p, false, eps)
                };
                out.net = Some(weighted(g, term));
                if let Some(h) = &self.second {
                    let b = h.d.params().bind(g, false);
                    let pr = h.d.forward(g, &b, s_r)?;
                    let term = if literal {
                        let pv = h.d.forward(g, &b, s_v)?;
                        let a = g.neg_log_mean(pv, false, eps);
                        let c = g.neg_log_mean(pr, true, eps);
                        g.add(a, c)
                    } else {
                        g.neg_log_mean(pr, false, eps)
                    };
                    out.data = Some(weighted(g, term));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn objective_examples() {
        assert!((d_net_loss(0.5, 0.5).unwrap() - 2.0 * LN2).abs() < 1e-12);
        assert!(d_net_loss(1.0, 0.0).unwrap() < 1e-6);
        assert!((d_net_loss(0.9, 0.2).unwrap() - 0.328_504_066_972_036_2).abs() < 1e-12);
        assert!((d_data_loss(0.5, 0.5).unwrap() - 2.0 * LN2).abs() < 1e-12);
        assert!((d_data_loss(0.99, 0.01).unwrap() - 0.020_100_671_707_002_9).abs() < 1e-12);
        assert!((d_data_loss(0.9, 0.2).unwrap() - d_data_loss(0.2, 0.9).unwrap()).abs() > 1.0);
    }

    #[test]
    fn totals_by_mode() {
        assert!((adv_total(AdvMode::Coupled, 1.3863, 1.3863) - 2.7726).abs() < 1e-12);
        assert_eq!(adv_total(AdvMode::Off, 1.0, 2.0), 0.0);
        assert_eq!(d_single_loss(0.7, 0.1).unwrap(), d_net_loss(0.7, 0.1).unwrap());
    }

    #[test]
    fn clamping_keeps_losses_finite() {
        let big = fooling_loss(0.0).unwrap();
        assert!((big - (-PROB_EPS.ln())).abs() < 1e-9);
        assert!(d_net_loss(0.0, 1.0).unwrap().is_finite());
        assert!(matches!(d_net_loss(1.5, 0.5), Err(Error::Probability { .. })));
        assert!(d_net_loss(f64::NAN, 0.5).is_err());
    }

    fn backbone() -> BackboneSpec {
        BackboneSpec {
            stages: 2,
            base_channels: 2,
            input_dims: (32, 32),
        }
    }

    #[test]
    fn discriminator_counts_follow_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let count = |mode, data, rng: &mut ChaCha8Rng| {
            let cfg = AdvConfig {
                mode,
                data_discriminator: data,
                ..AdvConfig::default()
            };
            AdversarialModule::<f64>::new(cfg, &backbone(), rng).unwrap().discriminator_count()
        };
        assert_eq!(count(AdvMode::Off, true, &mut rng), 0);
        assert_eq!(count(AdvMode::Single, true, &mut rng), 1);
        assert_eq!(count(AdvMode::Coupled, true, &mut rng), 2);
        assert_eq!(count(AdvMode::Coupled, false, &mut rng), 1);
    }

    #[test]
    fn separable_features_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AdvConfig {
            d_width: 8,
            d_learning_rate: 1e-2,
            ..AdvConfig::default()
        };
        let mut m = AdversarialModule::<f64>::new(cfg, &backbone(), &mut rng).unwrap();
        let pos = Tensor::from_fn([4, 4, 8, 8], |_| rng.random_range(0.5..1.5));
        let neg = Tensor::from_fn([4, 4, 8, 8], |_| rng.random_range(-1.5..-0.5));
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = m.discriminator_phase(&pos, &neg, &neg).unwrap().d_net;
        }
        assert!(last < 0.2, "d_net after 200 steps: {last}");
    }
}
