//! Finite-difference checks of every loss family, in f64 on tiny inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ril_core::adversarial::{d_data_loss, d_net_loss, fooling_loss, AdvConfig, AdvMode, AdversarialModule, PROB_EPS};
use ril_core::distill::{distill_graph, loss_cross, loss_same, DistillConfig, DistillMode};
use ril_core::model::{BackboneSpec, FeaturePyramid, Provenance};
use ril_core::nn::gradcheck::{numeric_gradient, relative_error};
use ril_core::nn::{Graph, Var};
use ril_core::trainer::{lane_loss, lane_loss_graph};
use ril_core::Tensor64;

const DRAWS: u64 = 20;
const TOL: f64 = 1e-3;
const H: f64 = 1e-6;

fn spec() -> BackboneSpec {
    BackboneSpec {
        stages: 3,
        base_channels: 2,
        input_dims: (16, 16),
    }
}

fn distill_cfg(mode: DistillMode) -> DistillConfig {
    DistillConfig {
        mode,
        same_stages: vec![2, 3],
        cross_pairs: vec![(1, 2), (2, 3)],
    }
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pyramid(p: Provenance, batch: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid<f64> {
    let s = spec();
    let stages = (1..=s.stages)
        .map(|j| {
            let (c, h, w) = s.stage_dims(j);
            random([batch, c, h, w], rng)
        })
        .collect();
    FeaturePyramid::new(stages, p)
}

fn with_stage(p: &FeaturePyramid<f64>, j: usize, t: &Tensor64) -> FeaturePyramid<f64> {
    let mut q = p.clone();
    q.stages[j - 1] = t.clone();
    q
}

/// Gradients of a distillation term with respect to stage `j` of S_v and S_r.
fn distill_grads(
    t_v: &FeaturePyramid<f64>,
    s_v: &FeaturePyramid<f64>,
    s_r: &FeaturePyramid<f64>,
    cfg: &DistillConfig,
    cross: bool,
    j: usize,
) -> (Tensor64, Tensor64) {
    let mut g = Graph::new();
    let sv: Vec<Var> = s_v.stages.iter().map(|t| g.variable(t.clone())).collect();
    let sr: Vec<Var> = s_r.stages.iter().map(|t| g.variable(t.clone())).collect();
    let vars = distill_graph(&mut g, t_v, &sv, &sr, cfg).unwrap();
    let loss = if cross { vars.cross } else { vars.same }.unwrap();
    let grads = g.backward(loss);
    let shape = s_v.stages[j - 1].shape();
    (grads.get_or_zeros(sv[j - 1], shape), grads.get_or_zeros(sr[j - 1], shape))
}

pub fn same_scale_distillation_gradient() {
    let cfg = distill_cfg(DistillMode::SameOnly);
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let t_v = pyramid(Provenance::TEACHER_VIRTUAL, 2, &mut rng);
        let s_v = pyramid(Provenance::STUDENT_VIRTUAL, 2, &mut rng);
        let s_r = pyramid(Provenance::STUDENT_REAL, 2, &mut rng);
        for j in [2, 3] {
            let (gv, gr) = distill_grads(&t_v, &s_v, &s_r, &cfg, false, j);
            let nv = numeric_gradient(&s_v.stages[j - 1], H, |x| {
                loss_same(&t_v, &with_stage(&s_v, j, x), &s_r, &cfg).unwrap()
            });
            let nr = numeric_gradient(&s_r.stages[j - 1], H, |x| {
                loss_same(&t_v, &s_v, &with_stage(&s_r, j, x), &cfg).unwrap()
            });
            assert!(relative_error(&gv, &nv) < TOL, "draw {draw} stage {j}");
            assert!(relative_error(&gr, &nr) < TOL, "draw {draw} stage {j}");
        }
    }
}

pub fn cross_scale_distillation_gradient() {
    let cfg = distill_cfg(DistillMode::ScaleFusing);
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let t_v = pyramid(Provenance::TEACHER_VIRTUAL, 1, &mut rng);
        let s_v = pyramid(Provenance::STUDENT_VIRTUAL, 1, &mut rng);
        let s_r = pyramid(Provenance::STUDENT_REAL, 1, &mut rng);
        for j in [2, 3] {
            let (gv, gr) = distill_grads(&t_v, &s_v, &s_r, &cfg, true, j);
            let nv = numeric_gradient(&s_v.stages[j - 1], H, |x| {
                loss_cross(&t_v, &with_stage(&s_v, j, x), &s_r, &cfg).unwrap()
            });
            let nr = numeric_gradient(&s_r.stages[j - 1], H, |x| {
                loss_cross(&t_v, &s_v, &with_stage(&s_r, j, x), &cfg).unwrap()
            });
            assert!(relative_error(&gv, &nv) < TOL, "draw {draw} stage {j}");
            assert!(relative_error(&gr, &nr) < TOL, "draw {draw} stage {j}");
        }
    }
}

/// Graph form of a two-sided discriminator objective on scalar probabilities.
fn bce_graph(p: [f64; 2]) -> (f64, Tensor64) {
    let mut g = Graph::new();
    let pos = g.variable(Tensor64::scalar(p[0]));
    let neg = g.variable(Tensor64::scalar(p[1]));
    let a = g.neg_log_mean(pos, false, PROB_EPS);
    let b = g.neg_log_mean(neg, true, PROB_EPS);
    let l = g.add(a, b);
    let grads = g.backward(l);
    let grad = Tensor64::from_vec(
        [2, 1, 1, 1],
        vec![grads.get(pos).unwrap().value(), grads.get(neg).unwrap().value()],
    );
    (g.value(l).value(), grad)
}

pub fn discriminator_objective_gradients() {
    let objectives: [fn(f64, f64) -> ril_core::Result<f64>; 2] = [d_net_loss, d_data_loss];
    for f in objectives {
        for draw in 0..DRAWS {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
            let p = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            let (value, analytic) = bce_graph(p);
            assert!((value - f(p[0], p[1]).unwrap()).abs() < 1e-9);
            let x = Tensor64::from_vec([2, 1, 1, 1], p.to_vec());
            let numeric = numeric_gradient(&x, H, |t| f(t.data()[0], t.data()[1]).unwrap());
            assert!(relative_error(&analytic, &numeric) < TOL, "draw {draw}");
        }
    }
}

fn adv_module(mode: AdvMode, seed: u64) -> AdversarialModule<f64> {
    let cfg = AdvConfig {
        mode,
        observed_stage: Some(2),
        d_conv_layers: 2,
        d_width: 4,
        ..AdvConfig::default()
    };
    AdversarialModule::new(cfg, &spec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn discriminator_params_gradient(adv: &AdversarialModule<f64>, pos: &Tensor64, neg: &Tensor64, f: fn(f64, f64) -> ril_core::Result<f64>) {
    let d = adv.first().unwrap();
    let mut g = Graph::new();
    let b = d.params().bind(&mut g, true);
    let xp = g.constant(pos.clone());
    let xn = g.constant(neg.clone());
    let pp = d.forward(&mut g, &b, xp).unwrap();
    let pn = d.forward(&mut g, &b, xn).unwrap();
    let lp = g.neg_log_mean(pp, false, PROB_EPS);
    let ln = g.neg_log_mean(pn, true, PROB_EPS);
    let l = g.add(lp, ln);
    let grads = g.backward(l);
    let analytic = d.params().collect_grads(&b, &grads);
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(d.params().get(i), H, |w| {
            let mut d = d.clone();
            *d.params_mut().get_mut(i) = w.clone();
            f(prob(&d, pos), prob(&d, neg)).unwrap()
        });
        a_all.extend_from_slice(a.data());
        n_all.extend_from_slice(numeric.data());
    }
    let n = a_all.len();
    let err = relative_error(&Tensor64::from_vec([n, 1, 1, 1], a_all), &Tensor64::from_vec([n, 1, 1, 1], n_all));
    assert!(err < TOL, "relative error {err}");
}

pub fn discriminator_parameter_gradients() {
    let (c, h, w) = spec().stage_dims(2);
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + draw);
        let mut adv = adv_module(AdvMode::Coupled, draw);
        let d = adv.first_mut().unwrap();
        for i in 0..d.params().len() {
            let t = d.params().get(i);
            let noise = random(t.shape(), &mut rng).scale(0.5);
            d.params_mut().get_mut(i).add_assign(&noise);
        }
        let pos = random([1, c, h, w], &mut rng);
        let neg = random([1, c, h, w], &mut rng);
        discriminator_params_gradient(&adv, &pos, &neg, d_net_loss);
    }
}

/// Gradient of the student's adversarial term with respect to S_v and S_r.
fn generator_grads(adv: &AdversarialModule<f64>, t_v: &Tensor64, s_v: &Tensor64, s_r: &Tensor64) -> (f64, Tensor64, Tensor64) {
    let mut g = Graph::new();
    let sv = g.variable(s_v.clone());
    let sr = g.variable(s_r.clone());
    let vars = adv.generator_vars(&mut g, t_v, sv, sr).unwrap();
    let terms: Vec<Var> = [vars.net, vars.data].into_iter().flatten().collect();
    let total = g.sum_all(&terms).unwrap();
    let grads = g.backward(total);
    (
        g.value(total).value(),
        grads.get_or_zeros(sv, s_v.shape()),
        grads.get_or_zeros(sr, s_r.shape()),
    )
}

fn prob(d: &ril_core::model::Discriminator<f64>, x: &Tensor64) -> f64 {
    let mut g = Graph::new();
    let b = d.params().bind(&mut g, false);
    let v = g.constant(x.clone());
    let p = d.forward(&mut g, &b, v).unwrap();
    g.value(p).value()
}

pub fn generator_surrogate_gradient() {
    let (c, h, w) = spec().stage_dims(2);
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + draw);
        let adv = adv_module(AdvMode::Coupled, 1000 + draw);
        let t_v = random([1, c, h, w], &mut rng);
        let s_v = random([1, c, h, w], &mut rng);
        let s_r = random([1, c, h, w], &mut rng);
        let gw = adv.config().g_weight;
        let surrogate = |sv: &Tensor64, sr: &Tensor64| {
            gw * (fooling_loss(prob(adv.first().unwrap(), sv)).unwrap()
                + fooling_loss(prob(adv.second().unwrap(), sr)).unwrap())
        };
        let (value, gv, gr) = generator_grads(&adv, &t_v, &s_v, &s_r);
        assert!((value - surrogate(&s_v, &s_r)).abs() < 1e-9);
        let nv = numeric_gradient(&s_v, H, |x| surrogate(x, &s_r));
        let nr = numeric_gradient(&s_r, H, |x| surrogate(&s_v, x));
        assert!(relative_error(&gv, &nv) < TOL, "draw {draw}");
        assert!(relative_error(&gr, &nr) < TOL, "draw {draw}");
    }
}

pub fn lane_loss_gradient() {
    let weights = [0.4, 1.0, 1.0, 1.0, 1.0];
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + draw);
        let shape = [2, 5, 4, 4];
        let x0 = random(shape, &mut rng).scale(3.0);
        let labels: Vec<usize> = (0..2 * 16).map(|_| rng.random_range(0..5)).collect();
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let l = lane_loss_graph(&mut g, x, &labels, &weights).unwrap();
        let analytic = g.backward(l).get(x).unwrap().clone();
        let numeric = numeric_gradient(&x0, H, |t| lane_loss(t, &labels, &weights).unwrap());
        assert!(relative_error(&analytic, &numeric) < TOL, "draw {draw}");
    }
}

pub fn total_gradient_is_sum_of_term_gradients() {
    let cfg = distill_cfg(DistillMode::ScaleFusing);
    let j = 2;
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + draw);
        let t_v = pyramid(Provenance::TEACHER_VIRTUAL, 1, &mut rng);
        let s_v = pyramid(Provenance::STUDENT_VIRTUAL, 1, &mut rng);
        let s_r = pyramid(Provenance::STUDENT_REAL, 1, &mut rng);
        let adv = adv_module(AdvMode::Coupled, draw);
        // Each term alone, then all together, on fresh graphs.
        let run = |same: bool, cross: bool, gen: bool| -> (Tensor64, Tensor64) {
            let mut g = Graph::new();
            let sv: Vec<Var> = s_v.stages.iter().map(|t| g.variable(t.clone())).collect();
            let sr: Vec<Var> = s_r.stages.iter().map(|t| g.variable(t.clone())).collect();
            let d = distill_graph(&mut g, &t_v, &sv, &sr, &cfg).unwrap();
            let mut terms = Vec::new();
            if same {
                terms.push(d.same.unwrap());
            }
            if cross {
                terms.push(d.cross.unwrap());
            }
            if gen {
                let gv = adv.generator_vars(&mut g, &t_v.stages[j - 1], sv[j - 1], sr[j - 1]).unwrap();
                terms.extend([gv.net, gv.data].into_iter().flatten());
            }
            let total = g.sum_all(&terms).unwrap();
            let grads = g.backward(total);
            let shape = s_v.stages[j - 1].shape();
            (grads.get_or_zeros(sv[j - 1], shape), grads.get_or_zeros(sr[j - 1], shape))
        };
        let (tv, tr) = run(true, true, true);
        let parts = [run(true, false, false), run(false, true, false), run(false, false, true)];
        let mut sv = Tensor64::zeros(tv.shape());
        let mut sr = Tensor64::zeros(tr.shape());
        for (a, b) in &parts {
            sv.add_assign(a);
            sr.add_assign(b);
        }
        assert!(tv.max_abs_diff(&sv) < 1e-12, "draw {draw}");
        assert!(tr.max_abs_diff(&sr) < 1e-12, "draw {draw}");
    }
}
