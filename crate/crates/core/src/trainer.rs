//! Two-step schedule: supervised teacher training on repainted scenes, then
//! student imitation on paired real and repainted scenes with the teacher
//! frozen.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{AdvConfig, AdvMode, AdversarialModule, DiscriminatorLosses};
use crate::dataset::{LaneScene, SynthParams};
use crate::distill::{distill_graph, DistillConfig, DistillMode};
use crate::eval::{evaluate_split, EvalConfig, EvalReport};
use crate::model::{images_to_tensor, BackboneSpec, FeaturePyramid, LaneNet, NetPass, Provenance, NUM_CLASSES};
use crate::nn::{Bound, Graph, LrSchedule, Optimizer, OptimizerKind, Var};
use crate::repaint::RepaintConfig;
use crate::{Error, Result, Scalar, Tensor};

/// Multipliers on the terms of the total objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    /// Lane loss on the student's real-input prediction.
    pub lane: f64,
    /// Lane loss on the student's virtual-input prediction.
    pub lane_virtual: f64,
    pub distill: f64,
    pub adv: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            lane: 1.0,
            lane_virtual: 1.0,
            distill: 1.0,
            adv: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Unset: a single x0.1 decay at 75% of each phase's epochs.
    pub lr_schedule: Option<LrSchedule>,
    pub optimizer: OptimizerKind,
    /// Cross-entropy weight per class, background first.
    pub lane_loss_weights: Vec<f64>,
    pub terms: TermWeights,
    pub distill: DistillConfig,
    pub adv: AdvConfig,
    pub repaint: RepaintConfig,
    pub backbone: BackboneSpec,
    /// Evaluate on the held-out split every this many student epochs; 0 only
    /// at the end.
    pub eval_interval: usize,
    pub eval: EvalConfig,
    /// Synthetic data used when no dataset root is given.
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training split generator.
    pub synth: SynthParams,
    pub test_count: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthParams {
                count: 512,
                ..SynthParams::default()
            },
            test_count: 256,
            test_seed: 1_000_003,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate().map_err(|e| nested("synth", e))?;
        if self.synth.count == 0 {
            return Err(Error::config("synth.count", "must be at least 1"));
        }
        Ok(())
    }

    /// Held-out split parameters: same generator, another seed and prefix.
    pub fn test_params(&self) -> SynthParams {
        SynthParams {
            seed: self.test_seed,
            count: self.test_count,
            id_prefix: format!("{}test/", self.synth.id_prefix),
            ..self.synth.clone()
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_teacher: 8,
            epochs_student: 8,
            batch_size: 8,
            learning_rate: 0.01,
            lr_schedule: None,
            optimizer: OptimizerKind::default(),
            lane_loss_weights: vec![0.4, 1.0, 1.0, 1.0, 1.0],
            terms: TermWeights::default(),
            distill: DistillConfig::default(),
            adv: AdvConfig::default(),
            repaint: RepaintConfig::default(),
            backbone: BackboneSpec {
                base_channels: 8,
                ..BackboneSpec::default()
            },
            eval_interval: 0,
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

pub(crate) fn nested(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { key, msg } => Error::Config {
            key: format!("{prefix}.{key}"),
            msg,
        },
        other => other,
    }
}

fn finite_nonneg(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and >= 0, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_teacher == 0 {
            return Err(Error::config("epochs_teacher", "must be at least 1"));
        }
        if self.epochs_student == 0 {
            return Err(Error::config("epochs_student", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if let Some(LrSchedule::Step { gamma, every }) = self.lr_schedule {
            finite_nonneg("lr_schedule.gamma", gamma)?;
            if every == 0 {
                return Err(Error::config("lr_schedule.every", "must be at least 1"));
            }
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
            }
            OptimizerKind::Adaptive { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                return Err(Error::config("optimizer", "betas must lie in [0, 1) and eps be positive"));
            }
            _ => {}
        }
        if self.lane_loss_weights.len() != NUM_CLASSES {
            return Err(Error::config(
                "lane_loss_weights",
                format!("expected {NUM_CLASSES} weights, got {}", self.lane_loss_weights.len()),
            ));
        }
        for (i, &w) in self.lane_loss_weights.iter().enumerate() {
            finite_nonneg(&format!("lane_loss_weights[{i}]"), w)?;
        }
        finite_nonneg("terms.lane", self.terms.lane)?;
        finite_nonneg("terms.lane_virtual", self.terms.lane_virtual)?;
        finite_nonneg("terms.distill", self.terms.distill)?;
        finite_nonneg("terms.adv", self.terms.adv)?;
        self.backbone.validate().map_err(|e| nested("backbone", e))?;
        self.distill.validate(&self.backbone).map_err(|e| nested("distill", e))?;
        self.adv.validate(&self.backbone).map_err(|e| nested("adv", e))?;
        self.repaint.validate().map_err(|e| nested("repaint", e))?;
        self.eval.validate().map_err(|e| nested("eval", e))?;
        self.data.validate().map_err(|e| nested("data", e))?;
        Ok(())
    }

    fn schedule(&self, epochs: usize) -> LrSchedule {
        self.lr_schedule
            .unwrap_or_else(|| LrSchedule::step_at_three_quarters(epochs, 0.1))
    }

    /// Whether the student needs a virtual-input pass at all.
    pub fn uses_virtual(&self) -> bool {
        self.terms.lane_virtual > 0.0
            || (self.distill.mode != DistillMode::Off && self.terms.distill > 0.0)
            || self.adv.mode != AdvMode::Off
    }
}

/// Values of every term of one step, as they enter the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RilLosses {
    pub lane: f64,
    pub distill_same: f64,
    pub distill_cross: f64,
    pub adv_net: f64,
    pub adv_data: f64,
    pub total: f64,
    pub d_net: f64,
    pub d_data: f64,
}

impl RilLosses {
    fn mean(items: &[RilLosses]) -> RilLosses {
        let n = items.len().max(1) as f64;
        let mut m = RilLosses::default();
        for l in items {
            m.lane += l.lane / n;
            m.distill_same += l.distill_same / n;
            m.distill_cross += l.distill_cross / n;
            m.adv_net += l.adv_net / n;
            m.adv_data += l.adv_data / n;
            m.d_net += l.d_net / n;
            m.d_data += l.d_data / n;
        }
        m.total = m.lane + m.distill_same + m.distill_cross + m.adv_net + m.adv_data;
        m
    }

    pub fn all_finite(&self) -> bool {
        [
            self.lane,
            self.distill_same,
            self.distill_cross,
            self.adv_net,
            self.adv_data,
            self.total,
            self.d_net,
            self.d_data,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `lane + distill + adv`.
pub fn total_loss(lane: f64, distill: f64, adv: f64) -> Result<f64> {
    for (name, v) in [("lane", lane), ("distill", distill), ("adv", adv)] {
        if !v.is_finite() {
            return Err(Error::Invalid(format!("non-finite {name} loss {v}")));
        }
    }
    Ok(lane + distill + adv)
}

/// Per-pixel labels of a batch, NHW order.
pub fn scene_labels(scenes: &[&LaneScene]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in scenes {
        for &l in s.mask.data() {
            let l = l as usize;
            if l >= NUM_CLASSES {
                return Err(Error::LabelRange {
                    label: l,
                    classes: NUM_CLASSES,
                });
            }
            out.push(l);
        }
    }
    Ok(out)
}

/// Class-weighted pixel cross-entropy on a graph.
pub fn lane_loss_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let [n, k, h, w] = g.value(logits).shape();
    if labels.len() != n * h * w {
        return Err(Error::Dimension(format!(
            "{} labels for {n}x{h}x{w} logits",
            labels.len()
        )));
    }
    if weights.len() != k {
        return Err(Error::Dimension(format!("{} class weights for {k} classes", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelRange { label: bad, classes: k });
    }
    let w: Vec<T> = weights.iter().map(|&v| T::of(v)).collect();
    Ok(g.softmax_cross_entropy(logits, labels, &w))
}

/// Class-weighted pixel cross-entropy of constant logits.
pub fn lane_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = lane_loss_graph(&mut g, x, labels, weights)?;
    Ok(g.value(l).value().as_f64())
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    TeacherInit = 1,
    StudentInit = 2,
    TeacherOrder = 3,
    StudentOrder = 4,
    Discriminators = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Freshly initialised network for the run seed.
pub fn init_network<T: Scalar>(cfg: &RunConfig, stream: Stream) -> Result<LaneNet<T>> {
    LaneNet::new(cfg.backbone.clone(), &mut stream_rng(cfg.seed, stream))
}

/// Per-epoch summary; one JSON line in the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub losses: RilLosses,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-step losses.
    pub trace: Vec<RilLosses>,
    pub epochs: Vec<EpochMetrics>,
    pub checksum: String,
    /// Teacher checksum before and after, for imitation runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_eval: Option<EvalReport>,
}

/// Optional side channels of a training run.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Receives one JSON line per epoch.
    pub metrics: Option<&'a mut dyn Write>,
    /// Held-out scenes evaluated during student training.
    pub eval_scenes: Option<&'a [LaneScene]>,
}

impl Hooks<'_> {
    fn emit(&mut self, m: &EpochMetrics) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            let line = serde_json::to_string(m)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        Ok(())
    }
}

/// Inputs of one student step.
pub struct StudentBatch<T> {
    pub real: Tensor<T>,
    /// Paired repainted images; required when the config uses them.
    pub virtual_: Option<Tensor<T>>,
    pub labels: Vec<usize>,
    /// Frozen teacher features of the repainted images.
    pub teacher: Option<FeaturePyramid<T>>,
}

/// Graph nodes of one student step. Term vars are already weighted.
pub struct StepVars<T> {
    pub real: NetPass<T>,
    pub virtual_: Option<NetPass<T>>,
    pub lane: Var,
    pub distill_same: Option<Var>,
    pub distill_cross: Option<Var>,
    pub adv_net: Option<Var>,
    pub adv_data: Option<Var>,
    pub total: Var,
}

impl<T: Scalar> StepVars<T> {
    pub fn losses(&self, g: &Graph<T>, d: DiscriminatorLosses) -> Result<RilLosses> {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).value().as_f64());
        let lane = v(Some(self.lane));
        let (same, cross) = (v(self.distill_same), v(self.distill_cross));
        let (an, ad) = (v(self.adv_net), v(self.adv_data));
        Ok(RilLosses {
            lane,
            distill_same: same,
            distill_cross: cross,
            adv_net: an,
            adv_data: ad,
            total: total_loss(lane, same + cross, an + ad)?,
            d_net: d.d_net,
            d_data: d.d_data,
        })
    }
}

/// Build one imitation step on `g`. With `adv` given, its discriminators
/// take their update on detached features before the student terms are
/// formed against the updated discriminators.
pub fn student_step_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    student: &LaneNet<T>,
    batch: &StudentBatch<T>,
    cfg: &RunConfig,
    adv: Option<&mut AdversarialModule<T>>,
) -> Result<(StepVars<T>, DiscriminatorLosses)> {
    let xr = g.constant(batch.real.clone());
    let real = student.forward(g, b, xr, true)?;
    let mut lane = lane_loss_graph(g, real.logits, &batch.labels, &cfg.lane_loss_weights)?;
    lane = g.scale(lane, T::of(cfg.terms.lane));
    let mut out = StepVars {
        real,
        virtual_: None,
        lane,
        distill_same: None,
        distill_cross: None,
        adv_net: None,
        adv_data: None,
        total: lane,
    };
    let mut dl = DiscriminatorLosses::default();
    if !cfg.uses_virtual() {
        return Ok((out, dl));
    }
    let xv = batch
        .virtual_
        .as_ref()
        .ok_or_else(|| Error::Invalid("configuration needs paired virtual images".into()))?;
    let xv = g.constant(xv.clone());
    let virt = student.forward(g, b, xv, true)?;
    if cfg.terms.lane_virtual > 0.0 {
        let lv = lane_loss_graph(g, virt.logits, &batch.labels, &cfg.lane_loss_weights)?;
        let lv = g.scale(lv, T::of(cfg.terms.lane_virtual));
        out.lane = g.add(out.lane, lv);
    }
    let needs_teacher = cfg.distill.mode != DistillMode::Off || cfg.adv.mode != AdvMode::Off;
    let teacher = match (&batch.teacher, needs_teacher) {
        (Some(t), _) => Some(t),
        (None, false) => None,
        (None, true) => return Err(Error::Invalid("configuration needs teacher features".into())),
    };
    if let Some(t) = teacher {
        let dv = distill_graph(g, t, &virt.stages, &out.real.stages, &cfg.distill)?;
        let w = T::of(cfg.terms.distill);
        out.distill_same = dv.same.map(|v| g.scale(v, w));
        out.distill_cross = dv.cross.map(|v| g.scale(v, w));
    }
    if let (Some(m), Some(t)) = (adv, teacher) {
        if m.mode() != AdvMode::Off {
            let j = m.stage().expect("active module has a stage");
            let tv = t.stage(j)?;
            let sv = virt.stages[j - 1];
            let sr = out.real.stages[j - 1];
            let (svt, srt) = (g.value(sv).clone(), g.value(sr).clone());
            dl = m.discriminator_phase(tv, &svt, &srt)?;
            let gv = m.generator_vars(g, tv, sv, sr)?;
            let w = T::of(cfg.terms.adv);
            out.adv_net = gv.net.map(|v| g.scale(v, w));
            out.adv_data = gv.data.map(|v| g.scale(v, w));
        }
    }
    let terms: Vec<Var> = [
        Some(out.lane),
        out.distill_same,
        out.distill_cross,
        out.adv_net,
        out.adv_data,
    ]
    .into_iter()
    .flatten()
    .collect();
    out.total = g.sum_all(&terms).expect("lane term present");
    out.virtual_ = Some(virt);
    Ok((out, dl))
}

fn check_scenes(scenes: &[LaneScene], spec: &BackboneSpec, what: &str) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("{what} set is empty")));
    }
    for s in scenes {
        if s.dims() != spec.input_dims {
            return Err(Error::Dimension(format!(
                "scene `{}` is {:?}, network input is {:?}",
                s.id,
                s.dims(),
                spec.input_dims
            )));
        }
    }
    Ok(())
}

fn grads_finite<T: Scalar>(grads: &[Tensor<T>]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

fn divergence(step: usize, losses: &RilLosses, what: &str) -> Error {
    Error::Divergence {
        step,
        diagnostics: format!("{what}; losses {}", serde_json::to_string(losses).unwrap_or_default()),
    }
}

struct Pairing<'a, T> {
    virtual_: &'a [LaneScene],
    /// Per-scene teacher stages, `[1, c, h, w]` each.
    teacher: Option<Vec<Vec<Tensor<T>>>>,
}

struct Loop<'a, T: Scalar> {
    cfg: &'a RunConfig,
    phase: &'static str,
    epochs: usize,
    order: ChaCha8Rng,
    pairing: Option<Pairing<'a, T>>,
    adv: Option<AdversarialModule<T>>,
}

impl<T: Scalar> Loop<'_, T> {
    fn batch(&self, scenes: &[LaneScene], idx: &[usize]) -> Result<StudentBatch<T>> {
        let real: Vec<&LaneScene> = idx.iter().map(|&i| &scenes[i]).collect();
        let imgs: Vec<_> = real.iter().map(|s| &s.image).collect();
        let mut b = StudentBatch {
            real: images_to_tensor(&imgs)?,
            virtual_: None,
            labels: scene_labels(&real)?,
            teacher: None,
        };
        if let Some(p) = &self.pairing {
            if self.cfg.uses_virtual() {
                let imgs: Vec<_> = idx.iter().map(|&i| &p.virtual_[i].image).collect();
                b.virtual_ = Some(images_to_tensor(&imgs)?);
            }
            if let Some(cache) = &p.teacher {
                let stages = (0..self.cfg.backbone.stages)
                    .map(|j| {
                        let items: Vec<&Tensor<T>> = idx.iter().map(|&i| &cache[i][j]).collect();
                        Tensor::concat_batch(&items)
                    })
                    .collect();
                b.teacher = Some(FeaturePyramid::new(stages, Provenance::TEACHER_VIRTUAL));
            }
        }
        Ok(b)
    }

    fn run(&mut self, net: &mut LaneNet<T>, scenes: &[LaneScene], hooks: &mut Hooks) -> Result<TrainReport> {
        let cfg = self.cfg;
        let schedule = cfg.schedule(self.epochs);
        let mut opt = Optimizer::new(cfg.optimizer, net.params());
        let mut report = TrainReport {
            trace: Vec::new(),
            epochs: Vec::new(),
            checksum: String::new(),
            teacher_checksum: None,
            final_eval: None,
        };
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        for epoch in 0..self.epochs {
            let start = Instant::now();
            let lr = schedule.rate(cfg.learning_rate, epoch);
            order.shuffle(&mut self.order);
            let mut epoch_losses = Vec::new();
            for idx in order.chunks(cfg.batch_size) {
                let batch = self.batch(scenes, idx)?;
                let mut g = Graph::new();
                let b = net.params().bind(&mut g, true);
                let (vars, dl) = student_step_graph(&mut g, &b, net, &batch, cfg, self.adv.as_mut())?;
                let step = report.trace.len();
                let losses = vars.losses(&g, dl).map_err(|_| divergence(step, &RilLosses::default(), "non-finite loss"))?;
                if !losses.all_finite() {
                    return Err(divergence(step, &losses, "non-finite loss"));
                }
                let grads = g.backward(vars.total);
                let gs = net.params().collect_grads(&b, &grads);
                if !grads_finite(&gs) {
                    return Err(divergence(step, &losses, "non-finite gradient"));
                }
                opt.step(net.params_mut(), &gs, lr);
                net.update_running_stats(&vars.real.stats);
                report.trace.push(losses);
                epoch_losses.push(losses);
            }
            let last = epoch + 1 == self.epochs;
            let due = cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0;
            let mut eval_f1 = None;
            if let Some(scenes) = hooks.eval_scenes {
                if due || last {
                    let r = evaluate_split(net, scenes, &cfg.eval)?;
                    eval_f1 = Some(r.f1);
                    if last {
                        report.final_eval = Some(r);
                    }
                }
            }
            let m = EpochMetrics {
                phase: self.phase.into(),
                epoch: epoch + 1,
                steps: epoch_losses.len(),
                lr,
                losses: RilLosses::mean(&epoch_losses),
                eval_f1,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} epoch {}/{}: total {:.4} lane {:.4}{}",
                self.phase,
                m.epoch,
                self.epochs,
                m.losses.total,
                m.losses.lane,
                eval_f1.map(|f| format!(" f1 {f:.4}")).unwrap_or_default()
            );
            hooks.emit(&m)?;
            report.epochs.push(m);
        }
        report.checksum = net.checksum();
        Ok(report)
    }
}

/// Supervised training on `scenes` with the lane loss alone. On error the
/// network holds the last finite state.
pub fn train_teacher<T: Scalar>(
    net: &mut LaneNet<T>,
    virtual_: &[LaneScene],
    cfg: &RunConfig,
    hooks: &mut Hooks,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_scenes(virtual_, net.spec(), "virtual")?;
    let teacher_cfg = RunConfig {
        terms: TermWeights {
            lane: 1.0,
            lane_virtual: 0.0,
            ..cfg.terms.clone()
        },
        distill: DistillConfig::off(),
        adv: AdvConfig::off(),
        ..cfg.clone()
    };
    let mut lp = Loop {
        cfg: &teacher_cfg,
        phase: "teacher",
        epochs: cfg.epochs_teacher,
        order: stream_rng(cfg.seed, Stream::TeacherOrder),
        pairing: None,
        adv: None,
    };
    // the teacher is never scored on the real split while it trains
    let held_out = hooks.eval_scenes.take();
    let out = lp.run(net, virtual_, hooks);
    hooks.eval_scenes = held_out;
    out
}

/// Teacher features of every scene, one `[1, c, h, w]` tensor per stage.
fn teacher_cache<T: Scalar>(teacher: &LaneNet<T>, scenes: &[LaneScene], chunk: usize) -> Result<Vec<Vec<Tensor<T>>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for part in scenes.chunks(chunk.max(1)) {
        let imgs: Vec<_> = part.iter().map(|s| &s.image).collect();
        let pyr = teacher.backbone_forward(&images_to_tensor(&imgs)?, Provenance::TEACHER_VIRTUAL)?;
        for i in 0..part.len() {
            out.push(pyr.stages.iter().map(|t| t.slice_batch(i..i + 1)).collect());
        }
    }
    Ok(out)
}

/// Student result with the trained discriminators.
pub struct StudentRun<T> {
    pub report: TrainReport,
    pub discriminators: Option<AdversarialModule<T>>,
}

/// Imitation step: `real[i]` and `virtual_[i]` are the same scene. The
/// teacher is only read; its checksum is verified before returning.
pub fn train_student<T: Scalar>(
    student: &mut LaneNet<T>,
    teacher: &LaneNet<T>,
    real: &[LaneScene],
    virtual_: &[LaneScene],
    cfg: &RunConfig,
    hooks: &mut Hooks,
) -> Result<StudentRun<T>> {
    cfg.validate()?;
    check_scenes(real, student.spec(), "real")?;
    if student.spec() != teacher.spec() {
        return Err(Error::Invalid("teacher and student backbones differ".into()));
    }
    let before = teacher.checksum();
    let paired = cfg.uses_virtual();
    if paired {
        check_scenes(virtual_, student.spec(), "virtual")?;
        if real.len() != virtual_.len() {
            return Err(Error::Invalid(format!(
                "{} real scenes but {} virtual scenes",
                real.len(),
                virtual_.len()
            )));
        }
        if let Some((r, v)) = real.iter().zip(virtual_).find(|(r, v)| v.base_id() != r.base_id()) {
            return Err(Error::Invalid(format!("scene `{}` is paired with `{}`", r.id, v.id)));
        }
    }
    let needs_teacher = cfg.distill.mode != DistillMode::Off || cfg.adv.mode != AdvMode::Off;
    let cache = if paired && needs_teacher {
        Some(teacher_cache(teacher, virtual_, cfg.eval.batch_size)?)
    } else {
        None
    };
    let adv = if cfg.adv.mode == AdvMode::Off {
        None
    } else {
        Some(AdversarialModule::new(
            cfg.adv.clone(),
            &cfg.backbone,
            &mut stream_rng(cfg.seed, Stream::Discriminators),
        )?)
    };
    let mut lp = Loop {
        cfg,
        phase: "student",
        epochs: cfg.epochs_student,
        order: stream_rng(cfg.seed, Stream::StudentOrder),
        pairing: paired.then_some(Pairing {
            virtual_,
            teacher: cache,
        }),
        adv,
    };
    let mut report = lp.run(student, real, hooks)?;
    let after = teacher.checksum();
    if after != before {
        return Err(Error::Invalid("teacher parameters changed during imitation".into()));
    }
    report.teacher_checksum = Some(after);
    Ok(StudentRun {
        report,
        discriminators: lp.adv,
    })
}
