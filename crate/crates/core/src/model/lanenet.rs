use rand::Rng;

use super::{BackboneSpec, FeaturePyramid, Provenance, BN_EPS, BN_MOMENTUM, NUM_CLASSES};
use crate::nn::{he_normal, BatchStats, Bound, Graph, ParamSet, Var};
use crate::{Error, Result, Scalar, Tensor};

/// conv3x3 -> batch norm -> relu block; indices into the owning `ParamSet`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    w: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

/// Segmentation network. The encoder stage `j` is
/// `conv3x3 -> BN -> ReLU -> avgpool2`; the decoder upsamples, merges the
/// skip from the matching stage and ends in a 1x1 head at half resolution
/// whose logits are upsampled to the input size.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneNet<T> {
    spec: BackboneSpec,
    params: ParamSet<T>,
    enc: Vec<Block>,
    dec: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

/// Vars of one pass through the network on a graph.
#[derive(Debug, Clone)]
pub struct NetPass<T> {
    /// Stage outputs `F_1..F_J`.
    pub stages: Vec<Var>,
    pub logits: Var,
    /// Batch statistics per normalisation layer (training mode only).
    pub stats: Vec<BatchStats<T>>,
}

fn push_block<T: Scalar>(p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Block {
    Block {
        w: p.push(format!("{name}.conv.w"), he_normal([cout, cin, 3, 3], rng)),
        gamma: p.push(format!("{name}.bn.gamma"), Tensor::full([1, cout, 1, 1], T::one())),
        beta: p.push(format!("{name}.bn.beta"), Tensor::zeros([1, cout, 1, 1])),
        mean: p.push_buffer(format!("{name}.bn.running_mean"), Tensor::zeros([1, cout, 1, 1])),
        var: p.push_buffer(format!("{name}.bn.running_var"), Tensor::full([1, cout, 1, 1], T::one())),
    }
}

impl<T: Scalar> LaneNet<T> {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamSet::new();
        let mut enc = Vec::with_capacity(spec.stages);
        let mut cin = 3;
        for j in 1..=spec.stages {
            let c = spec.stage_channels(j);
            enc.push(push_block(&mut p, &format!("enc{j}"), cin, c, rng));
            cin = c;
        }
        let mut dec = Vec::new();
        for j in (1..spec.stages).rev() {
            let c = spec.stage_channels(j);
            dec.push(push_block(&mut p, &format!("dec{j}"), cin + c, c, rng));
            cin = c;
        }
        let head_w = p.push("head.w", he_normal([NUM_CLASSES, cin, 1, 1], rng));
        let head_b = p.push("head.b", Tensor::zeros([1, NUM_CLASSES, 1, 1]));
        Ok(Self {
            spec,
            params: p,
            enc,
            dec,
            head_w,
            head_b,
        })
    }

    /// Rebuild from a parameter set laid out by [`LaneNet::new`] with the same spec.
    pub(crate) fn from_params(spec: BackboneSpec, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(spec, &mut rng)?;
        let names_match = net.params.len() == params.len()
            && net
                .params
                .params()
                .zip(params.params())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
            && net
                .params
                .buffers()
                .zip(params.buffers())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
            && net.params.buffers().count() == params.buffers().count();
        if !names_match {
            return Err(Error::Checkpoint("parameter table does not match the backbone layout".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn block(&self, g: &mut Graph<T>, b: &Bound, blk: Block, x: Var, train: bool, stats: &mut Vec<BatchStats<T>>) -> Var {
        let y = g.conv2d(x, b.get(blk.w), None, 1, 1);
        let eps = T::of(BN_EPS);
        let y = if train {
            let (y, st) = g.batch_norm(y, b.get(blk.gamma), b.get(blk.beta), eps);
            stats.push(st);
            y
        } else {
            g.batch_norm_eval(
                y,
                b.get(blk.gamma),
                b.get(blk.beta),
                self.params.buffer(blk.mean).data(),
                self.params.buffer(blk.var).data(),
                eps,
            )
        };
        g.relu(y)
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != 3 || (h, w) != self.spec.input_dims {
            return Err(Error::Dimension(format!(
                "input {c}x{h}x{w}, network expects 3x{}x{}",
                self.spec.input_dims.0, self.spec.input_dims.1
            )));
        }
        Ok(())
    }

    /// Encoder stages on `g`.
    pub fn backbone(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Vec<Var>> {
        self.check_input(g.value(x).shape())?;
        let mut out = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for &blk in &self.enc {
            let y = self.block(g, b, blk, h, train, stats);
            h = g.avg_pool2(y);
            out.push(h);
        }
        Ok(out)
    }

    /// Decoder and head from stage vars; logits at input resolution.
    pub fn decoder(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        stages: &[Var],
        train: bool,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        if stages.len() != self.spec.stages {
            return Err(Error::Dimension(format!(
                "{} stages given, network has {}",
                stages.len(),
                self.spec.stages
            )));
        }
        for (i, &s) in stages.iter().enumerate() {
            let (c, h, w) = self.spec.stage_dims(i + 1);
            let [_, sc, sh, sw] = g.value(s).shape();
            if (sc, sh, sw) != (c, h, w) {
                return Err(Error::Dimension(format!(
                    "stage {} is {sc}x{sh}x{sw}, expected {c}x{h}x{w}",
                    i + 1
                )));
            }
        }
        let mut d = stages[stages.len() - 1];
        for (i, &blk) in self.dec.iter().enumerate() {
            let skip = stages[stages.len() - 2 - i];
            let up = g.upsample2(d);
            let cat = g.concat_channels(up, skip);
            d = self.block(g, b, blk, cat, train, stats);
        }
        let logits = g.conv2d(d, b.get(self.head_w), Some(b.get(self.head_b)), 1, 0);
        Ok(g.upsample2(logits))
    }

    /// Full pass. In training mode batch statistics are used and returned.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var, train: bool) -> Result<NetPass<T>> {
        let mut stats = Vec::new();
        let stages = self.backbone(g, b, x, train, &mut stats)?;
        let logits = self.decoder(g, b, &stages, train, &mut stats)?;
        Ok(NetPass { stages, logits, stats })
    }

    /// Fold one pass's batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::of(BN_MOMENTUM);
        let blocks: Vec<Block> = self.enc.iter().chain(&self.dec).copied().collect();
        for (blk, st) in blocks.iter().zip(stats) {
            for (r, &v) in self.params.buffer_mut(blk.mean).data_mut().iter_mut().zip(&st.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in self.params.buffer_mut(blk.var).data_mut().iter_mut().zip(&st.var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }

    /// Inference-mode backbone features, tagged with `provenance`.
    pub fn backbone_forward(&self, images: &Tensor<T>, provenance: Provenance) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let stages = self.backbone(&mut g, &b, x, false, &mut Vec::new())?;
        Ok(FeaturePyramid::new(
            stages.iter().map(|&v| g.value(v).clone()).collect(),
            provenance,
        ))
    }

    /// Inference-mode logits from a pyramid.
    pub fn segmentation_forward(&self, pyramid: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let stages: Vec<Var> = pyramid.stages.iter().map(|t| g.constant(t.clone())).collect();
        let logits = self.decoder(&mut g, &b, &stages, false, &mut Vec::new())?;
        Ok(g.value(logits).clone())
    }

    /// Inference-mode logits `[n, K+1, h, w]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, &b, x, false)?;
        Ok(g.value(pass.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_channels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(spec: BackboneSpec, seed: u64) -> LaneNet<f64> {
        LaneNet::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_images(n: usize, (h, w): (usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn stage_dims_follow_spec() {
        let spec = BackboneSpec {
            input_dims: (64, 64),
            ..Default::default()
        };
        let n = net(spec.clone(), 1);
        let p = n.backbone_forward(&random_images(1, (64, 64), 2), Provenance::STUDENT_REAL).unwrap();
        let dims: Vec<[usize; 4]> = p.stages.iter().map(|t| t.shape()).collect();
        assert_eq!(dims, vec![[1, 16, 32, 32], [1, 32, 16, 16], [1, 64, 8, 8], [1, 128, 4, 4]]);
    }

    #[test]
    fn inference_is_deterministic_and_shared_params_agree() {
        let spec = BackboneSpec {
            base_channels: 4,
            input_dims: (32, 32),
            ..Default::default()
        };
        let a = net(spec.clone(), 5);
        let b = a.clone();
        let x = random_images(2, (32, 32), 3);
        let pa = a.backbone_forward(&x, Provenance::TEACHER_VIRTUAL).unwrap();
        let pa2 = a.backbone_forward(&x, Provenance::TEACHER_VIRTUAL).unwrap();
        let pb = b.backbone_forward(&x, Provenance::STUDENT_VIRTUAL).unwrap();
        assert_eq!(pa, pa2);
        assert_eq!(pa.stages, pb.stages);
    }

    #[test]
    fn logits_have_class_channels_and_softmax_normalises() {
        let spec = BackboneSpec {
            base_channels: 4,
            input_dims: (32, 64),
            ..Default::default()
        };
        let n = net(spec, 7);
        let x = random_images(1, (32, 64), 9);
        let logits = n.predict(&x).unwrap();
        assert_eq!(logits.shape(), [1, NUM_CLASSES, 32, 64]);
        assert!(logits.all_finite());
        let p = softmax_channels(&logits);
        let plane = 32 * 64;
        for i in 0..plane {
            let s: f64 = (0..NUM_CLASSES).map(|k| p[k * plane + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let via_pyramid = n
            .segmentation_forward(&n.backbone_forward(&x, Provenance::STUDENT_REAL).unwrap())
            .unwrap();
        assert_eq!(via_pyramid, logits);
    }

    #[test]
    fn wrong_input_dims_rejected() {
        let n = net(
            BackboneSpec {
                base_channels: 2,
                input_dims: (32, 32),
                ..Default::default()
            },
            1,
        );
        assert!(matches!(
            n.predict(&random_images(1, (16, 32), 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let bad = BackboneSpec {
            input_dims: (60, 64),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(LaneNet::<f32>::new(bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn parameter_count_is_a_function_of_spec() {
        let spec = BackboneSpec {
            base_channels: 8,
            ..Default::default()
        };
        assert_eq!(net(spec.clone(), 1).param_count(), net(spec, 2).param_count());
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let spec = BackboneSpec {
            base_channels: 2,
            input_dims: (16, 16),
            ..Default::default()
        };
        let mut n: LaneNet<f64> = net(spec, 1);
        let before = n.checksum();
        let param_before = n.params().param_checksum();
        let mut g = Graph::new();
        let b = n.params().bind(&mut g, true);
        let x = g.constant(random_images(2, (16, 16), 4));
        let pass = n.forward(&mut g, &b, x, true).unwrap();
        assert_eq!(pass.stats.len(), 4 + 3);
        n.update_running_stats(&pass.stats);
        assert_ne!(n.checksum(), before);
        assert_eq!(n.params().param_checksum(), param_before);
    }
}
