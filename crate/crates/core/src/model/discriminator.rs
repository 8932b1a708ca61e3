use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, FeaturePyramid};
use crate::nn::{he_normal, Bound, Graph, ParamSet, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Leaky ReLU slope between discriminator convolutions.
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    /// Backbone stage fed to the discriminator; deepest when unset.
    pub observed_stage: Option<usize>,
    pub conv_layers: usize,
    pub width: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            observed_stage: None,
            conv_layers: 3,
            width: 32,
        }
    }
}

impl DiscriminatorSpec {
    pub fn stage(&self, backbone: &BackboneSpec) -> usize {
        self.observed_stage.unwrap_or(backbone.stages)
    }

    pub fn validate(&self, backbone: &BackboneSpec) -> Result<()> {
        let j = self.stage(backbone);
        if j == 0 || j > backbone.stages {
            return Err(Error::config(
                "observed_stage",
                format!("stage {j} outside 1..={}", backbone.stages),
            ));
        }
        if self.conv_layers == 0 {
            return Err(Error::config("conv_layers", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("width", "must be positive"));
        }
        Ok(())
    }
}

/// Feature-map classifier: stride-2 conv + leaky ReLU layers, global
/// average pooling, a linear unit and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    stage: usize,
    in_channels: usize,
    params: ParamSet<T>,
}

impl<T: Scalar> Discriminator<T> {
    /// The final linear unit starts at zero, so an untrained discriminator
    /// outputs exactly 0.5.
    pub fn new(spec: DiscriminatorSpec, backbone: &BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate(backbone)?;
        let stage = spec.stage(backbone);
        let in_channels = backbone.stage_channels(stage);
        let mut p = ParamSet::new();
        let mut cin = in_channels;
        for i in 0..spec.conv_layers {
            p.push(format!("conv{i}.w"), he_normal([spec.width, cin, 3, 3], rng));
            p.push(format!("conv{i}.b"), Tensor::zeros([1, spec.width, 1, 1]));
            cin = spec.width;
        }
        p.push("fc.w", Tensor::zeros([1, cin, 1, 1]));
        p.push("fc.b", Tensor::zeros([1, 1, 1, 1]));
        Ok(Self {
            spec,
            stage,
            in_channels,
            params: p,
        })
    }

    pub(crate) fn from_params(
        spec: DiscriminatorSpec,
        backbone: &BackboneSpec,
        params: ParamSet<T>,
    ) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut d = Self::new(spec, backbone, &mut rng)?;
        let ok = d.params.len() == params.len()
            && d
                .params
                .params()
                .zip(params.params())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !ok {
            return Err(Error::Checkpoint("parameter table does not match the discriminator layout".into()));
        }
        d.params = params;
        Ok(d)
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Backbone stage this discriminator reads.
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Probabilities `[n, 1, 1, 1]` for a feature var on `g`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, features: Var) -> Result<Var> {
        let c = g.value(features).channels();
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "discriminator reads stage {} ({} channels), got {c} channels",
                self.stage, self.in_channels
            )));
        }
        let mut h = features;
        for i in 0..self.spec.conv_layers {
            h = g.conv2d(h, b.get(2 * i), Some(b.get(2 * i + 1)), 2, 1);
            h = g.leaky_relu(h, T::of(LEAK));
        }
        let pooled = g.global_avg_pool(h);
        let n = self.spec.conv_layers;
        let z = g.conv2d(pooled, b.get(2 * n), Some(b.get(2 * n + 1)), 1, 0);
        Ok(g.sigmoid(z))
    }

    /// Probabilities for the observed stage of `pyramid`, one per batch item.
    pub fn discriminate(&self, pyramid: &FeaturePyramid<T>) -> Result<Vec<T>> {
        let feat = pyramid.stage(self.stage)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(feat.clone());
        let p = self.forward(&mut g, &b, x)?;
        Ok(g.value(p).data().to_vec())
    }
}
