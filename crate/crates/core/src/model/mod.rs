//! Encoder-decoder lane segmenter with staged backbone features, feature
//! discriminators, row-wise lane decoding and checkpoint files.

mod checkpoint;
mod decode;
mod discriminator;
mod lanenet;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{RgbImage, K_MAX};
use crate::{Error, Result, Scalar, Tensor};

pub use checkpoint::{
    load_discriminator, load_lanenet, read_checkpoint_header, save_discriminator, save_lanenet, CheckpointHeader,
    CHECKPOINT_VERSION,
};
pub use decode::{decode_lanes, DecodeConfig};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use lanenet::{LaneNet, NetPass};

/// Output classes: background plus one per lane slot.
pub const NUM_CLASSES: usize = K_MAX + 1;

/// Batch-norm epsilon shared by every normalisation layer.
pub const BN_EPS: f64 = 1e-5;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub stages: usize,
    pub base_channels: usize,
    /// `(height, width)`, both divisible by `2^stages`.
    pub input_dims: (usize, usize),
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stages: 4,
            base_channels: 16,
            input_dims: (64, 128),
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 8 {
            return Err(Error::config("stages", format!("must lie in 1..=8, got {}", self.stages)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        let f = 1usize << self.stages;
        let (h, w) = self.input_dims;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(
                "input_dims",
                format!("{h}x{w} is not divisible by 2^{} = {f}", self.stages),
            ));
        }
        Ok(())
    }

    /// Channels of stage `j` (1-based).
    pub fn stage_channels(&self, j: usize) -> usize {
        self.base_channels << (j - 1)
    }

    /// `(channels, height, width)` of stage `j` (1-based).
    pub fn stage_dims(&self, j: usize) -> (usize, usize, usize) {
        let (h, w) = self.input_dims;
        (self.stage_channels(j), h >> j, w >> j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Virtual,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub network: Network,
    pub data: Domain,
}

impl Provenance {
    pub const TEACHER_VIRTUAL: Provenance = Provenance {
        network: Network::Teacher,
        data: Domain::Virtual,
    };
    pub const STUDENT_VIRTUAL: Provenance = Provenance {
        network: Network::Student,
        data: Domain::Virtual,
    };
    pub const STUDENT_REAL: Provenance = Provenance {
        network: Network::Student,
        data: Domain::Real,
    };
    pub const TEACHER_REAL: Provenance = Provenance {
        network: Network::Teacher,
        data: Domain::Real,
    };
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self.network {
            Network::Teacher => "T",
            Network::Student => "S",
        };
        let d = match self.data {
            Domain::Virtual => "v",
            Domain::Real => "r",
        };
        write!(f, "{n}_{d}")
    }
}

/// Stage outputs `F_1..F_J` of one backbone pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub stages: Vec<Tensor<T>>,
    pub provenance: Provenance,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(stages: Vec<Tensor<T>>, provenance: Provenance) -> Self {
        Self { stages, provenance }
    }

    /// Stage `j`, 1-based.
    pub fn stage(&self, j: usize) -> Result<&Tensor<T>> {
        j.checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| Error::Dimension(format!("stage {j} not in a {}-stage pyramid", self.stages.len())))
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn expect(&self, p: Provenance) -> Result<()> {
        if self.provenance != p {
            return Err(Error::Provenance {
                expected: p.to_string(),
                got: self.provenance.to_string(),
            });
        }
        Ok(())
    }

    /// Elementwise scaling of every stage.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            stages: self.stages.iter().map(|t| t.scale(c)).collect(),
            provenance: self.provenance,
        }
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }
}

/// Stack images into a `[n, 3, h, w]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("empty image batch".into()));
    };
    let (h, w) = first.dims();
    let plane = h * w;
    let inv = T::of(1.0 / 255.0);
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.dims() != (h, w) {
            return Err(Error::Dimension(format!("image {n} is {:?}, batch is {h}x{w}", img.dims())));
        }
        let dst = &mut data[n * 3 * plane..(n + 1) * 3 * plane];
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + i] = T::of(px[c] as f64) * inv;
            }
        }
    }
    Ok(Tensor::from_vec([images.len(), 3, h, w], data))
}
