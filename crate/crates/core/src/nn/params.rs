use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use crate::{Scalar, Tensor};

/// Named trainable arrays plus non-trainable buffers (batch-norm running
/// statistics). Order is fixed at construction so that parameter index `i`
/// means the same array across networks built from the same spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

/// Parameters placed on a graph, either as variables or as constants.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push((name.into(), value));
        self.params.len() - 1
    }

    pub fn push_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.buffers.push((name.into(), value));
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].0
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].1
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].1
    }

    pub fn buffer(&self, idx: usize) -> &Tensor<T> {
        &self.buffers[idx].1
    }

    pub fn buffer_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.buffers[idx].1
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Place every parameter on `g`. With `trainable == false` they become
    /// constants and no gradient can reach them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every parameter, zero-filled where none arrived.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|((_, t), &v)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of parameters and
    /// buffers.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.params.iter().chain(&self.buffers) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Checksum of trainable parameters only.
    pub fn param_checksum(&self) -> String {
        let trimmed = ParamSet {
            params: self.params.clone(),
            buffers: Vec::new(),
        };
        trimmed.checksum()
    }
}

/// He-normal initialisation for a `[c_out, c_in, k, k]` kernel.
pub fn he_normal<T: Scalar>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParamSet::<f32>::new();
        a.push("w", Tensor::full([1, 1, 2, 2], 1.0));
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut(0).data_mut()[3] = 1.0000001;
        assert_ne!(a.checksum(), b.checksum());
        let mut c = ParamSet::<f32>::new();
        c.push("v", Tensor::full([1, 1, 2, 2], 1.0));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::full([1, 1, 1, 1], 2.0));
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.conv2d(x, bound.get(0), None, 1, 0);
        let grads = g.backward(y);
        assert!(grads.get(bound.get(0)).is_none());
        assert_eq!(grads.get(x).unwrap().value(), 2.0);
    }

    #[test]
    fn he_normal_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = he_normal([64, 16, 3, 3], &mut rng);
        let var = t.sq_norm() / t.len() as f64;
        assert!((var - 2.0 / 144.0).abs() < 0.2 * 2.0 / 144.0, "{var}");
    }
}
