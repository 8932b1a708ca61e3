//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.
//! Inputs that do not require a gradient (frozen weights, detached
//! features) are pruned from the sweep.

use crate::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffers per batch item, kept only when the weight needs a gradient.
        cols: Vec<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        /// `(x - shift) * scale` before `gamma`/`beta`.
        shift: Vec<T>,
        scale: Vec<T>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    MseTo {
        x: Var,
        target: Tensor<T>,
    },
    NegLog {
        p: Var,
        complement: bool,
        eps: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Cross-correlation with a `[c_out, c_in, k, k]` kernel, zero padding and
    /// an optional `[1, c_out, 1, 1]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, c, h, wd] = self.value(x).shape();
        let [co, ci, k, k2] = self.value(w).shape();
        assert_eq!(ci, c, "conv2d input channels {c} != kernel channels {ci}");
        assert_eq!(k, k2, "conv2d expects square kernels");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let ck = c * k * k;
        let plane = ho * wo;
        let keep_cols = self.rg(w);
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let mut kept = Vec::new();
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let mut cols = vec![T::zero(); ck * plane];
            for item in 0..n {
                im2col(xv.item(item), c, h, wd, k, stride, pad, ho, wo, &mut cols);
                let dst = out.item_mut(item);
                T::gemm(
                    co,
                    ck,
                    plane,
                    T::one(),
                    wv,
                    ck as isize,
                    1,
                    &cols,
                    plane as isize,
                    1,
                    T::zero(),
                    dst,
                    plane as isize,
                    1,
                );
                if keep_cols {
                    kept.push(cols.clone());
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), co, "conv2d bias length");
            let bias = bv.data().to_vec();
            for item in 0..n {
                let dst = out.item_mut(item);
                for (o, &bo) in bias.iter().enumerate() {
                    for v in &mut dst[o * plane..(o + 1) * plane] {
                        *v += bo;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                cols: kept,
            },
            rg,
        )
    }

    /// Training-mode batch normalization over `(n, h, w)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let m = n * plane;
        let mf = T::of(m as f64);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (ch, (mu, va)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let mut s = T::zero();
            for item in 0..n {
                s += xv.item(item)[ch * plane..(ch + 1) * plane].iter().copied().sum();
            }
            *mu = s / mf;
            let mut q = T::zero();
            for item in 0..n {
                for &v in &xv.item(item)[ch * plane..(ch + 1) * plane] {
                    let d = v - *mu;
                    q += d * d;
                }
            }
            *va = q / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(xv.shape());
        for item in 0..n {
            let src = xv.item(item);
            let off = item * c * plane;
            let dst = out.item_mut(item);
            for ch in 0..c {
                for i in ch * plane..(ch + 1) * plane {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[off + i] = xh;
                    dst[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let unbiased = if m > 1 {
            T::of(m as f64 / (m as f64 - 1.0))
        } else {
            T::one()
        };
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (v, stats)
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let scale: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(xv.shape());
        for item in 0..n {
            let src = xv.item(item);
            let dst = out.item_mut(item);
            for ch in 0..c {
                for i in ch * plane..(ch + 1) * plane {
                    dst[i] = g[ch] * (src[i] - running_mean[ch]) * scale[ch] + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                shift: running_mean.to_vec(),
                scale,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2 { x }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for item in 0..n {
            data.extend_from_slice(av.item(item));
            data.extend_from_slice(bv.item(item));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat { a, b }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let out = Tensor::from_fn([n, c, 1, 1], |i| {
            xv.data()[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv
        });
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Class-weighted softmax cross-entropy averaged over all pixels.
    ///
    /// `labels` holds one class index per `(n, y, x)` in NHW order; pixel `p`
    /// contributes `weights[label_p] * -ln softmax(logits_p)[label_p]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Var {
        let lv = self.value(logits);
        let [n, k, h, w] = lv.shape();
        let plane = h * w;
        assert_eq!(labels.len(), n * plane, "one label per pixel expected");
        assert_eq!(weights.len(), k, "one weight per class expected");
        let probs = softmax_channels(lv);
        let mut total = T::zero();
        for item in 0..n {
            for p in 0..plane {
                let y = labels[item * plane + p];
                assert!(y < k, "label {y} out of range for {k} classes");
                let pr = probs[(item * k + y) * plane + p];
                total += -weights[y] * pr.max(T::min_positive_value()).ln();
            }
        }
        let loss = total / T::of((n * plane) as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Mean squared difference to a constant target.
    pub fn mse_to(&mut self, x: Var, target: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse_to shape mismatch");
        let n = T::of(xv.len() as f64);
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(loss),
            Op::MseTo {
                x,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Mean of `-ln(p)` (or `-ln(1 - p)` with `complement`) with `p` clamped
    /// to `[eps, 1 - eps]`.
    pub fn neg_log_mean(&mut self, p: Var, complement: bool, eps: T) -> Var {
        let pv = self.value(p);
        let n = T::of(pv.len() as f64);
        let lo = eps;
        let hi = T::one() - eps;
        let loss = pv
            .data()
            .iter()
            .map(|&v| {
                let c = v.max(lo).min(hi);
                if complement {
                    -(T::one() - c).ln()
                } else {
                    -c.ln()
                }
            })
            .sum::<T>()
            / n;
        let rg = self.rg(p);
        self.push(Tensor::scalar(loss), Op::NegLog { p, complement, eps }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Sum of several same-shaped nodes; `None` for an empty list.
    pub fn sum_all(&mut self, vars: &[Var]) -> Option<Var> {
        let (&first, rest) = vars.split_first()?;
        Some(rest.iter().fold(first, |acc, &v| self.add(acc, v)))
    }

    /// Reverse sweep from a scalar `loss`, seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [n, c, h, wd] = xv.shape();
                let [co, _, k, _] = wv.shape();
                let [_, _, ho, wo] = node.value.shape();
                let plane = ho * wo;
                let ck = c * k * k;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = Tensor::zeros([1, co, 1, 1]);
                        for item in 0..n {
                            let gi = g.item(item);
                            for o in 0..co {
                                db.data_mut()[o] += gi[o * plane..(o + 1) * plane].iter().copied().sum();
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for (item, col) in cols.iter().enumerate().take(n) {
                        T::gemm(
                            co,
                            plane,
                            ck,
                            T::one(),
                            g.item(item),
                            plane as isize,
                            1,
                            col,
                            1,
                            plane as isize,
                            T::one(),
                            dw.data_mut(),
                            ck as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dcols = vec![T::zero(); ck * plane];
                    for item in 0..n {
                        T::gemm(
                            ck,
                            co,
                            plane,
                            T::one(),
                            wv.data(),
                            1,
                            ck as isize,
                            g.item(item),
                            plane as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            plane as isize,
                            1,
                        );
                        col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo, dx.item_mut(item));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = g.shape();
                let plane = h * w;
                let m = T::of((n * plane) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for item in 0..n {
                    let gi = g.item(item);
                    let off = item * c * plane;
                    for ch in 0..c {
                        for i in ch * plane..(ch + 1) * plane {
                            sum_g[ch] += gi[i];
                            sum_gx[ch] += gi[i] * xhat[off + i];
                        }
                    }
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, Tensor::from_vec([1, c, 1, 1], sum_g.clone()));
                }
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::from_vec([1, c, 1, 1], sum_gx.clone()));
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(g.shape());
                    for item in 0..n {
                        let gi = g.item(item);
                        let off = item * c * plane;
                        let dst = dx.item_mut(item);
                        for ch in 0..c {
                            let coef = gam[ch] * inv_std[ch] / m;
                            for i in ch * plane..(ch + 1) * plane {
                                dst[i] = coef * (m * gi[i] - sum_g[ch] - xhat[off + i] * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                shift,
                scale,
            } => {
                let xv = self.value(*x);
                let [n, c, h, w] = g.shape();
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut dx = Tensor::zeros(g.shape());
                for item in 0..n {
                    let gi = g.item(item);
                    let xi = xv.item(item);
                    let dst = dx.item_mut(item);
                    for ch in 0..c {
                        for i in ch * plane..(ch + 1) * plane {
                            db[ch] += gi[i];
                            dg[ch] += gi[i] * (xi[i] - shift[ch]) * scale[ch];
                            dst[i] = gi[i] * gam[ch] * scale[ch];
                        }
                    }
                }
                self.accumulate(grads, *beta, Tensor::from_vec([1, c, 1, 1], db));
                self.accumulate(grads, *gamma, Tensor::from_vec([1, c, 1, 1], dg));
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * *slope })
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2 { x } => {
                let [n, c, h, w] = self.value(*x).shape();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let src = g.data();
                let dst = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(p * h + y) * w + xx] = src[(p * ho + y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let src = g.data();
                let dst = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(p * h + y / 2) * w + xx / 2] += src[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let la = sa[1] * sa[2] * sa[3];
                let lb = sb[1] * sb[2] * sb[3];
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(sa[0] * la);
                    for item in 0..sa[0] {
                        da.extend_from_slice(&g.item(item)[..la]);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(sa, da));
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(sb[0] * lb);
                    for item in 0..sb[0] {
                        db.extend_from_slice(&g.item(item)[la..la + lb]);
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(sb, db));
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let inv = T::one() / T::of(plane as f64);
                let dx = Tensor::from_fn(s, |i| g.data()[i / plane] * inv);
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                weights,
            } => {
                let s = self.value(*logits).shape();
                let [n, k, h, w] = s;
                let plane = h * w;
                let scale = g.value() / T::of((n * plane) as f64);
                let mut dl = probs.clone();
                for item in 0..n {
                    for p in 0..plane {
                        let y = labels[item * plane + p];
                        let wt = weights[y] * scale;
                        for cls in 0..k {
                            let i = (item * k + cls) * plane + p;
                            dl[i] *= wt;
                        }
                        dl[(item * k + y) * plane + p] -= wt;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(s, dl));
            }
            Op::MseTo { x, target } => {
                let xv = self.value(*x);
                let coef = T::of(2.0) * g.value() / T::of(xv.len() as f64);
                let dx = Tensor::from_vec(
                    xv.shape(),
                    xv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| coef * (a - b))
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::NegLog { p, complement, eps } => {
                let pv = self.value(*p);
                let coef = g.value() / T::of(pv.len() as f64);
                let lo = *eps;
                let hi = T::one() - *eps;
                let dx = pv.map(|v| {
                    if v < lo || v > hi {
                        T::zero()
                    } else if *complement {
                        coef / (T::one() - v)
                    } else {
                        -coef / v
                    }
                });
                self.accumulate(grads, *p, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.scale(*c));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// 2x2 mean pooling outside any graph.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let src = x.data();
    Tensor::from_fn([n, c, ho, wo], |i| {
        let p = i / (ho * wo);
        let r = i % (ho * wo);
        let (y, xx) = (2 * (r / wo), 2 * (r % wo));
        let base = p * h * w;
        (src[base + y * w + xx]
            + src[base + y * w + xx + 1]
            + src[base + (y + 1) * w + xx]
            + src[base + (y + 1) * w + xx + 1])
            * quarter
    })
}

/// Softmax over the channel axis, returned flat in NCHW order.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<T> {
    let [n, k, h, w] = logits.shape();
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for item in 0..n {
        for p in 0..plane {
            let base = item * k * plane + p;
            let mut mx = T::neg_infinity();
            for cls in 0..k {
                mx = mx.max(src[base + cls * plane]);
            }
            let mut z = T::zero();
            for cls in 0..k {
                let e = (src[base + cls * plane] - mx).exp();
                out[base + cls * plane] = e;
                z += e;
            }
            for cls in 0..k {
                out[base + cls * plane] /= z;
            }
        }
    }
    out
}
