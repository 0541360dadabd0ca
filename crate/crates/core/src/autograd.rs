//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass. Leaves
//! are either trainable (gradients are produced for them) or constants.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table. Nodes that do not depend on a trainable leaf never receive a
//! gradient, so frozen networks cost only their data-gradient path.

use std::sync::Arc;

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution. Padding is `[top, bottom, left, right]`
/// zero padding, which allows the asymmetric "same" padding an even kernel needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: [usize; 4],
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: [pad; 4],
        }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize, pad_lo: usize, pad_hi: usize) -> Option<usize> {
        let padded = len + pad_lo + pad_hi;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.out_len(h, self.pad[0], self.pad[1])?,
            self.out_len(w, self.pad[2], self.pad[3])?,
        ))
    }
}

/// Geometry of a fractionally-strided (transposed) convolution with symmetric
/// padding. Output extent is `(in - 1) * stride - 2 * pad + kernel + output_pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTGeom,
    },
    ReflectPad {
        x: Var,
        pad: [usize; 4],
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // (mean, 1/std) per (n, c)
        stats: Vec<(T, T)>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Affine {
        x: Var,
        scale: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    MulConst {
        x: Var,
        factor: Arc<Tensor<T>>,
    },
    AddConst(Var),
    MeanAbsDiff(Var, Var),
    MeanSquaredTo {
        x: Var,
        target: T,
    },
    BceWithLogits {
        x: Var,
        target: T,
    },
    Coral {
        source: Var,
        target: Var,
        // centred descriptor matrices (d×n) and the covariance difference
        centred_s: Vec<T>,
        centred_t: Vec<T>,
        cov_diff: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.constant(Arc::new(value))
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.constant(value)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shared_value(&self, var: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[var.0].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, &parents)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvTGeom) -> Var {
        let out = conv_t2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::ConvT2d { x, w, b, geom }, &parents)
    }

    /// Mirror padding without repeating the border pixel. `pad` is
    /// `[top, bottom, left, right]` and each entry must be smaller than the
    /// corresponding extent.
    pub fn reflect_pad(&mut self, x: Var, pad: [usize; 4]) -> Var {
        let out = reflect_pad_forward(self.value(x), pad);
        self.push(out, Op::ReflectPad { x, pad }, &[x])
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let src = self.value(x);
        let (n, c, sh, sw) = src.dims4();
        assert!(
            top + h <= sh && left + w <= sw,
            "crop window outside tensor"
        );
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let od = out.data_mut();
        let sd = src.data();
        for plane in 0..n * c {
            for y in 0..h {
                let s0 = plane * sh * sw + (top + y) * sw + left;
                let o0 = plane * h * w + y * w;
                od[o0..o0 + w].copy_from_slice(&sd[s0..s0 + w]);
            }
        }
        self.push(out, Op::Crop { x, top, left }, &[x])
    }

    /// Per-sample, per-channel normalisation followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let src = self.value(x);
        let (n, c, h, w) = src.dims4();
        let hw = h * w;
        let count = T::from_usize(hw).unwrap();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), c, "instance norm scale length");
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut stats = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let ch = plane % c;
            let xs = &src.data()[plane * hw..(plane + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv_std = T::one() / (var + eps).sqrt();
            let os = &mut out.data_mut()[plane * hw..(plane + 1) * hw];
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = g[ch] * (v - mean) * inv_std + bt[ch];
            }
            stats.push((mean, inv_std));
        }
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    /// `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Arc<Tensor<T>>) -> Var {
        let out = self.value(x).zip_map(&factor, |p, q| p * q);
        self.push(out, Op::MulConst { x, factor }, &[x])
    }

    /// Elementwise sum with a constant of the same shape.
    pub fn add_const(&mut self, x: Var, offset: &Tensor<T>) -> Var {
        let out = self.value(x).zip_map(offset, |p, q| p + q);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mean_abs_diff shape mismatch");
        let total: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| (p - q).abs())
            .sum();
        let out = Tensor::scalar(total / T::from_usize(va.len()).unwrap());
        self.push(out, Op::MeanAbsDiff(a, b), &[a, b])
    }

    /// Mean of `(x - target)^2`, a scalar.
    pub fn mean_squared_to(&mut self, x: Var, target: T) -> Var {
        let v = self.value(x);
        let total: T = v.data().iter().map(|&p| (p - target) * (p - target)).sum();
        let out = Tensor::scalar(total / T::from_usize(v.len()).unwrap());
        self.push(out, Op::MeanSquaredTo { x, target }, &[x])
    }

    /// Binary cross-entropy on logits against a constant label, averaged over
    /// every element.
    pub fn bce_with_logits(&mut self, x: Var, target: T) -> Var {
        let out = Tensor::scalar(bce_with_logits_mean(self.value(x).data(), target));
        self.push(out, Op::BceWithLogits { x, target }, &[x])
    }

    /// Squared Frobenius distance between descriptor covariances, scaled by
    /// `1 / (4 d^2)`. Each `N×C×H×W` input contributes `N·H·W` descriptors of
    /// dimension `C`.
    pub fn coral(&mut self, source: Var, target: Var) -> Var {
        let s = self.value(source);
        let t = self.value(target);
        let (centred_s, cov_s, _) = centred_descriptors(s);
        let (centred_t, cov_t, _) = centred_descriptors(t);
        assert_eq!(
            s.shape()[1],
            t.shape()[1],
            "coral descriptor dimension mismatch"
        );
        let d = s.shape()[1];
        let cov_diff: Vec<T> = cov_s.iter().zip(&cov_t).map(|(&a, &b)| a - b).collect();
        let frob: T = cov_diff.iter().map(|&v| v * v).sum();
        let loss = frob / T::from_usize(4 * d * d).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::Coral {
                source,
                target,
                centred_s,
                centred_t,
                cov_diff,
            },
            &[source, target],
        )
    }

    /// `Σ weight_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, wt)| self.value(v).item() * wt)
            .fold(T::zero(), |a, b| a + b);
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            &parents,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        assert_eq!(root_value.len(), 1, "backward root must be a scalar");
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let accumulate =
            |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    grad,
                    *geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let (dx, dw, db) = conv_t2d_backward(
                    self.value(*x),
                    self.value(*w),
                    grad,
                    *geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::ReflectPad { x, pad } => {
                if self.wants(*x) {
                    let dx = reflect_pad_backward(self.value(*x).shape(), grad, *pad);
                    accumulate(grads, *x, dx);
                }
            }
            Op::Crop { x, top, left } => {
                if self.wants(*x) {
                    let src_shape = self.value(*x).shape();
                    let (n, c, sh, sw) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
                    let (_, _, h, w) = grad.dims4();
                    let mut dx = Tensor::zeros(src_shape);
                    let dd = dx.data_mut();
                    for plane in 0..n * c {
                        for y in 0..h {
                            let s0 = plane * sh * sw + (top + y) * sw + left;
                            let g0 = plane * h * w + y * w;
                            dd[s0..s0 + w].copy_from_slice(&grad.data()[g0..g0 + w]);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let src = self.value(*x);
                let (n, c, h, w) = src.dims4();
                let hw = h * w;
                let count = T::from_usize(hw).unwrap();
                let g = self.value(*gamma).data();
                let mut dx = self.wants(*x).then(|| Tensor::zeros(src.shape()));
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for plane in 0..n * c {
                    let ch = plane % c;
                    let (mean, inv_std) = stats[plane];
                    let xs = &src.data()[plane * hw..(plane + 1) * hw];
                    let gs = &grad.data()[plane * hw..(plane + 1) * hw];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&gv, &xv) in gs.iter().zip(xs) {
                        let xhat = (xv - mean) * inv_std;
                        sum_g += gv;
                        sum_gx += gv * xhat;
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    if let Some(dx) = dx.as_mut() {
                        let scale = g[ch] * inv_std / count;
                        let ds = &mut dx.data_mut()[plane * hw..(plane + 1) * hw];
                        for ((d, &gv), &xv) in ds.iter_mut().zip(gs).zip(xs) {
                            let xhat = (xv - mean) * inv_std;
                            *d = scale * (count * gv - sum_g - xhat * sum_gx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() });
                accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let dx = self
                    .value(*x)
                    .zip_map(grad, |v, g| if v > T::zero() { g } else { g * s });
                accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = node.value.zip_map(grad, |y, g| g * (T::one() - y * y));
                accumulate(grads, *x, dx);
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                accumulate(grads, *x, grad.map(|g| g * s));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, grad.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, grad.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, grad.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, grad.map(|g| -g));
                }
            }
            Op::MulConst { x, factor } => {
                accumulate(grads, *x, grad.zip_map(factor, |g, f| g * f));
            }
            Op::AddConst(x) => {
                accumulate(grads, *x, grad.clone());
            }
            Op::MeanAbsDiff(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let scale = grad.item() / T::from_usize(va.len()).unwrap();
                let sign = va.zip_map(vb, |p, q| {
                    if p > q {
                        scale
                    } else if p < q {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                if self.wants(*b) {
                    accumulate(grads, *b, sign.map(|v| -v));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, sign);
                }
            }
            Op::MeanSquaredTo { x, target } => {
                let v = self.value(*x);
                let scale = grad.item() * T::lit(2.0) / T::from_usize(v.len()).unwrap();
                let t = *target;
                accumulate(grads, *x, v.map(|p| (p - t) * scale));
            }
            Op::BceWithLogits { x, target } => {
                let v = self.value(*x);
                let scale = grad.item() / T::from_usize(v.len()).unwrap();
                let t = *target;
                accumulate(grads, *x, v.map(|z| (sigmoid(z) - t) * scale));
            }
            Op::Coral {
                source,
                target,
                centred_s,
                centred_t,
                cov_diff,
            } => {
                let s_shape = self.value(*source).shape();
                let d = s_shape[1];
                // dL/dC_S = 2 (C_S - C_T) / (4 d^2); dL/dF_S = 2 F_c dL/dC_S / (n - 1)
                let base = grad.item() * T::lit(2.0) / T::from_usize(4 * d * d).unwrap();
                if self.wants(*source) {
                    let g = coral_descriptor_grad(cov_diff, centred_s, d, base, s_shape);
                    accumulate(grads, *source, g);
                }
                if self.wants(*target) {
                    let t_shape = self.value(*target).shape();
                    let g = coral_descriptor_grad(cov_diff, centred_t, d, -base, t_shape);
                    accumulate(grads, *target, g);
                }
            }
            Op::WeightedSum(terms) => {
                let g = grad.item();
                for &(v, wt) in terms {
                    if self.wants(v) {
                        let shape = self.value(v).shape().to_vec();
                        accumulate(grads, v, Tensor::full(&shape, g * wt));
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable mean BCE-with-logits.
pub fn bce_with_logits_mean<T: Real>(logits: &[T], target: T) -> T {
    let total: T = logits
        .iter()
        .map(|&z| z.max(T::zero()) - z * target + (T::one() + (-z.abs()).exp()).ln())
        .sum();
    total / T::from_usize(logits.len()).unwrap()
}

/// Gathers `N·H·W` descriptors of dimension `C` into a centred `C×n` matrix
/// and returns it with its `C×C` unbiased covariance and `n`.
pub(crate) fn centred_descriptors<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let count = n * hw;
    assert!(count >= 2, "covariance needs at least two descriptors");
    let mut centred = vec![T::zero(); c * count];
    for ch in 0..c {
        for b in 0..n {
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            centred[ch * count + b * hw..ch * count + (b + 1) * hw].copy_from_slice(src);
        }
        let row = &mut centred[ch * count..(ch + 1) * count];
        let mean = row.iter().copied().sum::<T>() / T::from_usize(count).unwrap();
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    let mut cov = vec![T::zero(); c * c];
    let scale = T::one() / T::from_usize(count - 1).unwrap();
    let m = MatRef::new(&centred, c, count);
    gemm(scale, m, m.t(), T::zero(), &mut cov);
    (centred, cov, count)
}

fn coral_descriptor_grad<T: Real>(
    cov_diff: &[T],
    centred: &[T],
    d: usize,
    base: T,
    shape: &[usize],
) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let count = n * hw;
    let mut gmat = vec![T::zero(); d * count];
    let alpha = base * T::lit(2.0) / T::from_usize(count - 1).unwrap();
    gemm(
        alpha,
        MatRef::new(cov_diff, d, d),
        MatRef::new(centred, d, count),
        T::zero(),
        &mut gmat,
    );
    let mut out = Tensor::zeros(shape);
    for ch in 0..c {
        for b in 0..n {
            out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .copy_from_slice(&gmat[ch * count + b * hw..ch * count + (b + 1) * hw]);
        }
    }
    out
}

/// Unfolds `c×h×w` into a `(c·k·k)×(oh·ow)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..oh {
                    let y = (oy * stride + ki) as isize - pad_top as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    if stride == 1 {
                        // contiguous span with zero fringes
                        let x0 = kj as isize - pad_left as isize;
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let x = x0 + ox as isize;
                            *d = if x >= 0 && x < w as isize {
                                src[x as usize]
                            } else {
                                T::zero()
                            };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let x = (ox * stride + kj) as isize - pad_left as isize;
                            *d = if x >= 0 && x < w as isize {
                                src[x as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * p;
                let src = &col[row..row + p];
                for oy in 0..oh {
                    let y = (oy * stride + ki) as isize - pad_top as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let x = (ox * stride + kj) as isize - pad_left as isize;
                        if x >= 0 && x < w as isize {
                            dst[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Weight layout `[out, in, k, k]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, kh, kw) = w.dims4();
    assert_eq!(ci, c, "conv2d channel mismatch: input {c}, weight {ci}");
    assert_eq!(
        (kh, kw),
        (geom.kernel, geom.kernel),
        "conv2d kernel mismatch"
    );
    let (oh, ow) = geom
        .out_hw(h, wd)
        .unwrap_or_else(|| panic!("conv2d kernel {} larger than padded {h}×{wd}", geom.kernel));
    let kdim = c * kh * kw;
    let p = oh * ow;
    let mut col = vec![T::zero(); kdim * p];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for bi in 0..n {
        let img = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        im2col(
            img,
            c,
            h,
            wd,
            kh,
            geom.stride,
            geom.pad[0],
            geom.pad[2],
            oh,
            ow,
            &mut col,
        );
        let dst = &mut out.data_mut()[bi * co * p..(bi + 1) * co * p];
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                dst[o * p..(o + 1) * p].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(w.data(), co, kdim),
            MatRef::new(&col, kdim, p),
            beta,
            dst,
        );
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    geom: ConvGeom,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let (_, _, oh, ow) = grad.dims4();
    let kdim = c * kh * kw;
    let p = oh * ow;
    let mut col = vec![T::zero(); kdim * p];
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut db = want_b.then(|| Tensor::zeros(&[co]));
    for bi in 0..n {
        let g = &grad.data()[bi * co * p..(bi + 1) * co * p];
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            im2col(
                img,
                c,
                h,
                wd,
                kh,
                geom.stride,
                geom.pad[0],
                geom.pad[2],
                oh,
                ow,
                &mut col,
            );
            gemm(
                T::one(),
                MatRef::new(g, co, p),
                MatRef::new(&col, kdim, p).t(),
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += g[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatRef::new(w.data(), co, kdim).t(),
                MatRef::new(g, co, p),
                T::zero(),
                &mut col,
            );
            let dimg = &mut dx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd];
            col2im(
                &col,
                c,
                h,
                wd,
                kh,
                geom.stride,
                geom.pad[0],
                geom.pad[2],
                oh,
                ow,
                dimg,
            );
        }
    }
    (dx, dw, db)
}

/// Weight layout `[in, out, k, k]`.
pub fn conv_t2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvTGeom,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (wi, co, kh, kw) = w.dims4();
    assert_eq!(
        wi, ci,
        "conv_transpose2d channel mismatch: input {ci}, weight {wi}"
    );
    assert_eq!((kh, kw), (geom.kernel, geom.kernel));
    let (oh, ow) = (geom.out_len(h), geom.out_len(wd));
    let kdim = co * kh * kw;
    let p = h * wd;
    let mut col = vec![T::zero(); kdim * p];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for bi in 0..n {
        let img = &x.data()[bi * ci * p..(bi + 1) * ci * p];
        gemm(
            T::one(),
            MatRef::new(w.data(), ci, kdim).t(),
            MatRef::new(img, ci, p),
            T::zero(),
            &mut col,
        );
        let dst = &mut out.data_mut()[bi * co * oh * ow..(bi + 1) * co * oh * ow];
        col2im(
            &col,
            co,
            oh,
            ow,
            kh,
            geom.stride,
            geom.pad,
            geom.pad,
            h,
            wd,
            dst,
        );
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[o * oh * ow..(o + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_t2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    geom: ConvTGeom,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, kh, kw) = w.dims4();
    let (_, _, oh, ow) = grad.dims4();
    let kdim = co * kh * kw;
    let p = h * wd;
    let mut col = vec![T::zero(); kdim * p];
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut db = want_b.then(|| Tensor::zeros(&[co]));
    for bi in 0..n {
        let g = &grad.data()[bi * co * oh * ow..(bi + 1) * co * oh * ow];
        if let Some(db) = db.as_mut() {
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += g[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(
            g,
            co,
            oh,
            ow,
            kh,
            geom.stride,
            geom.pad,
            geom.pad,
            h,
            wd,
            &mut col,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatRef::new(w.data(), ci, kdim),
                MatRef::new(&col, kdim, p),
                T::zero(),
                &mut dx.data_mut()[bi * ci * p..(bi + 1) * ci * p],
            );
        }
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[bi * ci * p..(bi + 1) * ci * p];
            gemm(
                T::one(),
                MatRef::new(img, ci, p),
                MatRef::new(&col, kdim, p).t(),
                T::one(),
                dw.data_mut(),
            );
        }
    }
    (dx, dw, db)
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn reflect_pad_forward<T: Real>(x: &Tensor<T>, pad: [usize; 4]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(
        pad[0] < h && pad[1] < h && pad[2] < w && pad[3] < w,
        "reflect padding {pad:?} too large for {h}×{w}"
    );
    let (oh, ow) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    let xd = x.data();
    for plane in 0..n * c {
        for oy in 0..oh {
            let sy = reflect_index(oy as isize - pad[0] as isize, h);
            for ox in 0..ow {
                let sx = reflect_index(ox as isize - pad[2] as isize, w);
                od[plane * oh * ow + oy * ow + ox] = xd[plane * h * w + sy * w + sx];
            }
        }
    }
    out
}

fn reflect_pad_backward<T: Real>(shape: &[usize], grad: &Tensor<T>, pad: [usize; 4]) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (_, _, oh, ow) = grad.dims4();
    let mut dx = Tensor::zeros(shape);
    let dd = dx.data_mut();
    let gd = grad.data();
    for plane in 0..n * c {
        for oy in 0..oh {
            let sy = reflect_index(oy as isize - pad[0] as isize, h);
            for ox in 0..ow {
                let sx = reflect_index(ox as isize - pad[2] as isize, w);
                dd[plane * h * w + sy * w + sx] += gd[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}
