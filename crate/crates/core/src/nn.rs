//! Parameter storage and the convolution block shared by both networks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvGeom, ConvTGeom, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the zero-mean normal used for convolution weights.
pub const INIT_STD: f64 = 0.02;

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.values[index]
    }

    /// Mutable access; clones the tensor only if a graph still holds it.
    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[index])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every parameter on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(Arc::clone(v))
                } else {
                    g.constant(Arc::clone(v))
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    /// Replaces the value at `index`; shapes must agree.
    pub fn set(&mut self, index: usize, value: Tensor<T>) {
        assert_eq!(
            self.values[index].shape(),
            value.shape(),
            "parameter {} shape change",
            self.names[index]
        );
        self.values[index] = Arc::new(value);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    /// `(tanh(x) + 1) / 2`, mapping onto `[0, 1]`.
    UnitTanh,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvKind {
    /// Zero padding is part of the geometry.
    Conv(ConvGeom),
    /// Mirror padding of `reflect` pixels on every side, then an unpadded convolution.
    ReflectConv {
        reflect: usize,
        geom: ConvGeom,
    },
    Transposed(ConvTGeom),
}

/// Convolution, optional instance normalisation, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    weight: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
    pub activation: Activation,
}

pub const NORM_EPS: f64 = 1e-5;

impl ConvBlock {
    /// Registers the block's parameters. Convolutions feeding a normalisation
    /// carry no bias (it would be cancelled by the mean subtraction).
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        normalized: bool,
        activation: Activation,
    ) -> Self {
        let k = match kind {
            ConvKind::Conv(g) | ConvKind::ReflectConv { geom: g, .. } => g.kernel,
            ConvKind::Transposed(g) => g.kernel,
        };
        let shape = match kind {
            ConvKind::Transposed(_) => [in_channels, out_channels, k, k],
            _ => [out_channels, in_channels, k, k],
        };
        let weight = params.push(format!("{name}.weight"), normal_tensor(&shape, rng));
        let (bias, norm) = if normalized {
            let gamma = params.push(
                format!("{name}.norm.scale"),
                Tensor::full(&[out_channels], T::one()),
            );
            let beta = params.push(
                format!("{name}.norm.offset"),
                Tensor::zeros(&[out_channels]),
            );
            (None, Some((gamma, beta)))
        } else {
            (
                Some(params.push(format!("{name}.bias"), Tensor::zeros(&[out_channels]))),
                None,
            )
        };
        Self {
            kind,
            in_channels,
            out_channels,
            weight,
            bias,
            norm,
            activation,
        }
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let w = p[self.weight];
        let b = self.bias.map(|i| p[i]);
        let mut y = match self.kind {
            ConvKind::Conv(geom) => g.conv2d(x, w, b, geom),
            ConvKind::ReflectConv { reflect, geom } => {
                let padded = g.reflect_pad(x, [reflect; 4]);
                g.conv2d(padded, w, b, geom)
            }
            ConvKind::Transposed(geom) => g.conv_transpose2d(x, w, b, geom),
        };
        if let Some((gamma, beta)) = self.norm {
            y = g.instance_norm(y, p[gamma], p[beta], T::lit(NORM_EPS));
        }
        match self.activation {
            Activation::None => y,
            Activation::Relu => g.relu(y),
            Activation::LeakyRelu(slope) => g.leaky_relu(y, T::lit(slope)),
            Activation::UnitTanh => {
                let t = g.tanh(y);
                g.affine(t, T::lit(0.5), T::lit(0.5))
            }
        }
    }
}

/// Seeded draw from `N(0, INIT_STD²)`.
pub fn normal_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
