//! Encoder / residual / decoder generator and the PatchGAN discriminator.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, ConvTGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nn::{seeded_rng, Activation, ConvBlock, ConvKind, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
}

const fn layer(kernel: usize, filters: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        kernel,
        filters,
        stride,
    }
}

/// Generator layer table. `down` ends at the feature tap used for domain alignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub stem: LayerSpec,
    pub down: Vec<LayerSpec>,
    pub residual_blocks: usize,
    pub residual: LayerSpec,
    pub up: Vec<LayerSpec>,
    pub head: LayerSpec,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            stem: layer(7, 64, 1),
            down: vec![layer(3, 128, 2), layer(3, 256, 2)],
            residual_blocks: 9,
            residual: layer(3, 256, 1),
            up: vec![layer(3, 128, 2), layer(3, 64, 2)],
            head: layer(7, 3, 1),
        }
    }
}

impl GeneratorConfig {
    /// The layer table is fixed; anything else is a configuration error.
    pub fn validate(&self) -> Result<()> {
        if self.residual_blocks != 9 {
            return Err(Error::Config(format!(
                "generator needs 9 residual blocks, got {}",
                self.residual_blocks
            )));
        }
        if *self != Self::default() {
            return Err(Error::Config(
                "generator layer table differs from the reference channel progression \
                 64-128-256-[256×9]-128-64-3"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Spatial reduction between input and feature tap.
    pub fn downsample_factor(&self) -> usize {
        self.down.iter().map(|l| l.stride).product()
    }

    /// Channels at the feature tap.
    pub fn feature_channels(&self) -> usize {
        self.down.last().map_or(self.stem.filters, |l| l.filters)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub layers: Vec<LayerSpec>,
    pub leaky_slope: f64,
    /// Inputs smaller than this on either side are rejected.
    pub min_input: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                layer(4, 64, 2),
                layer(4, 128, 2),
                layer(4, 256, 2),
                layer(4, 512, 1),
                layer(4, 1, 1),
            ],
            leaky_slope: 0.2,
            min_input: 16,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        match self.layers.last() {
            Some(l) if l.filters == 1 => {}
            _ => {
                return Err(Error::Config(
                    "discriminator must end in a 1-channel logit layer".into(),
                ))
            }
        }
        if self
            .layers
            .iter()
            .any(|l| l.stride == 0 || l.kernel < l.stride)
        {
            return Err(Error::Config(
                "discriminator kernels must be at least as large as their stride".into(),
            ));
        }
        Ok(())
    }

    /// Zero padding of one layer: `kernel − stride` split with the extra pixel
    /// after the content, so every layer maps `n` to `floor(n / stride)`.
    pub fn padding(spec: &LayerSpec) -> [usize; 4] {
        let total = spec.kernel - spec.stride;
        let lo = total / 2;
        let hi = total - lo;
        [lo, hi, lo, hi]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers.iter().fold((h, w), |(h, w), l| {
            let geom = ConvGeom {
                kernel: l.kernel,
                stride: l.stride,
                pad: Self::padding(l),
            };
            geom.out_hw(h, w).expect("padding keeps kernels in range")
        })
    }
}

fn check_rgb_batch<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, 3, h, w] => Ok((n, h, w)),
        [_, c, _, _] => Err(Error::validation(format!(
            "expected 3 input channels, got {c}"
        ))),
        ref other => Err(Error::validation(format!(
            "expected an N×3×H×W batch, got {other:?}"
        ))),
    }
}

/// Output of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// Enhanced images in `[0, 1]`, same size as the input.
    pub enhanced: Var,
    /// Activations after the last down-sampling layer (`256 × H/4 × W/4`).
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    residual: Vec<(ConvBlock, ConvBlock)>,
    up: Vec<ConvBlock>,
    head: ConvBlock,
}

/// Smallest accepted generator input side.
pub const GENERATOR_MIN_INPUT: usize = 8;

impl<T: Real> Generator<T> {
    /// Builds the network and draws its initial weights from `seed`.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::default();
        let reflect = |spec: &LayerSpec| ConvKind::ReflectConv {
            reflect: spec.kernel / 2,
            geom: ConvGeom::new(spec.kernel, spec.stride, 0),
        };
        let stem = ConvBlock::register(
            &mut params,
            &mut rng,
            "stem",
            reflect(&config.stem),
            3,
            config.stem.filters,
            true,
            Activation::Relu,
        );
        let mut channels = config.stem.filters;
        let mut down = Vec::new();
        for (i, spec) in config.down.iter().enumerate() {
            down.push(ConvBlock::register(
                &mut params,
                &mut rng,
                &format!("down{}", i + 1),
                ConvKind::Conv(ConvGeom::new(spec.kernel, spec.stride, spec.kernel / 2)),
                channels,
                spec.filters,
                true,
                Activation::Relu,
            ));
            channels = spec.filters;
        }
        let mut residual = Vec::new();
        for i in 0..config.residual_blocks {
            let spec = config.residual;
            let a = ConvBlock::register(
                &mut params,
                &mut rng,
                &format!("res{}.conv1", i + 1),
                reflect(&spec),
                channels,
                spec.filters,
                true,
                Activation::Relu,
            );
            let b = ConvBlock::register(
                &mut params,
                &mut rng,
                &format!("res{}.conv2", i + 1),
                reflect(&spec),
                spec.filters,
                channels,
                true,
                Activation::None,
            );
            residual.push((a, b));
        }
        let mut up = Vec::new();
        for (i, spec) in config.up.iter().enumerate() {
            up.push(ConvBlock::register(
                &mut params,
                &mut rng,
                &format!("up{}", i + 1),
                ConvKind::Transposed(ConvTGeom {
                    kernel: spec.kernel,
                    stride: spec.stride,
                    pad: spec.kernel / 2,
                    output_pad: spec.stride - 1,
                }),
                channels,
                spec.filters,
                true,
                Activation::Relu,
            ));
            channels = spec.filters;
        }
        let head = ConvBlock::register(
            &mut params,
            &mut rng,
            "head",
            reflect(&config.head),
            channels,
            config.head.filters,
            false,
            Activation::UnitTanh,
        );
        Ok(Self {
            config,
            params,
            stem,
            down,
            residual,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Replaces all parameters, e.g. from a checkpoint.
    pub fn load_params(&mut self, params: ParamSet<T>) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::validation("generator parameter names do not match"));
        }
        for (i, (_, v)) in params.iter().enumerate() {
            if v.shape() != self.params.get(i).shape() {
                return Err(Error::validation(format!(
                    "generator parameter {} has shape {:?}",
                    params.names()[i],
                    v.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// Index of the weight tensor of residual block `block`'s convolution `conv` (0 or 1).
    pub fn residual_weight_index(&self, block: usize, conv: usize) -> usize {
        let (a, b) = &self.residual[block];
        if conv == 0 {
            a.weight_index()
        } else {
            b.weight_index()
        }
    }

    /// Runs one residual block in isolation.
    pub fn residual_block(&self, g: &mut Graph<T>, p: &[Var], block: usize, x: Var) -> Var {
        let (a, b) = &self.residual[block];
        let h = a.forward(g, p, x);
        let h = b.forward(g, p, h);
        g.add(x, h)
    }

    fn validated_input(&self, g: &Graph<T>, x: Var) -> Result<(usize, usize)> {
        let (_, h, w) = check_rgb_batch(g.value(x))?;
        if h < GENERATOR_MIN_INPUT || w < GENERATOR_MIN_INPUT {
            return Err(Error::validation(format!(
                "generator input {h}×{w} is smaller than {GENERATOR_MIN_INPUT}×{GENERATOR_MIN_INPUT}"
            )));
        }
        Ok((h, w))
    }

    /// Reflect-pads to a multiple of the down-sampling factor.
    fn pad_to_multiple(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
        let f = self.config.downsample_factor();
        let (ph, pw) = ((f - h % f) % f, (f - w % f) % f);
        if ph == 0 && pw == 0 {
            x
        } else {
            g.reflect_pad(x, [0, ph, 0, pw])
        }
    }

    fn encode_padded(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        // [0, 1] images to [-1, 1]
        let scaled = g.affine(x, T::lit(2.0), T::lit(-1.0));
        let mut h = self.stem.forward(g, p, scaled);
        for block in &self.down {
            h = block.forward(g, p, h);
        }
        h
    }

    /// Feature tap only (no residual stack or decoder).
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let (h, w) = self.validated_input(g, x)?;
        let padded = self.pad_to_multiple(g, x, h, w);
        Ok(self.encode_padded(g, p, padded))
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<GeneratorOutput> {
        let (h, w) = self.validated_input(g, x)?;
        let padded = self.pad_to_multiple(g, x, h, w);
        let features = self.encode_padded(g, p, padded);
        let mut y = features;
        for block in 0..self.residual.len() {
            y = self.residual_block(g, p, block, y);
        }
        for block in &self.up {
            y = block.forward(g, p, y);
        }
        let mut enhanced = self.head.forward(g, p, y);
        let (_, _, oh, ow) = g.value(enhanced).dims4();
        if (oh, ow) != (h, w) {
            enhanced = g.crop(enhanced, 0, 0, h, w);
        }
        Ok(GeneratorOutput { enhanced, features })
    }

    /// Inference on a single image; output clipped to `[0, 1]`.
    ///
    /// Same result as [`Generator::forward`], but each stage runs on its own
    /// graph so only one stage's intermediates are alive at a time.
    pub fn enhance(&self, image: &ImagePlane) -> Result<ImagePlane> {
        let stage = |x: Tensor<T>, f: &dyn Fn(&mut Graph<T>, &[Var], Var) -> Var| -> Tensor<T> {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let x = g.input(x);
            let out = f(&mut g, &p, x);
            let value = g.shared_value(out);
            drop(g);
            Arc::try_unwrap(value).unwrap_or_else(|shared| (*shared).clone())
        };
        let (h, w) = image.dims();
        if h < GENERATOR_MIN_INPUT || w < GENERATOR_MIN_INPUT {
            return Err(Error::validation(format!(
                "generator input {h}×{w} is smaller than {GENERATOR_MIN_INPUT}×{GENERATOR_MIN_INPUT}"
            )));
        }
        let mut y = stage(image.to_tensor(), &|g, p, x| {
            let padded = self.pad_to_multiple(g, x, h, w);
            self.encode_padded(g, p, padded)
        });
        for block in 0..self.residual.len() {
            y = stage(y, &|g, p, x| self.residual_block(g, p, block, x));
        }
        let out = stage(y, &|g, p, x| {
            let mut y = x;
            for block in &self.up {
                y = block.forward(g, p, y);
            }
            let y = self.head.forward(g, p, y);
            let (_, _, oh, ow) = g.value(y).dims4();
            if (oh, ow) != (h, w) {
                g.crop(y, 0, 0, h, w)
            } else {
                y
            }
        });
        Ok(ImagePlane::from_tensor(&out)?.clipped())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    blocks: Vec<ConvBlock>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::default();
        let mut blocks = Vec::new();
        let mut channels = 3;
        let last = config.layers.len() - 1;
        for (i, spec) in config.layers.iter().enumerate() {
            let geom = ConvGeom {
                kernel: spec.kernel,
                stride: spec.stride,
                pad: DiscriminatorConfig::padding(spec),
            };
            let (normalized, activation) = if i == last {
                (false, Activation::None)
            } else {
                (true, Activation::LeakyRelu(config.leaky_slope))
            };
            blocks.push(ConvBlock::register(
                &mut params,
                &mut rng,
                &format!("layer{}", i + 1),
                ConvKind::Conv(geom),
                channels,
                spec.filters,
                normalized,
                activation,
            ));
            channels = spec.filters;
        }
        Ok(Self {
            config,
            params,
            blocks,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn load_params(&mut self, params: ParamSet<T>) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::validation(
                "discriminator parameter names do not match",
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// Patch logits `N×1×h'×w'`; no sigmoid is applied.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let (_, h, w) = check_rgb_batch(g.value(x))?;
        let min = self.config.min_input;
        if h < min || w < min {
            return Err(Error::validation(format!(
                "discriminator input {h}×{w} is smaller than {min}×{min}"
            )));
        }
        let mut y = g.affine(x, T::lit(2.0), T::lit(-1.0));
        for block in &self.blocks {
            y = block.forward(g, p, y);
        }
        Ok(y)
    }
}
