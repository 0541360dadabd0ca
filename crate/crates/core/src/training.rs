//! Adversarial training: configuration, optimiser, one training step with
//! physics feedback and covariance alignment, and the checkpointed loop.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::datasets::{derive_seed, RealPool, SyntheticQuad};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::losses::{
    discriminator_objective, gan_criterion, total_loss, GanMode, LossBreakdown, LossComponents,
    LossWeights,
};
use crate::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

/// Order of the updates within one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// One step of each discriminator, then one generator step.
    #[default]
    DiscriminatorsFirst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, _step: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
        }
    }
}

/// How a real image is picked for each synthetic one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealSampling {
    #[default]
    UniformWithReplacement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Total optimisation steps, unless `epochs` is set.
    pub steps: u64,
    pub epochs: Option<u64>,
    pub seed: u64,
    pub disable_da: bool,
    pub disable_feedback: bool,
    pub disable_pixel: bool,
    pub gan_mode: GanMode,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub update_order: UpdateOrder,
    pub lr_schedule: LrSchedule,
    pub real_sampling: RealSampling,
    /// Size real images are resized to; defaults to the training size.
    pub real_resolution: Option<[usize; 2]>,
    /// Number of training quads (in id order) enhanced after training.
    pub preview_count: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            steps: 2000,
            epochs: None,
            seed: 0,
            disable_da: false,
            disable_feedback: false,
            disable_pixel: false,
            gan_mode: GanMode::Bce,
            checkpoint_every: 500,
            update_order: UpdateOrder::DiscriminatorsFirst,
            lr_schedule: LrSchedule::Constant,
            real_sampling: RealSampling::UniformWithReplacement,
            real_resolution: None,
            preview_count: 4,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some([h, w]) = self.real_resolution {
            if h == 0 || w == 0 {
                return bad("real_resolution must be positive".into());
            }
        }
        self.weights.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size).max(1) as u64
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        match self.epochs {
            Some(e) => e * self.steps_per_epoch(n_train),
            None => self.steps,
        }
    }

    pub fn terms(&self) -> ActiveTerms {
        let feedback = !self.disable_feedback;
        ActiveTerms {
            feedback,
            pixel: !self.disable_pixel && self.weights.lambda_pixel > 0.0,
            cycle: feedback && self.weights.lambda_cycle > 0.0,
            coral: !self.disable_da && self.weights.lambda_coral > 0.0,
        }
    }
}

/// Which parts of the objective a configuration trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    /// Regeneration, the second discriminator and the consistency terms.
    pub feedback: bool,
    pub pixel: bool,
    pub cycle: bool,
    /// Covariance alignment; the only consumer of real images.
    pub coral: bool,
}

/// Full model and the three leave-one-out variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoDomainAdaptation,
    NoFeedback,
    NoPixel,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoDomainAdaptation,
        Variant::NoFeedback,
        Variant::NoPixel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Ours",
            Variant::NoDomainAdaptation => "-DA",
            Variant::NoFeedback => "-PF",
            Variant::NoPixel => "-PL",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDomainAdaptation => "no_da",
            Variant::NoFeedback => "no_pf",
            Variant::NoPixel => "no_pl",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.disable_da = self == Variant::NoDomainAdaptation;
        cfg.disable_feedback = self == Variant::NoFeedback;
        cfg.disable_pixel = self == Variant::NoPixel;
        cfg
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for k in 0..p.len() {
                let g = grad.data()[k];
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let m_hat = m[k] * c1;
                let v_hat = v[k] * c2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One synthetic pair ready for the tape: observed `y`, truth `x`, and the
/// formation-model constants `t` and `B·(1 − t)`.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub id: String,
    pub y: Tensor<f32>,
    pub x: Tensor<f32>,
    pub t: Tensor<f32>,
    pub backlight: Tensor<f32>,
}

impl TrainingPair {
    pub fn from_quad(id: &str, quad: &SyntheticQuad) -> Self {
        let (h, w) = quad.dims();
        let t: Tensor<f32> = Tensor::from_vec(
            &[1, 3, h, w],
            quad.transmission.data().iter().map(|&v| v as f32).collect(),
        );
        let backlight = Tensor::from_fn(&[1, 3, h, w], |i| {
            let c = i / (h * w);
            (quad.background[c] * (1.0 - quad.transmission.data()[i])) as f32
        });
        Self {
            id: id.to_string(),
            y: quad.underwater.to_tensor(),
            x: quad.ground_truth.to_tensor(),
            t,
            backlight,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, _, h, w) = self.y.dims4();
        (h, w)
    }
}

/// Real images as tensors of a common size.
pub fn prepare_real_pool(pool: &RealPool, size: (usize, usize)) -> Vec<(String, Tensor<f32>)> {
    pool.images
        .iter()
        .map(|(name, img)| {
            let img = if img.dims() == size {
                img.clone()
            } else {
                img.resize_bilinear(size.0, size.1)
            };
            (name.clone(), img.to_tensor())
        })
        .collect()
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub seed: u64,
    pub step: u64,
    pub generator: Generator<f32>,
    pub d_g: Discriminator<f32>,
    pub d_p: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_dg: Adam<f32>,
    pub opt_dp: Adam<f32>,
    /// Drives real-image sampling.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let generator = Generator::new(GeneratorConfig::default(), derive_seed(seed, "generator"))?;
        let d_g = Discriminator::new(DiscriminatorConfig::default(), derive_seed(seed, "d_g"))?;
        let d_p = Discriminator::new(DiscriminatorConfig::default(), derive_seed(seed, "d_p"))?;
        let adam = |p: &ParamSet<f32>| Adam::new(p, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            seed,
            step: 0,
            opt_g: adam(generator.params()),
            opt_dg: adam(d_g.params()),
            opt_dp: adam(d_p.params()),
            generator,
            d_g,
            d_p,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "sampling")),
        })
    }
}

/// Gradient norms (over generator parameters) contributed by each weighted
/// objective term, plus the norm of the `D_p` gradient. Absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientProbes {
    pub adversarial_g: f64,
    pub adversarial_p: Option<f64>,
    pub l_g: Option<f64>,
    pub l_m: Option<f64>,
    pub cycle: Option<f64>,
    pub coral: Option<f64>,
    pub total: f64,
    pub d_p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Discriminator objectives before their update.
    pub d_g: f64,
    pub d_p: Option<f64>,
    pub probes: Option<GradientProbes>,
}

fn grad_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn collect_grads(g: &Graph<f32>, root: Var, params: &[Var]) -> Vec<Option<Tensor<f32>>> {
    let mut grads = g.backward(root);
    params.iter().map(|&p| grads.take(p)).collect()
}

fn diverged(step: u64, what: &str) -> Error {
    Error::Divergence {
        step: Some(step),
        reason: format!("non-finite {what}"),
        last_finite: None,
    }
}

/// One discriminator update on `real` (scored 1) vs `fake` (scored 0).
/// Returns the objective before the update and its gradient norm.
fn discriminator_update(
    disc: &mut Discriminator<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    mode: GanMode,
    lr: f64,
    step: u64,
    name: &str,
) -> Result<(f64, f64)> {
    let (loss, grads) = {
        let mut g = Graph::new();
        let p = disc.bind(&mut g, true);
        let r = g.input(real.clone());
        let f = g.input(fake.clone());
        let lr_ = disc.forward(&mut g, &p, r)?;
        let lf = disc.forward(&mut g, &p, f)?;
        let obj = discriminator_objective(&mut g, lr_, lf, mode);
        let loss = g.value(obj).item() as f64;
        if !loss.is_finite() {
            return Err(diverged(step, &format!("{name} loss")));
        }
        (loss, collect_grads(&g, obj, &p))
    };
    let norm = grad_norm(&grads);
    opt.step(disc.params_mut(), &grads, lr);
    Ok((loss, norm))
}

fn stack_field(batch: &[&TrainingPair], f: impl Fn(&TrainingPair) -> &Tensor<f32>) -> Tensor<f32> {
    if batch.len() == 1 {
        f(batch[0]).clone()
    } else {
        Tensor::stack(&batch.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
    }
}

/// One iteration: both discriminators step on detached fakes, then the
/// generator steps on the full objective through the updated, frozen
/// discriminators. `real` is required only when covariance alignment is on.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[&TrainingPair],
    real: Option<&Tensor<f32>>,
    probe: bool,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::validation("empty training batch"));
    }
    let terms = cfg.terms();
    let step = state.step;
    let lr = cfg.lr_schedule.rate(cfg.learning_rate, step);
    let y = stack_field(batch, |p| &p.y);
    let x = stack_field(batch, |p| &p.x);

    let mut g = Graph::new();
    let gp = state.generator.bind(&mut g, true);
    let yv = g.input(y.clone());
    let xv = g.input(x.clone());
    let out = state.generator.forward(&mut g, &gp, yv)?;
    let regen = terms.feedback.then(|| {
        let t = Arc::new(stack_field(batch, |p| &p.t));
        let backlight = stack_field(batch, |p| &p.backlight);
        let m = g.mul_const(out.enhanced, t);
        g.add_const(m, &backlight)
    });
    let re_enhanced = match regen {
        Some(r) if terms.cycle => Some(state.generator.forward(&mut g, &gp, r)?.enhanced),
        _ => None,
    };
    let real_features = if terms.coral {
        let real =
            real.ok_or_else(|| Error::Config("covariance alignment needs a real image".into()))?;
        let r = g.input(real.clone());
        Some(state.generator.encode(&mut g, &gp, r)?)
    } else {
        None
    };

    let fake_g = g.value(out.enhanced).clone();
    let (d_g, _) = discriminator_update(
        &mut state.d_g,
        &mut state.opt_dg,
        &x,
        &fake_g,
        cfg.gan_mode,
        lr,
        step,
        "D_g",
    )?;
    let (d_p, d_p_norm) = match regen {
        Some(r) => {
            let fake_p = g.value(r).clone();
            let (loss, norm) = discriminator_update(
                &mut state.d_p,
                &mut state.opt_dp,
                &y,
                &fake_p,
                cfg.gan_mode,
                lr,
                step,
                "D_p",
            )?;
            (Some(loss), Some(norm))
        }
        None => (None, None),
    };

    let dgp = state.d_g.bind(&mut g, false);
    let logits_g = state.d_g.forward(&mut g, &dgp, out.enhanced)?;
    let adv_g = gan_criterion(&mut g, logits_g, true, cfg.gan_mode);
    let adv_p = match regen {
        Some(r) => {
            let dpp = state.d_p.bind(&mut g, false);
            let logits_p = state.d_p.forward(&mut g, &dpp, r)?;
            Some(gan_criterion(&mut g, logits_p, true, cfg.gan_mode))
        }
        None => None,
    };
    let l_a = match adv_p {
        Some(p) => g.weighted_sum(&[(adv_g, 1.0), (p, 1.0)]),
        None => adv_g,
    };
    let l_g = terms.pixel.then(|| g.mean_abs_diff(out.enhanced, xv));
    let l_m = match regen {
        Some(r) if terms.pixel => Some(g.mean_abs_diff(r, yv)),
        _ => None,
    };
    let l_pixel = match (l_g, l_m) {
        (Some(a), Some(b)) => Some(g.weighted_sum(&[(a, 0.5), (b, 0.5)])),
        (a, _) => a,
    };
    let l_cycle = re_enhanced.map(|r| g.mean_abs_diff(r, xv));
    let l_coral = real_features.map(|f| g.coral(out.features, f));

    let w = cfg.weights;
    let weighted: Vec<(Var, f32)> = [
        Some((l_a, 1.0)),
        l_cycle.map(|v| (v, w.lambda_cycle as f32)),
        l_pixel.map(|v| (v, w.lambda_pixel as f32)),
        l_coral.map(|v| (v, w.lambda_coral as f32)),
    ]
    .into_iter()
    .flatten()
    .collect();
    let total = g.weighted_sum(&weighted);

    let value = |v: Var| g.value(v).item() as f64;
    let components = LossComponents {
        l_a: value(l_a),
        l_g: l_g.map(value),
        l_m: l_m.map(value),
        l_cycle: l_cycle.map(value),
        l_coral: l_coral.map(value),
    };
    let losses = total_loss(&components, &w).map_err(|_| diverged(step, "generator loss"))?;
    if !g.value(total).item().is_finite() {
        return Err(diverged(step, "generator loss"));
    }

    let probes = probe.then(|| {
        let norm_of = |root: Var, weight: f64| grad_norm(&collect_grads(&g, root, &gp)) * weight;
        let pixel_share = if l_m.is_some() { 0.5 } else { 1.0 } * w.lambda_pixel;
        GradientProbes {
            adversarial_g: norm_of(adv_g, 1.0),
            adversarial_p: adv_p.map(|v| norm_of(v, 1.0)),
            l_g: l_g.map(|v| norm_of(v, pixel_share)),
            l_m: l_m.map(|v| norm_of(v, pixel_share)),
            cycle: l_cycle.map(|v| norm_of(v, w.lambda_cycle)),
            coral: l_coral.map(|v| norm_of(v, w.lambda_coral)),
            total: norm_of(total, 1.0),
            d_p: d_p_norm,
        }
    });

    let grads = collect_grads(&g, total, &gp);
    drop(g);
    state.opt_g.step(state.generator.params_mut(), &grads, lr);
    state.step += 1;
    Ok(StepOutcome {
        losses,
        d_g,
        d_p,
        probes,
    })
}

/// Training quads visited in step `step`: a seeded shuffle per epoch,
/// consumed `batch_size` at a time.
pub fn batch_indices(cfg: &TrainConfig, n_train: usize, step: u64) -> (u64, Vec<usize>) {
    let per_epoch = cfg.steps_per_epoch(n_train);
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("epoch{epoch}"),
    )));
    let start = pos * cfg.batch_size;
    let end = (start + cfg.batch_size).min(n_train);
    (epoch, order[start..end].to_vec())
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub quads: Vec<String>,
    pub real: Vec<String>,
    pub d_g: f64,
    pub d_p: Option<f64>,
    pub l_a: f64,
    pub l_g: Option<f64>,
    pub l_m: Option<f64>,
    pub l_pixel: Option<f64>,
    pub l_cycle: Option<f64>,
    pub l_coral: Option<f64>,
    pub total: f64,
}

pub const LOSS_LOG: &str = "losses.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps: u64,
    pub last: Option<LogRecord>,
    pub state: TrainState,
}

/// Reads a loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Trains from `state` (fresh or resumed) to the configured step count,
/// writing the loss log, periodic and final checkpoints, the effective
/// configuration and previews into `out_dir`. A resumed run drops log
/// records at or past its starting step before appending.
pub fn train_loop(
    cfg: &TrainConfig,
    train: &[TrainingPair],
    real: &[(String, Tensor<f32>)],
    mut state: TrainState,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let terms = cfg.terms();
    if terms.coral && real.is_empty() {
        return Err(Error::Config(
            "domain adaptation is enabled but the real-image pool is empty".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    RunConfig::for_training(cfg).write(&out_dir.join(EFFECTIVE_CONFIG))?;

    let log_path = out_dir.join(LOSS_LOG);
    // earlier lines are kept verbatim: re-serializing parsed floats is not
    // guaranteed to reproduce the same text
    let kept: Vec<(String, LogRecord)> = if state.step > 0 && log_path.exists() {
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut kept = Vec::new();
        for line in text.lines() {
            let record: LogRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: log_path.clone(),
                reason: e.to_string(),
            })?;
            if record.step < state.step {
                kept.push((line.to_string(), record));
            }
        }
        kept
    } else {
        Vec::new()
    };
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_line = |log: &mut BufWriter<fs::File>, r: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    for (line, _) in &kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut last = kept.last().map(|(_, r)| r.clone());

    let total_steps = cfg.total_steps(train.len());
    while state.step < total_steps {
        let step = state.step;
        let (epoch, idx) = batch_indices(cfg, train.len(), step);
        let batch: Vec<&TrainingPair> = idx.iter().map(|&i| &train[i]).collect();
        let picks: Vec<usize> = if terms.coral {
            (0..batch.len())
                .map(|_| state.rng.random_range(0..real.len()))
                .collect()
        } else {
            Vec::new()
        };
        let real_batch = (!picks.is_empty()).then(|| {
            if picks.len() == 1 {
                real[picks[0]].1.clone()
            } else {
                Tensor::stack(&picks.iter().map(|&i| real[i].1.clone()).collect::<Vec<_>>())
            }
        });
        let outcome = match train_step(&mut state, cfg, &batch, real_batch.as_ref(), false) {
            Ok(o) => o,
            Err(Error::Divergence { step, reason, .. }) => {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(Error::Divergence {
                    step,
                    reason,
                    last_finite: last.as_ref().map(|r| serde_json::to_string(r).unwrap()),
                });
            }
            Err(e) => return Err(e),
        };
        let l = outcome.losses;
        let record = LogRecord {
            step,
            epoch,
            quads: batch.iter().map(|p| p.id.clone()).collect(),
            real: picks.iter().map(|&i| real[i].0.clone()).collect(),
            d_g: outcome.d_g,
            d_p: outcome.d_p,
            l_a: l.l_a,
            l_g: l.l_g,
            l_m: l.l_m,
            l_pixel: l.l_pixel,
            l_cycle: l.l_cycle,
            l_coral: l.l_coral,
            total: l.total,
        };
        write_line(&mut log, &record)?;
        last = Some(record);
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            checkpoint::save(
                &ckpt_dir.join(format!("step_{:07}.ckpt", state.step)),
                &state,
                cfg,
            )?;
        }
        if state.step.is_multiple_of(100) {
            log::info!("step {}/{} total {:.4}", state.step, total_steps, l.total);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, &state, cfg)?;
    write_previews(
        &state.generator,
        train,
        cfg.preview_count,
        &out_dir.join("previews"),
    )?;
    Ok(TrainSummary {
        final_checkpoint,
        loss_log: log_path,
        steps: state.step,
        last,
        state,
    })
}

/// Enhances the first `count` training pairs in id order.
fn write_previews(
    generator: &Generator<f32>,
    train: &[TrainingPair],
    count: usize,
    dir: &Path,
) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    let mut ids: Vec<&TrainingPair> = train.iter().collect();
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    ids.dedup_by(|a, b| a.id == b.id);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for pair in ids.into_iter().take(count) {
        let img = ImagePlane::from_tensor(&pair.y)?;
        generator
            .enhance(&img)?
            .save_png(&dir.join(format!("{}.png", pair.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Provenance, WaterType};
    use crate::physics::{degrade, DegradationParams, TransmissionMap};

    pub(crate) fn toy_pair(id: &str, seed: u64, size: usize) -> TrainingPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImagePlane::from_fn(size, size, |c, y, x| {
            (0.3 + 0.2 * c as f64 + 0.2 * ((x + 2 * y) as f64 / size as f64).sin()).clamp(0.0, 1.0)
        });
        let t = TransmissionMap::from_planar(
            size,
            size,
            (0..3 * size * size)
                .map(|_| rng.random_range(0.3..0.9))
                .collect(),
        )
        .unwrap();
        let b = [0.1, 0.7, 0.8];
        let quad = SyntheticQuad {
            underwater: degrade(&x, &t, &b).unwrap(),
            ground_truth: x,
            transmission: t,
            background: b,
            provenance: Provenance {
                source_id: id.into(),
                water_type: WaterType::B,
                params: DegradationParams::new([0.8, 0.9, 0.9], b),
                seed,
            },
        };
        TrainingPair::from_quad(id, &quad)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            checkpoint_every: 0,
            preview_count: 0,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate, 2e-4);
        assert_eq!((cfg.beta1, cfg.beta2), (0.5, 0.999));
        assert_eq!(cfg.batch_size, 1);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
    }

    #[test]
    fn variants_toggle_one_flag_each() {
        let base = TrainConfig::default();
        let flags: Vec<(bool, bool, bool)> = Variant::ALL
            .iter()
            .map(|v| {
                let c = v.apply(&base);
                (c.disable_da, c.disable_feedback, c.disable_pixel)
            })
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, false, true)
            ]
        );
        let t = Variant::NoFeedback.apply(&base).terms();
        assert!(!t.feedback && !t.cycle && t.pixel && t.coral);
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradients() {
        let mut params = ParamSet::<f32>::default();
        params.push("w", Tensor::from_fn(&[4], |i| i as f32));
        let before = params.clone();
        let mut adam = Adam::new(&params, 0.5, 0.999, 1e-8);
        for _ in 0..3 {
            adam.step(&mut params, &[Some(Tensor::zeros(&[4]))], 2e-4);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ParamSet::<f64>::default();
        params.push("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&params, 0.5, 0.999, 1e-8);
        adam.step(
            &mut params,
            &[Some(Tensor::from_vec(&[2], vec![3.0, -0.5]))],
            0.1,
        );
        // bias-corrected first step is lr · sign(g)
        assert!((params.get(0).data()[0] - 0.9).abs() < 1e-6);
        assert!((params.get(0).data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let cfg = TrainConfig {
            batch_size: 2,
            seed: 3,
            ..Default::default()
        };
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(&cfg, 5, s).1).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_indices(&cfg, 5, 3).0, 1);
        assert_eq!(batch_indices(&cfg, 5, 4), batch_indices(&cfg, 5, 4));
    }

    #[test]
    fn full_step_reports_every_term_and_recomposes() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let pair = toy_pair("a", 1, 16);
        let real = toy_pair("r", 2, 16).y;
        let out = train_step(&mut state, &cfg, &[&pair], Some(&real), false).unwrap();
        let l = out.losses;
        let (lg, lm) = (l.l_g.unwrap(), l.l_m.unwrap());
        assert_eq!(l.l_pixel, Some((lg + lm) / 2.0));
        let w = cfg.weights;
        let manual = l.l_a
            + w.lambda_cycle * l.l_cycle.unwrap()
            + w.lambda_pixel * l.l_pixel.unwrap()
            + w.lambda_coral * l.l_coral.unwrap();
        assert!((manual - l.total).abs() < 1e-6);
        assert!(out.d_p.is_some());
        assert_eq!(state.step, 1);
        assert_eq!(state.opt_g.steps, 1);
    }

    #[test]
    fn disabled_terms_are_absent() {
        let pair = toy_pair("a", 1, 16);
        let real = toy_pair("r", 2, 16).y;
        for v in [
            Variant::NoDomainAdaptation,
            Variant::NoFeedback,
            Variant::NoPixel,
        ] {
            let cfg = v.apply(&small_cfg());
            let mut state = TrainState::new(&cfg).unwrap();
            let out = train_step(&mut state, &cfg, &[&pair], Some(&real), false).unwrap();
            let l = out.losses;
            match v {
                Variant::NoDomainAdaptation => assert!(l.l_coral.is_none() && l.l_m.is_some()),
                Variant::NoFeedback => {
                    assert!(l.l_m.is_none() && l.l_cycle.is_none() && out.d_p.is_none());
                    assert_eq!(l.l_pixel, l.l_g);
                }
                Variant::NoPixel => {
                    assert!(l.l_g.is_none() && l.l_m.is_none() && l.l_pixel.is_none())
                }
                Variant::Full => unreachable!(),
            }
        }
    }

    #[test]
    fn alignment_without_real_image_is_a_config_error() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let pair = toy_pair("a", 1, 16);
        assert!(matches!(
            train_step(&mut state, &cfg, &[&pair], None, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn discriminator_step_lowers_its_own_loss() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let pair = toy_pair("a", 4, 16);
        let fake = state
            .generator
            .enhance(&ImagePlane::from_tensor(&pair.y).unwrap())
            .unwrap()
            .to_tensor::<f32>();
        let eval = |d: &Discriminator<f32>| {
            let mut g = Graph::new();
            let p = d.bind(&mut g, false);
            let r = g.input(pair.x.clone());
            let f = g.input(fake.clone());
            let lr = d.forward(&mut g, &p, r).unwrap();
            let lf = d.forward(&mut g, &p, f).unwrap();
            let o = discriminator_objective(&mut g, lr, lf, GanMode::Bce);
            g.value(o).item()
        };
        let before = eval(&state.d_g);
        let (reported, _) = discriminator_update(
            &mut state.d_g,
            &mut state.opt_dg,
            &pair.x,
            &fake,
            GanMode::Bce,
            2e-4,
            0,
            "D_g",
        )
        .unwrap();
        assert!((reported - before as f64).abs() < 1e-6);
        assert!(eval(&state.d_g) < before);
    }

    #[test]
    fn batched_step_runs() {
        let cfg = TrainConfig {
            batch_size: 2,
            ..small_cfg()
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let (a, b) = (toy_pair("a", 1, 16), toy_pair("b", 2, 16));
        let real = Tensor::stack(&[toy_pair("r", 3, 16).y, toy_pair("s", 5, 16).y]);
        let out = train_step(&mut state, &cfg, &[&a, &b], Some(&real), false).unwrap();
        assert!(out.losses.total.is_finite());
    }
}
