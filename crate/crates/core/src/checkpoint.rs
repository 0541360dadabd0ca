//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `UWGANCKP`, a little-endian `u32` version, a
//! `u64` header length, a JSON header, then every tensor listed in the
//! header as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::training::{Adam, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"UWGANCKP";
const VERSION: u32 = 1;
pub const FORMAT_TAG: &str = "uwgan-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128` portably.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub seed: u64,
    pub step: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train_config: Option<TrainConfig>,
    pub rng: Option<RngState>,
    pub optimizers: Vec<(String, OptimizerState)>,
    pub tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["generator", "d_g", "d_p"];

fn push_set(entries: &mut Vec<TensorEntry>, data: &mut Vec<f32>, group: &str, set: &ParamSet<f32>) {
    for (name, t) in set.iter() {
        entries.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
        });
        data.extend_from_slice(t.data());
    }
}

fn push_moments(
    entries: &mut Vec<TensorEntry>,
    data: &mut Vec<f32>,
    group: &str,
    names: &[String],
    adam: &Adam<f32>,
) {
    for (kind, list) in [("m", &adam.m), ("v", &adam.v)] {
        for (name, t) in names.iter().zip(list) {
            entries.push(TensorEntry {
                group: format!("adam.{group}.{kind}"),
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            data.extend_from_slice(t.data());
        }
    }
}

fn write_file(path: &Path, header: &CheckpointHeader, data: &[f32]) -> Result<()> {
    let json = serde_json::to_vec(header).expect("checkpoint header serializes");
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    buf.write_u64::<LittleEndian>(json.len() as u64).unwrap();
    buf.extend_from_slice(&json);
    for &v in data {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the complete training state.
pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let sets = [
        state.generator.params(),
        state.d_g.params(),
        state.d_p.params(),
    ];
    let opts = [&state.opt_g, &state.opt_dg, &state.opt_dp];
    for (group, set) in GROUPS.iter().zip(sets) {
        push_set(&mut entries, &mut data, group, set);
    }
    for ((group, set), adam) in GROUPS.iter().zip(sets).zip(opts) {
        push_moments(&mut entries, &mut data, group, set.names(), adam);
    }
    let header = CheckpointHeader {
        format: FORMAT_TAG.into(),
        seed: state.seed,
        step: state.step,
        generator: state.generator.config().clone(),
        discriminator: state.d_g.config().clone(),
        train_config: Some(cfg.clone()),
        rng: Some(RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        }),
        optimizers: GROUPS
            .iter()
            .zip(opts)
            .map(|(g, a)| {
                (
                    g.to_string(),
                    OptimizerState {
                        beta1: a.beta1,
                        beta2: a.beta2,
                        eps: a.eps,
                        steps: a.steps,
                    },
                )
            })
            .collect(),
        tensors: entries,
    };
    write_file(path, &header, &data)
}

/// Writes the generator alone, for inference.
pub fn save_generator(path: &Path, generator: &Generator<f32>, seed: u64) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    push_set(&mut entries, &mut data, "generator", generator.params());
    let header = CheckpointHeader {
        format: FORMAT_TAG.into(),
        seed,
        step: 0,
        generator: generator.config().clone(),
        discriminator: DiscriminatorConfig::default(),
        train_config: None,
        rng: None,
        optimizers: Vec::new(),
        tensors: entries,
    };
    write_file(path, &header, &data)
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let malformed = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(malformed("not a checkpoint file".into()));
        }
        let mut r = &bytes[8..];
        let version = r.read_u32::<LittleEndian>().unwrap();
        if version != VERSION {
            return Err(malformed(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.read_u64::<LittleEndian>().unwrap() as usize;
        if r.len() < len {
            return Err(malformed("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..len]).map_err(|e| malformed(e.to_string()))?;
        if header.format != FORMAT_TAG {
            return Err(malformed(format!("unknown format tag '{}'", header.format)));
        }
        let mut payload = &r[len..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if payload.len() != 4 * expected {
            return Err(malformed(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                4 * expected
            )));
        }
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = (0..n)
                    .map(|_| payload.read_f32::<LittleEndian>().unwrap())
                    .collect();
                Tensor::from_vec(&e.shape, data)
            })
            .collect();
        Ok(Self { header, tensors })
    }

    fn group(&self, group: &str) -> Vec<(&TensorEntry, &Tensor<f32>)> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter(|(e, _)| e.group == group)
            .collect()
    }

    fn param_set(&self, group: &str) -> Result<ParamSet<f32>> {
        let items = self.group(group);
        if items.is_empty() {
            return Err(Error::validation(format!(
                "checkpoint has no '{group}' tensors"
            )));
        }
        let mut set = ParamSet::default();
        for (e, t) in items {
            set.push(e.name.clone(), t.clone());
        }
        Ok(set)
    }

    pub fn generator(&self) -> Result<Generator<f32>> {
        let mut g = Generator::new(self.header.generator.clone(), 0)?;
        g.load_params(self.param_set("generator")?)?;
        Ok(g)
    }

    fn discriminator(&self, group: &str) -> Result<Discriminator<f32>> {
        let mut d = Discriminator::new(self.header.discriminator.clone(), 0)?;
        d.load_params(self.param_set(group)?)?;
        Ok(d)
    }

    fn adam(&self, group: &str, params: &ParamSet<f32>) -> Result<Adam<f32>> {
        let (_, opt) = self
            .header
            .optimizers
            .iter()
            .find(|(g, _)| g == group)
            .ok_or_else(|| {
                Error::validation(format!("checkpoint has no optimiser state for '{group}'"))
            })?;
        let moments = |kind: &str| -> Result<Vec<Tensor<f32>>> {
            let items = self.group(&format!("adam.{group}.{kind}"));
            if items.len() != params.len() {
                return Err(Error::validation(format!(
                    "optimiser moments for '{group}' do not match its parameters"
                )));
            }
            Ok(items.into_iter().map(|(_, t)| t.clone()).collect())
        };
        Ok(Adam {
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            steps: opt.steps,
            m: moments("m")?,
            v: moments("v")?,
        })
    }

    /// Rebuilds the full training state for resuming.
    pub fn train_state(&self) -> Result<TrainState> {
        let rng_state = self.header.rng.as_ref().ok_or_else(|| {
            Error::validation("checkpoint holds no training state (generator only)")
        })?;
        let generator = self.generator()?;
        let d_g = self.discriminator("d_g")?;
        let d_p = self.discriminator("d_p")?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(rng_state.seed);
        rng.set_stream(rng_state.stream);
        let word_pos: u128 = rng_state
            .word_pos
            .parse()
            .map_err(|_| Error::validation("checkpoint rng position is not a number"))?;
        rng.set_word_pos(word_pos);
        Ok(TrainState {
            seed: self.header.seed,
            step: self.header.step,
            opt_g: self.adam("generator", generator.params())?,
            opt_dg: self.adam("d_g", d_g.params())?,
            opt_dp: self.adam("d_p", d_p.params())?,
            generator,
            d_g,
            d_p,
            rng,
        })
    }
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    Checkpoint::read(path)?.generator()
}

pub fn load_state(path: &Path) -> Result<(TrainState, Option<TrainConfig>)> {
    let ckpt = Checkpoint::read(path)?;
    Ok((ckpt.train_state()?, ckpt.header.train_config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn state_roundtrips_exactly() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 17;
        state.opt_g.steps = 17;
        state.opt_g.m[0].data_mut()[3] = 0.25;
        let _: u64 = state.rng.random();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save(&path, &state, &cfg).unwrap();
        let (mut back, back_cfg) = load_state(&path).unwrap();
        assert_eq!(back_cfg.unwrap(), cfg);
        assert_eq!(back.step, 17);
        assert_eq!(back.generator.params(), state.generator.params());
        assert_eq!(back.d_p.params(), state.d_p.params());
        assert_eq!(back.opt_g, state.opt_g);
        assert_eq!(back.opt_dg, state.opt_dg);
        assert_eq!(back.rng.random::<u64>(), state.rng.random::<u64>());
        assert!(!dir.path().join("s.ckpt.tmp").exists());
    }

    #[test]
    fn generator_only_checkpoint_loads_for_inference() {
        let g = Generator::<f32>::new(GeneratorConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        save_generator(&path, &g, 4).unwrap();
        assert_eq!(load_generator(&path).unwrap().params(), g.params());
        assert!(load_state(&path).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Format { .. })));

        let g = Generator::<f32>::new(GeneratorConfig::default(), 4).unwrap();
        save_generator(&path, &g, 4).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Format { .. })));
    }
}
