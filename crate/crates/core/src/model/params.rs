//! Parameter layout, seeded initialization and counting.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, VOCAB};
use crate::error::{Error, Result};
use crate::nn::{EmbedMode, DECAY_SCALE, SINUSOID_FEATURES};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-limit, limit]`.
    Uniform(f64),
    /// Decay magnitudes `exp(−8·softplus(ν))` uniform in `[0.9, 0.999]`.
    LruNu,
    /// Phases uniform in `[0, π/2]`.
    LruTheta,
}

impl Init {
    /// Unit variance over `fan_in` inputs.
    fn fan_in(fan_in: usize) -> Init {
        Init::Uniform((3.0 / fan_in as f64).sqrt())
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Uniform(l) => rng.gen_range(-l..=l),
            Init::LruNu => {
                let mag: f64 = rng.gen_range(0.9..=0.999);
                let sp = -mag.ln() / DECAY_SCALE;
                // inverse softplus
                sp.exp_m1().ln()
            }
            Init::LruTheta => rng.gen_range(0.0..=FRAC_PI_2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: &[usize], init: Init, decay: bool) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            decay,
        });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize, zero: bool) {
        let init = if zero {
            Init::Zeros
        } else {
            Init::fan_in(fan_in)
        };
        self.push(format!("{prefix}.w"), &[fan_in, out], init, true);
        self.push(format!("{prefix}.b"), &[out], Init::Zeros, false);
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig) {
        let (d, n, md) = (cfg.width, cfg.rnn_dim, cfg.mlp_expansion * cfg.width);
        let k = n / cfg.gate_blocks;
        self.push(format!("{prefix}.norm1.gain"), &[d], Init::Ones, false);
        self.linear(&format!("{prefix}.in_proj"), d, n, false);
        self.linear(&format!("{prefix}.gate_proj"), d, n, false);
        self.push(format!("{prefix}.cglru.nu"), &[n], Init::LruNu, false);
        self.push(format!("{prefix}.cglru.theta"), &[n], Init::LruTheta, false);
        for g in ["r", "i"] {
            self.push(
                format!("{prefix}.cglru.w_{g}"),
                &[cfg.gate_blocks, k, k],
                Init::fan_in(k),
                true,
            );
            self.push(format!("{prefix}.cglru.b_{g}"), &[n], Init::Zeros, false);
        }
        self.linear(&format!("{prefix}.out_proj"), n, d, true);
        self.push(format!("{prefix}.norm2.gain"), &[d], Init::Ones, false);
        self.linear(&format!("{prefix}.mlp_in"), d, md, false);
        self.linear(&format!("{prefix}.mlp_gate"), d, md, false);
        self.linear(&format!("{prefix}.mlp_out"), md, d, true);
    }

    fn pool(&mut self, prefix: &str, cfg: &ModelConfig, p: usize, up: bool) {
        let cg = cfg.width / cfg.conv_groups;
        let fan_in = if up { cg } else { cg * p };
        self.push(
            format!("{prefix}.w"),
            &[cfg.width, cg, p],
            Init::fan_in(fan_in),
            true,
        );
        self.push(format!("{prefix}.b"), &[cfg.width], Init::Zeros, false);
    }
}

pub fn block_prefix(stage: &str, k: usize) -> String {
    format!("{stage}.block{k}")
}

pub fn down_stage(level: usize) -> String {
    format!("down{level}")
}

pub fn up_stage(level: usize) -> String {
    format!("up{level}")
}

pub const INNER_STAGE: &str = "inner";

pub fn down_pool(level: usize) -> String {
    format!("pool.down{level}")
}

pub fn up_pool(level: usize) -> String {
    format!("pool.up{level}")
}

/// Every parameter of the model in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.width;
    let mut s = Specs(Vec::new());
    match cfg.embed_mode {
        EmbedMode::Sinusoidal => s.linear("embed", SINUSOID_FEATURES, d, false),
        EmbedMode::LinearScaling => s.linear("embed", 1, d, false),
        EmbedMode::Learned | EmbedMode::LearnedDropout => {
            s.push("embed.table".into(), &[VOCAB, d], Init::fan_in(1), true)
        }
    }
    s.push("start".into(), &[d], Init::Zeros, false);
    for (l, &p) in cfg.pooling_factors.iter().enumerate() {
        for k in 0..cfg.blocks_per_stage {
            s.block(&block_prefix(&down_stage(l), k), cfg);
        }
        s.pool(&down_pool(l), cfg, p, false);
    }
    for k in 0..cfg.blocks_per_stage {
        s.block(&block_prefix(INNER_STAGE, k), cfg);
    }
    for (l, &p) in cfg.pooling_factors.iter().enumerate().rev() {
        s.pool(&up_pool(l), cfg, p, true);
        for k in 0..cfg.blocks_per_stage {
            s.block(&block_prefix(&up_stage(l), k), cfg);
        }
    }
    s.linear("head", d, VOCAB, true);
    s.0
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S: Real = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<S>>) -> Self {
        ParamSet { tensors }
    }

    /// Seeded initialization. Values are drawn in 64-bit and rounded, so
    /// `build::<f32>` equals `build::<f64>` cast to 32-bit.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|spec| {
                let t = Tensor::from_fn(spec.shape.clone(), |_| S::lit(spec.init.sample(&mut rng)));
                (spec.name, t)
            })
            .collect();
        Ok(ParamSet { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape().to_vec()))
    }

    pub fn map(&self, f: impl Fn(&Tensor<S>) -> Tensor<S>) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(v)))
                .collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn same_layout(&self, other: &ParamSet<S>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Register every tensor on `tape`, as trainable leaves or constants.
    pub fn to_vars<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> BTreeMap<String, Var<'t, S>> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    if trainable {
                        tape.leaf(v.clone())
                    } else {
                        tape.constant(v.clone())
                    },
                )
            })
            .collect()
    }

    /// Check names and shapes against the layout `cfg` prescribes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Invalid(format!("missing parameter `{}`", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Invalid(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .unwrap();
            return Err(Error::Invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Parameter totals with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub embedding: usize,
    /// `(stage name, scalars)` in forward order.
    pub stages: Vec<(String, usize)>,
    pub pooling: usize,
    pub pooling_weights: usize,
    pub head: usize,
}

pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let specs = param_specs(cfg);
    let mut count = ParamCount {
        total: 0,
        embedding: 0,
        stages: Vec::new(),
        pooling: 0,
        pooling_weights: 0,
        head: 0,
    };
    for spec in &specs {
        let n = spec.len();
        count.total += n;
        let first = spec.name.split('.').next().unwrap_or("");
        match first {
            "embed" | "start" => count.embedding += n,
            "head" => count.head += n,
            "pool" => {
                count.pooling += n;
                if spec.name.ends_with(".w") {
                    count.pooling_weights += n;
                }
            }
            stage => match count.stages.last_mut() {
                Some((name, c)) if name == stage => *c += n,
                _ => count.stages.push((stage.to_string(), n)),
            },
        }
    }
    count
}
