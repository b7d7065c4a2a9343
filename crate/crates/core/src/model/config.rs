//! Model and training configuration, stored as flat `key=value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::EmbedMode;
use crate::scan::ScanVariant;

pub const VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Outer to inner.
    pub pooling_factors: Vec<usize>,
    pub blocks_per_stage: usize,
    pub width: usize,
    pub rnn_dim: usize,
    pub conv_groups: usize,
    pub mlp_expansion: usize,
    /// Number of diagonal blocks in the recurrence/input gate projections.
    pub gate_blocks: usize,
    pub embed_mode: EmbedMode,
    pub scan_variant: ScanVariant,
    pub scan_workers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pooling_factors: vec![2, 4, 4, 5],
            blocks_per_stage: 4,
            width: 128,
            rnn_dim: 256,
            conv_groups: 128,
            mlp_expansion: 2,
            gate_blocks: 16,
            embed_mode: EmbedMode::Sinusoidal,
            scan_variant: ScanVariant::Sequential,
            scan_workers: 1,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for tests and the overfit run.
    pub fn toy() -> Self {
        ModelConfig {
            pooling_factors: vec![2, 4],
            blocks_per_stage: 2,
            width: 32,
            rnn_dim: 64,
            conv_groups: 32,
            gate_blocks: 4,
            ..ModelConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.pooling_factors.len()
    }

    /// Sequence-length reduction at the innermost stage.
    pub fn total_pooling(&self) -> usize {
        self.pooling_factors.iter().product()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_stage * (2 * self.levels() + 1)
    }

    /// The same network with pooling removed: every block runs at the input
    /// rate in a single stage, so the block count is unchanged.
    pub fn unpooled(&self) -> Self {
        ModelConfig {
            pooling_factors: Vec::new(),
            blocks_per_stage: self.num_blocks(),
            ..self.clone()
        }
    }

    pub fn variant(&self) -> ScanVariant {
        match self.scan_variant {
            ScanVariant::Chunked { .. } => ScanVariant::Chunked {
                workers: self.scan_workers,
            },
            v => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.width == 0 {
            return bad("width", "must be positive".into());
        }
        if self.rnn_dim == 0 {
            return bad("rnn_dim", "must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage", "must be positive".into());
        }
        if self.mlp_expansion == 0 {
            return bad("mlp_expansion", "must be positive".into());
        }
        if self.conv_groups == 0 || self.width % self.conv_groups != 0 {
            return bad(
                "conv_groups",
                format!("{} does not divide width {}", self.conv_groups, self.width),
            );
        }
        if self.gate_blocks == 0 || self.rnn_dim % self.gate_blocks != 0 {
            return bad(
                "gate_blocks",
                format!(
                    "{} does not divide rnn_dim {}",
                    self.gate_blocks, self.rnn_dim
                ),
            );
        }
        if let Some(p) = self.pooling_factors.iter().find(|&&p| p < 2) {
            return bad("pooling_factors", format!("factor {p} must be at least 2"));
        }
        if self.scan_workers == 0 {
            return bad("scan_workers", "must be positive".into());
        }
        Ok(())
    }

    /// Reject sequence lengths the pooling stack cannot divide evenly.
    pub fn check_seq_len(&self, seq_len: usize) -> Result<()> {
        let total = self.total_pooling();
        if seq_len == 0 || seq_len % total != 0 {
            return Err(Error::Config(format!(
                "sequence length {seq_len} is not divisible by the total pooling factor {total}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: u64,
    pub ema_rate: f64,
    pub seed: u64,
    pub grad_shards: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: u64,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoints retained on disk; 0 keeps all.
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 1000,
            batch_size: 32,
            epochs: 500,
            ema_rate: 0.999,
            seed: 0,
            grad_shards: 1,
            max_steps: 0,
            grad_clip: 0.0,
            keep_checkpoints: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return bad("ema_rate", "must lie strictly between 0 and 1");
        }
        if !(self.lr >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.grad_shards == 0 {
            return bad("grad_shards", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip", "must be non-negative");
        }
        Ok(())
    }
}

/// Model and training settings from one config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl ModelConfig {
    /// Apply one `key=value` pair; returns false if the key is not a model key.
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "pooling_factors" => self.pooling_factors = parse_list(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "rnn_dim" => self.rnn_dim = parse_value(key, value)?,
            "conv_groups" => self.conv_groups = parse_value(key, value)?,
            "mlp_expansion" => self.mlp_expansion = parse_value(key, value)?,
            "gate_blocks" => self.gate_blocks = parse_value(key, value)?,
            "embed_mode" => self.embed_mode = value.parse()?,
            "scan_variant" => self.scan_variant = value.parse()?,
            "scan_workers" => self.scan_workers = parse_value(key, value)?,
            "vocab" => {
                if parse_value::<usize>(key, value)? != VOCAB {
                    return Err(Error::Config(format!("vocab must be {VOCAB}")));
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let pools: Vec<String> = self.pooling_factors.iter().map(|p| p.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "pooling_factors=[{}]", pools.join(","));
        let _ = writeln!(s, "blocks_per_stage={}", self.blocks_per_stage);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "rnn_dim={}", self.rnn_dim);
        let _ = writeln!(s, "conv_groups={}", self.conv_groups);
        let _ = writeln!(s, "mlp_expansion={}", self.mlp_expansion);
        let _ = writeln!(s, "gate_blocks={}", self.gate_blocks);
        let _ = writeln!(s, "embed_mode={}", self.embed_mode);
        let _ = writeln!(s, "vocab={VOCAB}");
        let _ = writeln!(s, "scan_variant={}", self.scan_variant.name());
        let _ = writeln!(s, "scan_workers={}", self.scan_workers);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in pairs(text)? {
            if !cfg.set(key, value)? {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "ema_rate" => self.ema_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "grad_shards" => self.grad_shards = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "keep_checkpoints" => self.keep_checkpoints = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr={}\nweight_decay={}\nbeta1={}\nbeta2={}\neps={}\nwarmup_steps={}\nbatch_size={}\nepochs={}\n\
             ema_rate={}\nseed={}\ngrad_shards={}\nmax_steps={}\ngrad_clip={}\nkeep_checkpoints={}\n",
            self.lr,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
            self.warmup_steps,
            self.batch_size,
            self.epochs,
            self.ema_rate,
            self.seed,
            self.grad_shards,
            self.max_steps,
            self.grad_clip,
            self.keep_checkpoints
        )
    }
}

/// Non-empty, non-comment lines split at the first `=`.
fn pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key=value, got `{line}`",
                lineno + 1
            ))
        })?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (key, value) in pairs(text)? {
            if !seen.insert(key) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            if !cfg.model.set(key, value)? && !cfg.train.set(key, value)? {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.train.to_text())
    }
}
