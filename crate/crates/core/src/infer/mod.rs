//! Autoregressive sampling on top of the step engine, and a generation
//! throughput benchmark.

pub mod step;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{Encoding, PcmAudio};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, VOCAB};
use crate::train::derive_seed;

pub use step::{state_size, Carry, LevelState, StepModel, StepState};

const STREAM_SAMPLE: u64 = 0x5341_4d50;

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f32]) -> u8 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8
}

/// Draw from `softmax(logits / temperature)` by inverting the CDF at `u ∈
/// [0, 1)`. Temperature 0 is argmax.
pub fn sample_code(logits: &[f32], temperature: f64, u: f64) -> u8 {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let weights: Vec<f64> = logits
        .iter()
        .map(|&v| ((f64::from(v) - f64::from(max)) / temperature).exp())
        .collect();
    let target = u * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i as u8;
        }
    }
    // Rounding can leave `target` just above the final sum.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub num_samples: usize,
    pub length: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Ancestral sampling of `num_samples` code sequences. Each row draws from its
/// own generator, seeded from `(seed, row)`.
pub fn generate_codes(model: &StepModel, opts: &SampleOptions) -> Result<Vec<Vec<u8>>> {
    if opts.length == 0 {
        return Err(Error::Invalid("sample length must be positive".into()));
    }
    if !(opts.temperature >= 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be non-negative, got {}",
            opts.temperature
        )));
    }
    let batch = opts.num_samples;
    let mut rngs: Vec<ChaCha8Rng> = (0..batch as u64)
        .map(|r| ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, STREAM_SAMPLE, r)))
        .collect();
    let mut state = model.init_state(batch);
    let mut prev = vec![0u8; batch];
    let mut out = vec![Vec::with_capacity(opts.length); batch];
    for _ in 0..opts.length {
        let logits = model.step(&mut state, &prev)?;
        for (r, row) in logits.chunks_exact(VOCAB).enumerate() {
            let u: f64 = rngs[r].gen();
            prev[r] = sample_code(row, opts.temperature, u);
            out[r].push(prev[r]);
        }
    }
    Ok(out)
}

/// Sample and decode to audio with the dataset's codec.
pub fn generate(
    params: &ParamSet,
    cfg: &ModelConfig,
    opts: &SampleOptions,
    encoding: Encoding,
    sample_rate: u32,
) -> Result<Vec<PcmAudio>> {
    let model = StepModel::new(cfg, params)?;
    Ok(generate_codes(&model, opts)?
        .into_iter()
        .map(|codes| {
            PcmAudio::new(
                codes.iter().map(|&c| encoding.decode(c) as f32).collect(),
                sample_rate,
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    pub length: usize,
    pub tokens: usize,
    pub seconds: f64,
}

impl BenchReport {
    pub fn ktok_per_s(&self) -> f64 {
        self.tokens as f64 / self.seconds.max(1e-12) / 1000.0
    }
}

/// Wall-clock time of sampling `batch` sequences of `length` tokens,
/// including the sampling itself but not model construction.
pub fn bench_throughput(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: usize,
    length: usize,
    seed: u64,
) -> Result<BenchReport> {
    let model = StepModel::new(cfg, params)?;
    let opts = SampleOptions {
        num_samples: batch,
        length,
        temperature: 1.0,
        seed,
    };
    let start = Instant::now();
    let codes = generate_codes(&model, &opts)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        batch,
        length,
        tokens: codes.iter().map(Vec::len).sum(),
        seconds,
    })
}
