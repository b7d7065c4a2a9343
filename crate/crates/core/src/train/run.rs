//! Epoch loop, sharded gradients, checkpoints and metric logging.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::nll_bits;
use super::optim::{adamw_step, decayed_names, ema_update, global_norm, lr_schedule};
use crate::audio::QuantizedDataset;
use crate::error::{Error, Result};
use crate::model::{forward_logits, CheckpointBundle, ModelConfig, ParamSet, RunConfig};
use crate::tensor::{Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.log";

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_DROPOUT: u64 = 0x4452_4f50;

/// SplitMix64 over `(seed, stream, counter)`.
pub fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(32) ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sequence visiting order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        STREAM_SHUFFLE,
        epoch,
    )));
    order
}

/// Mean loss (bits) and gradients for `rows` (each `time` codes long).
/// Rows are split into `shards` contiguous parts evaluated on separate
/// threads; the results are combined in shard order, weighted by tokens.
pub fn batch_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    rows: &[&[u8]],
    time: usize,
    shards: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamSet)> {
    if rows.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let shards = shards.clamp(1, rows.len());
    let per = rows.len().div_ceil(shards);
    let parts: Vec<(usize, &[&[u8]])> = rows
        .chunks(per)
        .enumerate()
        .map(|(i, c)| (i * per, c))
        .collect();
    let run = |(first, part): (usize, &[&[u8]])| -> Result<(f64, ParamSet, usize)> {
        let codes: Vec<u8> = part.concat();
        let tape = Tape::new();
        let vars = params.to_vars(&tape, true);
        let mut rng = dropout_seed.map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            r.set_stream(first as u64);
            r
        });
        let logits = forward_logits(&vars, cfg, &codes, part.len(), time, rng.as_mut())?;
        let loss = nll_bits(logits, &codes)?;
        let value = f64::from(loss.value().item()?);
        let mut grads = tape.backward(loss)?;
        let g = ParamSet::from_map(
            vars.iter()
                .map(|(k, v)| {
                    let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape()));
                    (k.clone(), t)
                })
                .collect(),
        );
        Ok((value, g, codes.len()))
    };
    let results: Vec<Result<(f64, ParamSet, usize)>> = if parts.len() == 1 {
        vec![run(parts[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts.iter().map(|&p| s.spawn(move || run(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let total: usize = results.iter().map(|r| r.2).sum();
    let mut iter = results.into_iter();
    let (l0, g0, n0) = iter.next().unwrap();
    if n0 == total {
        return Ok((l0, g0));
    }
    let w0 = n0 as f64 / total as f64;
    let mut loss = l0 * w0;
    let mut grads = g0.map(|t| t.map(|v| (f64::from(v) * w0) as f32));
    for (l, g, n) in iter {
        let w = n as f64 / total as f64;
        loss += l * w;
        for ((_, acc), (_, t)) in grads.iter_mut().zip(g.iter()) {
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a = (f64::from(*a) + f64::from(v) * w) as f32;
            }
        }
    }
    Ok((loss, grads))
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_bits: f64,
    pub tokens_per_s: f64,
    pub grad_norm: f64,
    pub dropped_steps: u64,
}

impl StepMetrics {
    /// The line without the timing field, for run-to-run comparison.
    pub fn deterministic_part(&self) -> String {
        format!(
            "step={} epoch={} lr={} loss_bits={} grad_norm={} dropped_steps={}",
            self.step, self.epoch, self.lr, self.loss_bits, self.grad_norm, self.dropped_steps
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut m = StepMetrics {
            step: 0,
            epoch: 0,
            lr: 0.0,
            loss_bits: 0.0,
            tokens_per_s: 0.0,
            grad_norm: 0.0,
            dropped_steps: 0,
        };
        let bad = || Error::Invalid(format!("malformed metric line `{line}`"));
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "step" => m.step = v.parse().map_err(|_| bad())?,
                "epoch" => m.epoch = v.parse().map_err(|_| bad())?,
                "lr" => m.lr = v.parse().map_err(|_| bad())?,
                "loss_bits" => m.loss_bits = v.parse().map_err(|_| bad())?,
                "tokens_per_s" => m.tokens_per_s = v.parse().map_err(|_| bad())?,
                "grad_norm" => m.grad_norm = v.parse().map_err(|_| bad())?,
                "dropped_steps" => m.dropped_steps = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(m)
    }
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={} loss_bits={} tokens_per_s={:.1} grad_norm={} dropped_steps={}",
            self.step,
            self.epoch,
            self.lr,
            self.loss_bits,
            self.tokens_per_s,
            self.grad_norm,
            self.dropped_steps
        )
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:08}.hrck"))
}

/// Checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".hrck"))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub struct TrainOutcome {
    pub bundle: CheckpointBundle,
    /// Lines logged by this invocation.
    pub log: Vec<StepMetrics>,
}

fn save_and_prune(bundle: &CheckpointBundle, dir: &Path, keep: usize) -> Result<()> {
    bundle.save(&checkpoint_path(dir, bundle.step))?;
    if keep > 0 {
        let all = list_checkpoints(dir)?;
        for old in all.iter().take(all.len().saturating_sub(keep)) {
            fs::remove_file(old)?;
        }
    }
    Ok(())
}

/// Train from scratch or from `resume`. Writes checkpoints and the metric log
/// into `out_dir`.
pub fn train(
    run: &RunConfig,
    data: &QuantizedDataset,
    out_dir: &Path,
    resume: Option<CheckpointBundle>,
) -> Result<TrainOutcome> {
    let (mcfg, tcfg) = (&run.model, &run.train);
    mcfg.validate()?;
    tcfg.validate()?;
    mcfg.check_seq_len(data.seq_len)?;
    if data.is_empty() {
        return Err(Error::Dataset("no sequences".into()));
    }
    fs::create_dir_all(out_dir)?;
    let fresh = resume.is_none();
    let mut bundle = match resume {
        Some(b) => {
            if b.config != *mcfg {
                return Err(Error::Config(
                    "checkpoint model config differs from the run config".into(),
                ));
            }
            if b.seed != tcfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint seed {} differs from config seed {}",
                    b.seed, tcfg.seed
                )));
            }
            b
        }
        None => {
            CheckpointBundle::initial(mcfg.clone(), ParamSet::build(mcfg, tcfg.seed)?, tcfg.seed)
        }
    };
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(METRICS_FILE))?;
    if fresh {
        save_and_prune(&bundle, out_dir, tcfg.keep_checkpoints)?;
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(tcfg.batch_size) as u64;
    let mut last_step = tcfg.epochs * steps_per_epoch;
    if tcfg.max_steps > 0 {
        last_step = last_step.min(tcfg.max_steps);
    }
    let decayed = decayed_names(mcfg);
    let dropout = matches!(mcfg.embed_mode, crate::nn::EmbedMode::LearnedDropout);
    let mut log = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while bundle.step < last_step {
        let step = bundle.step + 1;
        let epoch = (step - 1) / steps_per_epoch;
        let idx = ((step - 1) % steps_per_epoch) as usize;
        if epoch != order_epoch {
            order = epoch_order(n, tcfg.seed, epoch);
            order_epoch = epoch;
        }
        let rows: Vec<&[u8]> = order[idx * tcfg.batch_size..((idx + 1) * tcfg.batch_size).min(n)]
            .iter()
            .map(|&i| data.sequence(i))
            .collect();
        let started = Instant::now();
        let dropout_seed = dropout.then(|| derive_seed(tcfg.seed, STREAM_DROPOUT, step));
        let (loss, mut grads) = batch_gradients(
            &bundle.params,
            mcfg,
            &rows,
            data.seq_len,
            tcfg.grad_shards,
            dropout_seed,
        )?;
        let norm = global_norm(&grads);
        let lr = lr_schedule(step, tcfg);
        if loss.is_finite() && norm.is_finite() {
            if tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip {
                let k = (tcfg.grad_clip / norm) as f32;
                grads = grads.map(|t| t.map(|v| v * k));
            }
            let t = step - bundle.dropped_steps;
            adamw_step(
                &mut bundle.params,
                &grads,
                &mut bundle.m,
                &mut bundle.v,
                t,
                lr,
                tcfg,
                &decayed,
            )?;
            ema_update(&mut bundle.ema, &bundle.params, tcfg.ema_rate)?;
        } else {
            bundle.dropped_steps += 1;
            log::warn!("step {step}: non-finite loss or gradient, update skipped");
        }
        bundle.step = step;
        let secs = started.elapsed().as_secs_f64();
        let metrics = StepMetrics {
            step,
            epoch,
            lr,
            loss_bits: loss,
            tokens_per_s: (rows.len() * data.seq_len) as f64 / secs.max(1e-9),
            grad_norm: norm,
            dropped_steps: bundle.dropped_steps,
        };
        writeln!(log_file, "{metrics}")?;
        if step % 50 == 0 || step == last_step {
            log::info!("{metrics}");
        } else {
            log::debug!("{metrics}");
        }
        log.push(metrics);
        let epoch_end = step % steps_per_epoch == 0;
        if epoch_end || step == last_step {
            save_and_prune(&bundle, out_dir, tcfg.keep_checkpoints)?;
        }
    }
    log_file.flush()?;
    Ok(TrainOutcome { bundle, log })
}

/// Mean bits per token over `data` under teacher forcing. Batches are
/// evaluated on up to `workers` threads and summed in a fixed order.
pub fn evaluate_nll(
    params: &ParamSet,
    cfg: &ModelConfig,
    data: &QuantizedDataset,
    batch_size: usize,
    workers: usize,
) -> Result<f64> {
    cfg.check_seq_len(data.seq_len)?;
    params.validate(cfg)?;
    if data.is_empty() {
        return Err(Error::Dataset("no sequences".into()));
    }
    let batch_size = batch_size.max(1);
    let batches: Vec<Vec<&[u8]>> = data
        .sequences()
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[_]>::to_vec)
        .collect();
    let eval = |rows: &Vec<&[u8]>| -> Result<f64> {
        let codes = rows.concat();
        let tape = Tape::new();
        let vars = params.to_vars(&tape, false);
        let logits = forward_logits(&vars, cfg, &codes, rows.len(), data.seq_len, None)?;
        Ok(f64::from(nll_bits(logits, &codes)?.value().item()?) * codes.len() as f64)
    };
    let workers = workers.clamp(1, batches.len());
    let sums: Vec<Result<f64>> = if workers == 1 {
        batches.iter().map(eval).collect()
    } else {
        let mut out: Vec<Option<Result<f64>>> = (0..batches.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let batches = &batches;
                    let eval = &eval;
                    s.spawn(move || {
                        (w..batches.len())
                            .step_by(workers)
                            .map(|i| (i, eval(&batches[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    out[i] = Some(r);
                }
            }
        });
        out.into_iter().map(Option::unwrap).collect()
    };
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / data.total_tokens() as f64)
}

/// NLL under both the raw and the EMA weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub raw: f64,
    pub ema: f64,
}

pub fn evaluate_checkpoint(
    bundle: &CheckpointBundle,
    data: &QuantizedDataset,
    batch_size: usize,
    workers: usize,
) -> Result<EvalReport> {
    Ok(EvalReport {
        raw: evaluate_nll(&bundle.params, &bundle.config, data, batch_size, workers)?,
        ema: evaluate_nll(&bundle.ema, &bundle.config, data, batch_size, workers)?,
    })
}
