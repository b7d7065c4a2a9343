//! One line per acceptance criterion. Criteria marked as observations are
//! reported without affecting the exit status.
//!
//! The overfit run defaults to a shortened schedule; set
//! `HRNN_ACCEPTANCE_FULL=1` to run the full 2000 steps.
//! `HRNN_ACCEPTANCE_ONLY=4,6` runs a subset.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use hrnn::audio::{
    read_wav, synth_generate, write_wav, Encoding, PcmAudio, QuantizedDataset, SynthKind,
};
use hrnn::gradcheck::{analytic_grads, check_gradients, eval_loss, rel_err};
use hrnn::infer::{bench_throughput, StepModel};
use hrnn::model::{
    count_params, forward_logits, CheckpointBundle, ModelConfig, ParamSet, RunConfig, TrainConfig,
    VOCAB,
};
use hrnn::nn::EmbedMode;
use hrnn::scan::{combine, scan, Affine, ScanCarry, ScanElement, ScanVariant};
use hrnn::selftest::jittered_params;
use hrnn::tensor::{Real, Tape, Tensor, Var};
use hrnn::train::{
    batch_gradients, checkpoint_path, evaluate_checkpoint, nll_bits, train, StepMetrics,
    METRICS_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn architecture_counts() -> Outcome {
    let cfg = ModelConfig::default();
    let blocks = ParamSet::<f32>::build(&cfg, 0)
        .map_err(|e| e.to_string())?
        .names()
        .filter(|n| n.ends_with(".norm1.gain"))
        .count();
    ensure(
        blocks == 36 && cfg.total_pooling() == 160,
        format!(
            "blocks={blocks} innermost_reduction={}",
            cfg.total_pooling()
        ),
    )
}

fn parameter_deltas() -> Outcome {
    let total = |g| {
        count_params(&ModelConfig {
            conv_groups: g,
            ..ModelConfig::default()
        })
        .total
    };
    let (t1, t4, t128) = (total(1), total(4), total(128));
    let off = (t128 as f64 - 7.3e6) / 7.3e6;
    ensure(
        t1 - t128 == 487_680 && t4 - t128 == 119_040 && off.abs() < 0.15,
        format!(
            "g1-g128={} g4-g128={} total={t128} ({:+.1}% vs 7.3M)",
            t1 - t128,
            t4 - t128,
            off * 100.0
        ),
    )
}

/// Random elements in f32 plus an independent f64 recurrence.
fn scan_case(t: usize, c: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t * c;
    let mut planes = vec![Vec::with_capacity(n); 4];
    for _ in 0..n {
        let (m, ph) = (rng.gen_range(0.0..0.999f64), rng.gen_range(-3.2..3.2f64));
        planes[0].push(m * ph.cos());
        planes[1].push(m * ph.sin());
        planes[2].push(rng.gen_range(-1.0..1.0));
        planes[3].push(rng.gen_range(-1.0..1.0));
    }
    let (mut hr, mut hi) = (vec![0.0f64; c], vec![0.0f64; c]);
    let (mut want_re, mut want_im) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let k = i % c;
        let re = planes[0][i] * hr[k] - planes[1][i] * hi[k] + planes[2][i];
        hi[k] = planes[0][i] * hi[k] + planes[1][i] * hr[k] + planes[3][i];
        hr[k] = re;
        want_re.push(hr[k]);
        want_im.push(hi[k]);
    }
    let f32_plane =
        |p: &Vec<f64>| Tensor::new([t, c], p.iter().map(|&v| v as f32).collect()).unwrap();
    let elems = ScanElement::new(
        f32_plane(&planes[0]),
        f32_plane(&planes[1]),
        f32_plane(&planes[2]),
        f32_plane(&planes[3]),
    )
    .map_err(|e| e.to_string())?;
    let rms = (want_re.iter().chain(&want_im).map(|v| v * v).sum::<f64>() / (2 * n) as f64).sqrt();
    let mut worst = 0.0f64;
    let variants = [ScanVariant::Tree]
        .into_iter()
        .chain([1, 2, 4, 8].map(|workers| ScanVariant::Chunked { workers }));
    for v in variants {
        let (s, _) = scan(v, &elems, &ScanCarry::zeros(c)).map_err(|e| e.to_string())?;
        for (got, want) in [(s.re.data(), &want_re), (s.im.data(), &want_im)] {
            for (&g, &w) in got.iter().zip(want.iter()) {
                worst = worst.max((f64::from(g) - w).abs() / (w.abs() + rms));
            }
        }
    }
    Ok(worst)
}

fn scan_correctness() -> Outcome {
    let long = scan_case(1 << 20, 4, 1)?;
    let wide = scan_case(1 << 14, 256, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut algebra = 0.0f64;
    for _ in 0..1000 {
        let mut draw = || Affine::<f64> {
            a_re: rng.gen_range(-1.5..1.5),
            a_im: rng.gen_range(-1.5..1.5),
            b_re: rng.gen_range(-2.0..2.0),
            b_im: rng.gen_range(-2.0..2.0),
        };
        let (x, y, z) = (draw(), draw(), draw());
        let (l, r) = (combine(combine(x, y), z), combine(x, combine(y, z)));
        algebra = algebra.max(
            (l.a_re - r.a_re).abs()
                + (l.a_im - r.a_im).abs()
                + (l.b_re - r.b_re).abs()
                + (l.b_im - r.b_im).abs(),
        );
        if combine(Affine::identity(), x) != x || combine(x, Affine::identity()) != x {
            return Err("identity is not neutral".into());
        }
    }
    ensure(
        long < 1e-4 && wide < 1e-4 && algebra < 1e-12,
        format!("T=2^20,C=4: {long:.1e}; T=2^14,C=256: {wide:.1e}; workers 1/2/4/8; associativity gap {algebra:.1e}"),
    )
}

fn model_loss<'t, S: Real>(
    names: &[String],
    vars: &[Var<'t, S>],
    cfg: &ModelConfig,
    codes: &[u8],
) -> hrnn::Result<Var<'t, S>> {
    let src: BTreeMap<String, Var<'t, S>> =
        names.iter().cloned().zip(vars.iter().copied()).collect();
    nll_bits(
        forward_logits(&src, cfg, codes, 1, codes.len(), None)?,
        codes,
    )
}

fn loss_fn<'a, S: Real>(
    names: &'a [String],
    cfg: &'a ModelConfig,
    codes: &'a [u8],
) -> impl for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> hrnn::Result<Var<'t, S>> + 'a {
    move |_, v| model_loss(names, v, cfg, codes)
}

/// 20 random parameters of the toy model in f64 and in f32, plus two entries
/// of every parameter tensor in f64. The per-tensor pass uses a 1e-5 floor:
/// central differences of a loss near 8 carry about 2e-10 of round-off, which
/// a smaller floor would turn into relative error on near-zero gradients.
fn gradient_integrity() -> Outcome {
    let cfg = ModelConfig::toy();
    let params = jittered_params(&cfg, 4, 0.1);
    let names: Vec<String> = params.names().cloned().collect();
    let codes: Vec<u8> = (0..16).map(|i| (i * 89 + 11) as u8).collect();
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| params.get(n).unwrap().cast())
        .collect();
    let f = loss_fn(&names, &cfg, &codes);
    let rep64 =
        check_gradients(&inputs, 1e-5, 1e-6, Some((20, 6)), &f).map_err(|e| e.to_string())?;
    let inputs32: Vec<Tensor<f32>> = names
        .iter()
        .map(|n| params.get(n).unwrap().clone())
        .collect();
    let rep32 = check_gradients(
        &inputs32,
        1e-2,
        1e-2,
        Some((20, 6)),
        loss_fn(&names, &cfg, &codes),
    )
    .map_err(|e| e.to_string())?;

    let grads = analytic_grads(&inputs, &f).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut checked, mut worst_at) = (0.0f64, 0, String::new());
    let mut work = inputs.clone();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..2 {
            let j = rng.gen_range(0..t.len());
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + 1e-5;
            let up = eval_loss(&work, &f).map_err(|e| e.to_string())?;
            work[i].data_mut()[j] = orig - 1e-5;
            let down = eval_loss(&work, &f).map_err(|e| e.to_string())?;
            work[i].data_mut()[j] = orig;
            let (a, n) = (grads[i].data()[j], (up - down) / 2e-5);
            if rel_err(a, n, 1e-5) > worst {
                worst = rel_err(a, n, 1e-5);
                worst_at = names[i].clone();
            }
            checked += 1;
        }
    }
    ensure(
        rep64.max_rel_err < 1e-4 && rep32.max_rel_err < 1e-2 && worst < 1e-4,
        format!(
            "20 params: f64 eps 1e-5 {:.1e} (< 1e-4), f32 eps 1e-2 {:.1e} (< 1e-2); all {} tensors, {checked} entries in f64: {worst:.1e} (worst {worst_at})",
            rep64.max_rel_err,
            rep32.max_rel_err,
            names.len()
        ),
    )
}

fn logits(params: &ParamSet, cfg: &ModelConfig, codes: &[u8], rows: usize) -> Tensor<f32> {
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    forward_logits(&vars, cfg, codes, rows, codes.len() / rows, None)
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

fn strict_causality() -> Outcome {
    let cfg = ModelConfig::toy();
    let params = jittered_params(&cfg, 7, 0.2);
    let codes: Vec<u8> = (0..160).map(|i| (i * 97 + 13) as u8).collect();
    let base = logits(&params, &cfg, &codes, 1);
    for t in 0..160 {
        let mut other = codes.clone();
        other[t] = other[t].wrapping_add(128);
        let changed = logits(&params, &cfg, &other, 1);
        if base.data()[..(t + 1) * VOCAB] != changed.data()[..(t + 1) * VOCAB] {
            return Err(format!(
                "perturbing position {t} changed logits at or before {t}"
            ));
        }
    }
    Ok("pooling [2,4], T=160, all 160 positions, exact equality".into())
}

fn step_parallel() -> Outcome {
    let cfg = ModelConfig::toy();
    let params = jittered_params(&cfg, 8, 0.2);
    let codes: Vec<u8> = (0..160).map(|i| (i * 7919 % 256) as u8).collect();
    let reference = logits(&params, &cfg, &codes, 1);
    let model = StepModel::new(&cfg, &params).map_err(|e| e.to_string())?;
    let mut state = model.init_state(1);
    let mut worst = 0.0f32;
    for t in 0..160 {
        let y = model
            .step(&mut state, &[if t == 0 { 0 } else { codes[t - 1] }])
            .map_err(|e| e.to_string())?;
        for (a, b) in y.iter().zip(&reference.data()[t * VOCAB..]) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(
        worst < 1e-4,
        format!("160 tokens, max abs deviation {worst:.1e}"),
    )
}

fn codec_exactness() -> Outcome {
    for enc in [Encoding::MuLaw, Encoding::Linear] {
        if let Some(c) = (0..=255u8).find(|&c| enc.encode(enc.decode(c)) != c) {
            return Err(format!("{enc:?} code {c} does not roundtrip"));
        }
    }
    let derived = ((128.5f64.ln() / 256f64.ln() + 1.0) / 2.0 * 255.0).round() as u8;
    let got = Encoding::MuLaw.encode(0.5);
    let audio = PcmAudio::new((-32768..32768).map(|v| v as f32 / 32768.0).collect(), 16000);
    let wav_ok = read_wav(&write_wav(&audio)).map_err(|e| e.to_string())? == audio;
    ensure(got == derived && derived == 239 && wav_ok, format!("512 codes roundtrip; mu-law(0.5)={got} (derived {derived}); every int16 WAV value bit-exact"))
}

fn overfit_run(
    embed_mode: EmbedMode,
    steps: u64,
    data: &QuantizedDataset,
) -> Result<(Vec<StepMetrics>, CheckpointBundle, f64), String> {
    let run = RunConfig {
        model: ModelConfig {
            embed_mode,
            ..ModelConfig::toy()
        },
        train: TrainConfig {
            lr: 0.003,
            warmup_steps: 100,
            batch_size: 4,
            epochs: 10_000,
            max_steps: steps,
            ema_rate: 0.99,
            keep_checkpoints: 1,
            ..TrainConfig::default()
        },
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = train(&run, data, dir.path(), None).map_err(|e| e.to_string())?;
    Ok((out.log, out.bundle, start.elapsed().as_secs_f64()))
}

/// Mean logged loss over the last 50 steps.
fn tail_loss(log: &[StepMetrics]) -> f64 {
    let tail = &log[log.len().saturating_sub(50)..];
    tail.iter().map(|m| m.loss_bits).sum::<f64>() / tail.len() as f64
}

fn first_step_below(log: &[StepMetrics], bits: f64) -> Option<u64> {
    log.iter().find(|m| m.loss_bits < bits).map(|m| m.step)
}

struct Overfit {
    steps: u64,
    sinusoidal: Vec<StepMetrics>,
    bundle: CheckpointBundle,
    seconds: f64,
    data: QuantizedDataset,
}

fn learning_sanity(o: &Overfit) -> Outcome {
    let eval = evaluate_checkpoint(&o.bundle, &o.data, 8, 1).map_err(|e| e.to_string())?;
    let initial = o.sinusoidal[0].loss_bits;
    let train_loss = tail_loss(&o.sinusoidal);
    let detail = format!(
        "initial {initial} bits; after {} steps train {train_loss:.3} bits, eval raw {:.3} / ema {:.3} bits, {:.0} s",
        o.steps, eval.raw, eval.ema, o.seconds
    );
    if initial != 8.0 {
        return Err(format!("initial loss is not exactly 8 bits: {detail}"));
    }
    let target =
        train_loss < 0.2 && eval.raw.min(eval.ema) < 0.2 && o.steps <= 2000 && o.seconds < 1800.0;
    let partial = if o.steps < 2000 {
        " (shortened run)"
    } else {
        ""
    };
    ensure(target, format!("{detail}; target < 0.2 bits{partial}"))
}

fn embedding_ablation(o: &Overfit) -> Outcome {
    let (learned, _, _) = overfit_run(EmbedMode::Learned, o.steps, &o.data)?;
    let sin = &o.sinusoidal;
    let reach = |log: &[StepMetrics]| {
        first_step_below(log, 1.0)
            .map_or_else(|| format!("not within {}", o.steps), |s| s.to_string())
    };
    let detail = format!(
        "steps to 1.0 bits: sinusoidal {}, learned {}; last-50-step loss {:.3} vs {:.3}; steps to 4.0 bits {:?} vs {:?}",
        reach(sin),
        reach(&learned),
        tail_loss(sin),
        tail_loss(&learned),
        first_step_below(sin, 4.0),
        first_step_below(&learned, 4.0)
    );
    let ok = match (first_step_below(sin, 1.0), first_step_below(&learned, 1.0)) {
        (Some(s), Some(l)) => s <= l,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => tail_loss(sin) <= tail_loss(&learned),
    };
    ensure(ok, detail)
}

fn throughput_direction() -> Outcome {
    let cfg = ModelConfig::default();
    let flat = cfg.unpooled();
    let pooled = bench_throughput(
        &ParamSet::build(&cfg, 0).map_err(|e| e.to_string())?,
        &cfg,
        1,
        480,
        0,
    )
    .map_err(|e| e.to_string())?;
    let unpooled = bench_throughput(
        &ParamSet::build(&flat, 0).map_err(|e| e.to_string())?,
        &flat,
        1,
        480,
        0,
    )
    .map_err(|e| e.to_string())?;
    let (p, u) = (pooled.ktok_per_s(), unpooled.ktok_per_s());
    ensure(
        p > u,
        format!(
            "default {p:.3} ktok/s vs no pooling {u:.3} ktok/s at {} blocks (x{:.2})",
            flat.num_blocks(),
            p / u
        ),
    )
}

fn determinism() -> Outcome {
    let data = synth_generate(SynthKind::SineMix, 6, 160, 9, Encoding::MuLaw, 16000)
        .map_err(|e| e.to_string())?;
    let run = |max_steps| RunConfig {
        model: ModelConfig::toy(),
        train: TrainConfig {
            lr: 0.003,
            warmup_steps: 2,
            batch_size: 4,
            epochs: 3,
            max_steps,
            seed: 10,
            keep_checkpoints: 0,
            ..TrainConfig::default()
        },
    };
    let lines = |dir: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(dir.join(METRICS_FILE))
            .unwrap_or_default()
            .lines()
            .filter_map(|l| StepMetrics::parse(l).ok().map(|m| m.deterministic_part()))
            .collect()
    };
    let whole = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = train(&run(0), &data, whole.path(), None).map_err(|e| e.to_string())?;
    train(&run(3), &data, split.path(), None).map_err(|e| e.to_string())?;
    let saved =
        CheckpointBundle::load(&checkpoint_path(split.path(), 3)).map_err(|e| e.to_string())?;
    let resumed = train(&run(0), &data, split.path(), Some(saved)).map_err(|e| e.to_string())?;
    let same_log = lines(whole.path()) == lines(split.path()) && lines(whole.path()).len() == 6;
    let same_weights = resumed.bundle == full.bundle;

    let cfg = ModelConfig::toy();
    let params = jittered_params(&cfg, 11, 0.1);
    let rows: Vec<&[u8]> = data.sequences().collect();
    let (_, g1) = batch_gradients(&params, &cfg, &rows, 160, 1, None).map_err(|e| e.to_string())?;
    let mut gap = 0.0f64;
    for shards in [2, 3, 6] {
        let (_, g) =
            batch_gradients(&params, &cfg, &rows, 160, shards, None).map_err(|e| e.to_string())?;
        let (mut d, mut n) = (0.0f64, 0.0f64);
        for ((_, a), (_, b)) in g.iter().zip(g1.iter()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                d += f64::from(x - y).powi(2);
                n += f64::from(y).powi(2);
            }
        }
        gap = gap.max((d / n).sqrt());
    }
    ensure(
        same_log && same_weights && gap < 1e-4,
        format!("resume at step 3 of 6: log identical={same_log}, weights identical={same_weights}; shard gap {gap:.1e} (< 1e-4)"),
    )
}

fn main() -> ExitCode {
    let full = std::env::var("HRNN_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let only: Option<Vec<u32>> = std::env::var("HRNN_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let steps = if full { 2000 } else { 300 };
    let overfit = std::cell::OnceCell::new();
    let overfit = || {
        overfit.get_or_init(|| {
            synth_generate(SynthKind::SineMix, 32, 1600, 1, Encoding::MuLaw, 16000)
                .map_err(|e| e.to_string())
                .and_then(|data| {
                    overfit_run(EmbedMode::Sinusoidal, steps, &data).map(
                        |(log, bundle, seconds)| Overfit {
                            steps,
                            sinusoidal: log,
                            bundle,
                            seconds,
                            data,
                        },
                    )
                })
        })
    };
    // (id, name, gated, check)
    let criteria: Vec<(u32, &str, bool, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (
            1,
            "architecture counts",
            true,
            Box::new(architecture_counts),
        ),
        (2, "parameter deltas", true, Box::new(parameter_deltas)),
        (3, "scan correctness", true, Box::new(scan_correctness)),
        (4, "gradient integrity", true, Box::new(gradient_integrity)),
        (5, "strict causality", true, Box::new(strict_causality)),
        (6, "step/parallel", true, Box::new(step_parallel)),
        (7, "codec exactness", true, Box::new(codec_exactness)),
        (
            8,
            "learning sanity",
            false,
            Box::new(|| {
                overfit()
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(learning_sanity)
            }),
        ),
        (
            9,
            "embedding ablation",
            false,
            Box::new(|| {
                overfit()
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(embedding_ablation)
            }),
        ),
        (
            10,
            "throughput direction",
            true,
            Box::new(throughput_direction),
        ),
        (11, "determinism", true, Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (id, name, gated, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) if gated => {
                failed.push(id);
                ("FAIL", d)
            }
            Err(d) => ("FAIL (not gated)", d),
        };
        println!("criterion {id:>2} {name:<24} {status}: {detail}");
    }

    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("gated failures: {failed:?}");
        ExitCode::FAILURE
    }
}
