//! Fast invariant suite: scan equivalence, codec and WAV roundtrips,
//! causality and step/parallel agreement on the toy model, and gradient spot
//! checks. Runs in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{read_wav, write_wav, Encoding, PcmAudio};
use crate::gradcheck::{check_gradients, random_tensor};
use crate::infer::StepModel;
use crate::model::{forward_logits, ModelConfig, ParamSet, VOCAB};
use crate::nn::{temporal_block, BlockVars};
use crate::scan::{scan, ScanCarry, ScanElement, ScanVariant};
use crate::tensor::{Tape, Tensor};
use crate::train::nll_bits;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> std::result::Result<String, String>;

pub const CHECKS: [(&str, Check); 7] = [
    ("scan_equivalence", scan_equivalence),
    ("codec_roundtrip", codec_roundtrip),
    ("wav_roundtrip", wav_roundtrip),
    ("uniform_initial_loss", uniform_initial_loss),
    ("causality", causality),
    ("step_parallel_agreement", step_parallel_agreement),
    ("gradient_spot_check", gradient_spot_check),
];

pub fn run_selftest() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckOutcome {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}

/// Toy-config weights with every tensor jittered, so the zero-initialized
/// projections and head carry signal.
pub fn jittered_params(cfg: &ModelConfig, seed: u64, scale: f32) -> ParamSet {
    let mut params = ParamSet::build(cfg, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a49_5454);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    params
}

fn scan_equivalence() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (t, c) = (257, 5);
    let mag: Tensor<f64> = random_tensor(&[t, c], 0.5, 0.999, &mut rng);
    let ph: Tensor<f64> = random_tensor(&[t, c], -3.0, 3.0, &mut rng);
    let a_re = Tensor::new(
        [t, c],
        mag.data()
            .iter()
            .zip(ph.data())
            .map(|(m, p)| m * p.cos())
            .collect(),
    )
    .unwrap();
    let a_im = Tensor::new(
        [t, c],
        mag.data()
            .iter()
            .zip(ph.data())
            .map(|(m, p)| m * p.sin())
            .collect(),
    )
    .unwrap();
    let elems = ScanElement::new(
        a_re,
        a_im,
        random_tensor(&[t, c], -1.0, 1.0, &mut rng),
        random_tensor(&[t, c], -1.0, 1.0, &mut rng),
    )
    .map_err(|e| e.to_string())?;
    let h0 = ScanCarry::new(
        random_tensor(&[c], -1.0, 1.0, &mut rng),
        random_tensor(&[c], -1.0, 1.0, &mut rng),
    )
    .map_err(|e| e.to_string())?;
    let (reference, _) = scan(ScanVariant::Sequential, &elems, &h0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for v in [ScanVariant::Tree, ScanVariant::Chunked { workers: 3 }] {
        let (s, _) = scan(v, &elems, &h0).map_err(|e| e.to_string())?;
        worst = worst
            .max(s.re.max_abs_diff(&reference.re))
            .max(s.im.max_abs_diff(&reference.im));
    }
    if worst < 1e-9 {
        Ok(format!("max_abs_diff={worst:.2e}"))
    } else {
        Err(format!("variants disagree by {worst:.2e}"))
    }
}

fn codec_roundtrip() -> std::result::Result<String, String> {
    for enc in [Encoding::MuLaw, Encoding::Linear] {
        for code in 0..=255u8 {
            let back = enc.encode(enc.decode(code));
            if back != code {
                return Err(format!("{enc:?}: code {code} came back as {back}"));
            }
        }
    }
    Ok("codes=512".into())
}

fn wav_roundtrip() -> std::result::Result<String, String> {
    let samples: Vec<f32> = (-32768..32768)
        .step_by(97)
        .map(|v| v as f32 / 32768.0)
        .collect();
    let audio = PcmAudio::new(samples, 16000);
    let back = read_wav(&write_wav(&audio)).map_err(|e| e.to_string())?;
    if back == audio {
        Ok(format!("samples={}", audio.samples.len()))
    } else {
        Err("decoded audio differs".into())
    }
}

fn uniform_initial_loss() -> std::result::Result<String, String> {
    let cfg = ModelConfig::toy();
    let params = ParamSet::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    let codes: Vec<u8> = (0..16).map(|i| (i * 37) as u8).collect();
    let logits = forward_logits(&vars, &cfg, &codes, 2, 8, None).map_err(|e| e.to_string())?;
    let loss = nll_bits(logits, &codes)
        .map_err(|e| e.to_string())?
        .value()
        .data()[0];
    if loss == 8.0 {
        Ok("nll_bits=8".into())
    } else {
        Err(format!("initial loss {loss} is not 8 bits"))
    }
}

fn toy_logits(
    cfg: &ModelConfig,
    params: &ParamSet,
    codes: &[u8],
) -> std::result::Result<Tensor<f32>, String> {
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    Ok(forward_logits(&vars, cfg, codes, 1, codes.len(), None)
        .map_err(|e| e.to_string())?
        .value()
        .as_ref()
        .clone())
}

fn causality() -> std::result::Result<String, String> {
    let cfg = ModelConfig::toy();
    let params = jittered_params(&cfg, 3, 0.2);
    let codes: Vec<u8> = (0..64).map(|i| (i * 29 + 3) as u8).collect();
    let base = toy_logits(&cfg, &params, &codes)?;
    for cut in [0usize, 7, 8, 33, 63] {
        let mut changed = codes.clone();
        for c in &mut changed[cut..] {
            *c = c.wrapping_add(101);
        }
        let other = toy_logits(&cfg, &params, &changed)?;
        // logits[t] may depend on codes[..t] only
        let prefix = (cut + 1) * VOCAB;
        if base.data()[..prefix] != other.data()[..prefix] {
            return Err(format!(
                "changing codes from {cut} on altered earlier logits"
            ));
        }
        if cut + 1 < codes.len() && base.data()[prefix..] == other.data()[prefix..] {
            return Err(format!("changing codes from {cut} on had no effect at all"));
        }
    }
    Ok("cuts=5".into())
}

fn step_parallel_agreement() -> std::result::Result<String, String> {
    let cfg = ModelConfig::toy();
    let params = jittered_params(&cfg, 4, 0.2);
    let codes: Vec<u8> = (0..40).map(|i| (i * 71 + 5) as u8).collect();
    let reference = toy_logits(&cfg, &params, &codes)?;
    let model = StepModel::new(&cfg, &params).map_err(|e| e.to_string())?;
    let mut st = model.init_state(1);
    let mut worst = 0.0f32;
    for t in 0..codes.len() {
        let prev = if t == 0 { 0 } else { codes[t - 1] };
        let y = model.step(&mut st, &[prev]).map_err(|e| e.to_string())?;
        for (a, b) in y.iter().zip(&reference.data()[t * VOCAB..(t + 1) * VOCAB]) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-4 {
        Ok(format!("max_abs_diff={worst:.2e}"))
    } else {
        Err(format!("step logits deviate by {worst:.2e}"))
    }
}

fn gradient_spot_check() -> std::result::Result<String, String> {
    let cfg = ModelConfig {
        width: 8,
        rnn_dim: 8,
        gate_blocks: 2,
        conv_groups: 2,
        ..ModelConfig::toy()
    };
    let params = jittered_params(&cfg, 5, 0.1).cast::<f64>();
    let prefix = "down0.block0";
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(prefix))
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inputs = vec![random_tensor::<f64>(&[2, 6, 8], -1.0, 1.0, &mut rng)];
    inputs.extend(names.iter().map(|n| params.get(n).unwrap().clone()));
    let weights: Tensor<f64> = random_tensor(&[2, 6, 8], -1.0, 1.0, &mut rng);
    let rep = check_gradients(&inputs, 1e-5, 1e-6, Some((40, 7)), |tape, v| {
        let src = names
            .iter()
            .cloned()
            .zip(v[1..].iter().copied())
            .collect::<std::collections::BTreeMap<_, _>>();
        let p = BlockVars::from_source(&src, prefix)?;
        let (y, _) = temporal_block(v[0], &p, ScanVariant::Sequential, None)?;
        Ok(y.mul(tape.constant(weights.clone()))?.sum_all())
    })
    .map_err(|e| e.to_string())?;
    if rep.max_rel_err < 1e-4 {
        Ok(format!(
            "checked={} max_rel_err={:.2e}",
            rep.checked, rep.max_rel_err
        ))
    } else {
        Err(format!(
            "gradient mismatch {:.2e} at {:?}",
            rep.max_rel_err, rep.worst
        ))
    }
}
