//! Input embeddings for 8-bit codes, plus the start-of-sequence shift.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LinearVars, ParamSource};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// 8 octaves of sine and cosine.
pub const SINUSOID_FEATURES: usize = 16;
pub const LEARNED_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// Fixed multi-octave sinusoidal features of the code, then a linear map.
    Sinusoidal,
    /// The scalar code value in `[-1, 1]`, then a linear map.
    LinearScaling,
    /// A trainable 256-row table.
    Learned,
    /// A trainable table with dropout on the looked-up rows while training.
    LearnedDropout,
}

impl EmbedMode {
    pub const ALL: [EmbedMode; 4] = [
        EmbedMode::Sinusoidal,
        EmbedMode::LinearScaling,
        EmbedMode::Learned,
        EmbedMode::LearnedDropout,
    ];
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedMode::Sinusoidal => "sinusoidal",
            EmbedMode::LinearScaling => "linear-scaling",
            EmbedMode::Learned => "learned",
            EmbedMode::LearnedDropout => "learned-dropout",
        })
    }
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbedMode::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::Config(format!("unknown embedding `{s}` (sinusoidal | linear-scaling | learned | learned-dropout)"))
        })
    }
}

/// `(sin πm/255, cos πm/255)`, exact where the angle is a multiple of π.
fn sin_cos_frac(m: i64) -> (f64, f64) {
    match m.rem_euclid(510) {
        0 => (0.0, 1.0),
        255 => (0.0, -1.0),
        r => (PI * r as f64 / 255.0).sin_cos(),
    }
}

/// Features of `v = code/127.5 − 1`: `sin(2^k π v)` for k = 0..8, then the
/// matching cosines.
pub fn sinusoidal_features(code: u8) -> [f64; SINUSOID_FEATURES] {
    // 2^k π v = π · 2^k (2·code − 255) / 255
    let base = 2 * i64::from(code) - 255;
    let mut out = [0.0; SINUSOID_FEATURES];
    for k in 0..SINUSOID_FEATURES / 2 {
        let (s, c) = sin_cos_frac(base << k);
        out[k] = s;
        out[k + SINUSOID_FEATURES / 2] = c;
    }
    out
}

/// Code value rescaled to `[-1, 1]`.
pub fn code_value(code: u8) -> f64 {
    f64::from(code) / 127.5 - 1.0
}

#[derive(Clone, Copy, Debug)]
pub enum EmbedVars<'t, S: Real> {
    Projected(LinearVars<'t, S>),
    Table(Var<'t, S>),
}

impl<'t, S: Real> EmbedVars<'t, S> {
    pub fn from_source(src: &impl ParamSource<'t, S>, mode: EmbedMode) -> Result<Self> {
        Ok(match mode {
            EmbedMode::Sinusoidal | EmbedMode::LinearScaling => {
                EmbedVars::Projected(LinearVars::from_source(src, "embed")?)
            }
            EmbedMode::Learned | EmbedMode::LearnedDropout => {
                EmbedVars::Table(src.param("embed.table")?)
            }
        })
    }
}

/// Row gather `table[codes]` with scatter-add backward.
fn gather<'t, S: Real>(table: Var<'t, S>, codes: &[u8], shape: &[usize]) -> Result<Var<'t, S>> {
    let tv = table.value();
    let d = match *tv.shape() {
        [256, d] => d,
        _ => {
            return Err(Error::shape(format!(
                "embedding table must be [256, width], got {:?}",
                tv.shape()
            )))
        }
    };
    let mut out = Vec::with_capacity(codes.len() * d);
    for &c in codes {
        out.extend_from_slice(&tv.data()[usize::from(c) * d..(usize::from(c) + 1) * d]);
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(d);
    let y = Tensor::new(out_shape, out)?;
    let codes = codes.to_vec();
    Ok(table.tape().record(&[table], y, move |gy| {
        let mut g = vec![S::zero(); 256 * d];
        for (row, &c) in gy.data().chunks_exact(d).zip(&codes) {
            for (acc, &v) in g[usize::from(c) * d..(usize::from(c) + 1) * d]
                .iter_mut()
                .zip(row)
            {
                *acc += v;
            }
        }
        vec![Some(Tensor::new([256, d], g).unwrap())]
    }))
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout<'t, S: Real>(x: Var<'t, S>, rate: f64, rng: &mut ChaCha8Rng) -> Var<'t, S> {
    let xv = x.value();
    let keep = S::lit(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..xv.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect();
    let y = Tensor::new(
        xv.shape().to_vec(),
        xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
    )
    .unwrap();
    x.tape().record(&[x], y, move |gy| {
        vec![Some(
            Tensor::new(
                gy.shape().to_vec(),
                gy.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect(),
            )
            .unwrap(),
        )]
    })
}

/// Embed `codes` laid out as `[batch, time]` into `[batch, time, d]`.
/// Dropout applies only when `train_rng` is given.
pub fn embed<'t, S: Real>(
    mode: EmbedMode,
    vars: &EmbedVars<'t, S>,
    codes: &[u8],
    batch: usize,
    time: usize,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'t, S>> {
    if codes.len() != batch * time {
        return Err(Error::shape(format!(
            "{} codes do not fill [{batch}, {time}]",
            codes.len()
        )));
    }
    match (mode, vars) {
        (EmbedMode::Sinusoidal, EmbedVars::Projected(lin)) => {
            let mut feats = Vec::with_capacity(codes.len() * SINUSOID_FEATURES);
            for &c in codes {
                feats.extend(sinusoidal_features(c).iter().map(|&f| S::lit(f)));
            }
            let f = lin
                .w
                .tape()
                .constant(Tensor::new([batch, time, SINUSOID_FEATURES], feats)?);
            lin.forward(f)
        }
        (EmbedMode::LinearScaling, EmbedVars::Projected(lin)) => {
            let v = codes.iter().map(|&c| S::lit(code_value(c))).collect();
            let f = lin.w.tape().constant(Tensor::new([batch, time, 1], v)?);
            lin.forward(f)
        }
        (EmbedMode::Learned, EmbedVars::Table(t)) => gather(*t, codes, &[batch, time]),
        (EmbedMode::LearnedDropout, EmbedVars::Table(t)) => {
            let x = gather(*t, codes, &[batch, time])?;
            Ok(match train_rng {
                Some(rng) => dropout(x, LEARNED_DROPOUT, rng),
                None => x,
            })
        }
        _ => Err(Error::Invalid(format!(
            "embedding parameters do not match mode {mode}"
        ))),
    }
}

/// Replace step 0 of every row of `x` (`[batch, time, d]`) with `start`
/// (`[d]`).
pub fn shift_in<'t, S: Real>(x: Var<'t, S>, start: Var<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    let sv = start.value();
    let (batch, time, d) = match *xv.shape() {
        [b, t, d] => (b, t, d),
        _ => {
            return Err(Error::shape(format!(
                "shift_in expects [batch, time, width], got {:?}",
                xv.shape()
            )))
        }
    };
    if sv.shape() != [d] {
        return Err(Error::shape(format!(
            "start vector {:?} does not match width {d}",
            sv.shape()
        )));
    }
    let mut y = xv.data().to_vec();
    if time > 0 {
        for b in 0..batch {
            y[b * time * d..b * time * d + d].copy_from_slice(sv.data());
        }
    }
    let y = Tensor::new(xv.shape().to_vec(), y)?;
    Ok(x.tape().record(&[x, start], y, move |gy| {
        let mut gx = gy.data().to_vec();
        let mut gs = vec![S::zero(); d];
        if time > 0 {
            for b in 0..batch {
                let row = &mut gx[b * time * d..b * time * d + d];
                for (acc, v) in gs.iter_mut().zip(row.iter_mut()) {
                    *acc += *v;
                    *v = S::zero();
                }
            }
        }
        vec![
            Some(Tensor::new(gy.shape().to_vec(), gx).unwrap()),
            Some(Tensor::from_vec(gs)),
        ]
    }))
}
