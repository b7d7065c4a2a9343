use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::model::VOCAB;
use crate::tensor::{Real, Tensor, Var};

/// Mean negative log2-likelihood of `targets` under `softmax(logits)`, in bits
/// per token. `logits` is `[..., 256]` with one row per target.
pub fn nll_bits<'t, S: Real>(logits: Var<'t, S>, targets: &[u8]) -> Result<Var<'t, S>> {
    let lv = logits.value();
    if lv.shape().last() != Some(&VOCAB) || lv.len() != targets.len() * VOCAB {
        return Err(Error::shape(format!(
            "logits {:?} do not match {} targets",
            lv.shape(),
            targets.len()
        )));
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::shape("no targets"));
    }
    let mut lse = vec![S::zero(); n];
    let mut total = 0.0f64;
    for (i, (row, &t)) in lv.data().chunks_exact(VOCAB).zip(targets).enumerate() {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&v| (v - max).fast_exp()).sum();
        lse[i] = max + sum.ln();
        total += (lse[i] - row[usize::from(t)]).f64();
    }
    let loss = Tensor::scalar(S::lit(total / (n as f64 * LN_2)));
    let targets = targets.to_vec();
    Ok(logits.tape().record(&[logits], loss, move |g| {
        let scale = g.data()[0] / S::lit(n as f64 * LN_2);
        let mut out = Vec::with_capacity(lv.len());
        for (i, (row, &t)) in lv.data().chunks_exact(VOCAB).zip(&targets).enumerate() {
            out.extend(row.iter().map(|&v| (v - lse[i]).fast_exp() * scale));
            let k = out.len() - VOCAB + usize::from(t);
            out[k] -= scale;
        }
        vec![Some(Tensor::new(lv.shape().to_vec(), out).unwrap())]
    }))
}
