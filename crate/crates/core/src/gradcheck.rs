//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input index, flat element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Evaluate `f` on a fresh tape with `inputs` as trainable leaves.
pub fn eval_loss<S, F>(inputs: &[Tensor<S>], f: &F) -> Result<f64>
where
    S: Real,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, S>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.value().item()?.f64())
}

/// Analytic gradients of the scalar `f` with respect to every input.
pub fn analytic_grads<S, F>(inputs: &[Tensor<S>], f: &F) -> Result<Vec<Tensor<S>>>
where
    S: Real,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, S>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Compare analytic gradients against central differences with step `eps`.
///
/// With `sample = Some((k, seed))`, `k` random (input, element) positions are
/// checked; otherwise every element of every input.
pub fn check_gradients<S, F>(
    inputs: &[Tensor<S>],
    eps: f64,
    floor: f64,
    sample: Option<(usize, u64)>,
    f: F,
) -> Result<GradCheck>
where
    S: Real,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let grads = analytic_grads(inputs, &f)?;
    let positions: Vec<(usize, usize)> = match sample {
        Some((k, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total: usize = inputs.iter().map(|t| t.len()).sum();
            (0..k)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut which = 0;
                    while flat >= inputs[which].len() {
                        flat -= inputs[which].len();
                        which += 1;
                    }
                    (which, flat)
                })
                .collect()
        }
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
    };
    let mut report = GradCheck::default();
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (which, idx) in positions {
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + S::lit(eps);
        let up = eval_loss(&work, &f)?;
        work[which].data_mut()[idx] = orig - S::lit(eps);
        let down = eval_loss(&work, &f)?;
        work[which].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[which].data()[idx].f64();
        let err = rel_err(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((which, idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor<S: Real>(
    shape: &[usize],
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.gen_range(lo..hi)))
}
