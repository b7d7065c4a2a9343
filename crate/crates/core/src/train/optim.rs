//! AdamW, the warmup schedule and EMA shadow weights.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ParamSet, TrainConfig};

/// `lr · min(1, step / warmup)`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.lr
    } else {
        cfg.lr * (step as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// Parameters subject to weight decay (projection and conv weights, the
/// embedding table). Norm gains, biases, ν and θ are excluded.
pub fn decayed_names(cfg: &ModelConfig) -> BTreeSet<String> {
    param_specs(cfg)
        .into_iter()
        .filter(|s| s.decay)
        .map(|s| s.name)
        .collect()
}

fn check_layout(a: &ParamSet, b: &ParamSet, what: &str) -> Result<()> {
    if !a.same_layout(b) {
        return Err(Error::Invalid(format!(
            "{what}: parameter names or shapes differ"
        )));
    }
    Ok(())
}

/// One decoupled-decay Adam update. `t` is the 1-based count of applied
/// updates (used for bias correction), `lr_t` the scheduled rate.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    m: &mut ParamSet,
    v: &mut ParamSet,
    t: u64,
    lr_t: f64,
    cfg: &TrainConfig,
    decayed: &BTreeSet<String>,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Invalid("adamw_step: step must be at least 1".into()));
    }
    check_layout(params, grads, "adamw_step")?;
    check_layout(params, m, "adamw_step")?;
    check_layout(params, v, "adamw_step")?;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        let wd = if decayed.contains(name) {
            cfg.weight_decay
        } else {
            0.0
        };
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = f64::from(g);
            let mn = b1 * f64::from(*m) + (1.0 - b1) * g;
            let vn = b2 * f64::from(*v) + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = (mn / c1) / ((vn / c2).sqrt() + cfg.eps) + wd * f64::from(*p);
            *p = (f64::from(*p) - lr_t * update) as f32;
        }
    }
    Ok(())
}

/// `ema ← rate·ema + (1 − rate)·params`.
pub fn ema_update(ema: &mut ParamSet, params: &ParamSet, rate: f64) -> Result<()> {
    check_layout(ema, params, "ema_update")?;
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = (rate * f64::from(*e) + (1.0 - rate) * f64::from(p)) as f32;
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &ParamSet) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt()
}
