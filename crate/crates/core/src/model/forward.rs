use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{block_prefix, down_pool, down_stage, up_pool, up_stage, INNER_STAGE};
use crate::error::{Error, Result};
use crate::nn::{
    downpool, embed, output_head, shift_in, temporal_block, uppool, BlockVars, EmbedVars,
    LinearVars, ParamSource, PoolVars,
};
use crate::tensor::{Real, Var};

/// Inputs seen by the network: position `t` holds `codes[t − 1]`; position 0
/// holds a placeholder that is replaced by the start vector.
pub fn shifted_inputs(codes: &[u8], batch: usize, time: usize) -> Vec<u8> {
    let mut out = vec![0u8; batch * time];
    for b in 0..batch {
        if time > 1 {
            out[b * time + 1..(b + 1) * time].copy_from_slice(&codes[b * time..(b + 1) * time - 1]);
        }
    }
    out
}

fn stage<'t, S: Real>(
    mut x: Var<'t, S>,
    src: &impl ParamSource<'t, S>,
    cfg: &ModelConfig,
    name: &str,
) -> Result<Var<'t, S>> {
    for k in 0..cfg.blocks_per_stage {
        let p = BlockVars::from_source(src, &block_prefix(name, k))?;
        x = temporal_block(x, &p, cfg.variant(), None)?.0;
    }
    Ok(x)
}

/// Teacher-forced logits `[batch, time, 256]` for codes laid out as
/// `[batch, time]`. `logits[t]` predicts `codes[t]` from `codes[..t]`.
/// Dropout is active only when `train_rng` is given.
pub fn forward_logits<'t, S: Real>(
    src: &impl ParamSource<'t, S>,
    cfg: &ModelConfig,
    codes: &[u8],
    batch: usize,
    time: usize,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'t, S>> {
    cfg.check_seq_len(time)?;
    if codes.len() != batch * time {
        return Err(Error::shape(format!(
            "{} codes do not fill [{batch}, {time}]",
            codes.len()
        )));
    }
    let ev = EmbedVars::from_source(src, cfg.embed_mode)?;
    let x = embed(
        cfg.embed_mode,
        &ev,
        &shifted_inputs(codes, batch, time),
        batch,
        time,
        train_rng,
    )?;
    let mut x = shift_in(x, src.param("start")?)?;
    let mut skips = Vec::with_capacity(cfg.levels());
    for (l, &p) in cfg.pooling_factors.iter().enumerate() {
        x = stage(x, src, cfg, &down_stage(l))?;
        skips.push(x);
        x = downpool(
            x,
            &PoolVars::from_source(src, &down_pool(l), p, cfg.conv_groups)?,
        )?;
    }
    x = stage(x, src, cfg, INNER_STAGE)?;
    for (l, &p) in cfg.pooling_factors.iter().enumerate().rev() {
        x = uppool(
            x,
            &PoolVars::from_source(src, &up_pool(l), p, cfg.conv_groups)?,
        )?;
        x = x.add(skips[l])?;
        x = stage(x, src, cfg, &up_stage(l))?;
    }
    output_head(x, &LinearVars::from_source(src, "head")?)
}
