//! Residual temporal block: a gated CG-LRU branch followed by a gated MLP,
//! each behind an RMS norm.

use super::cglru::{cglru_forward, CgLruVars};
use super::norm::rmsnorm;
use super::{LinearVars, ParamSource};
use crate::error::Result;
use crate::scan::{ScanCarry, ScanVariant};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug)]
pub struct BlockVars<'t, S: Real> {
    pub norm1: Var<'t, S>,
    pub in_proj: LinearVars<'t, S>,
    pub gate_proj: LinearVars<'t, S>,
    pub cglru: CgLruVars<'t, S>,
    pub out_proj: LinearVars<'t, S>,
    pub norm2: Var<'t, S>,
    pub mlp_in: LinearVars<'t, S>,
    pub mlp_gate: LinearVars<'t, S>,
    pub mlp_out: LinearVars<'t, S>,
}

impl<'t, S: Real> BlockVars<'t, S> {
    pub fn from_source(src: &impl ParamSource<'t, S>, prefix: &str) -> Result<Self> {
        let lin = |n: &str| LinearVars::from_source(src, &format!("{prefix}.{n}"));
        Ok(BlockVars {
            norm1: src.param(&format!("{prefix}.norm1.gain"))?,
            in_proj: lin("in_proj")?,
            gate_proj: lin("gate_proj")?,
            cglru: CgLruVars::from_source(src, &format!("{prefix}.cglru"))?,
            out_proj: lin("out_proj")?,
            norm2: src.param(&format!("{prefix}.norm2.gain"))?,
            mlp_in: lin("mlp_in")?,
            mlp_gate: lin("mlp_gate")?,
            mlp_out: lin("mlp_out")?,
        })
    }
}

/// `[batch, time, d] → [batch, time, d]`; also returns the recurrence's final
/// state per row.
pub fn temporal_block<'t, S: Real>(
    x: Var<'t, S>,
    p: &BlockVars<'t, S>,
    variant: ScanVariant,
    h0: Option<&[ScanCarry<S>]>,
) -> Result<(Var<'t, S>, Vec<ScanCarry<S>>)> {
    let h = rmsnorm(x, p.norm1)?;
    let gate = p.gate_proj.forward(h)?.gelu();
    let (rec, last) = cglru_forward(p.in_proj.forward(h)?, &p.cglru, variant, h0)?;
    let x = x.add(p.out_proj.forward(gate.mul(rec)?)?)?;
    let h = rmsnorm(x, p.norm2)?;
    let mlp = p.mlp_gate.forward(h)?.gelu().mul(p.mlp_in.forward(h)?)?;
    Ok((x.add(p.mlp_out.forward(mlp)?)?, last))
}
