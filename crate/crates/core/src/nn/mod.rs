//! Neural layers. Hot-path layers are fused tape operations with
//! hand-written backward rules; the rest compose tensor-core primitives.

pub mod block;
pub mod cglru;
pub mod embed;
pub mod norm;
pub mod pool;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

pub use block::{temporal_block, BlockVars};
pub use cglru::{block_diag_linear, cglru_forward, lru_recurrence, CgLruVars, DECAY_SCALE};
pub use embed::{embed, shift_in, sinusoidal_features, EmbedMode, EmbedVars, SINUSOID_FEATURES};
pub use norm::{rmsnorm, RMS_EPS};
pub use pool::{downpool, uppool, PoolDirection, PoolVars};

/// Looks up tape variables for named parameters.
pub trait ParamSource<'t, S: Real> {
    fn param(&self, name: &str) -> Result<Var<'t, S>>;
}

impl<'t, S: Real> ParamSource<'t, S> for BTreeMap<String, Var<'t, S>> {
    fn param(&self, name: &str) -> Result<Var<'t, S>> {
        self.get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }
}

/// Affine map `x·w + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t, S: Real> {
    pub w: Var<'t, S>,
    pub b: Option<Var<'t, S>>,
}

impl<'t, S: Real> LinearVars<'t, S> {
    pub fn from_source(src: &impl ParamSource<'t, S>, prefix: &str) -> Result<Self> {
        Ok(LinearVars {
            w: src.param(&format!("{prefix}.w"))?,
            b: Some(src.param(&format!("{prefix}.b"))?),
        })
    }

    pub fn forward(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.matmul(self.w)?;
        match self.b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

/// Output head: linear map `d → 256` producing unnormalized logits.
pub fn output_head<'t, S: Real>(x: Var<'t, S>, head: &LinearVars<'t, S>) -> Result<Var<'t, S>> {
    head.forward(x)
}
