//! Token-by-token evaluation of the pooled model with O(1) work per token.
//!
//! Every level keeps the complex carries of its recurrences, a buffer of the
//! frames waiting to be down-pooled, and a queue holding the up-pooled output
//! for the current coarse frame. A level only advances its inner level once
//! its buffer fills, i.e. every `p` of its own steps.

use crate::error::{Error, Result};
use crate::model::params::{block_prefix, down_pool, down_stage, up_pool, up_stage, INNER_STAGE};
use crate::model::{ModelConfig, ParamSet, VOCAB};
use crate::nn::cglru::lru_coefficients;
use crate::nn::embed::code_value;
use crate::nn::{sinusoidal_features, EmbedMode, RMS_EPS, SINUSOID_FEATURES};
use crate::tensor::{gelu, sigmoid, softplus};

struct Linear<'a> {
    w: &'a [f32],
    b: &'a [f32],
    inp: usize,
    out: usize,
}

impl<'a> Linear<'a> {
    fn new(params: &'a ParamSet, prefix: &str) -> Result<Self> {
        let w = params.get(&format!("{prefix}.w"))?;
        let b = params.get(&format!("{prefix}.b"))?;
        match *w.shape() {
            [inp, out] if b.shape() == [out] => Ok(Linear {
                w: w.data(),
                b: b.data(),
                inp,
                out,
            }),
            _ => Err(Error::shape(format!(
                "`{prefix}`: weight {:?} and bias {:?} disagree",
                w.shape(),
                b.shape()
            ))),
        }
    }

    /// `x` is `[rows, inp]`; returns `[rows, out]`. Rows are independent, so
    /// a row's result does not depend on the batch it is computed in.
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.inp;
        let mut y = Vec::with_capacity(rows * self.out);
        for row in x.chunks_exact(self.inp) {
            let start = y.len();
            y.extend_from_slice(self.b);
            let acc = &mut y[start..];
            for (&v, w) in row.iter().zip(self.w.chunks_exact(self.out)) {
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += v * wv;
                }
            }
        }
        debug_assert_eq!(y.len(), rows * self.out);
        y
    }
}

fn rmsnorm_rows(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let d = gain.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|&v| v * v).sum::<f32>() * (1.0 / d as f32);
        let k = 1.0 / (ms + RMS_EPS as f32).sqrt();
        y.extend(row.iter().zip(gain).map(|(&v, &g)| v * k * g));
    }
    y
}

struct Lru<'a> {
    softplus_nu: Vec<f32>,
    theta: &'a [f32],
    w_r: &'a [f32],
    b_r: &'a [f32],
    w_i: &'a [f32],
    b_i: &'a [f32],
    k: usize,
}

impl<'a> Lru<'a> {
    fn new(params: &'a ParamSet, prefix: &str) -> Result<Self> {
        let p = |n: &str| params.get(&format!("{prefix}.{n}"));
        let w_r = p("w_r")?;
        let k = match *w_r.shape() {
            [_, k, k2] if k == k2 => k,
            _ => {
                return Err(Error::shape(format!(
                    "`{prefix}.w_r` has shape {:?}",
                    w_r.shape()
                )))
            }
        };
        Ok(Lru {
            softplus_nu: p("nu")?.data().iter().map(|&v| softplus(v)).collect(),
            theta: p("theta")?.data(),
            w_r: w_r.data(),
            b_r: p("b_r")?.data(),
            w_i: p("w_i")?.data(),
            b_i: p("b_i")?.data(),
            k,
        })
    }

    fn width(&self) -> usize {
        self.theta.len()
    }

    /// `σ(block_diag(u)·w + b)` for one row.
    fn gate(&self, u: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
        let k = self.k;
        for (h, (ob, ub)) in out.chunks_exact_mut(k).zip(u.chunks_exact(k)).enumerate() {
            let wh = &w[h * k * k..(h + 1) * k * k];
            for (o, acc) in ob.iter_mut().enumerate() {
                let mut s = b[h * k + o];
                for (i, &x) in ub.iter().enumerate() {
                    s += x * wh[i * k + o];
                }
                *acc = sigmoid(s);
            }
        }
    }

    /// Advance every row's carry by one step; returns `Re(h)` as `[rows, n]`.
    fn step(&self, u: &[f32], h_re: &mut [f32], h_im: &mut [f32]) -> Vec<f32> {
        let n = self.width();
        let mut r = vec![0.0; n];
        let mut ig = vec![0.0; n];
        let mut y = Vec::with_capacity(u.len());
        for (row, (hr, hi)) in u
            .chunks_exact(n)
            .zip(h_re.chunks_exact_mut(n).zip(h_im.chunks_exact_mut(n)))
        {
            self.gate(row, self.w_r, self.b_r, &mut r);
            self.gate(row, self.w_i, self.b_i, &mut ig);
            for c in 0..n {
                let (ar, ai, m) = lru_coefficients(self.softplus_nu[c], self.theta[c], r[c]);
                let x = m * ig[c] * row[c];
                let (pr, pi) = (hr[c], hi[c]);
                hr[c] = ar * pr - ai * pi + x;
                hi[c] = ar * pi + ai * pr;
                y.push(hr[c]);
            }
        }
        y
    }
}

struct Block<'a> {
    norm1: &'a [f32],
    in_proj: Linear<'a>,
    gate_proj: Linear<'a>,
    lru: Lru<'a>,
    out_proj: Linear<'a>,
    norm2: &'a [f32],
    mlp_in: Linear<'a>,
    mlp_gate: Linear<'a>,
    mlp_out: Linear<'a>,
}

impl<'a> Block<'a> {
    fn new(params: &'a ParamSet, prefix: &str) -> Result<Self> {
        let lin = |n: &str| Linear::new(params, &format!("{prefix}.{n}"));
        Ok(Block {
            norm1: params.get(&format!("{prefix}.norm1.gain"))?.data(),
            in_proj: lin("in_proj")?,
            gate_proj: lin("gate_proj")?,
            lru: Lru::new(params, &format!("{prefix}.cglru"))?,
            out_proj: lin("out_proj")?,
            norm2: params.get(&format!("{prefix}.norm2.gain"))?.data(),
            mlp_in: lin("mlp_in")?,
            mlp_gate: lin("mlp_gate")?,
            mlp_out: lin("mlp_out")?,
        })
    }

    fn step(&self, x: &mut [f32], carry: &mut Carry) {
        let h = rmsnorm_rows(x, self.norm1);
        let gate = self.gate_proj.apply(&h);
        let rec = self
            .lru
            .step(&self.in_proj.apply(&h), &mut carry.h_re, &mut carry.h_im);
        let mixed: Vec<f32> = gate.iter().zip(&rec).map(|(&g, &r)| gelu(g) * r).collect();
        for (v, o) in x.iter_mut().zip(self.out_proj.apply(&mixed)) {
            *v += o;
        }
        let h = rmsnorm_rows(x, self.norm2);
        let up = self.mlp_in.apply(&h);
        let mlp: Vec<f32> = self
            .mlp_gate
            .apply(&h)
            .iter()
            .zip(&up)
            .map(|(&g, &u)| gelu(g) * u)
            .collect();
        for (v, o) in x.iter_mut().zip(self.mlp_out.apply(&mlp)) {
            *v += o;
        }
    }
}

/// Grouped pooling weights `[d, d/groups, p]` and bias `[d]`.
struct Pool<'a> {
    w: &'a [f32],
    b: &'a [f32],
    cg: usize,
    p: usize,
}

impl<'a> Pool<'a> {
    fn new(params: &'a ParamSet, prefix: &str, d: usize, groups: usize, p: usize) -> Result<Self> {
        let w = params.get(&format!("{prefix}.w"))?;
        let b = params.get(&format!("{prefix}.b"))?;
        let cg = d / groups;
        if w.shape() != [d, cg, p] || b.shape() != [d] {
            return Err(Error::shape(format!(
                "`{prefix}`: weight {:?}, bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(Pool {
            w: w.data(),
            b: b.data(),
            cg,
            p,
        })
    }

    /// `out[o] += Σ_i x[group(o)·cg + i] · W[o, i, τ]` for one row.
    fn accumulate(&self, x: &[f32], tau: usize, out: &mut [f32]) {
        let (cg, p) = (self.cg, self.p);
        for (o, acc) in out.iter_mut().enumerate() {
            let base = (o / cg) * cg;
            let w = &self.w[o * cg * p..(o + 1) * cg * p];
            let mut s = 0.0;
            for i in 0..cg {
                s += x[base + i] * w[i * p + tau];
            }
            *acc += s;
        }
    }
}

struct Level<'a> {
    down: Vec<Block<'a>>,
    down_pool: Pool<'a>,
    up_pool: Pool<'a>,
    up: Vec<Block<'a>>,
}

enum Embedder<'a> {
    Sinusoidal(Linear<'a>),
    Scalar(Linear<'a>),
    Table(&'a [f32]),
}

/// Weights resolved once for repeated stepping.
pub struct StepModel<'a> {
    cfg: &'a ModelConfig,
    embed: Embedder<'a>,
    start: &'a [f32],
    levels: Vec<Level<'a>>,
    inner: Vec<Block<'a>>,
    head: Linear<'a>,
}

/// Complex carry of one recurrence, `[batch, n]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub h_re: Vec<f32>,
    pub h_im: Vec<f32>,
}

impl Carry {
    fn zeros(len: usize) -> Self {
        Carry {
            h_re: vec![0.0; len],
            h_im: vec![0.0; len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelState {
    pub down: Vec<Carry>,
    pub up: Vec<Carry>,
    /// Pending fine frames, `[filled, batch, d]`; at most `p − 1` between steps.
    pub buffer: Vec<f32>,
    pub filled: usize,
    /// Up-pooled outputs for the current coarse frame, `[p, batch, d]`.
    pub queue: Vec<f32>,
    /// Last coarse output the queue was built from, `[batch, d]`.
    pub carry_frame: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub batch: usize,
    pub position: u64,
    pub levels: Vec<LevelState>,
    pub inner: Vec<Carry>,
}

impl StepState {
    /// Scalars held per batch row (excluding the position counter).
    pub fn scalars_per_row(&self) -> usize {
        let carries = |cs: &[Carry]| {
            cs.iter()
                .map(|c| c.h_re.len() + c.h_im.len())
                .sum::<usize>()
        };
        let mut total = carries(&self.inner);
        for l in &self.levels {
            total += carries(&l.down)
                + carries(&l.up)
                + l.buffer.capacity()
                + l.queue.len()
                + l.carry_frame.len();
        }
        total / self.batch.max(1)
    }
}

/// Per-row state size implied by a config: `2n` per recurrence, `(p − 1)·d`
/// per down-pool buffer and `p·d + d` per up-pool queue and carry frame.
pub fn state_size(cfg: &ModelConfig) -> usize {
    let lrus = cfg.num_blocks() * 2 * cfg.rnn_dim;
    let pools: usize = cfg
        .pooling_factors
        .iter()
        .map(|&p| (p - 1) * cfg.width + p * cfg.width + cfg.width)
        .sum();
    lrus + pools
}

impl<'a> StepModel<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamSet) -> Result<Self> {
        cfg.validate()?;
        params.validate(cfg)?;
        let blocks = |stage: &str| -> Result<Vec<Block<'a>>> {
            (0..cfg.blocks_per_stage)
                .map(|k| Block::new(params, &block_prefix(stage, k)))
                .collect()
        };
        let embed = match cfg.embed_mode {
            EmbedMode::Sinusoidal => Embedder::Sinusoidal(Linear::new(params, "embed")?),
            EmbedMode::LinearScaling => Embedder::Scalar(Linear::new(params, "embed")?),
            EmbedMode::Learned | EmbedMode::LearnedDropout => {
                Embedder::Table(params.get("embed.table")?.data())
            }
        };
        let mut levels = Vec::with_capacity(cfg.levels());
        for (l, &p) in cfg.pooling_factors.iter().enumerate() {
            levels.push(Level {
                down: blocks(&down_stage(l))?,
                down_pool: Pool::new(params, &down_pool(l), cfg.width, cfg.conv_groups, p)?,
                up_pool: Pool::new(params, &up_pool(l), cfg.width, cfg.conv_groups, p)?,
                up: blocks(&up_stage(l))?,
            });
        }
        Ok(StepModel {
            cfg,
            embed,
            start: params.get("start")?.data(),
            levels,
            inner: blocks(INNER_STAGE)?,
            head: Linear::new(params, "head")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Zero carries, empty buffers, bias-only up-pool queues, position 0.
    pub fn init_state(&self, batch: usize) -> StepState {
        let (d, n, k) = (self.cfg.width, self.cfg.rnn_dim, self.cfg.blocks_per_stage);
        let carries = || vec![Carry::zeros(batch * n); k];
        let levels = self
            .levels
            .iter()
            .map(|lv| {
                let p = lv.down_pool.p;
                let mut queue = Vec::with_capacity(p * batch * d);
                for _ in 0..p * batch {
                    queue.extend_from_slice(lv.up_pool.b);
                }
                LevelState {
                    down: carries(),
                    up: carries(),
                    buffer: Vec::with_capacity((p - 1) * batch * d),
                    filled: 0,
                    queue,
                    carry_frame: vec![0.0; batch * d],
                }
            })
            .collect();
        StepState {
            batch,
            position: 0,
            levels,
            inner: carries(),
        }
    }

    fn embed_rows(&self, state: &StepState, prev: &[u8]) -> Vec<f32> {
        if state.position == 0 {
            return self.start.repeat(state.batch);
        }
        match &self.embed {
            Embedder::Sinusoidal(lin) => {
                let feats: Vec<f32> = prev
                    .iter()
                    .flat_map(|&c| sinusoidal_features(c))
                    .map(|f| f as f32)
                    .collect();
                debug_assert_eq!(feats.len(), prev.len() * SINUSOID_FEATURES);
                lin.apply(&feats)
            }
            Embedder::Scalar(lin) => lin.apply(
                &prev
                    .iter()
                    .map(|&c| code_value(c) as f32)
                    .collect::<Vec<_>>(),
            ),
            Embedder::Table(t) => {
                let d = self.cfg.width;
                prev.iter()
                    .flat_map(|&c| {
                        t[usize::from(c) * d..(usize::from(c) + 1) * d]
                            .iter()
                            .copied()
                    })
                    .collect()
            }
        }
    }

    /// `levels` holds the states of level `l` and below.
    fn level_step(&self, l: usize, levels: &mut [LevelState], inner: &mut [Carry], x: &mut [f32]) {
        if l == self.levels.len() {
            for (b, c) in self.inner.iter().zip(inner.iter_mut()) {
                b.step(x, c);
            }
            return;
        }
        let lv = &self.levels[l];
        let (st, deeper) = levels.split_first_mut().expect("one state per level");
        let d = self.cfg.width;
        let rows = x.len() / d;
        let p = lv.down_pool.p;
        for (b, c) in lv.down.iter().zip(st.down.iter_mut()) {
            b.step(x, c);
        }
        let skip = x.to_vec();
        let tau = st.filled;
        for (v, (&q, &s)) in x.iter_mut().zip(
            st.queue[tau * rows * d..(tau + 1) * rows * d]
                .iter()
                .zip(&skip),
        ) {
            *v = q + s;
        }
        for (b, c) in lv.up.iter().zip(st.up.iter_mut()) {
            b.step(x, c);
        }
        if tau + 1 < p {
            st.buffer.extend_from_slice(&skip);
            st.filled += 1;
            return;
        }
        let mut z = lv.down_pool.b.repeat(rows);
        for r in 0..rows {
            let out = &mut z[r * d..(r + 1) * d];
            for t in 0..p - 1 {
                lv.down_pool.accumulate(
                    &st.buffer[(t * rows + r) * d..(t * rows + r + 1) * d],
                    t,
                    out,
                );
            }
            lv.down_pool
                .accumulate(&skip[r * d..(r + 1) * d], p - 1, out);
        }
        st.buffer.clear();
        st.filled = 0;
        self.level_step(l + 1, deeper, inner, &mut z);
        for t in 0..p {
            for r in 0..rows {
                let q = &mut st.queue[(t * rows + r) * d..(t * rows + r + 1) * d];
                q.copy_from_slice(lv.up_pool.b);
                lv.up_pool.accumulate(&z[r * d..(r + 1) * d], t, q);
            }
        }
        st.carry_frame = z;
    }

    /// Consume the previous code of every row and return `[batch, 256]`
    /// logits for the current position. `prev` is ignored at position 0,
    /// where the start vector is used instead.
    pub fn step(&self, state: &mut StepState, prev: &[u8]) -> Result<Vec<f32>> {
        if prev.len() != state.batch {
            return Err(Error::shape(format!(
                "{} codes given for a batch of {}",
                prev.len(),
                state.batch
            )));
        }
        let mut x = self.embed_rows(state, prev);
        let StepState { levels, inner, .. } = state;
        self.level_step(0, levels, inner, &mut x);
        state.position += 1;
        let logits = self.head.apply(&x);
        debug_assert_eq!(logits.len(), state.batch * VOCAB);
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_size_matches_allocation() {
        for cfg in [ModelConfig::toy(), ModelConfig::default()] {
            let params = ParamSet::build(&cfg, 0).unwrap();
            let model = StepModel::new(&cfg, &params).unwrap();
            let st = model.init_state(3);
            assert_eq!(st.scalars_per_row(), state_size(&cfg));
        }
    }

    #[test]
    fn two_inits_are_identical() {
        let cfg = ModelConfig::toy();
        let params = ParamSet::build(&cfg, 1).unwrap();
        let model = StepModel::new(&cfg, &params).unwrap();
        assert_eq!(model.init_state(2), model.init_state(2));
        assert_eq!(model.init_state(2).position, 0);
    }

    #[test]
    fn untrained_logits_are_zero() {
        let cfg = ModelConfig::toy();
        let params = ParamSet::build(&cfg, 2).unwrap();
        let model = StepModel::new(&cfg, &params).unwrap();
        let mut st = model.init_state(2);
        for t in 0..10u8 {
            let y = model.step(&mut st, &[t, 255 - t]).unwrap();
            assert_eq!(y.len(), 2 * VOCAB);
            assert!(y.iter().all(|&v| v == 0.0));
        }
        assert_eq!(st.position, 10);
    }

    #[test]
    fn buffers_stay_below_pool_factor() {
        let cfg = ModelConfig::toy();
        let params = ParamSet::build(&cfg, 3).unwrap();
        let model = StepModel::new(&cfg, &params).unwrap();
        let mut st = model.init_state(1);
        for t in 0..40u8 {
            model.step(&mut st, &[t]).unwrap();
            for (lv, &p) in st.levels.iter().zip(&cfg.pooling_factors) {
                assert!(lv.filled < p);
                assert_eq!(lv.buffer.len(), lv.filled * cfg.width);
            }
        }
    }
}
